"""Command-line entry point: gen, train, rollout, eval, ablate.

Every run resolves its configuration (file section defaults, then flags),
freezes the resolved copy next to its outputs, and writes a manifest with
content hashes of all inputs so any artifact can be reproduced bit-for-bit.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric divergence,
5 every rollout collapsed immediately.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .interaction import InteractionConfig, build_partition
from .metrics import (
    EmptyHistogramError,
    MetricsError,
    collapse_summary,
    distribution_fidelity,
    evaluate_open_loop,
)
from .model import GradientError, ModelConfig
from .rollout import CollapseThresholds, RolloutConfig, run_rollout
from .scene import AgentKind, Episode, read_episode, slice_window, write_episode
from .training import (
    DivergenceError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .world import BehaviorProfile, WorldConfig, dataset_statistics, generate_episode

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_DIVERGENCE = 4
EXIT_ALL_COLLAPSED = 5

ENV_OUT_DIR = "JUNCTIONSIM_OUT_DIR"
ENV_WORKERS = "JUNCTIONSIM_WORKERS"


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

SECTION_TYPES = {
    "world": WorldConfig,
    "profile": BehaviorProfile,
    "interaction": InteractionConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "rollout": RolloutConfig,
}


def _coerce_field(cls, name, value):
    if cls is RolloutConfig and name == "thresholds" and isinstance(value, dict):
        return CollapseThresholds(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in value.items()
        })
    if isinstance(value, list):
        return tuple(value)
    return value


def build_section(section: str, file_cfg: dict, overrides: dict | None = None):
    cls = SECTION_TYPES[section]
    values = dict(file_cfg.get(section, {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**{k: _coerce_field(cls, k, v) for k, v in values.items()})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [{section}] configuration: {err}") from err


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file {path} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    unknown = set(cfg) - set(SECTION_TYPES) - {"gen", "rollout_run", "eval", "ablate"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = _section_to_dict(value)
        out[f.name] = value
    return out


def freeze_config(out_dir: Path, sections: dict, extra: dict | None = None) -> Path:
    payload = {name: _section_to_dict(cfg) for name, cfg in sections.items()}
    if extra:
        payload.update(extra)
    path = out_dir / "run_config.frozen.json"
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {obj!r}")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, inputs, outputs, seed) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "workers": int(os.environ.get(ENV_WORKERS, "1")),
        "inputs": {str(p): sha256_file(Path(p)) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def resolve_out_dir(arg_value: str | None) -> Path:
    value = arg_value or os.environ.get(ENV_OUT_DIR)
    if value is None:
        raise ConfigError("no output directory given (--out or JUNCTIONSIM_OUT_DIR)")
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_episode_dir(path: str) -> list[Episode]:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"episode directory {path} does not exist")
    files = sorted(p.glob("*.jsonl"))
    if not files:
        raise ConfigError(f"episode directory {path} contains no .jsonl files")
    return [read_episode(f) for f in files]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    file_cfg = load_config_file(args.config)
    gen_cfg = dict(file_cfg.get("gen", {}))
    episodes = args.episodes if args.episodes is not None else gen_cfg.get("episodes", 4)
    frames = args.frames if args.frames is not None else gen_cfg.get("frames", 250)
    seed = args.seed if args.seed is not None else gen_cfg.get("seed", 0)
    out_dir = resolve_out_dir(args.out)

    profile = build_section("profile", file_cfg)
    outputs = []
    eps = []
    for i in range(episodes):
        world = build_section(
            "world", file_cfg, {"episode_frames": frames, "seed": seed + i}
        )
        ep = generate_episode(world, profile)
        path = out_dir / f"episode_{i:03d}.jsonl"
        write_episode(ep, path)
        outputs.append(path)
        eps.append(ep)
    stats = dataset_statistics(eps)
    stats_path = out_dir / "statistics.json"
    stats_path.write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    outputs.append(stats_path)

    world0 = build_section("world", file_cfg, {"episode_frames": frames, "seed": seed})
    frozen = freeze_config(
        out_dir,
        {"world": world0, "profile": profile},
        {"gen": {"episodes": episodes, "frames": frames, "seed": seed}},
    )
    outputs.append(frozen)
    outputs.append(write_manifest(out_dir, "gen", [], outputs, seed))
    print(f"gen: wrote {episodes} episodes to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = load_config_file(args.config)
    episodes = load_episode_dir(args.data)
    out_dir = resolve_out_dir(args.out)

    interaction = build_section(
        "interaction", file_cfg, {"ttc_threshold": args.ttc_threshold}
    )
    model_cfg = build_section(
        "model", file_cfg, {"attention_mode": "uni" if args.uni_cross else None}
    )
    train_cfg = build_section(
        "train",
        file_cfg,
        {
            "epochs": args.epochs,
            "steps_per_epoch": args.steps_per_epoch,
            "seed": args.seed,
            "ids_enabled": False if args.no_ids else None,
        },
    )
    result = train(episodes, interaction, model_cfg, train_cfg)

    ckpt = out_dir / "checkpoint.json"
    save_checkpoint(result.model, ckpt, step=result.steps_done, rng=result.rng)
    curve = out_dir / "loss_curve.csv"
    write_loss_curve(result.history, curve)
    frozen = freeze_config(
        out_dir, {"interaction": interaction, "model": model_cfg, "train": train_cfg}
    )
    inputs = sorted(Path(args.data).glob("*.jsonl"))
    outputs = [ckpt, curve, frozen]
    outputs.append(write_manifest(out_dir, "train", inputs, outputs, train_cfg.seed))
    final = result.history[-1]
    print(
        f"train: {result.steps_done} steps, epoch-{final.epoch} mean loss "
        f"{final.mean_total:.4f} -> {ckpt}"
    )
    return EXIT_OK


def cmd_rollout(args) -> int:
    file_cfg = load_config_file(args.config)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise MissingInputError(f"checkpoint {args.checkpoint} does not exist")
    ref_path = Path(args.reference)
    if not ref_path.exists():
        raise MissingInputError(f"reference episode {args.reference} does not exist")
    out_dir = resolve_out_dir(args.out)

    model, _, _ = load_checkpoint(ckpt_path)
    reference = read_episode(ref_path)
    rollout_cfg = build_section(
        "rollout",
        file_cfg,
        {"max_frames": args.frames, "seed": args.seed, "mode": args.mode},
    )
    trace = run_rollout(rollout_cfg, model, reference)

    trace_path = out_dir / "trace.jsonl"
    write_episode(trace.episode, trace_path)
    diag_path = out_dir / "trace.diagnostics.csv"
    with open(diag_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "n_agents", "min_dist", "max_speed", "collapsed"])
        for d in trace.diagnostics:
            writer.writerow(
                [d.frame, d.n_agents, repr(d.min_pairwise_distance), repr(d.max_speed), int(d.collapsed)]
            )
    summary_path = out_dir / "rollout_summary.json"
    summary_path.write_text(
        json.dumps(
            {
                "collapse_frame": trace.collapse_frame,
                "collapse_reason": trace.collapse_reason,
                "censored": trace.censored,
                "simulated_frames": trace.simulated_frames,
                "collapse_time_s": trace.collapse_time_s,
                "notes": trace.notes,
            },
            indent=2,
        )
        + "\n"
    )
    frozen = freeze_config(out_dir, {"rollout": rollout_cfg})
    outputs = [trace_path, diag_path, summary_path, frozen]
    outputs.append(
        write_manifest(out_dir, "rollout", [ckpt_path, ref_path], outputs, rollout_cfg.seed)
    )
    print(
        f"rollout: {trace.simulated_frames} simulated frames, "
        f"collapse={trace.collapse_reason or 'none'} -> {trace_path}"
    )
    if trace.collapse_frame is not None and trace.simulated_frames <= 1:
        return EXIT_ALL_COLLAPSED
    return EXIT_OK


def cmd_eval(args) -> int:
    trace_paths = [Path(p) for p in args.trace.split(",")]
    for p in trace_paths:
        if not p.exists():
            raise MissingInputError(f"trace {p} does not exist")
    ref_path = Path(args.reference)
    if not ref_path.exists():
        raise MissingInputError(f"reference {args.reference} does not exist")
    out_dir = resolve_out_dir(args.out)

    simulated = [read_episode(p, validate=False) for p in trace_paths]
    reference = [read_episode(ref_path)]

    report = {"statistics": [], "skipped": []}
    outputs = []
    for kind in AgentKind:
        entries = []
        for statistic in ("speed", "closest_distance"):
            try:
                entries += distribution_fidelity(
                    simulated, reference, kinds=(kind,), statistics=(statistic,)
                )
            except EmptyHistogramError as err:
                report["skipped"].append(str(err))
        for e in entries:
            report["statistics"].append(
                {"statistic": e.statistic, "kind": e.kind, "w1": e.w1,
                 "n_ref": e.reference.count, "n_sim": e.simulated.count}
            )
            hist_path = out_dir / f"hist_{e.statistic}_{e.kind}.csv"
            edges = e.reference.spec.edges()
            with open(hist_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_left", "bin_right", "ref_mass", "sim_mass"])
                for i in range(e.reference.spec.n_bins):
                    writer.writerow(
                        [repr(float(edges[i])), repr(float(edges[i + 1])),
                         repr(float(e.reference.mass[i])), repr(float(e.simulated.mass[i]))]
                    )
            outputs.append(hist_path)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    outputs.append(report_path)
    outputs.append(
        write_manifest(out_dir, "eval", trace_paths + [ref_path], outputs, None)
    )
    print(f"eval: {len(report['statistics'])} statistics -> {report_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = load_config_file(args.config)
    episodes = load_episode_dir(args.data)
    test_episodes = load_episode_dir(args.test_data) if args.test_data else episodes
    out_dir = resolve_out_dir(args.out)
    thresholds = [float(x) for x in args.ttc_thresholds.split(",") if x != ""]
    if not thresholds:
        raise ConfigError("--ttc-thresholds must name at least one value")
    seeds = [int(s) for s in args.seeds.split(",")]

    variants = [("dual", True, thr) for thr in thresholds]
    if args.include_no_ids:
        variants.append(("dual", False, thresholds[0]))
    if args.include_uni_cross:
        variants.append(("uni", True, 1.0))

    rows = []
    outputs = []
    for attention, ids_enabled, threshold in variants:
        for seed in seeds:
            interaction = build_section("interaction", file_cfg, {"ttc_threshold": threshold})
            model_cfg = build_section("model", file_cfg, {"attention_mode": attention})
            train_cfg = build_section(
                "train", file_cfg,
                {"seed": seed, "ids_enabled": ids_enabled,
                 "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch},
            )
            result = train(episodes, interaction, model_cfg, train_cfg)
            displacement, missing = evaluate_open_loop(result.model, test_episodes)
            collapse_mean = None
            if args.rollouts > 0:
                traces = [
                    run_rollout(
                        build_section(
                            "rollout", file_cfg,
                            {"max_frames": args.rollout_frames, "seed": seed * 1000 + r},
                        ),
                        result.model,
                        test_episodes[r % len(test_episodes)],
                    )
                    for r in range(args.rollouts)
                ]
                collapse_mean = collapse_summary(traces).mean_s
            variant_name = (
                f"{'dual' if attention == 'dual' else 'uni'}-cross"
                f"{'+ids@' + format(threshold, 'g') + 's' if ids_enabled else '-no-ids'}"
            )
            for kind_label in sorted(displacement.per_kind):
                rows.append(
                    {
                        "variant": variant_name, "attention": attention,
                        "ids": int(ids_enabled), "ttc_threshold": threshold,
                        "seed": seed, "participant": kind_label,
                        "ade": displacement.per_kind[kind_label]["ade"],
                        "fde": displacement.per_kind[kind_label]["fde"],
                        "missing_rate": missing[kind_label],
                        "collapse_time_mean_s": collapse_mean,
                    }
                )
            rows.append(
                {
                    "variant": variant_name, "attention": attention,
                    "ids": int(ids_enabled), "ttc_threshold": threshold,
                    "seed": seed, "participant": "average",
                    "ade": displacement.average["ade"],
                    "fde": displacement.average["fde"],
                    "missing_rate": missing["average"],
                    "collapse_time_mean_s": collapse_mean,
                }
            )
        if args.export_partitions:
            part_path = out_dir / f"partitions_ttc_{format(threshold, 'g')}.json"
            _export_partitions(episodes[0], threshold, part_path)
            outputs.append(part_path)

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    outputs.append(table_path)
    frozen = freeze_config(
        out_dir,
        {"interaction": build_section("interaction", file_cfg, {}),
         "model": build_section("model", file_cfg, {}),
         "train": build_section("train", file_cfg, {})},
        {"ablate": {"ttc_thresholds": thresholds, "seeds": seeds,
                    "include_no_ids": bool(args.include_no_ids),
                    "include_uni_cross": bool(args.include_uni_cross)}},
    )
    outputs.append(frozen)
    inputs = sorted(Path(args.data).glob("*.jsonl"))
    if args.test_data:
        inputs += sorted(Path(args.test_data).glob("*.jsonl"))
    outputs.append(write_manifest(out_dir, "ablate", inputs, outputs, seeds[0]))
    print(f"ablate: {len(variants)} variants x {len(seeds)} seeds -> {table_path}")
    return EXIT_OK


def _export_partitions(episode: Episode, threshold: float, path: Path) -> None:
    config = InteractionConfig(ttc_threshold=threshold)
    records = []
    t_range = range(9, min(len(episode.frames) - 11, 60), 10)
    for t in t_range:
        window = slice_window(episode, t)
        partition = build_partition(window.pivot_frame, episode.attributes, config)
        records.append(
            {"pivot_frame": partition.pivot_frame, "k": partition.k,
             "groups": [list(g) for g in partition.groups]}
        )
    path.write_text(json.dumps({"ttc_threshold": threshold, "partitions": records}, indent=2) + "\n")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="junctionsim",
        description="Mixed-traffic intersection simulation: generate, train, roll out, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic episodes")
    p.add_argument("--config")
    p.add_argument("--episodes", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the dynamics model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--seed", type=int)
    p.add_argument("--ttc-threshold", type=float, dest="ttc_threshold")
    p.add_argument("--no-ids", action="store_true", dest="no_ids",
                   help="train on full scenes (joint baseline)")
    p.add_argument("--uni-cross", action="store_true", dest="uni_cross",
                   help="single-pass cross attention ablation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="closed-loop simulation from a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("sample", "mean"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="distribution fidelity of traces vs a reference")
    p.add_argument("--trace", required=True, help="comma-separated trace files")
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--out")
    p.add_argument("--ttc-thresholds", default="0,1,2,4", dest="ttc_thresholds")
    p.add_argument("--seeds", default="0")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--include-no-ids", action="store_true", dest="include_no_ids")
    p.add_argument("--include-uni-cross", action="store_true", dest="include_uni_cross")
    p.add_argument("--rollouts", type=int, default=0)
    p.add_argument("--rollout-frames", type=int, default=200, dest="rollout_frames")
    p.add_argument("--export-partitions", action="store_true", dest="export_partitions")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ConfigError, TrainingError) as err:
        if isinstance(err, DivergenceError):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_DIVERGENCE
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, GradientError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MetricsError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
