import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from junctionsim.cli import (
    EXIT_CONFIG,
    EXIT_MISSING_INPUT,
    EXIT_OK,
    build_section,
    ConfigError,
    main,
)


def run_cli(args):
    return main([str(a) for a in args])


def dir_hash(path: Path, skip=("manifest.json",)):
    digest = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in skip:
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run_cli(["gen", "--episodes", 2, "--frames", 90, "--seed", 3, "--out", out])
    assert code == EXIT_OK
    return out


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["gen", "--episodes", 1, "--frames", 100, "--seed", 7, "--out", a]) == EXIT_OK
    assert run_cli(["gen", "--episodes", 1, "--frames", 100, "--seed", 7, "--out", b]) == EXIT_OK
    assert dir_hash(a) == dir_hash(b)


def test_gen_rerun_from_frozen_config(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["gen", "--episodes", 1, "--frames", 80, "--seed", 9, "--out", a]) == EXIT_OK
    frozen = a / "run_config.frozen.json"
    assert frozen.exists()
    assert run_cli(["gen", "--config", frozen, "--out", b]) == EXIT_OK
    assert dir_hash(a) == dir_hash(b)


def test_train_missing_data_dir(tmp_path):
    code = run_cli(["train", "--data", tmp_path / "nope", "--out", tmp_path / "m"])
    assert code == EXIT_MISSING_INPUT


def test_train_empty_data_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = run_cli(["train", "--data", empty, "--out", tmp_path / "m"])
    assert code == EXIT_CONFIG


def test_full_pipeline_smoke(tiny_data, tmp_path):
    model_dir = tmp_path / "model"
    code = run_cli([
        "train", "--data", tiny_data, "--out", model_dir,
        "--epochs", 2, "--steps-per-epoch", 25, "--seed", 0,
    ])
    assert code == EXIT_OK
    assert (model_dir / "checkpoint.json").exists()
    assert (model_dir / "loss_curve.csv").exists()

    roll_dir = tmp_path / "roll"
    code = run_cli([
        "rollout", "--checkpoint", model_dir / "checkpoint.json",
        "--reference", tiny_data / "episode_000.jsonl",
        "--frames", 40, "--seed", 2, "--mode", "sample", "--out", roll_dir,
    ])
    assert code in (EXIT_OK, 5)
    assert (roll_dir / "trace.jsonl").exists()
    assert (roll_dir / "trace.diagnostics.csv").exists()

    eval_dir = tmp_path / "eval"
    code = run_cli([
        "eval", "--trace", roll_dir / "trace.jsonl",
        "--reference", tiny_data / "episode_001.jsonl", "--out", eval_dir,
    ])
    assert code == EXIT_OK
    report = json.loads((eval_dir / "report.json").read_text())
    assert "statistics" in report


def test_rollout_missing_checkpoint(tiny_data, tmp_path):
    code = run_cli([
        "rollout", "--checkpoint", tmp_path / "none.json",
        "--reference", tiny_data / "episode_000.jsonl", "--out", tmp_path / "r",
    ])
    assert code == EXIT_MISSING_INPUT


def test_manifest_lists_all_outputs(tiny_data):
    manifest = json.loads((Path(tiny_data) / "manifest.json").read_text())
    listed = {Path(p).name for p in manifest["outputs"]}
    on_disk = {p.name for p in Path(tiny_data).iterdir() if p.name != "manifest.json"}
    assert on_disk <= listed


def test_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gen": {"episodes": 1, "frames": 50, "seed": 1}}))
    out = tmp_path / "out"
    assert run_cli(["gen", "--config", cfg, "--frames", 60, "--out", out]) == EXIT_OK
    frozen = json.loads((out / "run_config.frozen.json").read_text())
    assert frozen["gen"]["frames"] == 60  # post-override value recorded
    assert frozen["world"]["episode_frames"] == 60


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        build_section("world", {"world": {"not_a_field": 1}})


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{bad json")
    assert run_cli(["gen", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_CONFIG
    cfg.write_text(json.dumps({"unknown_section": {}}))
    assert run_cli(["gen", "--config", cfg, "--out", tmp_path / "o"]) == EXIT_CONFIG


def test_ablate_single_threshold(tiny_data, tmp_path):
    out = tmp_path / "abl"
    code = run_cli([
        "ablate", "--data", tiny_data, "--out", out,
        "--ttc-thresholds", "1", "--seeds", "0",
        "--epochs", 1, "--steps-per-epoch", 10,
        "--export-partitions",
    ])
    assert code == EXIT_OK
    rows = (out / "ablation.csv").read_text().strip().splitlines()
    assert rows[0].startswith("variant,")
    # one variant x one seed -> per-kind rows + average row
    assert len(rows) >= 3
    assert (out / "partitions_ttc_1.json").exists()


def test_ablate_rerun_identical(tiny_data, tmp_path):
    outs = []
    for name in ("abl1", "abl2"):
        out = tmp_path / name
        code = run_cli([
            "ablate", "--data", tiny_data, "--out", out,
            "--ttc-thresholds", "1", "--seeds", "0",
            "--epochs", 1, "--steps-per-epoch", 10,
        ])
        assert code == EXIT_OK
        outs.append((out / "ablation.csv").read_bytes())
    assert outs[0] == outs[1]


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "junctionsim.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip()
