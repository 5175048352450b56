"""Evaluation: open-loop displacement errors, distribution fidelity via
histogram Wasserstein-1 distances, and collapse-time summaries.

All metrics are pure folds over episode logs with deterministic reduction
order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import build_model_inputs, build_targets
from .model import DynamicsModel
from .scene import AgentKind, Episode, slice_window

# reported collapse times of the decoupled model vs. the joint baseline at
# full data scale, kept in report metadata for qualitative comparison
REFERENCE_COLLAPSE_TIME_S = {"decoupled_training": 895.0, "joint_baseline": 15.0}

MISSING_RATE_FDE_THRESHOLD_M = 2.0
CLOSEST_DISTANCE_PAIR_RADIUS_M = 30.0

KIND_LABELS = {
    AgentKind.MOTORIZED: "mv",
    AgentKind.NON_MOTORIZED: "nmv",
    AgentKind.PEDESTRIAN: "ped",
}


class MetricsError(ValueError):
    pass


class EmptyHistogramError(MetricsError):
    def __init__(self, statistic: str, side: str):
        super().__init__(f"no samples for statistic {statistic!r} on the {side} side")
        self.statistic = statistic
        self.side = side


@dataclass(frozen=True)
class HistogramSpec:
    lower: float
    upper: float
    bin_width: float

    def __post_init__(self):
        if self.bin_width <= 0 or self.upper <= self.lower:
            raise MetricsError(f"bad histogram spec {self}")
        n = (self.upper - self.lower) / self.bin_width
        if abs(n - round(n)) > 1e-9:
            raise MetricsError(
                f"range ({self.lower}, {self.upper}) is not an integral number "
                f"of {self.bin_width} bins"
            )

    @property
    def n_bins(self) -> int:
        return int(round((self.upper - self.lower) / self.bin_width))

    def edges(self) -> np.ndarray:
        return self.lower + np.arange(self.n_bins + 1) * self.bin_width


SPEED_HISTOGRAM = HistogramSpec(0.0, 15.0, 0.25)
CLOSEST_DISTANCE_HISTOGRAM = HistogramSpec(0.0, 30.0, 0.5)


@dataclass(frozen=True)
class Histogram:
    """Probability-mass histogram with explicit under/overflow bins so the
    total normalized mass is exactly 1."""

    spec: HistogramSpec
    mass: np.ndarray
    underflow: float
    overflow: float
    count: int

    def total_mass(self) -> float:
        return float(self.mass.sum() + self.underflow + self.overflow)


def compute_histogram(samples: np.ndarray, spec: HistogramSpec) -> Histogram:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return Histogram(spec, np.zeros(spec.n_bins), 0.0, 0.0, 0)
    counts, _ = np.histogram(samples, bins=spec.edges())
    under = int((samples < spec.lower).sum())
    over = int((samples >= spec.upper).sum())
    # np.histogram puts samples == upper edge into the last bin; keep them
    # there and count strictly-greater ones as overflow
    over = int((samples > spec.upper).sum())
    n = samples.size
    return Histogram(spec, counts / n, under / n, over / n, int(n))


def wasserstein1(a: Histogram, b: Histogram) -> float:
    """W1 on the fixed binning: sum over in-range bins of |CDF difference|
    times the bin width. Underflow mass enters the CDF baseline; overflow
    carries no width and is excluded."""
    if a.spec != b.spec:
        raise MetricsError("histograms use different specs")
    cdf_a = a.underflow + np.cumsum(a.mass)
    cdf_b = b.underflow + np.cumsum(b.mass)
    return float(np.abs(cdf_a - cdf_b).sum() * a.spec.bin_width)


# ---------------------------------------------------------------------------
# open-loop displacement metrics
# ---------------------------------------------------------------------------

@dataclass
class DisplacementMetrics:
    per_kind: dict[str, dict[str, float]]
    average: dict[str, float]

    def to_dict(self) -> dict:
        return {"per_kind": self.per_kind, "average": self.average}


def ade_fde(
    predicted: np.ndarray,
    ground_truth: np.ndarray,
    valid: np.ndarray,
    kinds: np.ndarray,
) -> DisplacementMetrics:
    """Per-agent ADE (mean L2 over valid steps) and FDE (L2 at the last valid
    step), aggregated per kind and agent-count-weighted overall."""
    errors = np.linalg.norm(predicted - ground_truth, axis=2)
    per_agent = _per_agent_displacements(errors, valid)
    if not per_agent:
        raise MetricsError("empty evaluation set: no agent has a valid future step")
    rows: dict[str, list[tuple[float, float]]] = {}
    for idx, (a, f) in per_agent.items():
        label = KIND_LABELS[AgentKind(int(kinds[idx]))]
        rows.setdefault(label, []).append((a, f))
    per_kind = {}
    for label, values in sorted(rows.items()):
        ades = [v[0] for v in values]
        fdes = [v[1] for v in values]
        per_kind[label] = {
            "ade": float(np.mean(ades)),
            "fde": float(np.mean(fdes)),
            "n_agents": len(values),
        }
    total = sum(v["n_agents"] for v in per_kind.values())
    average = {
        "ade": sum(v["ade"] * v["n_agents"] for v in per_kind.values()) / total,
        "fde": sum(v["fde"] * v["n_agents"] for v in per_kind.values()) / total,
        "n_agents": total,
    }
    return DisplacementMetrics(per_kind, average)


def _per_agent_displacements(errors: np.ndarray, valid: np.ndarray):
    out = {}
    for i in range(errors.shape[0]):
        steps = np.nonzero(valid[i] > 0)[0]
        if steps.size == 0:
            continue
        out[i] = (float(errors[i, steps].mean()), float(errors[i, steps[-1]]))
    return out


def missing_rate(
    predicted: np.ndarray,
    ground_truth: np.ndarray,
    valid: np.ndarray,
    kinds: np.ndarray,
    threshold: float = MISSING_RATE_FDE_THRESHOLD_M,
) -> dict[str, float]:
    """Fraction of evaluated agents whose final displacement exceeds the
    threshold, per kind plus the agent-weighted average."""
    errors = np.linalg.norm(predicted - ground_truth, axis=2)
    per_agent = _per_agent_displacements(errors, valid)
    if not per_agent:
        raise MetricsError("empty evaluation set: no agent has a valid future step")
    missed: dict[str, list[int]] = {}
    for idx, (_, fde) in per_agent.items():
        label = KIND_LABELS[AgentKind(int(kinds[idx]))]
        missed.setdefault(label, []).append(1 if fde > threshold else 0)
    out = {label: float(np.mean(v)) for label, v in sorted(missed.items())}
    total = sum(len(v) for v in missed.values())
    out["average"] = float(
        sum(sum(v) for v in missed.values()) / total
    )
    return out


def evaluate_open_loop(
    model: DynamicsModel,
    episodes: Sequence[Episode],
    stride: int = 5,
    max_windows: int | None = None,
) -> tuple[DisplacementMetrics, dict[str, float]]:
    """Predict t_pred steps from ground-truth history across regularly spaced
    windows (no rollout) and score displacement errors."""
    preds, trues, valids, kinds = [], [], [], []
    n_windows = 0
    for ep in episodes:
        lo = model.config.t_hist - 1
        hi = len(ep.frames) - model.config.t_pred - 1
        for t in range(lo, hi + 1, stride):
            window = slice_window(ep, t, model.config.t_hist, model.config.t_pred)
            if not window.pivot_agents:
                continue
            inputs = build_model_inputs(window.frames, window.pivot_agents, ep.map, ep.attributes)
            targets = build_targets(window, ep.map)
            out = model.predict(inputs)
            preds.append(out.mu)
            trues.append(targets.positions)
            valids.append(targets.valid)
            kinds.append(inputs.kinds)
            n_windows += 1
            if max_windows is not None and n_windows >= max_windows:
                break
        if max_windows is not None and n_windows >= max_windows:
            break
    if not preds:
        raise MetricsError("no evaluable windows in the test episodes")
    predicted = np.concatenate(preds, axis=0)
    truth = np.concatenate(trues, axis=0)
    valid = np.concatenate(valids, axis=0)
    kind_arr = np.concatenate(kinds, axis=0)
    return (
        ade_fde(predicted, truth, valid, kind_arr),
        missing_rate(predicted, truth, valid, kind_arr),
    )


# ---------------------------------------------------------------------------
# distribution fidelity
# ---------------------------------------------------------------------------

def speed_samples(episodes: Sequence[Episode], kind: AgentKind) -> np.ndarray:
    out = []
    for ep in episodes:
        for frame in ep.frames:
            for aid in sorted(frame.agents):
                if ep.attributes[aid].kind is kind:
                    s = frame.agents[aid]
                    out.append(math.hypot(s.vx, s.vy))
    return np.array(out)


def closest_distance_samples(
    episodes: Sequence[Episode],
    kind: AgentKind,
    radius: float = CLOSEST_DISTANCE_PAIR_RADIUS_M,
) -> np.ndarray:
    """Per agent-frame minimum center distance to any other agent within the
    interaction radius; agent-frames with no neighbor in range contribute no
    sample."""
    out = []
    for ep in episodes:
        for frame in ep.frames:
            ids = sorted(frame.agents)
            if len(ids) < 2:
                continue
            pos = np.array([[frame.agents[i].x, frame.agents[i].y] for i in ids])
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.hypot(diff[:, :, 0], diff[:, :, 1])
            np.fill_diagonal(dist, np.inf)
            nearest = dist.min(axis=1)
            for i, aid in enumerate(ids):
                if ep.attributes[aid].kind is kind and nearest[i] <= radius:
                    out.append(float(nearest[i]))
    return np.array(out)


@dataclass
class FidelityEntry:
    statistic: str
    kind: str
    reference: Histogram
    simulated: Histogram
    w1: float


def distribution_fidelity(
    simulated: Sequence[Episode],
    reference: Sequence[Episode],
    kinds: Sequence[AgentKind] = tuple(AgentKind),
    statistics: Sequence[str] = ("speed", "closest_distance"),
    speed_spec: HistogramSpec = SPEED_HISTOGRAM,
    distance_spec: HistogramSpec = CLOSEST_DISTANCE_HISTOGRAM,
) -> list[FidelityEntry]:
    if not simulated or not reference:
        raise MetricsError("need at least one episode on each side")
    samplers = {
        "speed": (speed_samples, speed_spec),
        "closest_distance": (closest_distance_samples, distance_spec),
    }
    unknown = set(statistics) - set(samplers)
    if unknown:
        raise MetricsError(f"unknown statistics {sorted(unknown)}")
    entries = []
    for kind in kinds:
        label = KIND_LABELS[kind]
        for statistic in statistics:
            sampler, spec = samplers[statistic]
            ref_samples = sampler(reference, kind)
            sim_samples = sampler(simulated, kind)
            name = f"{statistic}[{label}]"
            if ref_samples.size == 0:
                raise EmptyHistogramError(name, "reference")
            if sim_samples.size == 0:
                raise EmptyHistogramError(name, "simulated")
            ref_hist = compute_histogram(ref_samples, spec)
            sim_hist = compute_histogram(sim_samples, spec)
            entries.append(
                FidelityEntry(statistic, label, ref_hist, sim_hist, wasserstein1(ref_hist, sim_hist))
            )
    return entries


# ---------------------------------------------------------------------------
# collapse summary
# ---------------------------------------------------------------------------

@dataclass
class CollapseSummary:
    mean_s: float
    median_s: float
    n_traces: int
    n_censored: int
    cap_s: float | None
    per_reason: dict[str, int]
    reference_s: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_COLLAPSE_TIME_S))

    def to_dict(self) -> dict:
        return {
            "mean_s": self.mean_s,
            "median_s": self.median_s,
            "n_traces": self.n_traces,
            "n_censored": self.n_censored,
            "cap_s": self.cap_s,
            "per_reason": self.per_reason,
            "reference_s": self.reference_s,
        }


def collapse_summary(traces) -> CollapseSummary:
    """Capped (censored) runs enter the mean at their cap and are flagged."""
    if not traces:
        raise MetricsError("need at least one trace")
    times = [t.collapse_time_s for t in traces]
    censored = [t for t in traces if t.censored]
    reasons: dict[str, int] = {}
    for t in traces:
        if t.collapse_reason is not None:
            reasons[t.collapse_reason] = reasons.get(t.collapse_reason, 0) + 1
    cap = max((t.collapse_time_s for t in censored), default=None)
    return CollapseSummary(
        mean_s=float(np.mean(times)),
        median_s=float(np.median(times)),
        n_traces=len(traces),
        n_censored=len(censored),
        cap_s=cap,
        per_reason=dict(sorted(reasons.items())),
    )
