"""Closed-loop simulation: autoregressive one-frame stepping over the whole
scene, agent injection from a reference episode, and collapse detection.

Each step feeds the model the last t_hist frames, consumes only the first
predicted step, applies the transition head to remove departing agents, and
copies in new arrivals from the reference log. A rollout is strictly
sequential; distinct seeds run independently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import (
    TRANSITION_STAY,
    build_model_inputs,
)
from .model import DynamicsModel
from .scene import (
    AgentAttributes,
    AgentState,
    Episode,
    FRAME_DT,
    FRAME_RATE_HZ,
    LightPhase,
    SceneFrame,
    heading_decode,
)

COLLAPSE_NON_FINITE = "non_finite"
COLLAPSE_RUNAWAY_SPEED = "runaway_speed"
COLLAPSE_OFF_MAP = "off_map"
COLLAPSE_OVERLAP = "overlap"
COLLAPSE_FROZEN = "frozen"


class RolloutError(ValueError):
    pass


@dataclass(frozen=True)
class CollapseThresholds:
    # per-kind speed caps: 3x the nominal desired speed of each category
    speed_limit: tuple[float, float, float] = (24.0, 10.5, 3.9)
    bounds_margin: float = 20.0
    overlap_distance: float = 0.2
    overlap_frames: int = 5
    frozen_displacement: float = 0.01
    frozen_frames: int = 25
    red_light_excuse_radius: float = 15.0


@dataclass(frozen=True)
class RolloutConfig:
    max_frames: int = 500
    mode: str = "sample"  # "sample" draws positions; "mean" is a diagnostic
    seed: int = 0
    thresholds: CollapseThresholds = CollapseThresholds()

    def __post_init__(self):
        if self.max_frames < 1:
            raise RolloutError("max_frames must be >= 1")
        if self.mode not in ("sample", "mean"):
            raise RolloutError(f"unknown sampling mode {self.mode!r}")


@dataclass
class FrameDiagnostics:
    frame: int
    n_agents: int
    min_pairwise_distance: float
    max_speed: float
    collapsed: bool


@dataclass
class RolloutTrace:
    episode: Episode
    diagnostics: list[FrameDiagnostics]
    collapse_frame: int | None
    collapse_reason: str | None
    censored: bool
    simulated_frames: int
    notes: list[str] = field(default_factory=list)

    @property
    def collapse_time_s(self) -> float:
        return self.simulated_frames * FRAME_DT


# ---------------------------------------------------------------------------
# one autoregressive step
# ---------------------------------------------------------------------------

def step(
    history: Sequence[SceneFrame],
    attributes,
    map_ctx,
    model: DynamicsModel,
    rng: np.random.Generator,
    mode: str = "sample",
    next_lights=None,
) -> SceneFrame:
    """Predict frame t+1 from the trailing history. Lights are exogenous and
    supplied by the caller; an empty pivot frame yields an empty next frame."""
    pivot = history[-1]
    t_next = pivot.timestamp_index + 1
    lights = next_lights if next_lights is not None else pivot.light_states
    ids = tuple(sorted(pivot.agents))
    if not ids:
        return SceneFrame(t_next, {}, lights)
    inputs = build_model_inputs(history, ids, map_ctx, attributes)
    pred = model.predict(inputs)
    ox, oy = map_ctx.scene_origin
    agents = {}
    for i, agent_id in enumerate(ids):
        decision = int(np.argmax(pred.transition_logits[i]))
        if decision != TRANSITION_STAY:
            continue
        mu = pred.mu[i, 0]
        sigma = pred.sigma[i, 0]
        if mode == "sample":
            pos = mu + sigma * rng.standard_normal(2)
        else:
            pos = mu
        x = float(pos[0]) + ox
        y = float(pos[1]) + oy
        prev = pivot.agents[agent_id]
        vx = (x - prev.x) * FRAME_RATE_HZ
        vy = (y - prev.y) * FRAME_RATE_HZ
        hx, hy = pred.heading_vec[i, 0]
        norm = math.hypot(hx, hy)
        if norm > 1e-6 and math.isfinite(norm):
            theta = heading_decode(hx, hy)
        else:
            theta = prev.theta
        agents[agent_id] = AgentState(x, y, vx, vy, theta)
    return SceneFrame(t_next, agents, lights)


# ---------------------------------------------------------------------------
# agent injection
# ---------------------------------------------------------------------------

def entry_schedule(reference: Episode) -> dict[int, list[str]]:
    """Frame index -> ids whose first appearance in the reference is there."""
    seen: set[str] = set()
    schedule: dict[int, list[str]] = {}
    for i, frame in enumerate(reference.frames):
        for agent_id in sorted(frame.agents):
            if agent_id not in seen:
                seen.add(agent_id)
                schedule.setdefault(i, []).append(agent_id)
    return schedule


def inject_agents(
    frame: SceneFrame,
    reference: Episode,
    t: int,
    attributes: dict[str, AgentAttributes],
    schedule: dict[int, list[str]] | None = None,
    notes: list[str] | None = None,
) -> SceneFrame:
    """Copy agents whose first reference appearance is frame t into the frame.
    Existing simulated agents are never overwritten; an id collision re-keys
    the newcomer deterministically."""
    if schedule is None:
        schedule = entry_schedule(reference)
    entering = schedule.get(t, [])
    if not entering:
        return frame
    agents = dict(frame.agents)
    for agent_id in entering:
        state = reference.frames[t].agents[agent_id]
        new_id = agent_id
        n = 0
        while new_id in agents:
            n += 1
            new_id = f"{agent_id}+r{n}"
        if new_id != agent_id and notes is not None:
            notes.append(
                f"frame {t}: reference agent {agent_id!r} re-keyed to {new_id!r} "
                f"(id already live in simulation)"
            )
        ref_attrs = reference.attributes[agent_id]
        attributes[new_id] = AgentAttributes(
            new_id, ref_attrs.kind, ref_attrs.length, ref_attrs.width, ref_attrs.height
        )
        agents[new_id] = state
    return frame.with_agents(agents)


# ---------------------------------------------------------------------------
# collapse detection
# ---------------------------------------------------------------------------

class CollapseDetector:
    """Stateful detector over the stream of simulated frames. Criteria are
    checked in a fixed order; the first to fire names the collapse."""

    def __init__(self, map_ctx, attributes, thresholds: CollapseThresholds):
        self.map = map_ctx
        self.attributes = attributes
        self.thresholds = thresholds
        self._overlap_streaks: dict[tuple[str, str], int] = {}
        self._frozen_streak = 0
        self._prev_frame: SceneFrame | None = None

    def observe(self, frame: SceneFrame) -> str | None:
        th = self.thresholds
        reason = None

        for agent_id in sorted(frame.agents):
            if not frame.agents[agent_id].is_finite():
                return COLLAPSE_NON_FINITE

        for agent_id in sorted(frame.agents):
            state = frame.agents[agent_id]
            kind = int(self.attributes[agent_id].kind)
            if state.speed > th.speed_limit[kind]:
                return COLLAPSE_RUNAWAY_SPEED

        xmin, ymin, xmax, ymax = self.map.bounds
        m = th.bounds_margin
        for agent_id in sorted(frame.agents):
            state = frame.agents[agent_id]
            if not (xmin - m <= state.x <= xmax + m and ymin - m <= state.y <= ymax + m):
                return COLLAPSE_OFF_MAP

        ids = sorted(frame.agents)
        active_pairs = set()
        for i, a in enumerate(ids):
            sa = frame.agents[a]
            for b in ids[i + 1 :]:
                sb = frame.agents[b]
                d = math.hypot(sa.x - sb.x, sa.y - sb.y)
                if d < th.overlap_distance:
                    pair = (a, b)
                    active_pairs.add(pair)
                    streak = self._overlap_streaks.get(pair, 0) + 1
                    self._overlap_streaks[pair] = streak
                    if streak >= th.overlap_frames and reason is None:
                        reason = COLLAPSE_OVERLAP
        self._overlap_streaks = {
            p: s for p, s in self._overlap_streaks.items() if p in active_pairs
        }
        if reason is not None:
            return reason

        frozen = self._is_frozen_candidate(frame)
        self._frozen_streak = self._frozen_streak + 1 if frozen else 0
        self._prev_frame = frame
        if self._frozen_streak >= th.frozen_frames:
            return COLLAPSE_FROZEN
        return None

    def _is_frozen_candidate(self, frame: SceneFrame) -> bool:
        """All agents motionless while at least one of them has no red light
        nearby to justify standing still."""
        if self._prev_frame is None or not frame.agents:
            return False
        common = set(frame.agents) & set(self._prev_frame.agents)
        if not common:
            return False
        for agent_id in common:
            a, b = frame.agents[agent_id], self._prev_frame.agents[agent_id]
            if math.hypot(a.x - b.x, a.y - b.y) >= self.thresholds.frozen_displacement:
                return False
        red_positions = [
            light.position
            for light, ls in zip(self.map.lights, frame.light_states)
            if ls.phase is LightPhase.RED
        ]
        for agent_id in common:
            state = frame.agents[agent_id]
            excused = any(
                math.hypot(state.x - px, state.y - py)
                <= self.thresholds.red_light_excuse_radius
                for px, py in red_positions
            )
            if not excused:
                return True
        return False


def detect_collapse(
    frames: Sequence[SceneFrame], map_ctx, attributes,
    thresholds: CollapseThresholds = CollapseThresholds(),
) -> tuple[int, str] | None:
    """Run the detector over a frame sequence; returns (frame_index, reason)
    of the first collapse or None."""
    detector = CollapseDetector(map_ctx, attributes, thresholds)
    for i, frame in enumerate(frames):
        reason = detector.observe(frame)
        if reason is not None:
            return i, reason
    return None


# ---------------------------------------------------------------------------
# full rollout
# ---------------------------------------------------------------------------

def _frame_diagnostics(frame: SceneFrame, collapsed: bool) -> FrameDiagnostics:
    ids = sorted(frame.agents)
    min_dist = math.inf
    max_speed = 0.0
    for i, a in enumerate(ids):
        sa = frame.agents[a]
        if math.isfinite(sa.speed):
            max_speed = max(max_speed, sa.speed)
        for b in ids[i + 1 :]:
            sb = frame.agents[b]
            d = math.hypot(sa.x - sb.x, sa.y - sb.y)
            if math.isfinite(d):
                min_dist = min(min_dist, d)
    return FrameDiagnostics(frame.timestamp_index, len(ids), min_dist, max_speed, collapsed)


def run_rollout(
    config: RolloutConfig,
    model: DynamicsModel,
    reference: Episode,
) -> RolloutTrace:
    """Warm-start from the reference's first t_hist frames, then step, inject,
    and watch for collapse until max_frames or a detector fires."""
    t_hist = model.config.t_hist
    if len(reference.frames) < t_hist:
        raise RolloutError(
            f"reference must provide at least {t_hist} warm-start frames"
        )
    rng = np.random.default_rng(config.seed)
    schedule = entry_schedule(reference)
    attributes = dict(reference.attributes)
    notes: list[str] = []

    frames: list[SceneFrame] = list(reference.frames[:t_hist])
    diagnostics = [_frame_diagnostics(f, False) for f in frames]
    detector = CollapseDetector(reference.map, attributes, config.thresholds)
    collapse_frame = None
    collapse_reason = None

    n_ref = len(reference.frames)
    t = t_hist
    while t < config.max_frames:
        history = frames[-t_hist:]
        ref_lights = reference.frames[t % n_ref].light_states
        next_frame = step(
            history, attributes, reference.map, model, rng,
            mode=config.mode, next_lights=ref_lights,
        )
        next_frame = inject_agents(
            next_frame, reference, t, attributes, schedule, notes
        )
        reason = detector.observe(next_frame)
        frames.append(next_frame)
        diagnostics.append(_frame_diagnostics(next_frame, reason is not None))
        if reason is not None:
            collapse_frame = t
            collapse_reason = reason
            break
        t += 1

    simulated = len(frames) - t_hist
    episode = Episode(reference.map, attributes, frames, reference.frame_rate_hz)
    return RolloutTrace(
        episode=episode,
        diagnostics=diagnostics,
        collapse_frame=collapse_frame,
        collapse_reason=collapse_reason,
        censored=collapse_frame is None,
        simulated_frames=simulated,
        notes=notes,
    )
