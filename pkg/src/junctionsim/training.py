"""Training loop: window sampling, group-decoupled instance construction,
augmentation, SGD with gradient clipping, and checkpointing.

One root rng drives every stochastic choice in a fixed order, so a (seed,
config) pair pins the whole trajectory bit-for-bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, replace
from typing import Sequence

import numpy as np

from .features import build_model_inputs, build_targets, default_exit_radius
from .interaction import (
    InteractionConfig,
    SampledInstance,
    build_partition,
    restrict_window,
    sample_groups,
)
from .model import DynamicsModel, GradientError, ModelConfig
from .scene import (
    AgentState,
    Episode,
    HistoryWindow,
    MapContext,
    RoutePolyline,
    SceneFrame,
    TrafficLight,
    slice_window,
    wrap_angle,
)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, message, last_good_state, history):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 200
    # when set, an epoch instead runs until this many supervised agent-steps
    # have been consumed; this makes budgets comparable between subset
    # training (small instances) and full-scene training (large instances)
    epoch_agent_steps: int | None = None
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    ids_enabled: bool = True
    augment: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_total: float
    mean_position: float
    mean_heading: float
    mean_transition: float
    steps: int


@dataclass
class TrainResult:
    model: DynamicsModel
    history: list[EpochStats]
    rng: np.random.Generator
    steps_done: int


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rotate_point(x, y, ox, oy, cos_p, sin_p):
    rx, ry = x - ox, y - oy
    return ox + cos_p * rx - sin_p * ry, oy + sin_p * rx + cos_p * ry


def _rigid_state(state: AgentState, dx, dy, phi, origin) -> AgentState:
    cos_p, sin_p = math.cos(phi), math.sin(phi)
    x, y = _rotate_point(state.x, state.y, origin[0], origin[1], cos_p, sin_p)
    vx = cos_p * state.vx - sin_p * state.vy
    vy = sin_p * state.vx + cos_p * state.vy
    return AgentState(x + dx, y + dy, vx, vy, wrap_angle(state.theta + phi))


def _rigid_frame(frame: SceneFrame, dx, dy, phi, origin) -> SceneFrame:
    agents = {
        a: _rigid_state(s, dx, dy, phi, origin) for a, s in frame.agents.items()
    }
    return frame.with_agents(agents)


def _rigid_map(map_ctx: MapContext, dx, dy, phi) -> MapContext:
    ox, oy = map_ctx.scene_origin
    cos_p, sin_p = math.cos(phi), math.sin(phi)
    routes = tuple(
        RoutePolyline(
            r.route_id,
            tuple(
                (px + dx, py + dy)
                for px, py in (
                    _rotate_point(qx, qy, ox, oy, cos_p, sin_p) for qx, qy in r.points
                )
            ),
            r.allowed_kinds,
        )
        for r in map_ctx.routes
    )
    lights = tuple(
        TrafficLight(
            l.light_id,
            tuple(
                c + d
                for c, d in zip(
                    _rotate_point(l.position[0], l.position[1], ox, oy, cos_p, sin_p),
                    (dx, dy),
                )
            ),
            l.governed_routes,
        )
        for l in map_ctx.lights
    )
    xmin, ymin, xmax, ymax = map_ctx.bounds
    bounds = (xmin + dx, ymin + dy, xmax + dx, ymax + dy)
    return MapContext(routes, lights, bounds, map_ctx.scene_origin)


def _restrict_frame(frame: SceneFrame, keep) -> SceneFrame:
    return frame.with_agents({a: s for a, s in frame.agents.items() if a in keep})


def _shift_window(window: HistoryWindow, direction: int, margin) -> HistoryWindow:
    if direction > 0:
        frames = window.frames[1:] + (window.future[0],)
        future = window.future[1:] + (margin,)
    else:
        frames = (margin,) + window.frames[:-1]
        future = (window.frames[-1],) + window.future[:-1]
    pivot_agents = tuple(sorted(frames[-1].agents))
    return HistoryWindow(frames, future, pivot_agents, window.t_hist, window.t_pred)


def augment(
    instance: SampledInstance,
    rng,
    margin_before: SceneFrame | None = None,
    margin_after: SceneFrame | None = None,
) -> SampledInstance:
    """Randomized training-time transforms, each applied with probability 1/2:
    global translation, global rotation about the scene origin, a one-frame
    pivot shift (when margin frames permit), and per-history-frame position
    noise on agents. Ground-truth future frames get the rigid transforms but
    never the noise."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    do_translate = rng.random() < 0.5
    do_rotate = rng.random() < 0.5
    do_shift = rng.random() < 0.5
    do_noise = rng.random() < 0.5

    window = instance.window
    keep = set(instance.attributes)

    if do_shift:
        direction = 1 if rng.random() < 0.5 else -1
        margin = margin_after if direction > 0 else margin_before
        if margin is not None:
            window = _shift_window(window, direction, _restrict_frame(margin, keep))

    dx = dy = 0.0
    phi = 0.0
    if do_translate:
        dx, dy = rng.uniform(-5.0, 5.0, size=2)
    if do_rotate:
        phi = rng.uniform(0.0, 2.0 * math.pi)
    map_ctx = instance.map
    if do_translate or do_rotate:
        origin = map_ctx.scene_origin
        frames = tuple(_rigid_frame(f, dx, dy, phi, origin) for f in window.frames)
        future = tuple(_rigid_frame(f, dx, dy, phi, origin) for f in window.future)
        window = HistoryWindow(
            frames, future, window.pivot_agents, window.t_hist, window.t_pred
        )
        map_ctx = _rigid_map(map_ctx, dx, dy, phi)

    if do_noise:
        # the pivot frame stays clean: closed-loop feeding makes the pivot the
        # agent's exact state, so corrupting it would only inject irreducible
        # variance into every offset target
        frames = []
        for frame in window.frames[:-1]:
            agents = {}
            for agent_id in sorted(frame.agents):
                s = frame.agents[agent_id]
                nx, ny = rng.normal(0.0, 0.1, size=2)
                agents[agent_id] = AgentState(s.x + nx, s.y + ny, s.vx, s.vy, s.theta)
            frames.append(frame.with_agents(agents))
        frames.append(window.frames[-1])
        # velocities follow the canonical finite-difference definition, so the
        # noised positions imply re-derived velocities (matching what a
        # closed-loop step would produce from jittered positions)
        from .scene import FRAME_RATE_HZ

        rederived = [frames[0]]
        for prev, frame in zip(frames, frames[1:]):
            agents = {}
            for agent_id, s in frame.agents.items():
                p0 = prev.agents.get(agent_id)
                if p0 is None:
                    agents[agent_id] = s
                else:
                    agents[agent_id] = AgentState(
                        s.x, s.y,
                        (s.x - p0.x) * FRAME_RATE_HZ,
                        (s.y - p0.y) * FRAME_RATE_HZ,
                        s.theta,
                    )
            rederived.append(frame.with_agents(agents))
        window = HistoryWindow(
            tuple(rederived), window.future, window.pivot_agents, window.t_hist, window.t_pred
        )

    return SampledInstance(
        instance.selected_group_indices, window, map_ctx, instance.attributes
    )


# ---------------------------------------------------------------------------
# instance sampling
# ---------------------------------------------------------------------------

def sample_training_instance(
    episode: Episode,
    t: int,
    interaction_config: InteractionConfig,
    rng: np.random.Generator,
    ids_enabled: bool = True,
) -> SampledInstance | None:
    """Window -> partition -> group sampling -> restriction. Returns None for
    windows with an empty pivot frame."""
    window = slice_window(episode, t)
    if not window.pivot_agents:
        return None
    partition = build_partition(window.pivot_frame, episode.attributes, interaction_config)
    if ids_enabled:
        selected = sample_groups(partition, rng)
    else:
        selected = frozenset(range(partition.k))
    return restrict_window(window, selected, partition, episode.map, episode.attributes)


def _pivot_range(episode: Episode, t_hist: int, t_pred: int) -> tuple[int, int]:
    return t_hist - 1, len(episode.frames) - t_pred - 1


def train(
    episodes: Sequence[Episode],
    interaction_config: InteractionConfig,
    model_config: ModelConfig,
    train_config: TrainConfig,
    model: DynamicsModel | None = None,
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Stochastic-gradient training over decoupled instances.

    Passing a model and rng (e.g. restored from a checkpoint) continues a
    previous run with an identical trajectory.
    """
    usable = [
        ep for ep in episodes
        if len(ep.frames) >= model_config.t_hist + model_config.t_pred
    ]
    if not usable:
        raise TrainingError(
            f"need at least one episode with >= "
            f"{model_config.t_hist + model_config.t_pred} frames"
        )
    if model is None:
        model = DynamicsModel(model_config, seed=train_config.seed)
    if rng is None:
        rng = np.random.default_rng(train_config.seed)

    history: list[EpochStats] = []
    last_good = model.params.state_arrays()
    steps_done = 0

    for epoch in range(1, train_config.epochs + 1):
        sums = np.zeros(4)
        updates = 0
        agent_steps = 0
        attempts = 0
        attempt_cap = 100 * max(
            train_config.steps_per_epoch, train_config.epoch_agent_steps or 0
        )
        while True:
            if train_config.epoch_agent_steps is not None:
                if agent_steps >= train_config.epoch_agent_steps:
                    break
            elif updates >= train_config.steps_per_epoch:
                break
            attempts += 1
            if attempts > attempt_cap:
                raise TrainingError(
                    f"epoch {epoch}: exceeded {attempt_cap} sampling attempts "
                    f"without filling the budget (dataset too sparse?)"
                )
            ep = usable[int(rng.integers(len(usable)))]
            lo, hi = _pivot_range(ep, model_config.t_hist, model_config.t_pred)
            t = int(rng.integers(lo, hi + 1))
            instance = sample_training_instance(
                ep, t, interaction_config, rng, train_config.ids_enabled
            )
            if instance is None:
                continue
            if train_config.augment:
                margin_before = ep.frames[t - model_config.t_hist] if t - model_config.t_hist >= 0 else None
                margin_after = (
                    ep.frames[t + model_config.t_pred + 1]
                    if t + model_config.t_pred + 1 < len(ep.frames)
                    else None
                )
                instance = augment(instance, rng, margin_before, margin_after)
            if not instance.window.pivot_agents:
                continue
            inputs = build_model_inputs(
                instance.window.frames,
                instance.window.pivot_agents,
                instance.map,
                instance.attributes,
            )
            targets = build_targets(instance.window, instance.map)
            if targets.valid.sum() == 0:
                continue  # every sampled agent exits immediately: nothing to fit
            try:
                terms, _ = model.gradients(inputs, targets)
            except GradientError as err:
                model.params.load_state_arrays(last_good)
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: {err}", last_good, history
                ) from err
            model.params.sgd_step(train_config.learning_rate, train_config.grad_clip)
            values = terms.values()
            sums += (
                values["total"], values["position"], values["heading"], values["transition"],
            )
            updates += 1
            agent_steps += len(instance.window.pivot_agents)
            steps_done += 1
        if updates == 0:
            raise TrainingError(f"epoch {epoch}: no usable training windows")
        mean = sums / updates
        history.append(EpochStats(epoch, mean[0], mean[1], mean[2], mean[3], updates))
        last_good = model.params.state_arrays()

    return TrainResult(model, history, rng, steps_done)


def write_loss_curve(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,position,heading,transition,steps\n")
        for row in history:
            fh.write(
                f"{row.epoch},{row.mean_total!r},{row.mean_position!r},"
                f"{row.mean_heading!r},{row.mean_transition!r},{row.steps}\n"
            )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    model: DynamicsModel, path, step: int = 0, rng: np.random.Generator | None = None
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "step": step,
        "rng_state": _rng_state_to_json(rng) if rng is not None else None,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[DynamicsModel, int, np.random.Generator | None]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise TrainingError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')}"
        )
    config = ModelConfig.from_dict(payload["model_config"])
    model = DynamicsModel(config, seed=0)
    state = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    model.params.load_state_arrays(state)
    rng = None
    if payload.get("rng_state") is not None:
        rng = _rng_state_from_json(payload["rng_state"])
    return model, payload["step"], rng


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def _rng_state_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
