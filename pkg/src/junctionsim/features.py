"""Tensorization of scene windows into model inputs and training targets.

All coordinates are shifted to be relative to the map's scene origin here, so
the network never sees absolute map coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .scene import (
    AgentAttributes,
    AgentKind,
    HistoryWindow,
    MapContext,
    N_KINDS,
    SceneFrame,
    heading_encode,
)

# scene state transition classes predicted per agent
TRANSITION_STAY = 0
TRANSITION_LEAVING = 1
TRANSITION_INVALID = 2

ROUTE_POINT_DIM = 5  # x, y, allowed-kind multi-hot
LIGHT_FRAME_DIM = 5  # phase one-hot, light position
STATE_DIM = 6


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class ModelInputs:
    agent_ids: tuple[str, ...]
    hist: np.ndarray        # (N, T_hist, 6): x, y, vx, vy, cos, sin
    hist_mask: np.ndarray   # (N, T_hist) 1.0 where the agent was present
    attrs: np.ndarray       # (N, 6): length, width, height, kind one-hot
    kinds: np.ndarray       # (N,) int
    pivot_pos: np.ndarray   # (N, 2) origin-relative position at the pivot
    routes: np.ndarray      # (N_R, P, 5)
    route_mask: np.ndarray  # (N_R, P)
    lights: np.ndarray      # (N_L, T_hist, 5)

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)


@dataclass(frozen=True)
class Targets:
    positions: np.ndarray   # (N, T_pred, 2) origin-relative ground truth
    headings: np.ndarray    # (N, T_pred, 2) unit vectors
    valid: np.ndarray       # (N, T_pred) 1.0 where the agent exists
    transition: np.ndarray  # (N,) int class labels


def default_exit_radius(map_ctx: MapContext) -> float:
    """Agents whose last observed position is beyond this radius are labelled
    as leaving the scene; closer disappearances count as track dropouts."""
    xmin, ymin, xmax, ymax = map_ctx.bounds
    ox, oy = map_ctx.scene_origin
    inradius = min(xmax - ox, ox - xmin, ymax - oy, oy - ymin)
    return max(inradius - 8.0, 1.0)


def build_model_inputs(
    frames: Sequence[SceneFrame],
    pivot_agents: Sequence[str],
    map_ctx: MapContext,
    attributes: Mapping[str, AgentAttributes],
) -> ModelInputs:
    if len(map_ctx.routes) == 0:
        raise FeatureError("context requires a nonempty route set")
    ox, oy = map_ctx.scene_origin
    t_hist = len(frames)
    ids = tuple(pivot_agents)
    n = len(ids)

    hist = np.zeros((n, t_hist, STATE_DIM))
    mask = np.zeros((n, t_hist))
    for i, agent_id in enumerate(ids):
        for t, frame in enumerate(frames):
            state = frame.agents.get(agent_id)
            if state is None:
                continue
            c, s = heading_encode(state.theta)
            hist[i, t] = (state.x - ox, state.y - oy, state.vx, state.vy, c, s)
            mask[i, t] = 1.0

    attrs = np.zeros((n, 6))
    kinds = np.zeros(n, dtype=np.int64)
    for i, agent_id in enumerate(ids):
        a = attributes[agent_id]
        attrs[i, 0:3] = (a.length, a.width, a.height)
        attrs[i, 3 + int(a.kind)] = 1.0
        kinds[i] = int(a.kind)

    pivot_pos = hist[:, -1, 0:2].copy()

    max_pts = max(len(r.points) for r in map_ctx.routes)
    routes = np.zeros((len(map_ctx.routes), max_pts, ROUTE_POINT_DIM))
    route_mask = np.zeros((len(map_ctx.routes), max_pts))
    for ri, route in enumerate(map_ctx.routes):
        for pi, (px, py) in enumerate(route.points):
            routes[ri, pi, 0] = px - ox
            routes[ri, pi, 1] = py - oy
            for kind in route.allowed_kinds:
                routes[ri, pi, 2 + int(kind)] = 1.0
            route_mask[ri, pi] = 1.0

    n_lights = len(map_ctx.lights)
    lights = np.zeros((n_lights, t_hist, LIGHT_FRAME_DIM))
    for li, light in enumerate(map_ctx.lights):
        lights[li, :, 3] = light.position[0] - ox
        lights[li, :, 4] = light.position[1] - oy
    for t, frame in enumerate(frames):
        for ls in frame.light_states:
            lights[ls.light_id, t, int(ls.phase)] = 1.0

    return ModelInputs(
        agent_ids=ids,
        hist=hist,
        hist_mask=mask,
        attrs=attrs,
        kinds=kinds,
        pivot_pos=pivot_pos,
        routes=routes,
        route_mask=route_mask,
        lights=lights,
    )


def transition_label(
    window: HistoryWindow, agent_id: str, map_ctx: MapContext, exit_radius: float
) -> int:
    """Stay if the agent persists through the whole prediction window;
    otherwise classify the upcoming disappearance by how far from the scene
    origin the track was last seen (far out: leaving; interior: dropout)."""
    last = window.pivot_frame.agents[agent_id]
    gone = False
    for frame in window.future:
        state = frame.agents.get(agent_id)
        if state is None:
            gone = True
            break
        last = state
    if not gone:
        return TRANSITION_STAY
    ox, oy = map_ctx.scene_origin
    if math.hypot(last.x - ox, last.y - oy) >= exit_radius:
        return TRANSITION_LEAVING
    return TRANSITION_INVALID


def build_targets(
    window: HistoryWindow,
    map_ctx: MapContext,
    exit_radius: float | None = None,
) -> Targets:
    if exit_radius is None:
        exit_radius = default_exit_radius(map_ctx)
    ox, oy = map_ctx.scene_origin
    ids = window.pivot_agents
    n = len(ids)
    t_pred = window.t_pred
    positions = np.zeros((n, t_pred, 2))
    headings = np.zeros((n, t_pred, 2))
    headings[:, :, 0] = 1.0  # placeholder unit vectors on masked-out steps
    valid = np.zeros((n, t_pred))
    transition = np.zeros(n, dtype=np.int64)
    for i, agent_id in enumerate(ids):
        for t, frame in enumerate(window.future):
            state = frame.agents.get(agent_id)
            if state is None:
                continue
            positions[i, t] = (state.x - ox, state.y - oy)
            headings[i, t] = heading_encode(state.theta)
            valid[i, t] = 1.0
        transition[i] = transition_label(window, agent_id, map_ctx, exit_radius)
    return Targets(positions, headings, valid, transition)
