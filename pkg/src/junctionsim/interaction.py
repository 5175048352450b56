"""Pairwise time-to-collision, interaction graph partitioning, and group sampling.

Agents are grouped by connected components of an undirected graph whose edges
join pairs that are on a collision course soon (TTC below threshold) or simply
close. Training instances are built from randomly sampled unions of groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .scene import AgentAttributes, AgentState, HistoryWindow, MapContext, SceneFrame


class InteractionError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionConfig:
    ttc_threshold: float = 1.0
    distance_threshold: float = 2.0
    ttc_horizon: float = 10.0
    use_proximity_edges: bool = True

    def __post_init__(self):
        if not (self.ttc_threshold >= 0 and self.distance_threshold > 0 and self.ttc_horizon > 0):
            raise InteractionError(f"thresholds must be positive: {self}")
        if self.ttc_threshold > self.ttc_horizon:
            raise InteractionError(
                f"ttc_threshold {self.ttc_threshold} exceeds horizon {self.ttc_horizon}"
            )


@dataclass(frozen=True)
class InteractionPartition:
    """Disjoint, collectively exhaustive agent groups at one pivot frame.

    Groups are ordered by their smallest member id; members are sorted."""

    groups: tuple[tuple[str, ...], ...]
    pivot_frame: int

    def __post_init__(self):
        seen: set[str] = set()
        for group in self.groups:
            for agent_id in group:
                if agent_id in seen:
                    raise InteractionError(f"agent {agent_id!r} appears in two groups")
                seen.add(agent_id)

    @property
    def k(self) -> int:
        return len(self.groups)

    def all_agents(self) -> frozenset[str]:
        return frozenset(a for g in self.groups for a in g)

    def agents_of(self, indices) -> frozenset[str]:
        return frozenset(a for i in indices for a in self.groups[i])


@dataclass(frozen=True)
class SampledInstance:
    """A training window restricted to the union of the sampled groups.

    The map and light states are the full originals; only agent states are
    filtered."""

    selected_group_indices: frozenset[int]
    window: HistoryWindow
    map: MapContext
    attributes: Mapping[str, AgentAttributes]


def pairwise_ttc(
    a: AgentState,
    radius_a: float,
    b: AgentState,
    radius_b: float,
    ttc_horizon: float = math.inf,
) -> float:
    """Smallest t >= 0 at which the bounding circles touch under constant
    velocity, or inf if they never do (or only beyond the horizon).

    Total function: already-overlapping pairs give 0.0.
    """
    dpx = a.x - b.x
    dpy = a.y - b.y
    dvx = a.vx - b.vx
    dvy = a.vy - b.vy
    r = radius_a + radius_b
    c = dpx * dpx + dpy * dpy - r * r
    if c <= 0.0:
        return 0.0
    a2 = dvx * dvx + dvy * dvy
    if a2 == 0.0:
        return math.inf
    b2 = 2.0 * (dpx * dvx + dpy * dvy)
    disc = b2 * b2 - 4.0 * a2 * c
    if disc < 0.0:
        return math.inf
    t = (-b2 - math.sqrt(disc)) / (2.0 * a2)
    if t < 0.0 or t > ttc_horizon:
        return math.inf
    return t


def ttc_matrix(
    pos: np.ndarray, vel: np.ndarray, radii: np.ndarray, ttc_horizon: float
) -> np.ndarray:
    """Vectorized pairwise TTC for N agents; inf on the diagonal and for
    never-colliding pairs. pos/vel are (N, 2), radii (N,)."""
    n = pos.shape[0]
    dp = pos[:, None, :] - pos[None, :, :]
    dv = vel[:, None, :] - vel[None, :, :]
    rsum = radii[:, None] + radii[None, :]
    c = np.einsum("ijk,ijk->ij", dp, dp) - rsum**2
    a2 = np.einsum("ijk,ijk->ij", dv, dv)
    b2 = 2.0 * np.einsum("ijk,ijk->ij", dp, dv)
    out = np.full((n, n), np.inf)
    touching = c <= 0.0
    out[touching] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b2 * b2 - 4.0 * a2 * c
        sqrt_disc = np.sqrt(np.where(disc >= 0.0, disc, np.nan))
        t = (-b2 - sqrt_disc) / (2.0 * a2)
    solvable = (~touching) & (a2 > 0.0) & (disc >= 0.0)
    hit = solvable & (t >= 0.0) & (t <= ttc_horizon)
    out[hit] = t[hit]
    np.fill_diagonal(out, np.inf)
    return out


class _UnionFind:
    def __init__(self, items):
        self.parent = {item: item for item in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # anchor on the smaller id so grouping is order-independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_partition(
    frame: SceneFrame,
    attributes: Mapping[str, AgentAttributes],
    config: InteractionConfig,
) -> InteractionPartition:
    """Partition the agents of `frame` into connected components of the
    TTC/proximity graph. Deterministic: groups ordered by smallest member id."""
    ids = sorted(frame.agents)
    n = len(ids)
    uf = _UnionFind(ids)
    if n > 1:
        pos = np.array([[frame.agents[i].x, frame.agents[i].y] for i in ids])
        vel = np.array([[frame.agents[i].vx, frame.agents[i].vy] for i in ids])
        radii = np.array([attributes[i].bounding_radius for i in ids])
        ttc = ttc_matrix(pos, vel, radii, config.ttc_horizon)
        dist = np.hypot(
            pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1]
        )
        adj = ttc <= config.ttc_threshold
        if config.use_proximity_edges:
            adj |= dist <= config.distance_threshold
        np.fill_diagonal(adj, False)
        for i in range(n):
            for j in range(i + 1, n):
                if adj[i, j]:
                    uf.union(ids[i], ids[j])
    components: dict[str, list[str]] = {}
    for agent_id in ids:
        components.setdefault(uf.find(agent_id), []).append(agent_id)
    groups = tuple(
        tuple(sorted(members))
        for _, members in sorted(components.items(), key=lambda kv: min(kv[1]))
    )
    return InteractionPartition(groups, frame.timestamp_index)


def sample_groups(partition: InteractionPartition, rng) -> frozenset[int]:
    """Sample a nonempty set of group indices, each group kept independently
    with probability 1/2, resampling until nonempty. `rng` is a seed or a
    numpy Generator."""
    if partition.k < 1:
        raise InteractionError("cannot sample from an empty partition")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    while True:
        mask = rng.random(partition.k) < 0.5
        if mask.any():
            return frozenset(int(i) for i in np.nonzero(mask)[0])


def restrict_window(
    window: HistoryWindow,
    selected: frozenset[int],
    partition: InteractionPartition,
    map_ctx: MapContext,
    attributes: Mapping[str, AgentAttributes],
) -> SampledInstance:
    """Filter agent states in every history and future frame down to the union
    of the selected groups (membership frozen at the pivot). Map and lights
    pass through untouched."""
    if not selected:
        raise InteractionError("selected group set must be nonempty")
    if not selected <= set(range(partition.k)):
        raise InteractionError(
            f"selected indices {sorted(selected)} outside 0..{partition.k - 1}"
        )
    keep = partition.agents_of(selected)
    history = tuple(
        f.with_agents({a: s for a, s in f.agents.items() if a in keep})
        for f in window.frames
    )
    future = tuple(
        f.with_agents({a: s for a, s in f.agents.items() if a in keep})
        for f in window.future
    )
    pivot_agents = tuple(a for a in window.pivot_agents if a in keep)
    restricted = HistoryWindow(history, future, pivot_agents, window.t_hist, window.t_pred)
    kept_attrs = {a: attributes[a] for a in sorted(keep)}
    return SampledInstance(frozenset(selected), restricted, map_ctx, kept_attrs)
