"""Scene data model: agents, frames, episodes, windows, and the episode log format.

Everything here is immutable after construction and safe to share across
workers. Mutation happens only by building new frames.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

FRAME_RATE_HZ = 2.5
FRAME_DT = 1.0 / FRAME_RATE_HZ
T_HIST = 10
T_PRED = 10
LOG_FORMAT_VERSION = 1


class SceneError(ValueError):
    """Base class for scene-model validation failures."""


class NonFiniteStateError(SceneError):
    def __init__(self, agent_id: str):
        super().__init__(f"agent {agent_id!r} has a non-finite state component")
        self.agent_id = agent_id


class WindowRangeError(SceneError):
    pass


class DegenerateHeadingError(SceneError):
    pass


class AgentKind(IntEnum):
    MOTORIZED = 0
    NON_MOTORIZED = 1
    PEDESTRIAN = 2


N_KINDS = 3


class LightPhase(IntEnum):
    RED = 0
    GREEN = 1
    YELLOW = 2


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the canonical interval [-pi, pi)."""
    if -math.pi <= theta < math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def heading_encode(theta: float) -> tuple[float, float]:
    return (math.cos(theta), math.sin(theta))


def heading_decode(cos_t: float, sin_t: float) -> float:
    """Recover the canonical heading angle from a (possibly unnormalized) vector."""
    norm = math.hypot(cos_t, sin_t)
    if not norm > 1e-6:
        raise DegenerateHeadingError(
            f"heading vector ({cos_t}, {sin_t}) has norm {norm}, cannot decode"
        )
    theta = math.atan2(sin_t / norm, cos_t / norm)
    return wrap_angle(theta)


@dataclass(frozen=True)
class AgentState:
    """Kinematic state of one agent at one frame.

    Positions are meters in scene coordinates, velocities m/s, heading
    radians in [-pi, pi). The unit-vector heading encoding is derived.
    """

    x: float
    y: float
    vx: float
    vy: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def heading_vec(self) -> tuple[float, float]:
        return heading_encode(self.theta)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v) for v in (self.x, self.y, self.vx, self.vy, self.theta)
        )

    def translated(self, dx: float, dy: float) -> "AgentState":
        return AgentState(self.x + dx, self.y + dy, self.vx, self.vy, self.theta)


@dataclass(frozen=True)
class AgentAttributes:
    agent_id: str
    kind: AgentKind
    length: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise SceneError(
                f"agent {self.agent_id!r}: size must be positive, got "
                f"({self.length}, {self.width}, {self.height})"
            )

    @property
    def bounding_radius(self) -> float:
        return 0.5 * math.sqrt(self.length**2 + self.width**2)


@dataclass(frozen=True)
class TrafficLightState:
    light_id: int
    phase: LightPhase


@dataclass(frozen=True)
class RoutePolyline:
    route_id: int
    points: tuple[tuple[float, float], ...]
    allowed_kinds: frozenset[AgentKind]

    def __post_init__(self):
        if len(self.points) < 2:
            raise SceneError(f"route {self.route_id}: polyline needs >= 2 points")
        for a, b in zip(self.points, self.points[1:]):
            if a == b:
                raise SceneError(f"route {self.route_id}: consecutive points identical")

    @property
    def length(self) -> float:
        return sum(
            math.hypot(b[0] - a[0], b[1] - a[1])
            for a, b in zip(self.points, self.points[1:])
        )


@dataclass(frozen=True)
class TrafficLight:
    """Static definition of one signal head: where it is and what it governs."""

    light_id: int
    position: tuple[float, float]
    governed_routes: tuple[int, ...]


@dataclass(frozen=True)
class MapContext:
    routes: tuple[RoutePolyline, ...]
    lights: tuple[TrafficLight, ...]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    scene_origin: tuple[float, float]

    def validate(self) -> None:
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise SceneError(f"degenerate bounds {self.bounds}")
        margin = 10.0
        for route in self.routes:
            for px, py in route.points:
                if not (
                    xmin - margin <= px <= xmax + margin
                    and ymin - margin <= py <= ymax + margin
                ):
                    raise SceneError(
                        f"route {route.route_id} point ({px}, {py}) outside "
                        f"bounds {self.bounds} + {margin} m margin"
                    )
        ids = [l.light_id for l in self.lights]
        if ids != sorted(set(ids)):
            raise SceneError("light ids must be unique and sorted")


@dataclass(frozen=True)
class SceneFrame:
    """All agent states and light phases at one frame index (2.5 Hz clock)."""

    timestamp_index: int
    agents: Mapping[str, AgentState]
    light_states: tuple[TrafficLightState, ...]

    def agent_ids(self) -> list[str]:
        return sorted(self.agents)

    def with_agents(self, agents: Mapping[str, AgentState]) -> "SceneFrame":
        return SceneFrame(self.timestamp_index, dict(agents), self.light_states)


@dataclass
class Episode:
    map: MapContext
    attributes: dict[str, AgentAttributes]
    frames: list[SceneFrame]
    frame_rate_hz: float = FRAME_RATE_HZ

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        self.map.validate()
        n_lights = len(self.map.lights)
        first_seen: dict[str, int] = {}
        last_seen: dict[str, int] = {}
        for i, frame in enumerate(self.frames):
            if i > 0 and frame.timestamp_index != self.frames[i - 1].timestamp_index + 1:
                raise SceneError(
                    f"frame {i}: timestamp {frame.timestamp_index} does not follow "
                    f"{self.frames[i - 1].timestamp_index}"
                )
            covered = sorted(ls.light_id for ls in frame.light_states)
            if covered != list(range(n_lights)):
                raise SceneError(
                    f"frame {frame.timestamp_index}: light states cover {covered}, "
                    f"expected every light in 0..{n_lights - 1} exactly once"
                )
            for agent_id in frame.agents:
                if agent_id not in self.attributes:
                    raise SceneError(f"agent {agent_id!r} has no attributes entry")
                first_seen.setdefault(agent_id, i)
                last_seen[agent_id] = i
        for agent_id, first in first_seen.items():
            for i in range(first, last_seen[agent_id] + 1):
                if agent_id not in self.frames[i].agents:
                    raise SceneError(
                        f"agent {agent_id!r} presence is not contiguous "
                        f"(absent at frame index {i})"
                    )

    def presence_interval(self, agent_id: str) -> tuple[int, int]:
        """First and last frame list-index where the agent appears."""
        first = last = None
        for i, frame in enumerate(self.frames):
            if agent_id in frame.agents:
                if first is None:
                    first = i
                last = i
        if first is None:
            raise SceneError(f"agent {agent_id!r} never appears")
        return first, last


@dataclass(frozen=True)
class HistoryWindow:
    """A history slice of exactly t_hist frames ending at the pivot, plus the
    ground-truth future of t_pred frames. Pivot agents are those present at the
    pivot frame; their earlier absences are representable via presence_mask."""

    frames: tuple[SceneFrame, ...]
    future: tuple[SceneFrame, ...]
    pivot_agents: tuple[str, ...]
    t_hist: int = T_HIST
    t_pred: int = T_PRED

    def __post_init__(self):
        if len(self.frames) != self.t_hist:
            raise SceneError(
                f"window has {len(self.frames)} history frames, expected {self.t_hist}"
            )
        pivot = self.frames[-1]
        for agent_id in self.pivot_agents:
            if agent_id not in pivot.agents:
                raise SceneError(f"pivot agent {agent_id!r} absent from pivot frame")

    @property
    def pivot_frame(self) -> SceneFrame:
        return self.frames[-1]

    def presence_mask(self, agent_id: str) -> tuple[int, ...]:
        return tuple(1 if agent_id in f.agents else 0 for f in self.frames)


def normalize_frame(frame: SceneFrame, origin: tuple[float, float]) -> SceneFrame:
    """Translate all agent positions by -origin; velocities and headings unchanged."""
    ox, oy = origin
    if not (math.isfinite(ox) and math.isfinite(oy)):
        raise SceneError(f"origin {origin} is not finite")
    agents = {}
    for agent_id in sorted(frame.agents):
        state = frame.agents[agent_id]
        if not state.is_finite():
            raise NonFiniteStateError(agent_id)
        agents[agent_id] = state.translated(-ox, -oy)
    return SceneFrame(frame.timestamp_index, agents, frame.light_states)


def denormalize_frame(frame: SceneFrame, origin: tuple[float, float]) -> SceneFrame:
    return normalize_frame(frame, (-origin[0], -origin[1]))


def slice_window(episode: Episode, t: int, t_hist: int = T_HIST, t_pred: int = T_PRED) -> HistoryWindow:
    """Cut history frames [t - t_hist + 1, t] and future frames [t + 1, t + t_pred].

    `t` is an index into episode.frames.
    """
    lo = t_hist - 1
    hi = len(episode.frames) - t_pred - 1
    if not lo <= t <= hi:
        raise WindowRangeError(
            f"pivot t={t} out of range; valid interval is [{lo}, {hi}] "
            f"for {len(episode.frames)} frames (t_hist={t_hist}, t_pred={t_pred})"
        )
    history = tuple(episode.frames[t - t_hist + 1 : t + 1])
    future = tuple(episode.frames[t + 1 : t + 1 + t_pred])
    pivot_agents = tuple(sorted(history[-1].agents))
    return HistoryWindow(history, future, pivot_agents, t_hist, t_pred)


# ---------------------------------------------------------------------------
# Episode log format: JSON lines, header first, one frame per line.
# ---------------------------------------------------------------------------

def _map_to_dict(map_ctx: MapContext) -> dict:
    return {
        "routes": [
            {
                "route_id": r.route_id,
                "points": [[px, py] for px, py in r.points],
                "allowed_kinds": sorted(int(k) for k in r.allowed_kinds),
            }
            for r in map_ctx.routes
        ],
        "lights": [
            {
                "light_id": l.light_id,
                "position": [l.position[0], l.position[1]],
                "governed_routes": list(l.governed_routes),
            }
            for l in map_ctx.lights
        ],
        "bounds": list(map_ctx.bounds),
        "scene_origin": list(map_ctx.scene_origin),
    }


def _map_from_dict(d: dict) -> MapContext:
    routes = tuple(
        RoutePolyline(
            route_id=r["route_id"],
            points=tuple((p[0], p[1]) for p in r["points"]),
            allowed_kinds=frozenset(AgentKind(k) for k in r["allowed_kinds"]),
        )
        for r in d["routes"]
    )
    lights = tuple(
        TrafficLight(
            light_id=l["light_id"],
            position=(l["position"][0], l["position"][1]),
            governed_routes=tuple(l["governed_routes"]),
        )
        for l in d["lights"]
    )
    return MapContext(
        routes=routes,
        lights=lights,
        bounds=tuple(d["bounds"]),
        scene_origin=tuple(d["scene_origin"]),
    )


def _frame_to_dict(frame: SceneFrame) -> dict:
    return {
        "t": frame.timestamp_index,
        "agents": {
            agent_id: {
                "x": s.x,
                "y": s.y,
                "vx": s.vx,
                "vy": s.vy,
                "theta": s.theta,
            }
            for agent_id, s in sorted(frame.agents.items())
        },
        "lights": [int(ls.phase) for ls in frame.light_states],
    }


def _frame_from_dict(d: dict) -> SceneFrame:
    agents = {
        agent_id: AgentState(s["x"], s["y"], s["vx"], s["vy"], s["theta"])
        for agent_id, s in d["agents"].items()
    }
    lights = tuple(
        TrafficLightState(i, LightPhase(p)) for i, p in enumerate(d["lights"])
    )
    return SceneFrame(d["t"], agents, lights)


def write_episode(episode: Episode, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format_version": LOG_FORMAT_VERSION,
            "frame_rate_hz": episode.frame_rate_hz,
            "map": _map_to_dict(episode.map),
            "attributes": {
                agent_id: {
                    "kind": int(a.kind),
                    "length": a.length,
                    "width": a.width,
                    "height": a.height,
                }
                for agent_id, a in sorted(episode.attributes.items())
            },
        }
        fh.write(json.dumps(header) + "\n")
        for frame in episode.frames:
            fh.write(json.dumps(_frame_to_dict(frame)) + "\n")


def read_episode(path, validate: bool = True) -> Episode:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise SceneError(f"{path}: empty episode file")
        header = json.loads(header_line)
        if header.get("format_version") != LOG_FORMAT_VERSION:
            raise SceneError(
                f"{path}: unsupported format_version {header.get('format_version')}"
            )
        attributes = {
            agent_id: AgentAttributes(
                agent_id=agent_id,
                kind=AgentKind(a["kind"]),
                length=a["length"],
                width=a["width"],
                height=a["height"],
            )
            for agent_id, a in header["attributes"].items()
        }
        episode = Episode(
            map=_map_from_dict(header["map"]),
            attributes=attributes,
            frames=[_frame_from_dict(json.loads(line)) for line in fh if line.strip()],
            frame_rate_hz=header["frame_rate_hz"],
        )
    if validate:
        episode.validate()
    return episode
