"""Rule-based generator of signalized-intersection episodes.

A four-arm intersection with two lanes per approach, a two-phase signal,
motorized vehicles, non-motorized vehicles on edge lanes, and pedestrians on
crosswalks. Agents follow fixed route polylines with gap-keeping longitudinal
control, stop-line compliance, conflict-box first-in-first-served entry, and
crosswalk yielding. This is the data source and statistical reference for the
learning pipeline, not a contribution in itself, so the behavior rules stay
deliberately small.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .interaction import ttc_matrix
from .scene import (
    AgentAttributes,
    AgentKind,
    AgentState,
    Episode,
    FRAME_DT,
    FRAME_RATE_HZ,
    LightPhase,
    MapContext,
    RoutePolyline,
    SceneFrame,
    TrafficLight,
    TrafficLightState,
    wrap_angle,
)


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    arm_count: int = 4
    lanes_per_approach: int = 2
    green_s: float = 20.0
    yellow_s: float = 3.0
    red_s: float = 23.0
    # agents/minute per kind (MV, NMV, pedestrian); defaults match the target
    # category mix of 54.2 / 43.3 / 2.5 percent at 24 agents/minute overall,
    # which keeps the junction below its capacity cliff
    spawn_rates_per_minute: tuple[float, float, float] = (13.008, 10.392, 0.6)
    kind_mix: tuple[float, float, float] = (0.542, 0.433, 0.025)
    episode_frames: int = 250
    # simulate-and-discard prefix so logged episodes start with settled traffic
    warmup_frames: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.arm_count != 4:
            raise WorldError("only four-arm intersections are supported")
        if self.lanes_per_approach != 2:
            raise WorldError("only two lanes per approach are supported")
        if abs(sum(self.kind_mix) - 1.0) > 1e-9:
            raise WorldError(f"kind mix {self.kind_mix} does not sum to 1")
        if any(r < 0 for r in self.spawn_rates_per_minute):
            raise WorldError("spawn rates must be >= 0")
        if min(self.green_s, self.yellow_s) <= 0 or self.red_s <= 0:
            raise WorldError("signal phase durations must be positive")
        if self.red_s + 1e-9 < self.green_s + self.yellow_s:
            raise WorldError(
                "red must cover the cross axis green+yellow, otherwise both "
                "axes would show green at once"
            )
        if self.episode_frames < 1:
            raise WorldError("episode_frames must be >= 1")
        if self.warmup_frames < 0:
            raise WorldError("warmup_frames must be >= 0")


@dataclass(frozen=True)
class BehaviorProfile:
    desired_speed: tuple[float, float, float] = (8.0, 3.5, 1.3)
    accel_limit: tuple[float, float, float] = (3.0, 1.8, 0.8)
    brake_limit: tuple[float, float, float] = (4.0, 2.5, 1.0)
    reaction_gap_s: float = 1.6
    min_gap_m: float = 2.0
    red_running_probability: float = 0.05
    speed_factor_range: tuple[float, float] = (0.85, 1.15)

    def __post_init__(self):
        if any(v <= 0 for v in self.desired_speed):
            raise WorldError("desired speeds must be positive")
        if not 0.0 <= self.red_running_probability <= 1.0:
            raise WorldError("red_running_probability must lie in [0, 1]")


AGENT_SIZES = {
    AgentKind.MOTORIZED: (4.5, 1.8, 1.5),
    AgentKind.NON_MOTORIZED: (1.8, 0.6, 1.6),
    AgentKind.PEDESTRIAN: (0.5, 0.5, 1.7),
}

LANE_WIDTH = 3.5
HALF_BOX = 9.0           # conflict-zone half extent
STOP_LINE_DIST = 12.0    # stop line distance from center
CROSSWALK_DIST = 10.5    # crosswalk centerline distance from center
CROSSWALK_HALF_SPAN = 12.5  # includes sidewalk aprons clear of the guard zones
APPROACH_RADIUS = 63.0   # routes start/end slightly beyond the 60 m bounds
BOUNDS = (-60.0, -60.0, 60.0, 60.0)
# lane centers sit a median-width apart so opposing streams clear each
# other's bounding circles (MV radius 2.42 m)
INNER_LANE = 2.5
OUTER_LANE = 6.0
NMV_LANE = 7.9           # edge lane

MOVEMENT_SHARES = (("through", 0.6), ("left", 0.2), ("right", 0.2))


def _rot90(x: float, y: float, k: int) -> tuple[float, float]:
    for _ in range(k % 4):
        x, y = -y, x
    return x, y


def _straight(p0, p1, step=7.0):
    dist = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    n = max(2, int(math.ceil(dist / step)) + 1)
    return [
        (p0[0] + (p1[0] - p0[0]) * i / (n - 1), p0[1] + (p1[1] - p0[1]) * i / (n - 1))
        for i in range(n)
    ]


def _arc(center, radius, a0_deg, a1_deg, step_deg=12.0):
    n = max(2, int(math.ceil(abs(a1_deg - a0_deg) / step_deg)) + 1)
    pts = []
    for i in range(n):
        a = math.radians(a0_deg + (a1_deg - a0_deg) * i / (n - 1))
        pts.append((center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)))
    return pts


def _join(*segments):
    pts: list[tuple[float, float]] = []
    for seg in segments:
        for p in seg:
            if pts and math.hypot(p[0] - pts[-1][0], p[1] - pts[-1][1]) < 1e-9:
                continue
            pts.append(p)
    return pts


class _Route:
    """A polyline with arc-length bookkeeping and control landmarks."""

    __slots__ = (
        "route_id", "kind", "arm", "movement", "pts", "cum", "length",
        "s_stop", "s_box_entry", "s_box_exit", "approach_key", "exit_key",
        "conflicts", "crosswalk_guards",
    )

    def __init__(self, route_id, kind, arm, movement, pts):
        self.route_id = route_id
        self.kind = kind
        self.arm = arm
        self.movement = movement
        self.pts = pts
        cum = [0.0]
        for a, b in zip(pts, pts[1:]):
            cum.append(cum[-1] + math.hypot(b[0] - a[0], b[1] - a[1]))
        self.cum = cum
        self.length = cum[-1]
        self.conflicts: set[int] = set()
        self.crosswalk_guards: list[tuple[int, float, float, float]] = []

    def at(self, s: float) -> tuple[float, float, float]:
        """Position and tangent heading at arc length s (clamped)."""
        s = min(max(s, 0.0), self.length)
        i = bisect.bisect_right(self.cum, s) - 1
        i = min(i, len(self.pts) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        frac = (s - self.cum[i]) / seg if seg > 0 else 0.0
        ax, ay = self.pts[i]
        bx, by = self.pts[i + 1]
        x = ax + (bx - ax) * frac
        y = ay + (by - ay) * frac
        theta = math.atan2(by - ay, bx - ax)
        return x, y, theta

    def box_interval(self) -> tuple[float, float]:
        """First entry into and last exit from the conflict box, by sampling."""
        inside = []
        s = 0.0
        while s <= self.length:
            x, y, _ = self.at(s)
            if max(abs(x), abs(y)) <= HALF_BOX:
                inside.append(s)
            s += 0.25
        if not inside:
            return math.inf, math.inf
        return inside[0], inside[-1]


def _axis_of_arm(arm: int) -> int:
    return arm % 2  # E/W share axis 0, N/S share axis 1


class WorldGeometry:
    """All static structure: routes, landmarks, conflict matrix, map context."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.routes: dict[int, _Route] = {}
        rid = 0
        canonical = {
            ("mv", "through"): _straight((APPROACH_RADIUS, INNER_LANE), (-APPROACH_RADIUS, INNER_LANE)),
            ("mv", "left"): _join(
                _straight((APPROACH_RADIUS, INNER_LANE), (HALF_BOX, INNER_LANE)),
                _arc((HALF_BOX, -HALF_BOX), HALF_BOX + INNER_LANE, 90.0, 180.0),
                _straight((-INNER_LANE, -HALF_BOX), (-INNER_LANE, -APPROACH_RADIUS)),
            ),
            ("mv", "right"): _join(
                _straight((APPROACH_RADIUS, OUTER_LANE), (HALF_BOX, OUTER_LANE)),
                _arc((HALF_BOX, HALF_BOX), HALF_BOX - OUTER_LANE, -90.0, -180.0),
                _straight((OUTER_LANE, HALF_BOX), (OUTER_LANE, APPROACH_RADIUS)),
            ),
            ("nmv", "through"): _straight((APPROACH_RADIUS, NMV_LANE), (-APPROACH_RADIUS, NMV_LANE)),
            ("nmv", "left"): _join(
                _straight((APPROACH_RADIUS, NMV_LANE), (HALF_BOX, NMV_LANE)),
                _arc((HALF_BOX, -HALF_BOX), HALF_BOX + NMV_LANE, 90.0, 180.0),
                _straight((-NMV_LANE, -HALF_BOX), (-NMV_LANE, -APPROACH_RADIUS)),
            ),
            ("nmv", "right"): _join(
                _straight((APPROACH_RADIUS, NMV_LANE), (HALF_BOX, NMV_LANE)),
                _arc((HALF_BOX, HALF_BOX), HALF_BOX - NMV_LANE, -90.0, -180.0),
                _straight((NMV_LANE, HALF_BOX), (NMV_LANE, APPROACH_RADIUS)),
            ),
            ("ped", "cross"): _straight(
                (CROSSWALK_DIST, -CROSSWALK_HALF_SPAN), (CROSSWALK_DIST, CROSSWALK_HALF_SPAN), step=2.4
            ),
        }
        exit_arm_delta = {"through": 2, "left": 3, "right": 1, "cross": None}
        exit_lateral = {
            ("mv", "through"): INNER_LANE, ("mv", "left"): INNER_LANE, ("mv", "right"): OUTER_LANE,
            ("nmv", "through"): NMV_LANE, ("nmv", "left"): NMV_LANE, ("nmv", "right"): NMV_LANE,
        }
        self.vehicle_routes_by_arm: dict[tuple[int, str], dict[str, int]] = {}
        self.ped_route_by_arm: dict[int, int] = {}
        for arm in range(4):
            for (kind, movement), pts in canonical.items():
                rotated = [_rot90(x, y, arm) for x, y in pts]
                route = _Route(rid, kind, arm, movement, rotated)
                if kind == "ped":
                    route.s_stop = math.inf
                    route.s_box_entry, route.s_box_exit = math.inf, math.inf
                    route.approach_key = route.exit_key = ("ped", arm)
                    self.ped_route_by_arm[arm] = rid
                else:
                    route.s_stop = APPROACH_RADIUS - STOP_LINE_DIST
                    route.s_box_entry, route.s_box_exit = route.box_interval()
                    lateral = {"through": INNER_LANE, "left": INNER_LANE, "right": OUTER_LANE}[movement]
                    if kind == "nmv":
                        lateral = NMV_LANE
                    route.approach_key = ("in", arm, lateral)
                    route.exit_key = (
                        "out", (arm + exit_arm_delta[movement]) % 4, exit_lateral[(kind, movement)],
                    )
                    self.vehicle_routes_by_arm.setdefault((arm, kind), {})[movement] = rid
                self.routes[rid] = route
                rid += 1
        self._compute_conflicts()
        self._compute_crosswalk_guards()

    def _box_samples(self, route: _Route, step=0.5):
        lo, hi = route.s_box_entry, route.s_box_exit
        if not math.isfinite(lo):
            return []
        out = []
        s = lo
        while s <= hi:
            x, y, _ = route.at(s)
            out.append((x, y))
            s += step
        return out

    def _compute_conflicts(self):
        vehicle_routes = [r for r in self.routes.values() if r.kind != "ped"]
        samples = {r.route_id: self._box_samples(r) for r in vehicle_routes}
        for i, ra in enumerate(vehicle_routes):
            for rb in vehicle_routes[i + 1 :]:
                if ra.approach_key == rb.approach_key or ra.exit_key == rb.exit_key:
                    continue
                pa, pb = samples[ra.route_id], samples[rb.route_id]
                if not pa or not pb:
                    continue
                close = any(
                    (ax - bx) ** 2 + (ay - by) ** 2 < 2.2**2
                    for ax, ay in pa
                    for bx, by in pb
                )
                if close:
                    ra.conflicts.add(rb.route_id)
                    rb.conflicts.add(ra.route_id)

    def _compute_crosswalk_guards(self):
        for route in self.routes.values():
            if route.kind == "ped":
                continue
            for arm, ped_rid in self.ped_route_by_arm.items():
                ped = self.routes[ped_rid]
                # segment of the crosswalk centerline
                (cx0, cy0), (cx1, cy1) = ped.pts[0], ped.pts[-1]
                seg_len = math.hypot(cx1 - cx0, cy1 - cy0)
                ux, uy = (cx1 - cx0) / seg_len, (cy1 - cy0) / seg_len
                s = 0.0
                s_hits, p_hits = [], []
                while s <= route.length:
                    x, y, _ = route.at(s)
                    proj = (x - cx0) * ux + (y - cy0) * uy
                    proj_clamped = min(max(proj, 0.0), seg_len)
                    px, py = cx0 + ux * proj_clamped, cy0 + uy * proj_clamped
                    if math.hypot(x - px, y - py) <= 1.2:
                        s_hits.append(s)
                        p_hits.append(proj_clamped)
                    s += 0.5
                if s_hits:
                    route.crosswalk_guards.append(
                        (ped_rid, s_hits[0], min(p_hits) - 1.5, max(p_hits) + 1.5)
                    )

    def map_context(self) -> MapContext:
        kind_of = {
            "mv": frozenset({AgentKind.MOTORIZED}),
            "nmv": frozenset({AgentKind.NON_MOTORIZED}),
            "ped": frozenset({AgentKind.PEDESTRIAN}),
        }
        polylines = tuple(
            RoutePolyline(r.route_id, tuple(r.pts), kind_of[r.kind])
            for r in self.routes.values()
        )
        lights = []
        for arm in range(4):
            lx, ly = _rot90(STOP_LINE_DIST, HALF_BOX + 1.0, arm)
            governed = tuple(
                r.route_id
                for r in self.routes.values()
                if r.kind != "ped" and r.arm == arm
            )
            lights.append(TrafficLight(arm, (lx, ly), governed))
        return MapContext(polylines, tuple(lights), BOUNDS, (0.0, 0.0))


def signal_phase(config: WorldConfig, axis: int, time_s: float) -> LightPhase:
    """Two-phase cycle: axis 0 leads, axis 1 runs while axis 0 is red."""
    cycle = config.green_s + config.yellow_s + config.red_s
    t = math.fmod(time_s, cycle)
    if axis == 1:
        t = math.fmod(t + cycle - (config.green_s + config.yellow_s), cycle)
    if t < config.green_s:
        return LightPhase.GREEN
    if t < config.green_s + config.yellow_s:
        return LightPhase.YELLOW
    return LightPhase.RED


class _Agent:
    __slots__ = (
        "agent_id", "kind", "route", "direction", "s", "v", "speed_factor",
        "runner", "length", "prev_pos", "claim_frame", "committed",
    )

    def __init__(self, agent_id, kind, route, direction, v0, speed_factor, runner, length):
        self.agent_id = agent_id
        self.kind = kind
        self.route = route
        self.direction = direction
        self.s = 0.0
        self.v = v0
        self.speed_factor = speed_factor
        self.runner = runner
        self.length = length
        self.prev_pos = None
        self.claim_frame = None
        self.committed = False

    def polyline_s(self) -> float:
        return self.s if self.direction > 0 else self.route.length - self.s

    def position(self) -> tuple[float, float, float]:
        x, y, theta = self.route.at(self.polyline_s())
        if self.direction < 0:
            theta = wrap_angle(theta + math.pi)
        return x, y, theta


def _stop_envelope(dist: float, brake: float) -> float:
    """Speed that still allows a comfortable stop `dist` meters ahead."""
    if dist <= 0.0:
        return 0.0
    return math.sqrt(2.0 * brake * dist)


def generate_episode(world: WorldConfig, profile: BehaviorProfile) -> Episode:
    """Simulate one episode; deterministic for a given (config, seed)."""
    geometry = WorldGeometry(world)
    map_ctx = geometry.map_context()
    rng = np.random.default_rng(world.seed)
    dt = FRAME_DT
    rates_per_frame = [r / 60.0 * dt for r in world.spawn_rates_per_minute]
    kinds = (AgentKind.MOTORIZED, AgentKind.NON_MOTORIZED, AgentKind.PEDESTRIAN)
    kind_tag = {AgentKind.MOTORIZED: "mv", AgentKind.NON_MOTORIZED: "nmv"}

    agents: dict[str, _Agent] = {}
    attributes: dict[str, AgentAttributes] = {}
    frames: list[SceneFrame] = []
    counter = 0
    move_names = [m for m, _ in MOVEMENT_SHARES]
    move_probs = [p for _, p in MOVEMENT_SHARES]
    pending: list[_Agent] = []  # drawn spawns waiting for headway at their entry

    def draw_spawn(kind: AgentKind) -> _Agent:
        nonlocal counter
        arm = int(rng.integers(4))
        factor = float(rng.uniform(*profile.speed_factor_range))
        if kind is AgentKind.PEDESTRIAN:
            direction = 1 if rng.random() < 0.5 else -1
            route = geometry.routes[geometry.ped_route_by_arm[arm]]
            runner = False
        else:
            movement = move_names[int(rng.choice(len(move_names), p=move_probs))]
            route = geometry.routes[
                geometry.vehicle_routes_by_arm[(arm, kind_tag[kind])][movement]
            ]
            direction = 1
            runner = (
                kind is AgentKind.NON_MOTORIZED
                and rng.random() < profile.red_running_probability
            )
        counter += 1
        size = AGENT_SIZES[kind]
        v0 = profile.desired_speed[int(kind)] * factor
        return _Agent(f"a{counter:05d}", kind, route, direction, v0, factor, runner, size[0])

    def entry_clear(candidate: _Agent) -> bool:
        for other in agents.values():
            same_lane = (
                other.route.route_id == candidate.route.route_id
                or other.route.approach_key == candidate.route.approach_key
            )
            if same_lane and other.direction == candidate.direction and other.s < 14.0:
                return False
        return True

    for t in range(world.warmup_frames + world.episode_frames):
        time_s = t * dt
        phases = {arm: signal_phase(world, _axis_of_arm(arm), time_s) for arm in range(4)}

        # --- spawning: drawn arrivals queue until their entry point is clear --
        for ki, kind in enumerate(kinds):
            for _ in range(int(rng.poisson(rates_per_frame[ki]))):
                pending.append(draw_spawn(kind))
        still_pending = []
        entered_keys: set = set()
        for candidate in pending:
            key = (candidate.route.approach_key, candidate.direction)
            if key not in entered_keys and entry_clear(candidate):
                attributes[candidate.agent_id] = AgentAttributes(
                    candidate.agent_id, candidate.kind, *AGENT_SIZES[candidate.kind]
                )
                agents[candidate.agent_id] = candidate
                entered_keys.add(key)
            else:
                still_pending.append(candidate)
        pending = still_pending

        # --- control --------------------------------------------------------
        ordered = sorted(agents)
        by_route: dict[int, list[_Agent]] = {}
        by_approach: dict[tuple, list[_Agent]] = {}
        by_exit: dict[tuple, list[_Agent]] = {}
        box_occupants: list[_Agent] = []
        ped_positions: dict[int, list[float]] = {}
        for aid in ordered:
            ag = agents[aid]
            by_route.setdefault(ag.route.route_id, []).append(ag)
            if ag.kind is AgentKind.PEDESTRIAN:
                ped_positions.setdefault(ag.route.route_id, []).append(ag.polyline_s())
                continue
            if ag.s <= ag.route.s_box_entry:
                by_approach.setdefault(ag.route.approach_key, []).append(ag)
            elif ag.s <= ag.route.s_box_exit:
                box_occupants.append(ag)
            else:
                by_exit.setdefault(ag.route.exit_key, []).append(ag)

        # conflict-box claims: only the front agent of each approach lane may
        # claim, first come first served; red-runners rank behind everyone
        # moving on a green
        front: dict[tuple, _Agent] = {}
        for key, members in by_approach.items():
            best = None
            for ag in members:
                if ag.route.s_box_entry - ag.s > 25.0:
                    continue
                if best is None or ag.s > best.s:
                    best = ag
            if best is not None:
                front[key] = best
        claimants = []
        for aid in ordered:
            ag = agents[aid]
            if ag.kind is AgentKind.PEDESTRIAN:
                continue
            route = ag.route
            if front.get(route.approach_key) is not ag:
                ag.claim_frame = None
                continue
            phase = phases[route.arm]
            has_signal_priority = (
                phase is LightPhase.GREEN or ag.committed or ag.s > route.s_stop
            )
            if not (has_signal_priority or ag.runner):
                ag.claim_frame = None
                continue
            if ag.claim_frame is None:
                ag.claim_frame = t
            claimants.append((0 if has_signal_priority else 1, ag))
        claimants.sort(key=lambda pair: (pair[0], pair[1].claim_frame, pair[1].agent_id))
        claimants = [ag for _, ag in claimants]
        granted: list[_Agent] = []
        blocked_routes: list[int] = []
        occupant_routes = [a.route.route_id for a in box_occupants]
        for ag in claimants:
            route = ag.route
            conflicts = route.conflicts
            # no entry while the exit-side crosswalk is occupied: vehicles
            # must be able to clear the box without stopping inside it
            exit_blocked = any(
                s_guard > route.s_box_entry
                and any(p_lo <= p <= p_hi for p in ped_positions.get(ped_rid, []))
                for ped_rid, s_guard, p_lo, p_hi in route.crosswalk_guards
            )
            # strict first-come-first-served: nobody may overtake a blocked
            # earlier claimant whose path crosses theirs
            if (
                exit_blocked
                or any(rid in conflicts for rid in occupant_routes)
                or any(g.route.route_id in conflicts for g in granted)
                or any(rid in conflicts for rid in blocked_routes)
            ):
                blocked_routes.append(route.route_id)
                continue
            granted.append(ag)
        granted_ids = {a.agent_id for a in granted}

        moves: dict[str, tuple[float, float]] = {}
        for aid in ordered:
            ag = agents[aid]
            ki = int(ag.kind)
            v_des = profile.desired_speed[ki] * ag.speed_factor
            accel = profile.accel_limit[ki]
            brake = profile.brake_limit[ki]
            targets = [v_des]
            hard_limit = None  # absolute cap on s after the move

            if ag.kind is AgentKind.PEDESTRIAN:
                # hold on the sidewalk apron until the arm's vehicle signal is red
                curb = 1.0
                if ag.s <= curb and phases[ag.route.arm] is not LightPhase.RED:
                    targets.append(0.0)
                    hard_limit = curb
            else:
                route = ag.route
                # follow the closest leader on the shared path
                best_gap = None
                for cand in by_route.get(route.route_id, []):
                    if cand is not ag and cand.s > ag.s:
                        gap = cand.s - ag.s
                        best_gap = gap if best_gap is None else min(best_gap, gap)
                if ag.s <= route.s_box_entry:
                    for cand in by_approach.get(route.approach_key, []):
                        if cand is not ag and cand.route.route_id != route.route_id and cand.s > ag.s:
                            gap = cand.s - ag.s
                            best_gap = gap if best_gap is None else min(best_gap, gap)
                    # leaders already in the box on a route sharing this approach
                    for cand in box_occupants:
                        if cand.route.approach_key == route.approach_key and cand.route.route_id != route.route_id:
                            gap = (route.s_box_entry - ag.s) + (cand.s - cand.route.s_box_entry)
                            if gap > 0:
                                best_gap = gap if best_gap is None else min(best_gap, gap)
                elif ag.s > route.s_box_exit:
                    d_end = route.length - ag.s
                    for cand in by_exit.get(route.exit_key, []):
                        if cand is not ag and cand.route.route_id != route.route_id:
                            their = cand.route.length - cand.s
                            gap = d_end - their
                            if gap > 0:
                                best_gap = gap if best_gap is None else min(best_gap, gap)
                if best_gap is not None:
                    bumper = best_gap - ag.length
                    targets.append(max(0.0, (bumper - profile.min_gap_m) / profile.reaction_gap_s))

                # signal handling before the stop line
                if ag.s < route.s_stop and not ag.runner:
                    phase = phases[route.arm]
                    d_line = route.s_stop - ag.s - 0.3
                    if phase is LightPhase.RED:
                        targets.append(_stop_envelope(d_line, brake))
                        hard_limit = route.s_stop - 0.05
                        ag.committed = False
                    elif phase is LightPhase.YELLOW:
                        if ag.committed:
                            pass
                        elif d_line > (ag.v * ag.v) / (2.0 * brake):
                            targets.append(_stop_envelope(d_line, brake))
                            hard_limit = route.s_stop - 0.05
                        else:
                            ag.committed = True
                    else:
                        ag.committed = False

                # conflict-box gate
                if ag.s <= route.s_box_entry and ag.agent_id not in granted_ids:
                    d_entry = route.s_box_entry - ag.s - 0.3
                    targets.append(_stop_envelope(d_entry, brake))
                    entry_limit = route.s_box_entry - 0.05
                    hard_limit = entry_limit if hard_limit is None else min(hard_limit, entry_limit)

                # yield to pedestrians occupying a crosswalk ahead; exit-side
                # crosswalks are handled at the box gate instead, because
                # stopping for them here would strand the vehicle in the box
                for ped_rid, s_guard, p_lo, p_hi in route.crosswalk_guards:
                    if s_guard > route.s_box_entry and ag.s > route.s_box_entry:
                        continue
                    if ag.s >= s_guard - 0.6 or s_guard - ag.s > 18.0:
                        continue
                    if s_guard > route.s_box_entry:
                        continue  # covered by the entry gate while approaching
                    occupied = any(
                        p_lo <= p <= p_hi for p in ped_positions.get(ped_rid, [])
                    )
                    if occupied:
                        targets.append(_stop_envelope(s_guard - ag.s - 0.8, brake))
                        guard_limit = s_guard - 0.4
                        hard_limit = guard_limit if hard_limit is None else min(hard_limit, guard_limit)

            v_cmd = max(0.0, min(targets))
            v_new = min(ag.v + accel * dt, max(ag.v - brake * dt, v_cmd))
            v_new = min(v_new, v_des)
            s_new = ag.s + v_new * dt
            if hard_limit is not None and ag.s <= hard_limit:
                if s_new > hard_limit:
                    s_new = hard_limit
                    v_new = max(0.0, (s_new - ag.s) / dt)
            moves[aid] = (s_new, v_new)

        # --- apply moves, remove exits, record the frame ---------------------
        frame_states: dict[str, AgentState] = {}
        for aid in ordered:
            ag = agents[aid]
            s_new, v_new = moves[aid]
            ag.s, ag.v = s_new, v_new
            if ag.s >= ag.route.length:
                del agents[aid]
                continue
            x, y, theta = ag.position()
            if ag.prev_pos is None:
                vx, vy = v_new * math.cos(theta), v_new * math.sin(theta)
            else:
                vx = (x - ag.prev_pos[0]) * FRAME_RATE_HZ
                vy = (y - ag.prev_pos[1]) * FRAME_RATE_HZ
            ag.prev_pos = (x, y)
            frame_states[aid] = AgentState(x, y, vx, vy, theta)
        light_states = tuple(
            TrafficLightState(arm, phases[arm]) for arm in range(4)
        )
        frames.append(SceneFrame(t, frame_states, light_states))

    if world.warmup_frames:
        frames = [
            SceneFrame(i, f.agents, f.light_states)
            for i, f in enumerate(frames[world.warmup_frames :])
        ]
    # attributes only for agents that ever appeared in a frame
    appeared = {aid for f in frames for aid in f.agents}
    attributes = {aid: a for aid, a in attributes.items() if aid in appeared}
    episode = Episode(map_ctx, attributes, frames, FRAME_RATE_HZ)
    episode.validate()
    return episode


# ---------------------------------------------------------------------------
# dataset statistics
# ---------------------------------------------------------------------------

TTC_HIST_MAX_S = 10.0
TTC_HIST_BIN_S = 0.25


@dataclass
class DatasetStatistics:
    n_episodes: int
    n_frames: int
    n_agents: int
    kind_counts: dict[str, int]
    kind_ratios: dict[str, float]
    agents_per_frame: dict[str, float]
    ttc_bin_edges: list[float]
    ttc_counts: list[int]
    ttc_mode_s: float | None

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_frames": self.n_frames,
            "n_agents": self.n_agents,
            "kind_counts": self.kind_counts,
            "kind_ratios": self.kind_ratios,
            "agents_per_frame": self.agents_per_frame,
            "ttc_bin_edges": self.ttc_bin_edges,
            "ttc_counts": self.ttc_counts,
            "ttc_mode_s": self.ttc_mode_s,
        }


def dataset_statistics(episodes: Sequence[Episode]) -> DatasetStatistics:
    """Category mix, density, and pairwise-TTC histogram over episode logs."""
    if not episodes:
        raise WorldError("need at least one episode")
    kind_counts = {k.name: 0 for k in AgentKind}
    per_frame_counts = []
    edges = np.arange(0.0, TTC_HIST_MAX_S + TTC_HIST_BIN_S / 2, TTC_HIST_BIN_S)
    ttc_counts = np.zeros(len(edges) - 1, dtype=np.int64)
    n_agents = 0
    n_frames = 0
    for ep in episodes:
        for attrs in ep.attributes.values():
            kind_counts[attrs.kind.name] += 1
            n_agents += 1
        for frame in ep.frames:
            n_frames += 1
            ids = sorted(frame.agents)
            per_frame_counts.append(len(ids))
            if len(ids) < 2:
                continue
            pos = np.array([[frame.agents[i].x, frame.agents[i].y] for i in ids])
            vel = np.array([[frame.agents[i].vx, frame.agents[i].vy] for i in ids])
            radii = np.array([ep.attributes[i].bounding_radius for i in ids])
            mat = ttc_matrix(pos, vel, radii, TTC_HIST_MAX_S)
            # pairs whose circles already overlap (adjacent-lane neighbors)
            # are standing contact, not an upcoming collision: drop them
            mat = np.where(mat > 0.0, mat, np.inf)
            # one sample per agent per frame: its most imminent interaction
            vals = mat.min(axis=1)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                hist, _ = np.histogram(vals, bins=edges)
                ttc_counts += hist
    ratios = {
        name: (count / n_agents if n_agents else 0.0)
        for name, count in kind_counts.items()
    }
    per_frame = np.array(per_frame_counts, dtype=np.float64)
    mode = None
    if ttc_counts.sum() > 0:
        mode_idx = int(np.argmax(ttc_counts))
        mode = float(edges[mode_idx] + TTC_HIST_BIN_S / 2)
    return DatasetStatistics(
        n_episodes=len(episodes),
        n_frames=n_frames,
        n_agents=n_agents,
        kind_counts=kind_counts,
        kind_ratios=ratios,
        agents_per_frame={
            "mean": float(per_frame.mean()) if per_frame.size else 0.0,
            "max": float(per_frame.max()) if per_frame.size else 0.0,
            "min": float(per_frame.min()) if per_frame.size else 0.0,
        },
        ttc_bin_edges=[float(e) for e in edges],
        ttc_counts=[int(c) for c in ttc_counts],
        ttc_mode_s=mode,
    )
