import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from junctionsim.interaction import (
    InteractionConfig,
    InteractionError,
    InteractionPartition,
    build_partition,
    pairwise_ttc,
    restrict_window,
    sample_groups,
    ttc_matrix,
)
from junctionsim.scene import (
    AgentAttributes,
    AgentKind,
    AgentState,
    HistoryWindow,
    LightPhase,
    SceneFrame,
    TrafficLightState,
    slice_window,
)
from tests.test_scene import make_episode, tiny_map


def state(x, y, vx, vy):
    theta = math.atan2(vy, vx) if (vx, vy) != (0.0, 0.0) else 0.0
    return AgentState(x, y, vx, vy, theta)


def ttc_by_stepping(a, ra, b, rb, dt=1e-4, horizon=10.0):
    """Brute-force oracle: advance both agents on a fine time grid and report
    the first grid time at which the circles touch."""
    steps = int(round(horizon / dt)) + 1
    t = np.arange(steps) * dt
    dx = (a.x - b.x) + (a.vx - b.vx) * t
    dy = (a.y - b.y) + (a.vy - b.vy) * t
    hit = np.nonzero(dx * dx + dy * dy <= (ra + rb) ** 2)[0]
    if hit.size == 0:
        return math.inf
    return float(t[hit[0]])


# --- pairwise TTC ------------------------------------------------------------

def test_ttc_head_on():
    a = state(0.0, 0.0, 1.0, 0.0)
    b = state(10.0, 0.0, -1.0, 0.0)
    assert pairwise_ttc(a, 0.5, b, 0.5) == pytest.approx(4.5, abs=1e-12)


def test_ttc_stationary_pair():
    a = state(0.0, 0.0, 0.0, 0.0)
    b = state(5.0, 0.0, 0.0, 0.0)
    assert pairwise_ttc(a, 0.5, b, 0.5) == math.inf


def test_ttc_overlapping_is_zero():
    a = state(0.0, 0.0, 0.0, 0.0)
    b = state(0.5, 0.0, 0.0, 0.0)
    assert pairwise_ttc(a, 0.5, b, 0.5) == 0.0


def test_ttc_oblique_matches_stepping_oracle():
    a = state(0.0, 0.0, 2.0, 1.0)
    b = state(8.0, -3.0, -1.0, 2.0)
    closed = pairwise_ttc(a, 1.0, b, 1.0)
    brute = ttc_by_stepping(a, 1.0, b, 1.0)
    assert math.isfinite(closed)
    assert abs(closed - brute) < 0.01


def test_ttc_horizon_clamp():
    a = state(0.0, 0.0, 0.1, 0.0)
    b = state(10.0, 0.0, 0.0, 0.0)
    # closes at ~ (9.5 - 0.5 - 0.5)... well beyond 10 s
    assert pairwise_ttc(a, 0.5, b, 0.5, ttc_horizon=10.0) == math.inf
    assert math.isfinite(pairwise_ttc(a, 0.5, b, 0.5, ttc_horizon=math.inf))


@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-10, 10), st.floats(-10, 10),
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-10, 10), st.floats(-10, 10),
)
@settings(max_examples=200)
def test_ttc_symmetry_exact(ax, ay, avx, avy, bx, by, bvx, bvy):
    a, b = state(ax, ay, avx, avy), state(bx, by, bvx, bvy)
    assert pairwise_ttc(a, 1.0, b, 0.5) == pairwise_ttc(b, 0.5, a, 1.0)


@given(
    st.floats(-30, 30), st.floats(-30, 30), st.floats(-8, 8), st.floats(-8, 8),
    st.floats(-30, 30), st.floats(-30, 30), st.floats(-8, 8), st.floats(-8, 8),
    st.floats(0, 2 * math.pi), st.floats(-100, 100), st.floats(-100, 100),
)
@settings(max_examples=200)
def test_ttc_rigid_motion_invariance(ax, ay, avx, avy, bx, by, bvx, bvy, phi, tx, ty):
    a, b = state(ax, ay, avx, avy), state(bx, by, bvx, bvy)

    def rigid(s):
        c, sn = math.cos(phi), math.sin(phi)
        return state(
            c * s.x - sn * s.y + tx,
            sn * s.x + c * s.y + ty,
            c * s.vx - sn * s.vy,
            sn * s.vx + c * s.vy,
        )

    t0 = pairwise_ttc(a, 0.8, b, 0.6)
    t1 = pairwise_ttc(rigid(a), 0.8, rigid(b), 0.6)
    if math.isinf(t0) or math.isinf(t1):
        assert t0 == t1
    else:
        assert abs(t0 - t1) < 1e-9


def test_ttc_matrix_agrees_with_scalar():
    rng = np.random.default_rng(3)
    n = 12
    pos = rng.uniform(-30, 30, size=(n, 2))
    vel = rng.uniform(-8, 8, size=(n, 2))
    radii = rng.uniform(0.3, 2.5, size=n)
    mat = ttc_matrix(pos, vel, radii, 10.0)
    for i in range(n):
        for j in range(n):
            if i == j:
                assert mat[i, j] == math.inf
                continue
            a = state(pos[i, 0], pos[i, 1], vel[i, 0], vel[i, 1])
            b = state(pos[j, 0], pos[j, 1], vel[j, 0], vel[j, 1])
            expect = pairwise_ttc(a, radii[i], b, radii[j], 10.0)
            if math.isinf(expect):
                assert mat[i, j] == math.inf
            else:
                assert mat[i, j] == pytest.approx(expect, abs=1e-9)


# --- partitioning ------------------------------------------------------------

def random_frame(rng, n, spread=60.0):
    agents = {}
    attrs = {}
    for i in range(n):
        aid = f"a{i:03d}"
        agents[aid] = state(
            rng.uniform(-spread, spread), rng.uniform(-spread, spread),
            rng.uniform(-8, 8), rng.uniform(-8, 8),
        )
        attrs[aid] = AgentAttributes(aid, AgentKind.MOTORIZED, 4.0, 1.8, 1.5)
    frame = SceneFrame(0, agents, (TrafficLightState(0, LightPhase.GREEN),))
    return frame, attrs


def closure_partition_oracle(frame, attrs, config):
    """Brute-force oracle: boolean adjacency matrix, transitive closure by
    O(N^3) matrix powering, then row-equivalence classes."""
    ids = sorted(frame.agents)
    n = len(ids)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = frame.agents[ids[i]], frame.agents[ids[j]]
            ttc = pairwise_ttc(
                a, attrs[ids[i]].bounding_radius, b, attrs[ids[j]].bounding_radius,
                config.ttc_horizon,
            )
            dist = math.hypot(a.x - b.x, a.y - b.y)
            if ttc <= config.ttc_threshold or (
                config.use_proximity_edges and dist <= config.distance_threshold
            ):
                adj[i, j] = True
    reach = adj | np.eye(n, dtype=bool)
    for _ in range(n):
        reach = reach | (reach @ reach)
    groups = {}
    for i in range(n):
        key = tuple(np.nonzero(reach[i])[0])
        groups.setdefault(key, []).append(ids[i])
    return tuple(
        tuple(sorted(members))
        for _, members in sorted(groups.items(), key=lambda kv: min(kv[1]))
    )


def test_partition_all_far_apart():
    agents = {f"a{i}": state(100.0 * i, 0.0, 0.0, 0.0) for i in range(5)}
    attrs = {a: AgentAttributes(a, AgentKind.MOTORIZED, 4.0, 1.8, 1.5) for a in agents}
    frame = SceneFrame(0, agents, (TrafficLightState(0, LightPhase.GREEN),))
    part = build_partition(frame, attrs, InteractionConfig())
    assert part.k == 5
    assert all(len(g) == 1 for g in part.groups)


def test_partition_single_agent():
    agents = {"solo": state(0.0, 0.0, 1.0, 0.0)}
    attrs = {"solo": AgentAttributes("solo", AgentKind.PEDESTRIAN, 0.5, 0.5, 1.7)}
    frame = SceneFrame(3, agents, (TrafficLightState(0, LightPhase.GREEN),))
    part = build_partition(frame, attrs, InteractionConfig())
    assert part.groups == (("solo",),)
    assert part.pivot_frame == 3


def test_partition_matches_closure_oracle():
    rng = np.random.default_rng(11)
    config = InteractionConfig(ttc_threshold=1.0, distance_threshold=2.0)
    for _ in range(50):
        n = int(rng.integers(1, 21))
        frame, attrs = random_frame(rng, n, spread=25.0)
        part = build_partition(frame, attrs, config)
        assert part.groups == closure_partition_oracle(frame, attrs, config)


def test_partition_disjoint_and_exhaustive():
    rng = np.random.default_rng(5)
    frame, attrs = random_frame(rng, 15, spread=20.0)
    part = build_partition(frame, attrs, InteractionConfig())
    union = [a for g in part.groups for a in g]
    assert sorted(union) == sorted(frame.agents)
    assert len(union) == len(set(union))


def test_partition_monotone_in_ttc_threshold():
    rng = np.random.default_rng(9)
    for _ in range(20):
        frame, attrs = random_frame(rng, 12, spread=30.0)
        sizes = []
        for thr in (0.0, 1.0, 2.0, 4.0, 8.0):
            part = build_partition(
                frame, attrs, InteractionConfig(ttc_threshold=thr, ttc_horizon=10.0)
            )
            sizes.append(part.k)
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_partition_rejects_duplicate_membership():
    with pytest.raises(InteractionError):
        InteractionPartition((("a", "b"), ("b",)), 0)


def test_config_validation():
    with pytest.raises(InteractionError):
        InteractionConfig(ttc_threshold=-1.0)
    with pytest.raises(InteractionError):
        InteractionConfig(ttc_threshold=5.0, ttc_horizon=2.0)
    InteractionConfig(ttc_threshold=0.0)  # ablation grid includes 0 s


# --- group sampling ----------------------------------------------------------

def test_sample_single_group_is_forced():
    part = InteractionPartition((("a",),), 0)
    for seed in range(20):
        assert sample_groups(part, seed) == frozenset({0})


def test_sample_two_groups_conditional_law():
    part = InteractionPartition((("a",), ("b",)), 0)
    rng = np.random.default_rng(2024)
    counts = {frozenset({0}): 0, frozenset({1}): 0, frozenset({0, 1}): 0}
    n = 100_000
    for _ in range(n):
        counts[sample_groups(part, rng)] += 1
    # conditional-on-nonempty law: each outcome has probability exactly 1/3
    for key, c in counts.items():
        assert abs(c / n - 1.0 / 3.0) < 0.01, (key, c / n)


def test_sample_deterministic_given_seed():
    part = InteractionPartition((("a",), ("b",), ("c",), ("d",)), 0)
    assert sample_groups(part, 77) == sample_groups(part, 77)


# --- window restriction ------------------------------------------------------

def window_with_groups():
    ep = make_episode(25, {"a": (0, 24), "b": (0, 24), "c": (5, 24), "d": (0, 20)})
    w = slice_window(ep, 10)
    part = InteractionPartition((("a", "b"), ("c",), ("d",)), 10)
    return ep, w, part


def test_restrict_full_selection_is_identity():
    ep, w, part = window_with_groups()
    inst = restrict_window(w, frozenset(range(part.k)), part, ep.map, ep.attributes)
    assert inst.window.pivot_agents == w.pivot_agents
    for f0, f1 in zip(w.frames, inst.window.frames):
        assert f0.agents == f1.agents
    assert inst.map == ep.map


def test_restrict_singleton_keeps_context():
    ep, w, part = window_with_groups()
    inst = restrict_window(w, frozenset({1}), part, ep.map, ep.attributes)
    assert inst.window.pivot_agents == ("c",)
    assert all(set(f.agents) <= {"c"} for f in inst.window.frames)
    # lights and map untouched
    for f0, f1 in zip(w.frames, inst.window.frames):
        assert f0.light_states == f1.light_states
    assert inst.map == ep.map


def test_restrict_rejects_empty_selection():
    ep, w, part = window_with_groups()
    with pytest.raises(InteractionError):
        restrict_window(w, frozenset(), part, ep.map, ep.attributes)


def test_singleton_instances_cover_each_pivot_agent_once():
    ep, w, part = window_with_groups()
    seen = []
    for i in range(part.k):
        inst = restrict_window(w, frozenset({i}), part, ep.map, ep.attributes)
        seen.extend(inst.window.pivot_agents)
    assert sorted(seen) == sorted(w.pivot_agents)


def test_restriction_consistency_union():
    ep, w, part = window_with_groups()
    i01 = restrict_window(w, frozenset({0, 1}), part, ep.map, ep.attributes)
    i0 = restrict_window(w, frozenset({0}), part, ep.map, ep.attributes)
    i1 = restrict_window(w, frozenset({1}), part, ep.map, ep.attributes)
    for f01, f0, f1 in zip(i01.window.frames, i0.window.frames, i1.window.frames):
        assert set(f01.agents) == set(f0.agents) | set(f1.agents)
