import math

import numpy as np
import pytest

from junctionsim.features import TRANSITION_STAY
from junctionsim.model import DynamicsModel, ModelConfig, PredictionOutput
from junctionsim.rollout import (
    COLLAPSE_FROZEN,
    COLLAPSE_NON_FINITE,
    COLLAPSE_OVERLAP,
    COLLAPSE_RUNAWAY_SPEED,
    CollapseDetector,
    CollapseThresholds,
    RolloutConfig,
    RolloutError,
    detect_collapse,
    entry_schedule,
    inject_agents,
    run_rollout,
    step,
)
from junctionsim.scene import (
    AgentAttributes,
    AgentKind,
    AgentState,
    Episode,
    LightPhase,
    SceneFrame,
    TrafficLightState,
)
from junctionsim.world import BehaviorProfile, WorldConfig, generate_episode
from tests.test_scene import make_episode, make_frame, tiny_map


class StubModel:
    """Duck-typed stand-in: scripted per-step displacement growth."""

    def __init__(self, t_hist=10, growth=1.0, sigma=1e-4, stay=True):
        self.config = ModelConfig()
        self.growth = growth
        self.sigma = sigma
        self.stay = stay

    def predict(self, inputs):
        n = inputs.n_agents
        t_pred = self.config.t_pred
        mu = np.zeros((n, t_pred, 2))
        last = inputs.hist[:, -1, 0:2]
        prev = inputs.hist[:, -2, 0:2]
        prev_valid = inputs.hist_mask[:, -2:-1]
        delta = (last - prev) * prev_valid * self.growth
        for k in range(t_pred):
            mu[:, k] = last + delta * (k + 1)
        sigma = np.full((n, t_pred, 2), self.sigma)
        heading = np.tile(inputs.hist[:, -1:, 4:6], (1, t_pred, 1))
        logits = np.zeros((n, 3))
        logits[:, 0] = 5.0 if self.stay else -5.0
        logits[:, 1] = -5.0 if self.stay else 5.0
        return PredictionOutput(inputs.agent_ids, mu, sigma, heading, logits)


def cruising_reference(n_frames=60, n_agents=2, speed=5.0, all_green=True):
    """Straight-line agents on an all-green map (nobody is excused by a red)."""
    attrs = {}
    frames = []
    phase = LightPhase.GREEN if all_green else LightPhase.RED
    for aid_i in range(n_agents):
        aid = f"c{aid_i}"
        attrs[aid] = AgentAttributes(aid, AgentKind.MOTORIZED, 4.5, 1.8, 1.5)
    for t in range(n_frames):
        agents = {}
        for aid_i in range(n_agents):
            aid = f"c{aid_i}"
            x = -50.0 + speed * 0.4 * t
            y = -20.0 + 10.0 * aid_i
            agents[aid] = AgentState(x, y, speed, 0.0, 0.0)
        frames.append(make_frame(t, agents, phase=phase))
    return Episode(tiny_map(), attrs, frames)


# --- step ---------------------------------------------------------------------

def test_step_empty_scene():
    ref = cruising_reference(n_agents=0)
    model = StubModel()
    out = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(0))
    assert out.agents == {}
    assert out.timestamp_index == 10


def test_step_mean_mode_deterministic():
    ref = cruising_reference()
    model = DynamicsModel(ModelConfig(), seed=1)
    a = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(0), mode="mean")
    b = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(99), mode="mean")
    assert a.agents == b.agents


def test_step_sample_within_six_sigma_at_floor():
    ref = cruising_reference()
    model = StubModel(sigma=1e-4)
    rng = np.random.default_rng(3)
    worst = 0.0
    base = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(0), mode="mean")
    for _ in range(10_000 // 20):
        out = step(ref.frames[:10], ref.attributes, ref.map, model, rng, mode="sample")
        for aid, s in out.agents.items():
            m = base.agents[aid]
            worst = max(worst, abs(s.x - m.x), abs(s.y - m.y))
    assert worst <= 6 * 1e-4


def test_step_removes_non_stay_agents():
    ref = cruising_reference()
    model = StubModel(stay=False)
    out = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(0))
    assert out.agents == {}


def test_step_velocity_is_finite_difference():
    ref = cruising_reference(speed=5.0)
    model = StubModel(growth=1.0, sigma=1e-4)
    pivot = ref.frames[9]
    out = step(ref.frames[:10], ref.attributes, ref.map, model, np.random.default_rng(0), mode="mean")
    for aid, s in out.agents.items():
        assert s.vx == pytest.approx((s.x - pivot.agents[aid].x) * 2.5, abs=1e-12)


# --- injection -----------------------------------------------------------------

def test_entry_schedule_matches_first_appearance():
    ep = make_episode(20, {"a": (0, 19), "b": (5, 12), "c": (5, 19)})
    schedule = entry_schedule(ep)
    assert schedule == {0: ["a"], 5: ["b", "c"]}


def test_inject_no_entries_is_identity():
    ep = make_episode(20, {"a": (0, 19)})
    frame = make_frame(7, {})
    attrs = {}
    out = inject_agents(frame, ep, 7, attrs)
    assert out.agents == {}


def test_inject_copies_exact_state():
    ep = make_episode(20, {"a": (0, 19), "b": (5, 12)})
    frame = make_frame(5, {})
    attrs = {}
    out = inject_agents(frame, ep, 5, attrs)
    assert out.agents["b"] == ep.frames[5].agents["b"]
    assert attrs["b"].kind == ep.attributes["b"].kind


def test_inject_rekeys_on_collision():
    ep = make_episode(20, {"a": (0, 19), "b": (5, 12)})
    frame = make_frame(5, {"b": AgentState(1.0, 2.0, 0.0, 0.0, 0.0)})
    attrs = {}
    notes = []
    out = inject_agents(frame, ep, 5, attrs, notes=notes)
    assert out.agents["b"] == frame.agents["b"]  # live agent never overwritten
    assert "b+r1" in out.agents
    assert out.agents["b+r1"] == ep.frames[5].agents["b"]
    assert attrs["b+r1"].agent_id == "b+r1"
    assert notes and "re-keyed" in notes[0]


def test_full_rollout_injection_schedule_oracle():
    ref = generate_episode(WorldConfig(episode_frames=120, seed=2), BehaviorProfile())
    model = StubModel(stay=False)  # every simulated agent leaves immediately
    trace = run_rollout(RolloutConfig(max_frames=120, mode="mean"), model, ref)
    # with all agents leaving each step, the only appearances after warm-start
    # are injections; their (frame, kind) multiset must match the schedule
    schedule = entry_schedule(ref)
    expected = sorted(
        (t, ref.attributes[a].kind)
        for t, ids in schedule.items()
        if t >= 10
        for a in ids
        if t < 120
    )
    got = []
    for i, frame in enumerate(trace.episode.frames):
        if i < 10:
            continue
        for aid in frame.agents:
            got.append((i, trace.episode.attributes[aid].kind))
    assert sorted(got) == expected


# --- collapse detection ----------------------------------------------------------

def detector_for(ep):
    return CollapseDetector(ep.map, ep.attributes, CollapseThresholds())


def test_detect_nan_position():
    ep = cruising_reference(n_frames=3)
    bad = ep.frames[1].with_agents(
        {"c0": AgentState(float("nan"), 0.0, 0.0, 0.0, 0.0)}
    )
    result = detect_collapse([ep.frames[0], bad], ep.map, ep.attributes)
    assert result == (1, COLLAPSE_NON_FINITE)


def test_red_light_queue_is_not_frozen():
    # stationary agents near a red light are excused indefinitely
    attrs = {"q": AgentAttributes("q", AgentKind.MOTORIZED, 4.5, 1.8, 1.5)}
    frames = [
        make_frame(t, {"q": AgentState(0.0, 1.0, 0.0, 0.0, 0.0)}, phase=LightPhase.RED)
        for t in range(60)
    ]
    ep = Episode(tiny_map(), attrs, frames)  # light 0 sits at (0, 0)
    assert detect_collapse(ep.frames, ep.map, ep.attributes) is None


def test_frozen_scene_away_from_red_lights_collapses():
    attrs = {"q": AgentAttributes("q", AgentKind.MOTORIZED, 4.5, 1.8, 1.5)}
    frames = [
        make_frame(t, {"q": AgentState(40.0, 40.0, 0.0, 0.0, 0.0)}, phase=LightPhase.GREEN)
        for t in range(60)
    ]
    ep = Episode(tiny_map(), attrs, frames)
    result = detect_collapse(ep.frames, ep.map, ep.attributes)
    assert result is not None and result[1] == COLLAPSE_FROZEN
    # streak needs a previous frame, so it fires at index 25
    assert result[0] == 25


def test_runaway_speed_scripted():
    # doubling-speed script: speed_n = v0 * growth^n, hand-computed threshold
    ref = cruising_reference(n_frames=12, n_agents=1, speed=5.0)
    model = StubModel(growth=1.5, sigma=1e-4)
    trace = run_rollout(RolloutConfig(max_frames=40, mode="mean"), model, ref)
    assert trace.collapse_reason == COLLAPSE_RUNAWAY_SPEED
    # hand computation: FD speed of sim step n is 5 * 1.5^n; limit is 24
    n = 0
    v = 5.0
    while v <= 24.0:
        n += 1
        v = 5.0 * 1.5**n
    assert trace.simulated_frames == n
    assert trace.collapse_time_s == pytest.approx(n * 0.4)


def test_overlap_sustained():
    attrs = {
        "a": AgentAttributes("a", AgentKind.MOTORIZED, 4.5, 1.8, 1.5),
        "b": AgentAttributes("b", AgentKind.MOTORIZED, 4.5, 1.8, 1.5),
    }
    def frame(t, d):
        return make_frame(
            t,
            {
                "a": AgentState(0.0, 0.0, 1.0, 0.0, 0.0),
                "b": AgentState(d, 0.0, 1.0, 0.0, 0.0),
            },
            phase=LightPhase.GREEN,
        )
    # 4 frames inside 0.2 m, one outside, then 5 inside -> fires on the 5th
    seq = [frame(0, 1.0)] + [frame(t, 0.1) for t in range(1, 5)] \
        + [frame(5, 1.0)] + [frame(t, 0.1) for t in range(6, 11)]
    ep = Episode(tiny_map(), attrs, seq)
    result = detect_collapse(ep.frames, ep.map, ep.attributes)
    assert result == (10, COLLAPSE_OVERLAP)


def test_identity_model_ends_frozen():
    ref = cruising_reference(n_frames=12, n_agents=2)
    model = StubModel(growth=0.0, sigma=1e-4)  # repeats the pivot state forever
    trace = run_rollout(RolloutConfig(max_frames=200, mode="mean"), model, ref)
    assert trace.collapse_reason == COLLAPSE_FROZEN
    # first simulated frame has no prior, streak starts on the second
    assert trace.simulated_frames == 26
    assert trace.collapse_time_s == pytest.approx(26 * 0.4)


# --- run_rollout ------------------------------------------------------------------

def test_rollout_warm_start_only():
    ref = cruising_reference(n_frames=30)
    model = StubModel()
    trace = run_rollout(RolloutConfig(max_frames=10, mode="mean"), model, ref)
    assert trace.simulated_frames == 0
    assert len(trace.episode.frames) == 10
    assert trace.censored


def test_rollout_deterministic_given_seed():
    ref = generate_episode(WorldConfig(episode_frames=60, seed=4), BehaviorProfile())
    model = DynamicsModel(ModelConfig(), seed=5)
    a = run_rollout(RolloutConfig(max_frames=40, seed=9), model, ref)
    b = run_rollout(RolloutConfig(max_frames=40, seed=9), model, ref)
    assert a.episode.frames == b.episode.frames
    assert a.collapse_frame == b.collapse_frame


def test_rollout_causality():
    # perturbing reference agent states beyond the injection horizon must not
    # change the trace (lights and entries are the only exogenous inputs)
    ref = cruising_reference(n_frames=40)
    model = StubModel(growth=1.0, sigma=1e-4)
    base = run_rollout(RolloutConfig(max_frames=25, mode="mean"), model, ref)
    frames = list(ref.frames)
    for t in range(30, 40):  # beyond max_frames, same lights
        moved = {
            aid: AgentState(s.x + 100.0, s.y, s.vx, s.vy, s.theta)
            for aid, s in frames[t].agents.items()
        }
        frames[t] = frames[t].with_agents(moved)
    perturbed = Episode(ref.map, ref.attributes, frames)
    again = run_rollout(RolloutConfig(max_frames=25, mode="mean"), model, perturbed)
    assert again.episode.frames == base.episode.frames


def test_rollout_requires_warm_frames():
    ref = cruising_reference(n_frames=5)
    with pytest.raises(RolloutError):
        run_rollout(RolloutConfig(max_frames=20), StubModel(), ref)


def test_rollout_config_validation():
    with pytest.raises(RolloutError):
        RolloutConfig(max_frames=0)
    with pytest.raises(RolloutError):
        RolloutConfig(mode="typo")


def test_monotone_time_and_no_id_reuse():
    ref = generate_episode(WorldConfig(episode_frames=100, seed=6), BehaviorProfile())
    model = DynamicsModel(ModelConfig(), seed=7)
    trace = run_rollout(RolloutConfig(max_frames=80, seed=1), model, ref)
    stamps = [f.timestamp_index for f in trace.episode.frames]
    assert stamps == list(range(len(stamps)))
    # once gone, an id never reappears
    alive_until = {}
    for i, frame in enumerate(trace.episode.frames):
        for aid in frame.agents:
            if aid in alive_until and alive_until[aid] < i - 1:
                raise AssertionError(f"{aid} re-entered at {i}")
            alive_until[aid] = i
