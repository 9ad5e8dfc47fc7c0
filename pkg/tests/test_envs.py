import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import HAND_DELIVERED, hand_world, run_hand_episode

from asyncomarl.config import RunConfig
from asyncomarl.envs import (
    CollisionReport,
    ConfigurationError,
    InfeasibleConfigurationError,
    RewardConfig,
    RewardHistory,
    apply_actions,
    compute_reward,
    detect_collisions,
    global_state,
    global_state_dim,
    goal_reached,
    obs_dim,
    observe,
    padded_observation,
    park,
    reset,
    reset_coopnav,
    reset_rovertower,
    step_physics,
)

CFG = RunConfig()
RT = RunConfig(env="rovertower", n_obstacles=0, n_agents=2, world_size_km=2.0, dt=0.1)


def pdist(P):
    return np.linalg.norm(P[:, None] - P[None, :], axis=-1)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), m=st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_coopnav_layout_invariants(seed, n, m):
    cfg = CFG.replace(n_agents=n, n_obstacles=m)
    w = reset_coopnav(cfg, np.random.default_rng(seed))
    agents = w.states[:n, :2]
    obstacles = w.states[n : n + m, :2]
    goals = w.states[n + m :, :2]
    d = pdist(np.vstack([agents, goals]))[:n]
    np.fill_diagonal(d[:, :n], np.inf)
    assert np.all(d >= cfg.min_separation)
    if m:
        assert np.all(np.linalg.norm(obstacles[:, None] - agents[None], axis=-1) >= 50.0)
        assert np.all(np.linalg.norm(obstacles[:, None] - goals[None], axis=-1) >= cfg.delta + 25.0)
    assert np.all(np.abs(w.states[:, :2]) <= cfg.world_size_m / 2)
    assert np.all(w.states[:, 2:] == 0)
    assert [e.kind for e in w.entities] == ["agent"] * n + ["obstacle"] * m + ["goal"] * n


def test_reset_is_seeded():
    a = reset(CFG, np.random.default_rng(3))
    b = reset(CFG, np.random.default_rng(3))
    np.testing.assert_array_equal(a.states, b.states)


def test_infeasible_layout():
    cfg = CFG.replace(n_agents=20, world_size_km=1.0)
    with pytest.raises(InfeasibleConfigurationError):
        reset_coopnav(cfg, np.random.default_rng(0), max_attempts=3)


def test_rovertower_pairing_is_a_bijection():
    w = reset_rovertower(RT.replace(n_agents=4, world_size_km=3.0), np.random.default_rng(5))
    assert sorted(w.pairing) == [0, 1, 2, 3]
    assert sorted(w.pairing.values()) == [4, 5, 6, 7]
    assert w.n_agents == 8
    for rover, tower in w.pairing.items():
        assert w.body_of(tower) == rover
        assert w.goal_distance(tower) == w.goal_distance(rover)


def test_rovertower_count_mismatch():
    with pytest.raises(ConfigurationError):
        reset_rovertower(RT, np.random.default_rng(0), n_towers=3)


def test_coopnav_observation_units():
    w = reset(CFG, np.random.default_rng(1))
    w.states[0] = [1000.0, -500.0, 2.0, 3.0]
    g = w.states[w.goal_of[0], :2]
    o = observe(w, 0)
    np.testing.assert_allclose(o, [1.0, -0.5, 0.2, 0.3, (g[0] - 1000) / 1000, (g[1] + 500) / 1000])
    assert len(o) == obs_dim("coopnav")
    with pytest.raises(KeyError):
        observe(w, 3)


def test_tower_message_reaches_rover_observation():
    cfg = RT
    w = reset(cfg, np.random.default_rng(2))
    tower = w.pairing[0]
    apply_actions(w, {tower: 3}, cfg)
    o = observe(w, 0)
    np.testing.assert_array_equal(o[2:], [0, 0, 0, 1, 0])
    p = padded_observation(w, 0)
    assert len(p) == obs_dim("rovertower") and p[-2] == 1 and p[-1] == 0
    p = padded_observation(w, tower)
    assert len(p) == obs_dim("rovertower") and p[-2] == 0 and p[-1] == 1


@pytest.mark.parametrize("cfg", [CFG, CFG.replace(n_agents=5, n_obstacles=1), RT])
def test_global_state_dimension(cfg):
    w = reset(cfg, np.random.default_rng(0))
    assert global_state(w).shape == (global_state_dim(cfg),)


def test_finished_agent_stays_parked():
    w = reset(CFG, np.random.default_rng(0))
    w.states[:3, 2:] = 1.0
    park(w, 1)
    before = w.states[1].copy()
    controls = apply_actions(w, {0: 1, 1: 1, 2: 1}, CFG)
    step_physics(w, controls, CFG)
    np.testing.assert_array_equal(w.states[1], before)
    assert before[2] == 0 and before[3] == 0
    assert not np.array_equal(w.states[0, :2], before[:2])
    assert w.t == 1


def test_nonfinite_state_raises():
    w = reset(CFG, np.random.default_rng(0))
    w.states[0, 2] = np.inf
    with pytest.raises(FloatingPointError):
        step_physics(w, np.zeros((len(w.entities), 2)), CFG)


def test_collision_boundary_is_strict():
    w = reset(CFG, np.random.default_rng(0))
    w.states[:, :2] = np.arange(len(w.entities))[:, None] * 10_000.0
    w.states[1, :2] = w.states[0, :2] + [50.0, 0.0]
    assert detect_collisions(w).pairs == []
    w.states[1, :2] = w.states[0, :2] + [49.999, 0.0]
    rep = detect_collisions(w)
    assert rep.pairs == [(0, 1)] and rep.kappa.tolist() == [1, 1, 0]
    park(w, 1)
    assert detect_collisions(w).pairs == []


def test_agent_obstacle_collision_flags_agent_only():
    w = reset(CFG, np.random.default_rng(0))
    w.states[:, :2] = np.arange(len(w.entities))[:, None] * 10_000.0
    w.states[3, :2] = w.states[2, :2] + [0.0, 30.0]
    rep = detect_collisions(w)
    assert rep.pairs == [(2, 3)] and rep.kappa.tolist() == [0, 0, 1]


def test_goal_boundary_is_inclusive():
    w = hand_world()
    w.states[0, 0] = 100.0
    assert goal_reached(w, 0, 100.0)
    w.states[0, 0] = 100.0 + 1e-9
    assert not goal_reached(w, 0, 100.0)


@pytest.mark.parametrize("variant", sorted(HAND_DELIVERED))
def test_hand_episode(variant):
    assert run_hand_episode(variant) == HAND_DELIVERED[variant]


def test_rovertower_has_no_collision_penalty():
    w = reset(RT, np.random.default_rng(0))
    cfg = RewardConfig(variant="repeated", goal_radius=100.0)
    kappa = np.ones(w.n_agents, dtype=int)
    r0, _ = compute_reward(w, set(), CollisionReport(np.zeros_like(kappa), []), cfg, RewardHistory.fresh(w.n_agents))
    r1, _ = compute_reward(w, set(), CollisionReport(kappa, []), cfg, RewardHistory.fresh(w.n_agents))
    np.testing.assert_array_equal(r0, r1)


def test_single_active_with_nobody_active_delivers_zero():
    w = hand_world()
    w.states[0, 0], w.states[1, 0] = 300.0, 400.0
    _, dl = compute_reward(w, set(), CollisionReport(np.zeros(2, dtype=int), []),
                           RewardConfig(variant="single_active"), RewardHistory.fresh(2))
    assert dl.tolist() == [0.0, 0.0]


def _two_agent_reward(variant, d0_m, d1_m, kappa=(0, 0), reached=(False, False), active=(0, 1)):
    w = hand_world()
    w.states[0, 0], w.states[1, 0] = d0_m, d1_m
    hist = RewardHistory.fresh(2)
    hist.reached[:] = reached
    if variant in ("single", "single_active"):
        hist.phi[:] = reached
    return compute_reward(w, set(active), CollisionReport(np.array(kappa), []),
                          RewardConfig(variant=variant, goal_radius=100.0), hist)


def test_piecewise_second_step_at_goal():
    r, _ = _two_agent_reward("piecewise", 20.0, 3000.0, reached=(True, False))
    assert r[0] == -0.02 + 0.5


def test_single_bonus_with_collision():
    r, _ = _two_agent_reward("single", 40.0, 3000.0, kappa=(1, 0))
    assert r[0] == pytest.approx(-0.04, abs=1e-15)


def test_single_active_shares_only_among_active():
    w = reset(CFG, np.random.default_rng(0))
    # place three agents at 1, 2 and 5 km from their goals, far from everything else
    for i, d in enumerate((1000.0, 2000.0, 5000.0)):
        g = w.goal_of[i]
        w.states[g, :2] = [i * 20_000.0, 0.0]
        w.states[i, :2] = [i * 20_000.0 + d, 0.0]
    r, dl = compute_reward(w, {0, 1}, CollisionReport(np.zeros(3, dtype=int), []),
                           RewardConfig(variant="single_active"), RewardHistory.fresh(3))
    assert r.tolist() == [-1.0, -2.0, -5.0]
    assert dl.tolist() == [-3.0, -3.0, 0.0]


@pytest.mark.parametrize("variant", ["repeated", "piecewise", "single"])
def test_shared_variants_deliver_identical_totals(variant, rng):
    w = hand_world()
    w.states[0, 0], w.states[1, 0] = rng.uniform(0, 3000, 2)
    _, dl = compute_reward(w, {1}, CollisionReport(np.array([1, 0]), []),
                           RewardConfig(variant=variant), RewardHistory.fresh(2))
    assert dl[0] == dl[1]


def test_goal_predicate_sweep(rng):
    w = hand_world()
    for d in rng.uniform(0, 200, 100):
        w.states[0, 0] = d
        assert goal_reached(w, 0, 100.0) == (d <= 100.0)


def test_separation_over_a_thousand_seeds():
    for seed in range(1000):
        w = reset_coopnav(CFG, np.random.default_rng(seed))
        P = np.vstack([w.states[:3, :2], w.states[6:, :2]])
        d = pdist(P)[:3]
        np.fill_diagonal(d[:, :3], np.inf)
        assert d.min() >= 500.0, seed
