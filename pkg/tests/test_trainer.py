import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import gae_oracle, gae_sum_oracle

from asyncomarl import envs, trainer
from asyncomarl.config import RunConfig
from asyncomarl.neuralcore import build_policy
from asyncomarl.timebase import acting_steps
from asyncomarl.trainer import (
    RunningStats,
    UpdateRejected,
    build_chunks,
    collect,
    compute_targets,
    episode_rng,
    gae,
    new_train_state,
    normalize_advantages,
    normalize_stream,
    ppo_losses,
    ppo_update,
    train,
)

SMALL = RunConfig(n_agents=2, n_obstacles=1, episode_len=20, buffer_len=20, num_envs=2, hidden_size=16,
                  ppo_epochs=2, total_env_steps=80, ckpt_interval=1, seed=11)


# advantages

def test_gae_worked_example():
    adv, ret = gae([1.0, 1.0], [0.5, 0.5], 0.0, 0.99, 0.95, dones=[0, 1])
    np.testing.assert_allclose(adv, [1.46525, 0.5], rtol=0, atol=1e-12)
    np.testing.assert_allclose(ret, [1.96525, 1.0], rtol=0, atol=1e-12)


def test_gae_zero_gamma_is_one_step_error(rng):
    r, v = rng.normal(size=30), rng.normal(size=30)
    adv, _ = gae(r, v, 3.0, 0.0, 0.95)
    assert np.array_equal(adv, r - v)


def test_gae_all_zero():
    adv, ret = gae(np.zeros(7), np.zeros(7), 0.0, 0.99, 0.95)
    assert not adv.any() and not ret.any()


@given(seed=st.integers(0, 2**31), T=st.integers(1, 40), gamma=st.floats(0.0, 1.0), lam=st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_gae_matches_oracles(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T)
    d = rng.random(T) < 0.15
    boot = float(rng.normal())
    adv, ret = gae(r, v, boot, gamma, lam, d)
    ref, ref_ret = gae_oracle(r, v, boot, gamma, lam, d)
    assert np.max(np.abs(adv - ref)) <= 1e-10
    assert np.max(np.abs(ret - ref_ret)) <= 1e-10
    assert np.max(np.abs(adv - gae_sum_oracle(r, v, boot, gamma, lam, d))) <= 1e-9


def test_gae_batched_rows_are_independent(rng):
    r, v = rng.normal(size=(5, 12)), rng.normal(size=(5, 12))
    d = rng.random((5, 12)) < 0.2
    boot = rng.normal(size=5)
    adv, _ = gae(r, v, boot, 0.99, 0.95, d)
    for b in range(5):
        np.testing.assert_allclose(adv[b], gae_oracle(r[b], v[b], boot[b], 0.99, 0.95, d[b])[0], atol=1e-12)


def test_advantage_normalisation(rng):
    a = normalize_advantages(rng.normal(3.0, 7.0, size=500))
    assert abs(a.mean()) <= 1e-6 and abs(a.var() - 1) <= 1e-4


# running statistics

def test_stream_matches_two_pass(rng):
    x = rng.normal(4.0, 3.0, size=10_000)
    stats = RunningStats()
    pos = 0
    while pos < len(x):
        k = int(rng.integers(1, 300))
        normalize_stream(x[pos : pos + k], stats)
        pos += k
    assert stats.count == 10_000
    assert abs(stats.mean - x.mean()) <= 1e-6
    assert abs(stats.var - x.var()) <= 1e-6
    np.testing.assert_allclose(stats.normalize(x[:5]), (x[:5] - x.mean()) / np.sqrt(x.var() + 1e-8), atol=1e-6)


def test_constant_stream_normalises_to_zero():
    stats = RunningStats()
    for _ in range(10):
        out = normalize_stream(np.full(50, 2.5), stats)
    assert np.all(np.abs(out) < 1e-9)


def test_alternating_stream():
    stats = RunningStats()
    for _ in range(100):
        out = normalize_stream(np.array([1.0, -1.0]), stats)
    assert abs(stats.var - 1.0) < 1e-12 and np.all(np.abs(out) <= 1.0)


def test_stats_array_round_trip(rng):
    s = RunningStats()
    s.update(rng.normal(size=33))
    t = RunningStats.from_array(s.to_array())
    assert (t.count, t.mean, t.m2) == (s.count, s.mean, s.m2)


# rollouts

def small_policy(cfg=SMALL):
    torch.manual_seed(0)
    return build_policy(cfg, envs.obs_dim(cfg.env), envs.global_state_dim(cfg))


def rollout(cfg=SMALL, n_env=2, index=0, **kw):
    rngs = [episode_rng(cfg.seed, "train", index, e) for e in range(n_env)]
    sampler = torch.Generator().manual_seed(5)
    return collect(small_policy(cfg), cfg, rngs, RunningStats(), sampler=sampler, **kw)


def test_unit_interval_fills_every_step():
    cfg = SMALL.replace(goal_radius=1.0)
    roll = rollout(cfg, mu_range=(1, 1))
    assert [len(b) for b in roll.buffers] == [20] * 4


def test_intervals_two_and_three(monkeypatch):
    monkeypatch.setattr(trainer, "sample_intervals", lambda rng, lo, hi, n: [2, 3])
    cfg = SMALL.replace(episode_len=12, buffer_len=12, goal_radius=1.0)
    roll = rollout(cfg, n_env=1)
    assert [len(b) for b in roll.buffers] == [6, 4]
    assert [tr.t for tr in roll.buffers[1].transitions] == acting_steps(3, 12)
    assert [tr.tau_index for tr in roll.buffers[0].transitions] == [1, 2, 3, 4, 5, 6]


def test_finish_at_third_action(monkeypatch):
    real = envs.goal_reached
    monkeypatch.setattr(envs, "goal_reached", lambda w, i, d: (i == 0 and w.t >= 3) or real(w, i, d))
    cfg = SMALL.replace(goal_radius=1.0)
    roll = rollout(cfg, n_env=1, mu_range=(1, 1))
    b = roll.buffers[0]
    assert len(b) == 3 and b.transitions[-1].done and not any(tr.done for tr in b.transitions[:-1])
    assert roll.logs[0].first_goal_step[0] == 3
    assert 0 in roll.worlds[0].finished


def test_buffer_rewards_are_delivered_rewards(monkeypatch):
    seen = []
    real = envs.compute_reward

    def spy(world, active, coll, rcfg, hist):
        r, dl = real(world, active, coll, rcfg, hist)
        seen.append((world.t - 1, set(active), dl.copy()))
        return r, dl

    monkeypatch.setattr(envs, "compute_reward", spy)
    roll = rollout(SMALL, n_env=1)
    by_t = {t: (act, dl) for t, act, dl in seen}
    for b in roll.buffers:
        for tr in b.transitions:
            act, dl = by_t[tr.t]
            assert b.agent in act and tr.r == dl[b.agent]


def test_collect_is_deterministic():
    a, b = rollout(), rollout()
    for x, y in zip(a.buffers, b.buffers):
        assert [(t.t, t.a, t.r, t.logp) for t in x.transitions] == [(t.t, t.a, t.r, t.logp) for t in y.transitions]


# updates

def fixed_batch(cfg=SMALL):
    policy = small_policy(cfg)
    roll = collect(policy, cfg, [episode_rng(1, "train", 0, e) for e in range(2)], RunningStats(),
                   sampler=torch.Generator().manual_seed(1))
    stats = RunningStats()
    targets = compute_targets(roll.buffers, cfg)
    stats.update(np.concatenate([r for _, r in targets]))
    return policy, build_chunks(roll.buffers, targets, stats, cfg, torch.float32)


def policy_grad(policy, loss):
    params = [p for n, p in policy.named_parameters() if n.startswith(("actor", "encoder"))]
    return torch.autograd.grad(loss, params, allow_unused=True)


def test_unit_ratio_gives_vanilla_gradient():
    policy, batch = fixed_batch()
    with torch.no_grad():
        enc = policy.encode(batch.graphs)
        C, L = batch.a.shape
        logits, _ = policy.actor_forward(batch.o, enc.x_agg.view(C, L, -1), batch.h_a0)
        batch.logp = torch.log_softmax(logits, -1).gather(-1, batch.a[..., None])[..., 0]
    g_ppo = policy_grad(policy, ppo_losses(policy, batch, SMALL)["policy"])
    enc = policy.encode(batch.graphs)
    logits, _ = policy.actor_forward(batch.o, enc.x_agg.view(C, L, -1), batch.h_a0)
    logp = torch.log_softmax(logits, -1).gather(-1, batch.a[..., None])[..., 0]
    vanilla = -(batch.adv * logp * batch.mask).sum() / batch.mask.sum()
    for a, b in zip(g_ppo, policy_grad(policy, vanilla)):
        if a is not None:
            torch.testing.assert_close(a, b, rtol=1e-4, atol=1e-7)


def test_clipped_samples_have_no_policy_gradient():
    policy, batch = fixed_batch()
    batch.adv = batch.adv.abs() + 0.1
    batch.logp = batch.logp - 1.0  # ratio about e > 1 + clip
    grads = policy_grad(policy, ppo_losses(policy, batch, SMALL)["policy"])
    assert all(g is None or torch.all(g == 0) for g in grads)


def test_repeated_updates_decrease_loss():
    policy, batch = fixed_batch()
    opt = trainer.make_optimizer(policy, SMALL)
    losses = []
    for _ in range(21):
        loss = ppo_losses(policy, batch, SMALL)["total"]
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), SMALL.grad_clip_norm)
        opt.step()
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 18


def test_padding_is_masked():
    _, batch = fixed_batch()
    pad = batch.mask == 0
    assert pad.any()
    assert torch.all(batch.adv[pad] == 0) and torch.all(batch.o[pad] == 0)


def test_update_rejects_empty_and_nonfinite():
    policy, _ = fixed_batch()
    opt = trainer.make_optimizer(policy, SMALL)
    with pytest.raises(UpdateRejected):
        ppo_update(policy, opt, [], RunningStats(), SMALL, torch.Generator())
    roll = rollout()
    roll.buffers[0].transitions[0].r = float("nan")
    with pytest.raises(UpdateRejected):
        ppo_update(policy, opt, roll.buffers, RunningStats(), SMALL, torch.Generator())


def test_orthogonal_init_invariant():
    torch.set_default_dtype(torch.float64)
    try:
        policy = small_policy(SMALL.replace(hidden_size=64))
    finally:
        torch.set_default_dtype(torch.float32)
    for name, p in policy.named_parameters():
        if p.dim() < 2:
            continue
        W = p.detach().double()
        gram = W @ W.T if W.shape[0] <= W.shape[1] else W.T @ W
        scale = 1e-4 if name == "actor.out.weight" else 1.0
        assert torch.max(torch.abs(gram - scale * torch.eye(gram.shape[0], dtype=W.dtype))) <= 1e-6, name


# outer loop

def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_log_and_checkpoints(tmp_path):
    train(SMALL, tmp_path / "a")
    rows = read_log(tmp_path / "a" / "train_log.csv")
    assert rows[0] == trainer.TRAIN_LOG_HEADER
    assert [r[:2] for r in rows[1:]] == [["1", "40"], ["2", "80"]]
    assert (tmp_path / "a" / "ckpt_000001.bin").exists() and (tmp_path / "a" / "final.bin").exists()
    train(SMALL, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_resume_continues_counters(tmp_path):
    full = tmp_path / "full"
    train(SMALL.replace(total_env_steps=120), full)
    part = tmp_path / "part"
    train(SMALL, part)
    ts = train(SMALL.replace(total_env_steps=120), part, resume=part / "final.bin")
    assert (ts.update, ts.env_steps) == (3, 120)
    rows = read_log(part / "train_log.csv")
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert rows == read_log(full / "train_log.csv")


def test_load_restores_optimizer_state(tmp_path):
    ts = train(SMALL, tmp_path)
    back = trainer.load_train_state(tmp_path / "final.bin", SMALL)
    a, b = ts.optimizer.state_dict()["state"], back.optimizer.state_dict()["state"]
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k]["exp_avg"], b[k]["exp_avg"])
    assert back.value_stats.to_array().tolist() == ts.value_stats.to_array().tolist()
