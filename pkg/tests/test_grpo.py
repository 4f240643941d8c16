import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdflow import encoder as enc
from crowdflow import flow
from crowdflow import grpo
from crowdflow.autograd import numerical_grad, relative_error
from crowdflow.grpo import GrpoConfig
from crowdflow.nn import clone, zero_grad
from crowdflow.reward import RewardConfig, RewardWeights
from crowdflow.sde import SdeSchedule

from conftest import random_window

CTX = 4


def test_advantage_examples():
    a = grpo.advantages([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(a, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)
    assert np.allclose(grpo.advantages([0.0, 2.0]), [-1.0, 1.0], atol=1e-7)
    assert np.array_equal(grpo.advantages([5.0, 5.0, 5.0, 5.0]), np.zeros(4))
    with pytest.raises(ValueError):
        grpo.advantages([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_advantage_standardisation_and_shift(rewards, shift):
    r = np.array(rewards)
    a = grpo.advantages(r)
    assert abs(a.mean()) < 1e-9
    if r.std() > 1e-3:
        assert abs(a.std() - 1.0) < 1e-6
        assert np.max(np.abs(grpo.advantages(r + shift) - a)) < 1e-9


def test_advantages_per_agent_columns(rng):
    r = rng.normal(size=(4, 3))
    a = grpo.advantages(r)
    for j in range(3):
        assert np.allclose(a[:, j], grpo.advantages(r[:, j]), atol=1e-15)


def test_kl_formula_oracle(rng):
    for _ in range(20):
        ma, mb = rng.normal(size=(2, 6))
        s = rng.uniform(0.1, 2.0)
        # KL(N(ma, s^2 I) || N(mb, s^2 I)) written out per dimension
        ref = sum((x - y) ** 2 / (2 * s * s) for x, y in zip(ma, mb))
        assert abs(grpo.kl_same_variance(ma, mb, s) - ref) < 1e-12


def toy(rng, n_steps=2, G=2, weights=None, n_agents=2):
    fcfg = flow.FlowConfig(t_fut=3, hidden=8, depth=2, time_dim=4)
    params = flow.init_params(fcfg, CTX, np.random.default_rng(0))
    win = random_window(rng, n_agents=n_agents, t_hist=4, t_fut=3, scale=1.0)
    tokens = rng.normal(size=(n_agents, CTX))
    sched = SdeSchedule(eta=0.7, n_steps=n_steps)
    rcfg = RewardConfig(weights=weights or RewardWeights())
    gcfg = GrpoConfig(group_size=G)
    return fcfg, params, win, tokens, sched, rcfg, gcfg


def collect(params, ref, setup, seed=7):
    fcfg, _, win, tokens, sched, rcfg, gcfg = setup
    return grpo.collect_group(params, ref, win, tokens, None, sched, fcfg, rcfg, gcfg,
                              np.random.default_rng(seed))


def test_group_shares_prior_and_is_deterministic(rng):
    setup = toy(rng, G=4)
    p = setup[1]
    a = collect(p, p, setup)
    b = collect(p, p, setup)
    assert np.array_equal(a.trajectories, b.trajectories)
    y0 = a.records[0].y_in.reshape(4, -1, a.records[0].y_in.shape[-1])
    assert all(np.array_equal(y0[0], y0[g]) for g in range(4))
    assert a.advantages.shape == (4, 2)
    assert np.max(np.abs(a.advantages.mean(axis=0))) < 1e-9


def test_collect_rejects_zero_eta(rng):
    fcfg, p, win, tokens, _, rcfg, gcfg = toy(rng)
    with pytest.raises(ValueError):
        grpo.collect_group(p, p, win, tokens, None, SdeSchedule(eta=0.0), fcfg, rcfg, gcfg, rng)


def test_on_policy_ratios_are_one_and_loss_vanishes(rng):
    setup = toy(rng, G=4, n_steps=3)
    fcfg, p, *_ = setup
    sched, gcfg = setup[4], setup[6]
    groups = [collect(p, p, setup, seed=s) for s in (1, 2)]
    parts = grpo.grpo_loss(p, groups, gcfg, sched, fcfg)
    assert np.max(np.abs(parts.ratios - 1.0)) < 1e-12
    assert abs(parts.surrogate) < 1e-12
    assert parts.kl_pen == 0.0
    assert abs(float(parts.loss.data)) < 1e-12


def test_recollecting_gives_identical_loss(rng):
    setup = toy(rng)
    fcfg, p, *_ = setup
    sched, gcfg = setup[4], setup[6]
    ref = clone(p)
    moved = clone(p)
    for v in moved.values():
        v.data = v.data + 0.01
    a = grpo.grpo_loss(moved, [collect(p, ref, setup)], gcfg, sched, fcfg).loss.data
    b = grpo.grpo_loss(moved, [collect(p, ref, setup)], gcfg, sched, fcfg).loss.data
    assert a == b


def test_penalty_matches_kl_oracle(rng):
    setup = toy(rng)
    fcfg, p, *_ = setup
    sched, gcfg = setup[4], setup[6]
    ref = clone(p)
    for v in ref.values():
        v.data = v.data + rng.normal(0, 0.05, size=v.data.shape)
    grp = collect(p, ref, setup)
    parts = grpo.grpo_loss(p, [grp], gcfg, sched, fcfg)
    field = flow.make_field(p, fcfg)
    c = np.tile(grp.tokens, (grp.group_size, 1))
    kl = []
    for s, rec in enumerate(grp.records):
        t_bar = float(np.clip(rec.t, sched.tau_min, 1 - sched.tau_min))
        v = field(rec.y_in, np.full(len(c), t_bar), c)
        g2 = sched.eta ** 2 * (1 - t_bar) / t_bar
        mu = rec.y_in + (v + 0.5 * g2 * (t_bar * v - rec.y_in) / (1 - t_bar)) * sched.dt
        kl.append(grpo.kl_same_variance(mu, grp.ref_means[s], rec.sigma))
    assert abs(parts.kl_pen - gcfg.beta * np.mean(kl)) < 1e-12


def test_reference_means_use_reference_tokens(rng):
    setup = toy(rng)
    fcfg, p, win, tokens, sched, rcfg, gcfg = setup
    ref_tok = tokens + 0.5
    a = grpo.collect_group(p, p, win, tokens, None, sched, fcfg, rcfg, gcfg, np.random.default_rng(3),
                           ref_tokens=ref_tok)
    field = flow.make_field(p, fcfg)
    c_ref = np.tile(ref_tok, (gcfg.group_size, 1))
    rec = a.records[0]
    t_bar = float(np.clip(rec.t, sched.tau_min, 1 - sched.tau_min))
    v = field(rec.y_in, np.full(len(c_ref), t_bar), c_ref)
    g2 = sched.eta ** 2 * (1 - t_bar) / t_bar
    mu = rec.y_in + (v + 0.5 * g2 * (t_bar * v - rec.y_in) / (1 - t_bar)) * sched.dt
    assert np.max(np.abs(a.ref_means[0] - mu)) < 1e-12
    assert grpo.grpo_loss(p, [a], gcfg, sched, fcfg).kl_pen > 0


def test_clip_example():
    # ratio 1.3 with A = +1 contributes min(1.3, 1.2) = 1.2
    ratio, adv, eps = 1.3, 1.0, 0.2
    assert min(ratio * adv, float(np.clip(ratio, 1 - eps, 1 + eps)) * adv) == pytest.approx(1.2)


def test_clipping_active_with_inner_epochs(rng):
    setup = toy(rng, G=4)
    fcfg, p, win, tokens, sched, rcfg, _ = setup
    gcfg = GrpoConfig(group_size=4, eps_clip=0.01)
    grp = grpo.collect_group(p, p, win, tokens, None, sched, fcfg, rcfg, gcfg, np.random.default_rng(2))
    moved = clone(p)
    for v in moved.values():
        v.data = v.data + rng.normal(0, 0.3, size=v.data.shape)
    assert grpo.grpo_loss(moved, [grp], gcfg, sched, fcfg).clip_fraction > 0


def test_loss_gradients_match_finite_differences(rng):
    setup = toy(rng, n_steps=2, G=2)
    fcfg, p, *_ = setup
    sched, gcfg = setup[4], setup[6]
    grp = collect(p, clone(p), setup)
    policy = clone(p)
    for v in policy.values():
        v.data = v.data + rng.normal(0, 1e-3, size=v.data.shape)
    loss = grpo.grpo_loss(policy, [grp], gcfg, sched, fcfg).loss
    zero_grad(policy)
    loss.backward()
    for v in policy.values():
        num = numerical_grad(lambda: float(grpo.grpo_loss(policy, [grp], gcfg, sched, fcfg).loss.data),
                             v.data, h=1e-6)
        assert relative_error(v.grad, num, floor=1e-6) < 1e-4


def posttrain_toy(rng_seed, beta=0.01, weights=None, updates=10, lr=1e-2):
    r = np.random.default_rng(rng_seed)
    fcfg = flow.FlowConfig(t_fut=3, hidden=8, depth=2, time_dim=4)
    ecfg = enc.EncoderConfig(dim=CTX)
    eparams = enc.init_params(ecfg, np.random.default_rng(1), t_hist=4)
    fparams = flow.init_params(fcfg, CTX, np.random.default_rng(0))
    wins = [random_window(r, n_agents=2, t_hist=4, t_fut=3, scale=1.0) for _ in range(3)]
    cfg = GrpoConfig(beta=beta, total_updates=updates, conditions_per_update=2, learning_rate=lr)
    rcfg = RewardConfig(weights=weights or RewardWeights())
    res = grpo.posttrain(eparams, fparams, wins, {}, ecfg, fcfg, SdeSchedule(n_steps=2), rcfg, cfg)
    return fparams, res, fcfg


def test_null_reward_is_a_fixed_point():
    before, res, _ = posttrain_toy(0, weights=RewardWeights(0, 0, 0, 0), updates=1)
    for k, v in before.items():
        assert np.array_equal(res.flow_params[k].data, v.data)


def test_posttrain_does_not_touch_inputs_and_is_deterministic():
    before, a, _ = posttrain_toy(0, updates=3)
    _, b, _ = posttrain_toy(0, updates=3)
    for k in before:
        assert np.array_equal(a.flow_params[k].data, b.flow_params[k].data)
    assert a.log == b.log
    assert set(a.log[0]) >= {"update", "mean_reward", "mean_r_sv", "mean_r_map", "mean_r_acc",
                             "mean_r_sm", "kl_pen", "grad_norm"}
    assert any(not np.array_equal(a.flow_params[k].data, before[k].data) for k in before)


def test_beta_limits_drift():
    probe = np.random.default_rng(5)
    y = probe.normal(size=(16, 6))
    t = probe.uniform(0.05, 0.95, size=16)
    c = probe.normal(size=(16, CTX))
    drift = []
    for beta in (0.01, 1.0, 1e6):
        before, res, fcfg = posttrain_toy(0, beta=beta, updates=15, lr=3e-2)
        dv = flow.make_field(res.flow_params, fcfg)(y, t, c) - flow.make_field(before, fcfg)(y, t, c)
        drift.append(np.abs(dv).max())
    assert drift[0] > drift[1] > drift[2]


def test_config_validation():
    with pytest.raises(ValueError):
        GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        GrpoConfig(eps_clip=1.0)
    with pytest.raises(ValueError):
        GrpoConfig(beta=-1)
