import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisor_lab.dataset import DatasetStats
from fisor_lab.diffusion import (
    DiffusionConfig,
    DiffusionPolicy,
    GaussianPolicy,
    NoiseSchedule,
    WeightConfig,
    fisor_weight,
    il_weight,
    timestep_embedding,
    train_policy,
)
from fisor_lab.env import EnvConfig
from fisor_lab.values import CriticBank, CriticConfig

ENV = EnvConfig()
SMALL_CRITIC = CriticConfig(hidden=(8, 8), dtype="float64")
W = WeightConfig()


def const_bank(q_h=0.0, v_h=0.0, q_r=0.0, v_r=0.0, families=("h", "r")):
    bank = CriticBank(SMALL_CRITIC, DatasetStats.identity(5), ENV.action_bounds, families=families)
    vals = {"h": (q_h, v_h), "r": (q_r, v_r), "c": (q_h, v_h)}
    for fam, cs in bank.sets.items():
        q, v = vals[fam]
        for net in cs.networks().values():
            net.params[...] = 0.0
        for net in (cs.q[0], cs.q[1], cs.q_target[0], cs.q_target[1]):
            net.biases[-1][...] = q
        cs.v.biases[-1][...] = v
    return bank


S1, A1 = np.zeros((1, 4)), np.zeros((1, 2))


# --- schedule -------------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 5, 20, 100])
def test_schedule_invariants(T):
    sch = NoiseSchedule(T)
    assert np.allclose(sch.alpha ** 2 + sch.sigma ** 2, 1.0, atol=1e-12, rtol=0)
    assert sch.alpha[0] == 1.0 and sch.sigma[0] == 0.0
    assert np.all(np.diff(sch.alpha) < 0)
    assert sch.alpha[-1] < 0.05
    assert np.all(sch.post_var[1:] >= 0)


def test_forward_marginal_matches_schedule():
    sch = NoiseSchedule(5)
    rng = np.random.default_rng(0)
    a, n = 0.7, 200_000
    for t in range(1, 6):
        x = sch.alpha[t] * a + sch.sigma[t] * rng.standard_normal(n)
        se_mean = sch.sigma[t] / math.sqrt(n)
        se_std = sch.sigma[t] / math.sqrt(2 * n)
        assert abs(x.mean() - sch.alpha[t] * a) < 3 * se_mean
        assert abs(x.std() - sch.sigma[t]) < 3 * se_std


def test_posterior_mean_recovers_x0_when_exact():
    # if the predictor were exact, x0-prediction of a noised point is the point itself
    sch = NoiseSchedule(5)
    a0, z = 0.3, -1.2
    for t in range(1, 6):
        a_t = sch.alpha[t] * a0 + sch.sigma[t] * z
        assert (a_t - sch.sigma[t] * z) / sch.alpha[t] == pytest.approx(a0)


def test_timestep_embedding_shape():
    e = timestep_embedding(np.array([0, 1, 5]), 64)
    assert e.shape == (3, 64)
    assert np.allclose(e[0, :32], 0) and np.allclose(e[0, 32:], 1)


# --- sampler --------------------------------------------------------------------

def test_sampler_calls_predictor_T_times_and_clips():
    pol = DiffusionPolicy(2, 5, DiffusionConfig(hidden=(16, 16)), seed=0)
    obs = np.zeros((7, 5))
    a = pol.sample(obs, np.random.default_rng(0))
    assert pol.predictor.n_calls == 5
    assert a.shape == (7, 2) and np.all(np.abs(a) <= 1)


def test_sampler_deterministic_given_stream():
    pol = DiffusionPolicy(2, 5, DiffusionConfig(hidden=(16, 16)), seed=0)
    obs = np.random.default_rng(1).standard_normal((4, 5))
    a1 = pol.sample(obs, np.random.default_rng(9))
    a2 = pol.sample(obs, np.random.default_rng(9))
    assert np.array_equal(a1, a2)


def test_point_mass_behavior_concentrates():
    target = np.array([0.4, -0.3])
    cfg = DiffusionConfig(hidden=(64, 64, 64), batch_size=256, lr=1e-3, log_every=500)
    pol = DiffusionPolicy(2, 5, cfg, seed=0)
    n = 2048
    obs = np.random.default_rng(0).standard_normal((n, 5))
    acts = np.tile(target, (n, 1))
    train_policy(pol, obs, acts, np.ones(n), 3000)
    samples = pol.sample(obs[:1000], np.random.default_rng(1))
    assert np.all(np.abs(samples.mean(axis=0) - target) < 0.05)
    assert np.all(samples.std(axis=0) <= 0.05)


# --- training loss ----------------------------------------------------------------

def test_unit_weights_equal_unweighted_loss():
    pol = DiffusionPolicy(2, 5, DiffusionConfig(hidden=(16, 16), dtype="float64"), seed=0)
    rng = np.random.default_rng(0)
    obs, act = rng.standard_normal((32, 5)), rng.uniform(-1, 1, (32, 2))
    t, z = rng.integers(1, 6, 32), rng.standard_normal((32, 2))
    loss, _ = pol.loss_and_grad(obs, act, np.ones(32), t, z)
    sch = pol.schedule
    a_t = sch.alpha[t][:, None] * act + sch.sigma[t][:, None] * z
    plain = np.mean(np.sum((pol.predictor(a_t, obs, t) - z) ** 2, axis=1))
    assert loss == pytest.approx(plain, rel=1e-12)


def test_zero_weights_zero_gradient():
    pol = DiffusionPolicy(2, 5, DiffusionConfig(hidden=(16, 16)), seed=0)
    rng = np.random.default_rng(0)
    _, g = pol.loss_and_grad(rng.standard_normal((8, 5)), rng.uniform(-1, 1, (8, 2)), np.zeros(8),
                             rng.integers(1, 6, 8), rng.standard_normal((8, 2)))
    assert np.all(g == 0)


def test_all_zero_batches_skipped_and_counted():
    cfg = DiffusionConfig(hidden=(8, 8), batch_size=16, log_every=5)
    pol = DiffusionPolicy(2, 5, cfg, seed=0)
    before = pol.net.params.copy()
    curve = train_policy(pol, np.zeros((64, 5)), np.zeros((64, 2)), np.zeros(64), 10)
    assert pol.skipped_batches == 10
    assert np.array_equal(pol.net.params, before)
    assert curve == []


def test_policy_training_deterministic():
    cfg = DiffusionConfig(hidden=(16, 16), batch_size=32)
    rng = np.random.default_rng(0)
    obs, act, w = rng.standard_normal((100, 5)), rng.uniform(-1, 1, (100, 2)), rng.uniform(0, 2, 100)
    sums = []
    for _ in range(2):
        pol = DiffusionPolicy(2, 5, cfg, seed=3)
        train_policy(pol, obs, act, w, 20, seed=3)
        sums.append(pol.net.checksum())
    assert sums[0] == sums[1]


def test_gaussian_head_regresses_weighted_mean():
    cfg = DiffusionConfig(hidden=(32, 32), batch_size=128, lr=3e-3)
    pol = GaussianPolicy(2, 5, cfg, seed=0)
    obs = np.zeros((200, 5))
    act = np.vstack([np.tile([0.5, 0.5], (100, 1)), np.tile([-0.5, -0.5], (100, 1))])
    w = np.r_[np.ones(100), np.zeros(100)]
    train_policy(pol, obs, act, w, 800)
    assert np.allclose(pol.sample(obs[:1]), [0.5, 0.5], atol=0.05)


# --- weights ----------------------------------------------------------------------

def test_weight_feasible_zero_advantage_is_one():
    assert fisor_weight(const_bank(q_h=-0.1, v_h=-0.2, q_r=1.0, v_r=1.0), W, S1, A1)[0] == pytest.approx(1.0)


def test_weight_indicator_boundary_inclusive():
    assert fisor_weight(const_bank(q_h=0.0, v_h=0.0), W, S1, A1)[0] == pytest.approx(1.0)
    assert fisor_weight(const_bank(q_h=0.1, v_h=-0.2), W, S1, A1)[0] == 0.0


def test_weight_feasible_clip():
    w = fisor_weight(const_bank(q_h=-1.0, v_h=-1.0, q_r=2.0, v_r=0.0), W, S1, A1)[0]
    assert w == 100.0


def test_weight_infeasible_branch_and_clip():
    # A_h = 0 gives 1; A_h = -2 gives exp(10) clipped at 150; A_h = 0.2 gives exp(-1)
    assert fisor_weight(const_bank(q_h=0.3, v_h=0.3), W, S1, A1)[0] == pytest.approx(1.0)
    assert fisor_weight(const_bank(q_h=-1.7, v_h=0.3), W, S1, A1)[0] == 150.0
    assert fisor_weight(const_bank(q_h=0.5, v_h=0.3), W, S1, A1)[0] == pytest.approx(math.exp(-1.0))


def test_weight_infeasible_branch_disabled():
    off = WeightConfig(infeasible_branch=False)
    assert fisor_weight(const_bank(q_h=0.3, v_h=0.3), off, S1, A1)[0] == 0.0


def test_il_weight_examples():
    assert il_weight(const_bank(q_h=-0.5, v_h=-0.6, families=("h",)), W, S1, A1)[0] == 1.0
    assert il_weight(const_bank(q_h=0.5, v_h=-0.6, families=("h",)), W, S1, A1)[0] == 0.0
    assert il_weight(const_bank(q_h=0.4, v_h=0.4, families=("h",)), W, S1, A1)[0] == pytest.approx(1.0)


def test_weight_uses_cost_family_when_selected():
    bank = const_bank(q_h=5.0, v_h=5.0, families=("c", "r"))
    bank.safety_family, bank.safety_threshold = "c", 1e-3
    for net in (bank.sets["c"].q[0], bank.sets["c"].q[1]):
        net.biases[-1][...] = 0.0
    bank.sets["c"].v.biases[-1][...] = 0.0
    assert fisor_weight(bank, W, S1, A1)[0] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-3, 3))
def test_weight_piecewise_properties(q_h, v_h, q_r, v_r):
    w = fisor_weight(const_bank(q_h, v_h, q_r, v_r), W, S1, A1)[0]
    w_other_reward = fisor_weight(const_bank(q_h, v_h, q_r + 1.0, v_r - 0.5), W, S1, A1)[0]
    assert w >= 0
    if v_h > 0:
        assert w == w_other_reward
    else:
        assert (w > 0) == (q_h <= 0) == (w_other_reward > 0)
