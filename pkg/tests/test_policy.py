import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bpr.config import TrainConfig
from bpr.critic import CriticSet, FixedQ
from bpr.dataset import Batch
from bpr.ebm import EnergyModel
from bpr.errors import ConfigError
from bpr.nn import grad_check
from bpr.policy import (LOG_STD_MAX, LOG_STD_MIN, TanhGaussianPolicy, bpr_loss, bpr_objective, bpr_residual,
                        gaussian_tanh_log_prob, policy_step, pre_tanh_log_prob, sample_from)


class FnEnergy:
    trained = True

    def __init__(self, fn):
        self.fn = fn

    def energy(self, s, a):
        return self.fn(np.asarray(s, np.float64), np.asarray(a, np.float64))


def quad_energy(s, a):
    return ((a - 0.3 * s[..., :a.shape[-1]]) ** 2).sum(-1) * 4.0


def quad_q(s, a):
    return -((a - 0.5) ** 2).sum(-1) + s.sum(-1)


def policy(seed=0, sd=3, ad=2, dtype=np.float64, hidden=(8,)):
    return TanhGaussianPolicy(sd, ad, hidden, rng=np.random.default_rng(seed), dtype=dtype)


def test_degenerate_std_gives_tanh_of_mean():
    mean = np.array([[0.3, -1.2]])
    a, _ = sample_from(mean, np.full_like(mean, -30.0), np.random.default_rng(0))
    np.testing.assert_allclose(a, np.tanh(mean), atol=1e-12)


def test_standard_normal_at_zero():
    lp, _, _ = gaussian_tanh_log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert lp[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert lp[0] == pytest.approx(-0.918939, abs=1e-6)


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.8, -1.0), (-0.4, -0.5)])
def test_density_integrates_to_one(mu, log_std):
    a = np.linspace(-1, 1, 2001)[1:-1]
    lp, _, _ = gaussian_tanh_log_prob(np.full((a.size, 1), mu), np.full((a.size, 1), log_std), a[:, None])
    mass = np.trapezoid(np.exp(lp), a)
    assert abs(mass - 1.0) <= 1e-3


def test_log_prob_matches_sampled_log_prob():
    p = policy()
    s = np.random.default_rng(1).standard_normal((50, 3))
    a, lp = p.sample(s, np.random.default_rng(2))
    # very wide draws saturate near +-1 and lose precision in arctanh
    ok = np.all(np.abs(a) < 0.999, axis=1)
    np.testing.assert_allclose(p.log_prob(s, a)[ok], lp[ok], atol=1e-5)


def test_log_prob_symmetry():
    a = np.linspace(-0.99, 0.99, 41)[:, None]
    m, ls = np.zeros_like(a), np.full_like(a, -0.3)
    np.testing.assert_allclose(gaussian_tanh_log_prob(m, ls, a)[0], gaussian_tanh_log_prob(m, ls, -a)[0], rtol=1e-12)


def test_boundary_actions_are_clipped():
    lp, _, _ = gaussian_tanh_log_prob(np.zeros((2, 1)), np.zeros((2, 1)), np.array([[1.0], [-1.0]]))
    assert np.all(np.isfinite(lp))


def test_log_prob_partials_match_finite_differences():
    rng = np.random.default_rng(3)
    mean, ls, a = rng.standard_normal((5, 2)), rng.uniform(-1, 0.5, (5, 2)), rng.uniform(-0.9, 0.9, (5, 2))
    _, gm, gs = gaussian_tanh_log_prob(mean, ls, a)
    h = 1e-6
    for j in range(2):
        e = np.zeros_like(mean)
        e[:, j] = h
        num_m = (gaussian_tanh_log_prob(mean + e, ls, a)[0] - gaussian_tanh_log_prob(mean - e, ls, a)[0]) / (2 * h)
        num_s = (gaussian_tanh_log_prob(mean, ls + e, a)[0] - gaussian_tanh_log_prob(mean, ls - e, a)[0]) / (2 * h)
        np.testing.assert_allclose(gm[:, j], num_m, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(gs[:, j], num_s, rtol=1e-4, atol=1e-8)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_log_std_range_and_action_box(seed, scale):
    p = policy(seed=seed % 7)
    p.net.params *= scale
    s = np.random.default_rng(seed).standard_normal((16, 3))
    mean, log_std = p.dist(s)
    assert np.all(log_std >= LOG_STD_MIN) and np.all(log_std <= LOG_STD_MAX)
    a, lp = p.sample(s, np.random.default_rng(seed))
    assert np.all(np.abs(a) <= 1.0) and np.all(np.isfinite(lp))


def test_hand_example():
    assert bpr_objective(1.0, 2.0, 0.5, 0.0, -1.0, -2.0, 1.0) == pytest.approx(0.25, abs=1e-7)


def test_identical_pair_has_zero_residual():
    p = policy()
    s = np.random.default_rng(0).standard_normal((10, 3))
    a = np.random.default_rng(1).uniform(-0.9, 0.9, (10, 2))
    terms = bpr_loss(TrainConfig(), s, p, FnEnergy(quad_energy), FixedQ(quad_q), None, pairs=(a, a))
    assert terms.loss == 0.0 and np.all(terms.residual == 0.0)


def test_swapping_the_pair_gives_the_same_loss():
    p = policy()
    rng = np.random.default_rng(0)
    s, a1, a2 = rng.standard_normal((10, 3)), rng.uniform(-0.9, 0.9, (10, 2)), rng.uniform(-0.9, 0.9, (10, 2))
    args = (TrainConfig(), s, p, FnEnergy(quad_energy), FixedQ(quad_q), None)
    t12 = bpr_loss(*args, pairs=(a1, a2))
    t21 = bpr_loss(*args, pairs=(a2, a1))
    np.testing.assert_allclose(t12.residual, -t21.residual, rtol=1e-12)
    assert t12.loss == pytest.approx(t21.loss, rel=1e-12)


@given(st.integers(0, 10_000))
def test_state_dependent_shifts_leave_the_loss_unchanged(seed):
    rng = np.random.default_rng(seed)
    p = policy(seed=seed % 5)
    s = rng.standard_normal((12, 3))
    w = rng.standard_normal(3) * 10
    shift = lambda s_: np.sin(s_ @ w) * 50
    cfg = TrainConfig()
    base = bpr_loss(cfg, s, p, FnEnergy(quad_energy), FixedQ(quad_q), np.random.default_rng(1))
    e_shift = bpr_loss(cfg, s, p, FnEnergy(lambda s_, a: quad_energy(s_, a) + shift(s_)), FixedQ(quad_q),
                       np.random.default_rng(1))
    q_shift = bpr_loss(cfg, s, p, FnEnergy(quad_energy), FixedQ(lambda s_, a: quad_q(s_, a) + shift(s_)),
                       np.random.default_rng(1))
    for other in (e_shift, q_shift):
        assert abs(other.loss - base.loss) <= 1e-6 * max(abs(base.loss), 1e-12)


def test_lambda_scales_the_model_term_linearly():
    rng = np.random.default_rng(0)
    e1, e2, q1, q2, l1, l2 = rng.standard_normal((6, 20))
    r1 = bpr_residual(e1, e2, q1, q2, l1, l2, 1.0) - (e2 - e1)
    r2 = bpr_residual(e1, e2, q1, q2, l1, l2, 2.0) - (e2 - e1)
    np.testing.assert_allclose(r2, 2 * r1, rtol=1e-12)


def test_reference_mode_puts_the_dataset_action_first():
    p = policy()
    rng = np.random.default_rng(0)
    s, a_data = rng.standard_normal((6, 3)), rng.uniform(-0.9, 0.9, (6, 2))
    t = bpr_loss(TrainConfig(mode="reference"), s, p, FnEnergy(quad_energy), FixedQ(quad_q), rng,
                 dataset_actions=a_data)
    np.testing.assert_allclose(t.a1, a_data)
    with pytest.raises(ConfigError):
        bpr_loss(TrainConfig(mode="reference"), s, p, FnEnergy(quad_energy), FixedQ(quad_q), rng)


def test_untrained_energy_model_is_rejected():
    ebm = EnergyModel(3, 2, (4,), rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        bpr_loss(TrainConfig(), np.zeros((2, 3)), policy(), ebm, FixedQ(quad_q), np.random.default_rng(0))


@pytest.mark.parametrize("mode", ["self_play", "reference"])
def test_bpr_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(5)
    p = policy(seed=5, hidden=(8, 8))
    s = rng.standard_normal((10, 3))
    a1 = rng.uniform(-0.9, 0.9, (10, 2))
    a2 = rng.uniform(-0.9, 0.9, (10, 2))
    cfg = TrainConfig(mode=mode, lam=0.7)

    def f(params):
        p.net.params[...] = params
        t = bpr_loss(cfg, s, p, FnEnergy(quad_energy), FixedQ(quad_q), None, grad=True, pairs=(a1, a2))
        return t.loss, t.grad

    assert grad_check(f, p.net.params.copy(), 30, rng) <= 1e-4


def test_forced_identical_pair_gives_zero_update():
    p = policy()
    a = np.random.default_rng(1).uniform(-0.9, 0.9, (4, 2))
    t = bpr_loss(TrainConfig(lam=1e6), np.zeros((4, 3)), p, FnEnergy(quad_energy), FixedQ(quad_q), None,
                 grad=True, pairs=(a, a))
    assert np.all(t.grad == 0)


def _batch(n=32, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, 3)).astype(np.float32)
    a = rng.uniform(-0.9, 0.9, (n, 2)).astype(np.float32)
    return Batch(s, a, np.zeros(n), s, a, np.zeros(n, bool))


def test_policy_step_never_touches_energy_or_critic():
    ebm = EnergyModel(3, 2, (8,), rng=np.random.default_rng(0))
    ebm.trained = True
    cs = CriticSet(3, 2, hidden=(8,), rng=np.random.default_rng(1))
    e0 = ebm.net.params.copy()
    q0 = [m.params.copy() for m in cs.members]
    p = policy(dtype=np.float32)
    for i in range(5):
        policy_step(TrainConfig(), p, ebm, cs, _batch(seed=i), np.random.default_rng(i))
    assert np.array_equal(ebm.net.params, e0) and ebm.optim.step_count == 0
    assert all(np.array_equal(m.params, q) for m, q in zip(cs.members, q0))
    assert all(o.step_count == 0 for o in cs.optims)


def test_policy_steps_are_deterministic():
    def run():
        p = policy(dtype=np.float32)
        rng = np.random.default_rng(9)
        for i in range(100):
            policy_step(TrainConfig(), p, FnEnergy(quad_energy), FixedQ(quad_q), _batch(seed=i), rng)
        return p.net.params.copy()
    assert run().tobytes() == run().tobytes()


def test_regression_recovers_the_tilted_target():
    # state-free 1-D case: the loss minimizer is pi ~ exp(Q) * exp(-E)^(1/lam)
    p = TanhGaussianPolicy(1, 1, (), rng=np.random.default_rng(0), dtype=np.float64, lr=1e-2)
    ebm = FnEnergy(lambda s, a: 8.0 * np.arctanh(np.clip(a[..., 0], -0.999, 0.999)) ** 2)
    q = FixedQ(lambda s, a: 2.0 * np.arctanh(np.clip(a[..., 0], -0.999, 0.999)))
    rng = np.random.default_rng(1)
    s = np.zeros((256, 1))
    for _ in range(3000):
        t = bpr_loss(TrainConfig(), s, p, ebm, q, rng, grad=True)
        p.optim.step(p.net.params, t.grad)
    mean, log_std = p.dist(s[:1])
    # in u = atanh(a): exp(2u - 8u^2) * (1 - a^2) Jacobian; the Gaussian part peaks near u = 1/8
    assert abs(np.arctanh(np.tanh(mean[0, 0])) - 0.125) < 0.1


def test_samples_stay_inside_the_open_box_in_float32():
    mean = np.full((1000, 2), 12.0, np.float32)
    a, lp = sample_from(mean, np.full_like(mean, -3.0), np.random.default_rng(0))
    assert np.all(np.abs(a) < 1.0) and np.all(np.isfinite(lp))


def test_pre_tanh_density_matches_the_action_density():
    rng = np.random.default_rng(2)
    mean, ls = rng.standard_normal((50, 2)), rng.uniform(-1, 0.5, (50, 2))
    u = mean + np.exp(ls) * rng.standard_normal((50, 2))
    for x, y in zip(pre_tanh_log_prob(mean, ls, u), gaussian_tanh_log_prob(mean, ls, np.tanh(u))):
        np.testing.assert_allclose(x, y, rtol=1e-7, atol=1e-7)


def test_pre_tanh_density_is_exact_past_the_clip():
    # tanh(10) rounds to the clip value, so the arctanh route would score u = 7.25 instead
    lp, _, _ = pre_tanh_log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[10.0]]))
    exact = -0.5 * 100 - 0.5 * np.log(2 * np.pi) - np.log(4.0) + 20.0 + 2 * np.log1p(np.exp(-20.0))
    assert lp[0] == pytest.approx(exact, rel=1e-12)
