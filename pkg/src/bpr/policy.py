"""Tanh-squashed Gaussian actor and the paired-sample preference regression loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, NumericError
from .nn import AdamW, DenseNet

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ACTION_CLIP = 1.0 - 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _log1m_tanh_sq(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class TanhGaussianPolicy:
    """``a = tanh(u)``, ``u ~ N(mean(s), std(s)^2)`` with a smooth log-std squash into [-5, 2]."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256), *,
                 layer_norm: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32, lr: float = 3e-4, weight_decay: float = 0.0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = DenseNet.mlp(state_dim, hidden, 2 * action_dim, layer_norm=layer_norm,
                                rng=rng, dtype=dtype)
        self.optim = AdamW.for_net(self.net, learning_rate=lr, weight_decay=weight_decay)
        self.query_count = 0

    @classmethod
    def from_net(cls, net: DenseNet, lr: float = 3e-4, weight_decay: float = 0.0) -> "TanhGaussianPolicy":
        """Wrap a loaded network whose output is ``[mean, raw log-std]``."""
        if net.output_dim % 2:
            raise ValueError("policy network output must be [mean, log-std]")
        p = cls.__new__(cls)
        p.state_dim, p.action_dim = net.input_dim, net.output_dim // 2
        p.net = net
        p.optim = AdamW.for_net(net, learning_rate=lr, weight_decay=weight_decay)
        p.query_count = 0
        return p

    def _split(self, out):
        mean = out[..., :self.action_dim]
        t = np.tanh(out[..., self.action_dim:])
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (t + 1.0)
        return mean, log_std, t

    def dist(self, s):
        self.query_count += 1
        mean, log_std, _ = self._split(self.net.forward(s))
        return mean, log_std

    def deterministic(self, s) -> np.ndarray:
        """Evaluation action ``tanh(mean)``."""
        return np.tanh(self.dist(s)[0])

    def sample(self, s, rng: np.random.Generator):
        """Draw ``(action, log_prob)``; the action carries no gradient path."""
        mean, log_std = self.dist(s)
        return sample_from(mean, log_std, rng)

    def log_prob(self, s, a) -> np.ndarray:
        mean, log_std = self.dist(s)
        return gaussian_tanh_log_prob(mean, log_std, a)[0]

    def forward_record(self, s):
        self.query_count += 1
        out, tape = self.net.forward(s, record=True)
        mean, log_std, t = self._split(out)
        return mean, log_std, t, tape

    def backward(self, tape, t, g_mean, g_log_std) -> np.ndarray:
        g_raw = g_log_std * (0.5 * (LOG_STD_MAX - LOG_STD_MIN)) * (1.0 - t * t)
        return self.net.backward(tape, np.concatenate([g_mean, g_raw], axis=-1))


def _draw(mean, log_std, rng):
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape).astype(mean.dtype)
    return np.clip(np.tanh(u), -ACTION_CLIP, ACTION_CLIP), u


def sample_from(mean, log_std, rng):
    a, u = _draw(mean, log_std, rng)
    return a, pre_tanh_log_prob(mean, log_std, u)[0]


def pre_tanh_log_prob(mean, log_std, u):
    """Log-density of ``tanh(u)`` computed from ``u`` itself, with partials.

    Exact for any ``u``, including values whose tanh rounds to +-1.
    """
    inv_std = np.exp(-log_std)
    z = (u - mean) * inv_std
    lp = (-0.5 * z * z - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u)).sum(axis=-1)
    return lp, z * inv_std, z * z - 1.0


def gaussian_tanh_log_prob(mean, log_std, a):
    """Log-density of ``a`` plus its partials w.r.t. ``mean`` and ``log_std``.

    ``a`` is clipped to +-(1 - 1e-6) before the inverse tanh.  The Jacobian
    term depends only on ``a``, so it has no parameter gradient.
    """
    a = np.clip(np.asarray(a, dtype=mean.dtype), -ACTION_CLIP, ACTION_CLIP)
    u = np.arctanh(a)
    inv_std = np.exp(-log_std)
    z = (u - mean) * inv_std
    lp = (-0.5 * z * z - log_std - _HALF_LOG_2PI - np.log1p(-a * a)).sum(axis=-1)
    return lp, z * inv_std, z * z - 1.0


# --- preference regression -------------------------------------------------

def bpr_residual(e1, e2, q1, q2, lp1, lp2, lam: float):
    """``(E2 - E1) - lam * ((log pi1 - Q1) - (log pi2 - Q2))`` per pair."""
    return (np.asarray(e2) - e1) - lam * ((np.asarray(lp1) - q1) - (np.asarray(lp2) - q2))


def bpr_objective(e1, e2, q1, q2, lp1, lp2, lam: float) -> float:
    r = bpr_residual(e1, e2, q1, q2, lp1, lp2, lam)
    return float(np.mean(r * r))


@dataclass
class BPRTerms:
    loss: float
    residual: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    grad: np.ndarray | None = None


def bpr_loss(cfg: TrainConfig, states, policy: TanhGaussianPolicy, ebm, critic,
             rng: np.random.Generator, dataset_actions=None, grad: bool = False,
             pairs=None) -> BPRTerms:
    """Paired-sample regression loss on a batch of states.

    Pairs come from the policy twice (self-play) or from the dataset and the
    policy (reference).  Energies, Q values and sampled actions are constants;
    only the two log-densities carry gradient, returned as ``terms.grad``
    (flat, policy parameters) when ``grad`` is set.  ``pairs`` fixes
    ``(a1, a2)`` instead of sampling, e.g. for finite-difference checks.
    """
    if not getattr(ebm, "trained", True):
        raise ConfigError("the energy model must be trained before policy optimization")
    states = np.asarray(states, dtype=policy.net.dtype)
    mean, log_std, t, tape = policy.forward_record(states)
    # policy samples are scored at their own pre-tanh draw, given actions via arctanh
    if pairs is not None:
        a1, a2 = (np.asarray(x, dtype=mean.dtype) for x in pairs)
        lp1, gm1, gs1 = gaussian_tanh_log_prob(mean, log_std, a1)
        lp2, gm2, gs2 = gaussian_tanh_log_prob(mean, log_std, a2)
    elif cfg.mode == "self_play":
        a1, u1 = _draw(mean, log_std, rng)
        a2, u2 = _draw(mean, log_std, rng)
        lp1, gm1, gs1 = pre_tanh_log_prob(mean, log_std, u1)
        lp2, gm2, gs2 = pre_tanh_log_prob(mean, log_std, u2)
    elif cfg.mode == "reference":
        if dataset_actions is None:
            raise ConfigError("reference sampling needs dataset actions")
        a1 = np.asarray(dataset_actions, dtype=mean.dtype)
        a2, u2 = _draw(mean, log_std, rng)
        lp1, gm1, gs1 = gaussian_tanh_log_prob(mean, log_std, a1)
        lp2, gm2, gs2 = pre_tanh_log_prob(mean, log_std, u2)
    else:
        raise ConfigError(f"unknown sampling mode {cfg.mode!r}")
    pair_s = np.concatenate([states, states])
    pair_a = np.concatenate([a1, a2])
    e = np.asarray(ebm.energy(pair_s, pair_a), dtype=np.float64)
    q = np.asarray(critic.q_value(pair_s, pair_a), dtype=np.float64)
    n = len(states)
    resid = bpr_residual(e[:n], e[n:], q[:n], q[n:], lp1.astype(np.float64), lp2.astype(np.float64), cfg.lam)
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise NumericError("non-finite BPR loss", "bpr_loss")
    terms = BPRTerms(loss, resid, a1, a2)
    if grad:
        d1 = (-2.0 * cfg.lam / n * resid).astype(mean.dtype)[:, None]
        g_mean = d1 * gm1 - d1 * gm2
        g_log_std = d1 * gs1 - d1 * gs2
        terms.grad = policy.backward(tape, t, g_mean, g_log_std)
    return terms


def policy_step(cfg: TrainConfig, policy: TanhGaussianPolicy, ebm, critic, batch,
                rng: np.random.Generator) -> float:
    """One optimizer step of the preference regression loss on ``batch``."""
    try:
        terms = bpr_loss(cfg, batch.states, policy, ebm, critic, rng,
                         dataset_actions=batch.actions, grad=True)
    except NumericError as exc:
        raise NumericError(f"{exc}; batch states range [{np.min(batch.states):.3g}, "
                           f"{np.max(batch.states):.3g}]", "policy_step") from exc
    policy.optim.step(policy.net.params, terms.grad, policy.net.param_name)
    return terms.loss


def bc_loss(states, actions, policy: TanhGaussianPolicy, grad: bool = False):
    """Negative mean log-likelihood of dataset actions."""
    mean, log_std, t, tape = policy.forward_record(np.asarray(states, dtype=policy.net.dtype))
    lp, gm, gs = gaussian_tanh_log_prob(mean, log_std, actions)
    n = len(lp)
    loss = -float(np.mean(lp))
    if not grad:
        return loss
    return loss, policy.backward(tape, t, -gm / n, -gs / n)


def bc_step(policy: TanhGaussianPolicy, batch) -> float:
    loss, g = bc_loss(batch.states, batch.actions, policy, grad=True)
    if not math.isfinite(loss):
        raise NumericError("non-finite BC loss", "bc_step")
    policy.optim.step(policy.net.params, g, policy.net.param_name)
    return loss
