"""Q-function ensembles for the off-policy, Onestep (SARSA) and LCB-ensemble regimes."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .config import REGIMES, TrainConfig
from .errors import ConfigError, NumericError
from .nn import AdamW, DenseNet, soft_update


def concat_features(s, a):
    s, a = np.asarray(s), np.asarray(a)
    if s.shape[:-1] != a.shape[:-1]:
        s = np.broadcast_to(s, a.shape[:-1] + s.shape[-1:])
    return np.concatenate([s, a], axis=-1)


def outer_features(s, a):
    """Tabular mode: one-hot state x one-hot action -> one-hot pair."""
    s, a = np.asarray(s), np.asarray(a)
    return (s[..., :, None] * a[..., None, :]).reshape(*s.shape[:-1], -1)


class CriticSet:
    """Online Q members, their target copies and the regime's hyperparameters.

    Targets change only through :func:`target_soft_update`.
    """

    def __init__(self, state_dim: int, action_dim: int, regime: str = "off_policy", *,
                 n_members: int | None = None, hidden=(256, 256), layer_norm: bool = True,
                 tau: float = 0.005, alpha: float = 0.2, gamma: float = 0.99, omega: float = 2.0,
                 lr: float = 3e-4, weight_decay: float = 0.0, rng: np.random.Generator | None = None,
                 dtype=np.float32, features: Callable | None = None, in_dim: int | None = None):
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
        if n_members is None:
            n_members = 4 if regime == "ensemble_lcb" else 2
        if n_members < 1 or (regime == "ensemble_lcb" and n_members < 2):
            raise ConfigError(f"regime {regime} cannot run with {n_members} members")
        if alpha < 0 or omega < 0 or not 0 <= gamma < 1:
            raise ConfigError("need alpha >= 0, omega >= 0, gamma in [0, 1)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.regime = regime
        self.tau, self.alpha, self.gamma, self.omega = tau, alpha, gamma, omega
        self.features = features if features is not None else concat_features
        in_dim = in_dim if in_dim is not None else state_dim + action_dim
        self.members = [DenseNet.mlp(in_dim, hidden, 1, layer_norm=layer_norm, rng=rng, dtype=dtype)
                        for _ in range(n_members)]
        self.targets = [m.copy() for m in self.members]
        self.optims = [AdamW.for_net(m, learning_rate=lr, weight_decay=weight_decay) for m in self.members]

    @classmethod
    def from_config(cls, cfg: TrainConfig, state_dim: int, action_dim: int, rng) -> "CriticSet":
        return cls(state_dim, action_dim, cfg.regime, n_members=cfg.members, hidden=cfg.critic_hidden,
                   layer_norm=cfg.critic_layer_norm, tau=cfg.tau, alpha=cfg.alpha, gamma=cfg.gamma,
                   omega=cfg.omega, lr=cfg.critic_lr, weight_decay=cfg.weight_decay, rng=rng)

    def member_values(self, s, a, target: bool = False) -> np.ndarray:
        """(n_members, ...) stack of Q_i(s, a)."""
        nets = self.targets if target else self.members
        x = self.features(s, a)
        return np.stack([net.forward(x)[..., 0] for net in nets])

    def q_value(self, s, a) -> np.ndarray:
        return q_value(self, s, a)


class FixedQ:
    """A known action-value function (e.g. a bandit's reward); nothing to learn."""

    regime = "fixed"
    members: list = []

    def __init__(self, fn: Callable):
        self.fn = fn

    def q_value(self, s, a) -> np.ndarray:
        return np.asarray(self.fn(s, a), dtype=np.float64)


def q_lcb(cs: CriticSet, s, a) -> np.ndarray:
    """Ensemble mean minus ``omega`` times the population variance across members."""
    if len(cs.members) < 2:
        raise ConfigError("the LCB needs at least two members")
    q = cs.member_values(s, a).astype(np.float64)
    return q.mean(axis=0) - cs.omega * q.var(axis=0)


def q_value(cs: CriticSet, s, a) -> np.ndarray:
    """Value consumed by the policy objective: min over members, or the LCB."""
    if cs.regime == "ensemble_lcb":
        return q_lcb(cs, s, a)
    return cs.member_values(s, a).astype(np.float64).min(axis=0)


def _check_targets(y, batch):
    if not np.all(np.isfinite(y)):
        rows = np.argwhere(~np.isfinite(np.atleast_2d(y)))[:5]
        raise NumericError(f"non-finite Bellman target in rows {rows[:, -1].tolist()} "
                           f"(rewards {np.asarray(batch.rewards)[rows[:, -1]].tolist()})", "critic target")
    return y


def soft_bellman_target(cs: CriticSet, batch, policy, rng: np.random.Generator) -> np.ndarray:
    """``r + (1 - done) * gamma * (min_i Qbar_i(s', a') - alpha * log pi(a'|s'))``, ``a' ~ pi(s')``."""
    if cs.regime != "off_policy":
        raise ConfigError(f"soft Bellman targets are for the off_policy regime, not {cs.regime}")
    a2, lp2 = policy.sample(batch.next_states, rng)
    q2 = cs.member_values(batch.next_states, a2, target=True).astype(np.float64).min(axis=0)
    boot = q2 - cs.alpha * lp2.astype(np.float64)
    y = batch.rewards + np.where(batch.dones, 0.0, cs.gamma * boot)
    return _check_targets(y, batch)


def sarsa_target(cs: CriticSet, batch) -> np.ndarray:
    """On-policy targets from the logged next action; no entropy term.

    Onestep: ``r + (1 - done) * gamma * min_i Qbar_i(s', a')``, shape (B,).
    Ensemble: each member bootstraps from its own target copy, shape (M, B).
    """
    if cs.regime == "off_policy":
        raise ConfigError("SARSA targets are for the onestep and ensemble_lcb regimes")
    a2 = batch.next_actions
    if a2 is None:
        raise ConfigError("batch has no next actions")
    if np.any(~np.isfinite(a2[~batch.dones])):
        raise ConfigError("missing next action on a non-terminal row")
    # terminal rows never bootstrap, whatever their stored next action holds
    a2 = np.where(batch.dones[:, None], 0.0, a2)
    q2 = cs.member_values(batch.next_states, a2, target=True).astype(np.float64)
    if cs.regime == "onestep":
        y = batch.rewards + np.where(batch.dones, 0.0, cs.gamma * q2.min(axis=0))
    else:
        y = batch.rewards[None] + np.where(batch.dones[None], 0.0, cs.gamma * q2)
    return _check_targets(y, batch)


def critic_mse(net, x, y, grad: bool = False):
    """``mean((Q(x) - y)^2)`` and, with ``grad``, its gradient in the flat parameters."""
    if not grad:
        diff = net.forward(x)[:, 0].astype(np.float64) - y
        return float(np.mean(diff * diff))
    q, tape = net.forward(x, record=True)
    diff = q[:, 0].astype(np.float64) - y
    loss = float(np.mean(diff * diff))
    return loss, net.backward(tape, (2.0 / len(diff)) * diff[:, None])


def critic_update(cs: CriticSet, batch, targets) -> list[float]:
    """One optimizer step per member on ``mean((Q_i(s, a) - y_i)^2)``."""
    x = cs.features(batch.states, batch.actions)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = np.broadcast_to(targets, (len(cs.members),) + targets.shape)
    losses = []
    for i, (net, opt) in enumerate(zip(cs.members, cs.optims)):
        loss, g = critic_mse(net, x, targets[i], grad=True)
        if not math.isfinite(loss):
            raise NumericError("non-finite critic loss", f"critic[{i}]")
        opt.step(net.params, g, net.param_name)
        losses.append(loss)
    return losses


def target_soft_update(cs: CriticSet, tau: float | None = None):
    tau = cs.tau if tau is None else tau
    for target, online in zip(cs.targets, cs.members):
        soft_update(target, online, tau)


def regime_targets(cs: CriticSet, batch, policy=None, rng=None) -> np.ndarray:
    if cs.regime == "off_policy":
        return soft_bellman_target(cs, batch, policy, rng)
    return sarsa_target(cs, batch)
