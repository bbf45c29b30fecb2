"""Energy-based behavior model trained with InfoNCE against uniform negatives.

Only energy differences at given actions are ever used downstream, so the
normalizer of ``exp(-E)`` is never computed outside the grid diagnostic.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .config import TrainConfig
from .dataset import OfflineDataset, sample_batch
from .errors import NumericError, ShapeError
from .nn import AdamW, DenseNet

log = logging.getLogger(__name__)


class EnergyModel:
    def __init__(self, state_dim: int, action_dim: int, hidden=(512, 512, 512, 512), *,
                 layer_norm: bool = True, spectral_norm: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 low: float = -1.0, high: float = 1.0, lr: float = 3e-4, weight_decay: float = 0.0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.low, self.high = low, high
        self.net = DenseNet.mlp(state_dim + action_dim, hidden, 1, layer_norm=layer_norm,
                                spectral_norm=spectral_norm, rng=rng, dtype=dtype)
        self.optim = AdamW.for_net(self.net, learning_rate=lr, weight_decay=weight_decay)
        self.trained = False
        self.loss_trace: list[float] = []

    @classmethod
    def from_net(cls, net: DenseNet, state_dim: int, low: float = -1.0, high: float = 1.0) -> "EnergyModel":
        """Wrap a loaded (already trained) energy network."""
        m = cls.__new__(cls)
        m.state_dim, m.action_dim = state_dim, net.input_dim - state_dim
        if m.action_dim < 1 or net.output_dim != 1:
            raise ShapeError("energy network must map [state, action] to a scalar")
        m.low, m.high, m.net = low, high, net
        m.optim = AdamW.for_net(net)
        m.trained, m.loss_trace = True, []
        return m

    def _inputs(self, s, a):
        s = np.asarray(s, dtype=self.net.dtype)
        a = np.asarray(a, dtype=self.net.dtype)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ShapeError(f"energy expects state dim {self.state_dim} and action dim "
                             f"{self.action_dim}, got {s.shape[-1]} and {a.shape[-1]}")
        if s.shape[:-1] != a.shape[:-1]:
            s = np.broadcast_to(s, a.shape[:-1] + s.shape[-1:])
        return np.concatenate([s, a], axis=-1)

    def energy(self, s, a) -> np.ndarray:
        """E(s, a); lower energy means more likely under the behavior policy."""
        return self.net.forward(self._inputs(s, a))[..., 0]


def energy(m: EnergyModel, s, a):
    return m.energy(s, a)


def infonce_from_energies(e_pos, e_neg):
    """Mean of ``-log softmax(-E)[positive]`` and dLoss/dE for both groups.

    ``e_pos`` has shape (B,), ``e_neg`` (B, K).
    """
    e_pos = np.atleast_1d(np.asarray(e_pos, dtype=np.float64))
    e_neg = np.atleast_2d(np.asarray(e_neg, dtype=np.float64))
    logits = -np.concatenate([e_pos[:, None], e_neg], axis=1)
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[:, 0]))
    p = np.exp(shifted - lse[:, None])
    p[:, 0] -= 1.0
    g = -p / len(e_pos)
    return loss, g[:, 0], g[:, 1:]


def infonce_loss(m: EnergyModel, s, a_pos, negatives, grad: bool = False):
    """InfoNCE with the positive in slot 0.

    ``s`` (B, ds), ``a_pos`` (B, da), ``negatives`` (B, K, da); unbatched
    inputs (one state, one positive, a list of negative actions) also work.
    """
    a_pos = np.asarray(a_pos, dtype=m.net.dtype)
    negatives = np.asarray(negatives, dtype=m.net.dtype)
    if a_pos.ndim == 1:
        s, a_pos, negatives = np.asarray(s)[None], a_pos[None], negatives[None]
    if negatives.shape[1] < 1:
        raise ValueError("need at least one negative")
    acts = np.concatenate([a_pos[:, None], negatives], axis=1)
    s = np.asarray(s, dtype=m.net.dtype)
    x = np.concatenate([np.broadcast_to(s[:, None], acts.shape[:2] + s.shape[-1:]), acts], axis=-1)
    if not grad:
        e = m.net.forward(x)[..., 0]
        return infonce_from_energies(e[:, 0], e[:, 1:])[0]
    e, tape = m.net.forward(x, record=True)
    loss, g_pos, g_neg = infonce_from_energies(e[:, 0, 0], e[:, 1:, 0])
    g = np.concatenate([g_pos[:, None], g_neg], axis=1)[..., None]
    return loss, m.net.backward(tape, g)


def density_grid(m: EnergyModel, s, grid) -> np.ndarray:
    """softmax(-E(s, .)) over ``grid`` (G, action_dim) for one state."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (len(grid), m.state_dim))
    return softmax_neg(m.energy(s, grid))


def softmax_neg(energies) -> np.ndarray:
    z = -np.asarray(energies, dtype=np.float64)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def make_energy_model(cfg: TrainConfig, state_dim: int, action_dim: int,
                      rng: np.random.Generator) -> EnergyModel:
    return EnergyModel(state_dim, action_dim, cfg.ebm_hidden, layer_norm=cfg.ebm_layer_norm,
                       spectral_norm=cfg.ebm_spectral_norm, rng=rng, lr=cfg.ebm_lr,
                       weight_decay=cfg.weight_decay)


def train_ebm(ds: OfflineDataset, cfg: TrainConfig, rng: np.random.Generator | None = None,
              model: EnergyModel | None = None, log_every: int = 1000) -> EnergyModel:
    """Run ``cfg.ebm_steps`` InfoNCE steps with uniform negatives on the action box."""
    if ds.count == 0:
        raise ValueError("cannot train an energy model on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = model if model is not None else make_energy_model(cfg, ds.state_dim, ds.action_dim, rng)
    k, b = cfg.ebm_negatives, cfg.ebm_batch_size
    for step in range(cfg.ebm_steps):
        batch = sample_batch(ds, b, rng)
        negs = rng.uniform(m.low, m.high, (b, k, ds.action_dim))
        loss, g = infonce_loss(m, batch.states, batch.actions, negs, grad=True)
        if not math.isfinite(loss):
            raise NumericError(f"InfoNCE diverged at step {step}; last losses {m.loss_trace[-5:]}",
                               "train_ebm")
        m.optim.step(m.net.params, g, m.net.param_name)
        m.net.update_spectral(1)
        m.loss_trace.append(loss)
        if log_every and step % log_every == 0:
            log.info("ebm step %d loss %.4f", step, loss)
    m.trained = True
    return m
