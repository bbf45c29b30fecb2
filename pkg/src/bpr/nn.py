"""Dense networks with hand-written reverse mode, normalization layers and AdamW.

All trainable parameters of a :class:`DenseNet` live in one flat buffer
(``net.params``); every layer holds views into it.  This keeps optimizer
steps, soft target updates, checkpointing and finite-difference probes
to a handful of vector ops regardless of depth.

Layout of the flat buffer, per layer in order::

    weight (in_dim x out_dim, row-major), bias (out_dim),
    [layer-norm gain (out_dim), layer-norm shift (out_dim)]

Spectral-norm power-iteration vectors are state, not parameters, and are
kept outside the buffer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.special import erf

from .errors import DatasetFormatError, NumericError, ShapeError, UnsupportedVersionError

ACTIVATIONS = ("identity", "gelu", "tanh")
LN_EPS = 1e-5
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.vectorize(["float32(float32)"], cache=True)
def _erf32(v):
    # Rational minimax fit on [-4, 4] (erf is +-1 to float32 precision outside);
    # max abs error 4.2e-7, about what float32 itself resolves near 1.
    v = min(max(v, np.float32(-4.0)), np.float32(4.0))
    x2 = v * v
    p = np.float32(-2.72614225801306e-10)
    p = p * x2 + np.float32(2.77068142495902e-08)
    p = p * x2 + np.float32(-2.10102402082508e-06)
    p = p * x2 + np.float32(-5.69250639462346e-05)
    p = p * x2 + np.float32(-7.34990630326855e-04)
    p = p * x2 + np.float32(-2.95459980854025e-03)
    p = p * x2 + np.float32(-1.60960333262415e-02)
    q = np.float32(-1.45660718464996e-05)
    q = q * x2 + np.float32(-2.13374055278905e-04)
    q = q * x2 + np.float32(-1.68282697438203e-03)
    q = q * x2 + np.float32(-7.37332916720468e-03)
    q = q * x2 + np.float32(-1.42647390514189e-02)
    return v * p / q


def _erf(x):
    """Exact erf for float64 (verification); a float32-accurate kernel for float32."""
    if x.dtype == np.float32:
        return _erf32(x)
    return erf(x)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + _erf(x * x.dtype.type(_SQRT1_2)))


def _gelu_with_grad(x):
    t = x.dtype.type
    cdf = t(0.5) * (t(1.0) + _erf(x * t(_SQRT1_2)))
    return x * cdf, cdf + x * (t(_INV_SQRT_2PI) * np.exp(t(-0.5) * x * x))


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def power_iterate(weight: np.ndarray, u: np.ndarray, n_iters: int) -> tuple[np.ndarray, float]:
    """Run ``n_iters`` power iterations on ``weight`` (in x out) from ``u`` (out,).

    Returns the updated right vector and the estimate ``||W u||`` of the
    largest singular value.  A zero matrix yields ``sigma = 0``.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    for _ in range(n_iters):
        v = _normalize(weight @ u)
        u = _normalize(weight.T @ v)
    return u, float(np.linalg.norm(weight @ u))


def spectral_normalize(weight: np.ndarray, pi_vector: np.ndarray,
                       n_iters: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Divide ``weight`` by its power-iteration spectral-norm estimate.

    Degenerate (all-zero) matrices are returned unchanged.
    """
    weight = np.asarray(weight)
    pi_vector = np.asarray(pi_vector, dtype=weight.dtype)
    if not np.any(pi_vector):
        raise ValueError("pi_vector must be nonzero")
    u, sigma = power_iterate(weight, _normalize(pi_vector), n_iters)
    if sigma <= 1e-12:
        return weight.copy(), u
    return weight / sigma, u


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "gelu"
    layer_norm: bool = False
    spectral_norm: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")

    @property
    def n_params(self) -> int:
        n = self.in_dim * self.out_dim + self.out_dim
        return n + 2 * self.out_dim if self.layer_norm else n


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    ln_gain: np.ndarray | None = None
    ln_shift: np.ndarray | None = None
    sn_u: np.ndarray | None = None


@dataclass
class GradientTape:
    """Intermediate values of one forward pass, consumed by ``DenseNet.backward``."""

    x: np.ndarray
    records: list = field(default_factory=list)


class DenseNet:
    """Fully connected network over a single flat parameter buffer."""

    def __init__(self, specs: Sequence[LayerSpec], params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 sn_vectors: Sequence[np.ndarray | None] | None = None):
        specs = list(specs)
        if not specs:
            raise ValueError("a DenseNet needs at least one layer")
        for a, b in zip(specs[:-1], specs[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.specs = specs
        self.dtype = np.dtype(dtype)
        n = sum(s.n_params for s in specs)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = np.zeros(n, dtype=self.dtype)
            self._bind()
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.spec.in_dim)
                layer.weight[...] = rng.uniform(-bound, bound, layer.weight.shape)
                if layer.ln_gain is not None:
                    layer.ln_gain[...] = 1.0
            for layer in self.layers:
                if layer.spec.spectral_norm:
                    layer.sn_u = _normalize(rng.standard_normal(layer.spec.out_dim)).astype(self.dtype)
            self.update_spectral(50)
        else:
            params = np.asarray(params)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got {params.shape}")
            self.params = params.astype(self.dtype, copy=True)
            self._bind()
            if sn_vectors is not None:
                for layer, u in zip(self.layers, sn_vectors):
                    if layer.spec.spectral_norm:
                        layer.sn_u = np.array(u, dtype=self.dtype)
            else:
                for layer in self.layers:
                    if layer.spec.spectral_norm:
                        layer.sn_u = np.full(layer.spec.out_dim, 1.0 / math.sqrt(layer.spec.out_dim), self.dtype)
                self.update_spectral(50)

    @classmethod
    def mlp(cls, in_dim: int, hidden: Sequence[int], out_dim: int, *, activation: str = "gelu",
            layer_norm: bool = False, spectral_norm: bool = False,
            rng: np.random.Generator | None = None, dtype=np.float32) -> "DenseNet":
        """Hidden layers get the activation and normalizations; the output layer is plain linear."""
        dims = [in_dim, *hidden, out_dim]
        specs = [LayerSpec(a, b, activation, layer_norm, spectral_norm) for a, b in zip(dims[:-2], dims[1:-1])]
        specs.append(LayerSpec(dims[-2], dims[-1], "identity"))
        return cls(specs, rng=rng, dtype=dtype)

    def _bind(self):
        self.layers = []
        self._names = []
        off = 0
        for i, s in enumerate(self.specs):
            def take(k, shape=None, name=""):
                nonlocal off
                view = self.params[off:off + k]
                self._names.append((off, off + k, f"layer{i}.{name}"))
                off += k
                return view.reshape(shape) if shape else view
            w = take(s.in_dim * s.out_dim, (s.in_dim, s.out_dim), "weight")
            b = take(s.out_dim, name="bias")
            g = take(s.out_dim, name="ln_gain") if s.layer_norm else None
            h = take(s.out_dim, name="ln_shift") if s.layer_norm else None
            self.layers.append(Layer(s, w, b, g, h))

    @property
    def input_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].out_dim

    @property
    def sn_vectors(self) -> list[np.ndarray | None]:
        return [layer.sn_u for layer in self.layers]

    def param_name(self, index: int) -> str:
        for lo, hi, name in self._names:
            if lo <= index < hi:
                return f"{name}[{index - lo}]"
        raise IndexError(index)

    def copy(self) -> "DenseNet":
        return DenseNet(self.specs, self.params, dtype=self.dtype,
                        sn_vectors=[None if u is None else u.copy() for u in self.sn_vectors])

    def __reduce__(self):
        # rebuild through the constructor so layer views alias the new buffer
        return (DenseNet, (self.specs, self.params, None, self.dtype, self.sn_vectors))

    def astype(self, dtype) -> "DenseNet":
        return DenseNet(self.specs, self.params, dtype=dtype, sn_vectors=self.sn_vectors)

    def update_spectral(self, n_iters: int = 1):
        """Advance the persisted power-iteration vectors of spectral-normed layers."""
        for layer in self.layers:
            if layer.spec.spectral_norm:
                u, _ = power_iterate(layer.weight, layer.sn_u, n_iters)
                layer.sn_u = u.astype(self.dtype, copy=False)

    def effective_weight(self, i: int) -> np.ndarray:
        layer = self.layers[i]
        if not layer.spec.spectral_norm:
            return layer.weight
        sigma = float(np.linalg.norm(layer.weight @ layer.sn_u))
        return layer.weight if sigma <= 1e-12 else layer.weight / sigma

    def forward(self, x: np.ndarray, record: bool = False):
        """Evaluate the network on a batch ``x`` of shape (..., input_dim).

        With ``record=True`` returns ``(y, tape)`` for a later ``backward``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        squeeze = x.ndim == 1
        h = x[None] if squeeze else x.reshape(-1, self.input_dim)
        lead = x.shape[:-1]
        tape = GradientTape(h) if record else None
        for layer in self.layers:
            s = layer.spec
            w = layer.weight
            sigma = wu = None
            if s.spectral_norm:
                wu = w @ layer.sn_u
                sigma = float(np.linalg.norm(wu))
                if sigma > 1e-12:
                    w = w / sigma
                else:
                    sigma = None
            z = h @ w + layer.bias
            zn = inv_std = None
            if s.layer_norm:
                mu = z.mean(axis=-1, keepdims=True)
                zc = z - mu
                inv_std = 1.0 / np.sqrt((zc * zc).mean(axis=-1, keepdims=True) + LN_EPS)
                zn = zc * inv_std
                z = zn * layer.ln_gain + layer.ln_shift
            dact = None
            if s.activation == "gelu":
                out, dact = _gelu_with_grad(z) if record else (gelu(z), None)
            elif s.activation == "tanh":
                out = np.tanh(z)
                dact = 1.0 - out * out if record else None
            else:
                out = z
            if record:
                tape.records.append((h, w, sigma, wu, zn, inv_std, dact))
            h = out
        y = h[0] if squeeze else h.reshape(*lead, self.output_dim)
        return (y, tape) if record else y

    __call__ = forward

    def backward(self, tape: GradientTape, grad_out: np.ndarray, input_grad: bool = False):
        """Reverse-mode pass: gradient of a scalar loss w.r.t. ``params``.

        ``grad_out`` is dLoss/dOutput with the shape returned by ``forward``.
        """
        g = np.asarray(grad_out, dtype=self.dtype).reshape(-1, self.output_dim)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite upstream gradient", "network output")
        grad = np.zeros_like(self.params)
        gview = DenseNet.__new__(DenseNet)
        gview.specs, gview.params = self.specs, grad
        gview._bind()
        for i in range(len(self.layers) - 1, -1, -1):
            layer, gl = self.layers[i], gview.layers[i]
            h, w, sigma, wu, zn, inv_std, dact = tape.records[i]
            if dact is not None:
                g = g * dact
            if zn is not None:
                gl.ln_gain[...] = (g * zn).sum(axis=0)
                gl.ln_shift[...] = g.sum(axis=0)
                gz = g * layer.ln_gain
                g = inv_std * (gz - gz.mean(axis=-1, keepdims=True)
                               - zn * (gz * zn).mean(axis=-1, keepdims=True))
            gl.bias[...] = g.sum(axis=0)
            gw = h.T @ g
            if sigma is not None:
                # W_eff = W / ||W u|| with u held constant
                gw = gw / sigma - (np.sum(gw * layer.weight) / sigma ** 3) * np.outer(wu, layer.sn_u)
            gl.weight[...] = gw
            if i > 0 or input_grad:
                g = g @ w.T
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise NumericError("non-finite gradient", self.param_name(bad))
        return (grad, g) if input_grad else grad


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, tape: GradientTape, grad_out: np.ndarray) -> np.ndarray:
    return net.backward(tape, grad_out)


@dataclass
class AdamW:
    """Adam with decoupled weight decay over one flat parameter vector."""

    size: int
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    dtype: np.dtype = np.float32
    first_moment: np.ndarray = None
    second_moment: np.ndarray = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and epsilon must be positive, weight_decay >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.first_moment is None:
            self.first_moment = np.zeros(self.size, self.dtype)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.size, self.dtype)

    @classmethod
    def for_net(cls, net: DenseNet, **kw) -> "AdamW":
        return cls(net.params.size, dtype=net.dtype, **kw)

    def step(self, params: np.ndarray, grads: np.ndarray,
             name_of: Callable[[int], str] | None = None) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if grads.shape != params.shape or params.shape != self.first_moment.shape:
            raise ShapeError("parameter, gradient and moment shapes differ")
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.isfinite(grads))[0])
            where = name_of(bad) if name_of else f"param[{bad}]"
            raise NumericError("non-finite gradient, step rejected", where)
        self.step_count += 1
        t = self.step_count
        if self.weight_decay:
            params *= 1.0 - self.learning_rate * self.weight_decay
        m, v = self.first_moment, self.second_moment
        m *= self.beta1
        m += (1.0 - self.beta1) * grads
        v *= self.beta2
        v += (1.0 - self.beta2) * grads * grads
        step_size = self.learning_rate / (1.0 - self.beta1 ** t)
        denom = np.sqrt(v / (1.0 - self.beta2 ** t)) + self.epsilon
        params -= step_size * m / denom
        return params


def optimizer_step(net: DenseNet, grads: np.ndarray, state: AdamW) -> DenseNet:
    state.step(net.params, grads, net.param_name)
    return net


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
               probe_count: int, rng: np.random.Generator | None = None,
               eps: float = 1e-6, floor: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grad)`` must be deterministic.  ``params`` is
    perturbed in place and restored.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``, so two zeros compare as exact.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, analytic = loss_fn(params)
    analytic = np.array(analytic, dtype=np.float64)
    idx = rng.choice(params.size, size=min(probe_count, params.size), replace=False)
    worst = 0.0
    for i in idx:
        orig = params[i]
        params[i] = orig + eps
        lp, _ = loss_fn(params)
        params[i] = orig - eps
        lm, _ = loss_fn(params)
        params[i] = orig
        numeric = (float(lp) - float(lm)) / (2 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def soft_update(target: DenseNet, online: DenseNet, tau: float):
    """``target <- (1 - tau) * target + tau * online``, element-wise."""
    if tau == 1.0:
        target.params[...] = online.params
    elif tau != 0.0:
        target.params *= 1.0 - tau
        target.params += tau * online.params


# --- checkpoints -----------------------------------------------------------

WEIGHTS_MAGIC = b"BPRW"
WEIGHTS_VERSION = 1


def save_checkpoint(net: DenseNet, path: str | Path, role: str = ""):
    """Write ``net`` in the little-endian BPRW format.

    magic, u32 version, role tag (u8 length + UTF-8), u32 layer count, per
    layer five u32 (in, out, activation code, layer_norm, spectral_norm),
    float32 parameters in buffer order, then float32 power-iteration vectors
    of spectral-normed layers.
    """
    tag = role.encode()
    if len(tag) > 255:
        raise ValueError("role tag too long")
    out = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), struct.pack("<B", len(tag)), tag,
           struct.pack("<I", len(net.specs))]
    for s in net.specs:
        out.append(struct.pack("<5I", s.in_dim, s.out_dim, ACTIVATIONS.index(s.activation),
                               int(s.layer_norm), int(s.spectral_norm)))
    out.append(net.params.astype("<f4").tobytes())
    for u in net.sn_vectors:
        if u is not None:
            out.append(u.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[DenseNet, str]:
    data = Path(path).read_bytes()
    off = 0

    def need(k, what):
        if off + k > len(data):
            raise DatasetFormatError(f"truncated checkpoint reading {what}: need {off + k} bytes, have {len(data)}", off)

    need(4, "magic")
    if data[:4] != WEIGHTS_MAGIC:
        raise DatasetFormatError(f"bad magic {data[:4]!r}", 0)
    off = 4
    need(4, "version")
    (version,) = struct.unpack_from("<I", data, off)
    if version != WEIGHTS_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", off)
    off += 4
    need(1, "role length")
    n = data[off]
    off += 1
    need(n, "role")
    role = data[off:off + n].decode()
    off += n
    need(4, "layer count")
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    specs = []
    for _ in range(n_layers):
        need(20, "layer header")
        i, o, act, ln, sn = struct.unpack_from("<5I", data, off)
        off += 20
        if act >= len(ACTIVATIONS):
            raise DatasetFormatError(f"unknown activation code {act}", off - 12)
        specs.append(LayerSpec(i, o, ACTIVATIONS[act], bool(ln), bool(sn)))
    n_params = sum(s.n_params for s in specs)
    need(4 * n_params, "parameters")
    params = np.frombuffer(data, "<f4", n_params, off)
    off += 4 * n_params
    vectors = []
    for s in specs:
        if s.spectral_norm:
            need(4 * s.out_dim, "spectral vector")
            vectors.append(np.frombuffer(data, "<f4", s.out_dim, off))
            off += 4 * s.out_dim
        else:
            vectors.append(None)
    if off != len(data):
        raise DatasetFormatError(f"{len(data) - off} trailing bytes", off)
    return DenseNet(specs, params, dtype=dtype, sn_vectors=vectors), role
