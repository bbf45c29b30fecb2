"""Offline transition store: binary persistence, normalization and batch sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BPRError, DatasetFormatError, ShapeError, UnsupportedVersionError

MAGIC = b"BPRD"
VERSION = 1
STD_FLOOR = 1e-6


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)


def _as_rows(a: np.ndarray) -> np.ndarray:
    return a[:, None] if a.ndim == 1 else a.reshape(len(a), *a.shape[1:])


@dataclass
class OfflineDataset:
    """Column store of ``(s, a, r, s', a', done)`` transitions, all float32.

    ``next_actions`` holds the action the behavior policy actually took at
    ``s'``; terminal rows carry zeros there and must be gated on ``dones``.
    ``state_mean``/``state_std`` map raw environment observations to the
    stored state coordinates: ``stored = (raw - mean) / std``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray
    reward_scale: float = 1.0
    env_tag: str = ""
    state_mean: np.ndarray = None
    state_std: np.ndarray = None

    def __post_init__(self):
        f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
        self.states = _as_rows(f32(self.states))
        n, ds = self.states.shape
        self.actions = _as_rows(f32(self.actions))
        self.rewards = f32(self.rewards).reshape(n)
        self.next_states = f32(self.next_states).reshape(n, ds)
        self.next_actions = f32(self.next_actions).reshape(self.actions.shape)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(n)
        self.reward_scale = float(np.float32(self.reward_scale))
        if self.state_mean is None:
            self.state_mean = np.zeros(ds, np.float32)
        if self.state_std is None:
            self.state_std = np.ones(ds, np.float32)
        self.state_mean = f32(self.state_mean).reshape(ds)
        self.state_std = f32(self.state_std).reshape(ds)
        if not np.all(np.isfinite(self.rewards)):
            raise ShapeError("rewards must be finite")

    @property
    def count(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self):
        return self.count

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        arrays = ("states", "actions", "rewards", "next_states", "next_actions", "dones",
                  "state_mean", "state_std")
        return (self.reward_scale == other.reward_scale and self.env_tag == other.env_tag
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays))

    def normalize_obs(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, np.float32) - self.state_mean) / self.state_std


def concat(datasets: list[OfflineDataset], env_tag: str | None = None) -> OfflineDataset:
    first = datasets[0]
    cols = {k: np.concatenate([getattr(d, k) for d in datasets])
            for k in ("states", "actions", "rewards", "next_states", "next_actions", "dones")}
    return OfflineDataset(**cols, reward_scale=first.reward_scale,
                          env_tag=first.env_tag if env_tag is None else env_tag)


# --- persistence -----------------------------------------------------------

def _record_matrix(ds: OfflineDataset) -> np.ndarray:
    return np.concatenate([ds.states, ds.actions, ds.rewards[:, None], ds.next_states,
                           ds.next_actions, ds.dones[:, None].astype(np.float32)], axis=1)


def save(ds: OfflineDataset, path: str | Path):
    """Write the little-endian BPRD format."""
    tag = ds.env_tag.encode()
    if len(tag) > 255:
        raise ValueError("env_tag longer than 255 bytes")
    header = MAGIC + struct.pack("<IIIQf", VERSION, ds.state_dim, ds.action_dim, ds.count,
                                 ds.reward_scale) + struct.pack("<B", len(tag)) + tag
    body = _record_matrix(ds).astype("<f4").tobytes()
    stats = ds.state_mean.astype("<f4").tobytes() + ds.state_std.astype("<f4").tobytes()
    Path(path).write_bytes(header + body + stats)


def load(path: str | Path) -> OfflineDataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    fixed = struct.calcsize("<IIIQf")
    if len(data) < 4 + fixed + 1:
        raise DatasetFormatError(f"truncated header: expected at least {4 + fixed + 1} bytes, "
                                 f"got {len(data)}", len(data))
    version, ds_, da, count, scale = struct.unpack_from("<IIIQf", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version} (this build reads {VERSION})", 4)
    off = 4 + fixed
    n_tag = data[off]
    off += 1
    width = 2 * ds_ + 2 * da + 2
    expected = off + n_tag + 4 * (count * width + 2 * ds_)
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise DatasetFormatError(f"{kind} file: expected {expected} bytes, got {len(data)}",
                                 min(len(data), expected))
    tag = data[off:off + n_tag].decode()
    off += n_tag
    rec = np.frombuffer(data, "<f4", count * width, off).reshape(count, width).astype(np.float32)
    off += 4 * count * width
    mean = np.frombuffer(data, "<f4", ds_, off).astype(np.float32)
    std = np.frombuffer(data, "<f4", ds_, off + 4 * ds_).astype(np.float32)
    cut = np.cumsum([ds_, da, 1, ds_, da])
    s, a, r, s2, a2, d = np.split(rec, cut, axis=1)
    return OfflineDataset(s, a, r[:, 0], s2, a2, d[:, 0] != 0, reward_scale=scale, env_tag=tag,
                          state_mean=mean, state_std=std)


# --- transforms and sampling ----------------------------------------------

def sample_batch(ds: OfflineDataset, size: int, rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement."""
    if ds.count == 0:
        raise BPRError("cannot sample from an empty dataset")
    if size < 1:
        raise ValueError("batch size must be >= 1")
    idx = rng.integers(0, ds.count, size)
    return Batch(ds.states[idx], ds.actions[idx], ds.rewards[idx], ds.next_states[idx],
                 ds.next_actions[idx], ds.dones[idx])


def normalize_states(ds: OfflineDataset) -> OfflineDataset:
    """Standardize states (and next states) with the current state statistics.

    Statistics compose with any earlier normalization so ``state_mean`` and
    ``state_std`` always map raw observations to stored coordinates.
    """
    if ds.count < 2:
        raise ValueError("need at least two transitions to normalize")
    mean = ds.states.astype(np.float64).mean(axis=0)
    std = np.maximum(ds.states.astype(np.float64).std(axis=0), STD_FLOOR)
    states = (ds.states - mean) / std
    next_states = (ds.next_states - mean) / std
    new_mean = ds.state_mean + ds.state_std * mean
    new_std = ds.state_std * std
    return replace(ds, states=states, next_states=next_states, state_mean=new_mean, state_std=new_std)


def scale_rewards(ds: OfflineDataset, factor: float) -> OfflineDataset:
    if factor <= 0:
        raise ValueError("reward scale factor must be positive")
    return replace(ds, rewards=ds.rewards * np.float32(factor), reward_scale=ds.reward_scale * factor)
