"""Synthetic tasks: a 1-D multimodal bandit, a 2-D point mass, and scripted behavior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import OfflineDataset, concat

EXPERT_KP = 2.0
EXPERT_KD = 2.5
MEDIUM_NOISE = 0.3


@dataclass(frozen=True)
class GaussianMode:
    center: float
    std: float
    weight: float


@dataclass(frozen=True)
class BanditSpec:
    """Reward ``1 - (a - peak)^2`` on [-1, 1] with a two-mode Gaussian behavior."""

    modes: tuple[GaussianMode, ...] = (GaussianMode(-0.5, 0.05, 0.5), GaussianMode(0.5, 0.05, 0.5))
    peak: float = 0.8

    def __post_init__(self):
        if not np.isclose(sum(m.weight for m in self.modes), 1.0):
            raise ValueError("mode weights must sum to 1")
        for m in self.modes:
            if not -1.0 < m.center < 1.0 or m.std < 0:
                raise ValueError(f"invalid mode {m}")


def bandit_reward(spec: BanditSpec, a) -> np.ndarray | float:
    a_arr = np.asarray(a, dtype=np.float64)
    if np.any(np.abs(a_arr) > 1.0):
        raise ValueError(f"bandit action outside [-1, 1]: {a}")
    r = 1.0 - (a_arr - spec.peak) ** 2
    return float(r) if r.ndim == 0 else r


def generate_bandit_dataset(spec: BanditSpec, n: int, rng: np.random.Generator) -> OfflineDataset:
    """``n`` single-step transitions from the behavior mixture; the state is a constant 0."""
    if n < 2:
        raise ValueError("n must be >= 2")
    weights = np.array([m.weight for m in spec.modes])
    which = rng.choice(len(spec.modes), size=n, p=weights)
    centers = np.array([m.center for m in spec.modes])[which]
    stds = np.array([m.std for m in spec.modes])[which]
    actions = np.clip(centers + stds * rng.standard_normal(n), -1.0, 1.0).astype(np.float32)
    rewards = bandit_reward(spec, actions.astype(np.float64))
    zeros = np.zeros((n, 1), np.float32)
    return OfflineDataset(zeros, actions[:, None], rewards, zeros, zeros, np.ones(n, bool), env_tag="bandit")


@dataclass
class BanditEnv:
    """Horizon-1 wrapper so bandit policies go through the generic evaluator."""

    spec: BanditSpec = field(default_factory=BanditSpec)
    horizon: int = 1
    state_dim: int = 1
    action_dim: int = 1

    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return np.zeros((n, 1))

    def step(self, state, action, rng=None):
        a = np.clip(np.asarray(action, np.float64)[..., 0], -1.0, 1.0)
        return state, bandit_reward(self.spec, a), np.ones(a.shape, bool)


@dataclass
class PointMassEnv:
    """2-D point mass; state ``(x, y, vx, vy)``, action is a clipped acceleration."""

    goal: tuple[float, float] = (0.6, 0.6)
    start: tuple[float, float] = (-0.6, -0.6)
    start_noise: float = 0.15
    dt: float = 0.1
    horizon: int = 100
    v_max: float = 1.0
    reward_mode: str = "dense"
    goal_radius: float = 0.1
    state_dim: int = 4
    action_dim: int = 2

    def __post_init__(self):
        if self.reward_mode not in ("dense", "sparse"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")

    def reset(self, rng: np.random.Generator, n: int = 1, center=None, noise=None) -> np.ndarray:
        center = self.start if center is None else center
        noise = self.start_noise if noise is None else noise
        pos = np.asarray(center) + rng.uniform(-noise, noise, (n, 2))
        return np.concatenate([np.clip(pos, -1.0, 1.0), np.zeros((n, 2))], axis=1)

    def step(self, state, action, rng=None):
        return pointmass_step(self, state, action, rng)


def pointmass_step(env: PointMassEnv, state, action, rng=None):
    """One Euler step; works on a single state or a batch (leading dims).

    The dynamics are deterministic; ``rng`` is accepted for interface symmetry.
    """
    state = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    x, v = state[..., :2], state[..., 2:]
    x2 = np.clip(x + env.dt * v, -1.0, 1.0)
    v2 = np.clip(v + env.dt * a, -env.v_max, env.v_max)
    dist = np.linalg.norm(x2 - np.asarray(env.goal), axis=-1)
    if env.reward_mode == "dense":
        reward, done = -dist, np.zeros(dist.shape, bool)
    else:
        hit = dist < env.goal_radius
        reward, done = hit.astype(np.float64), hit
    nxt = np.concatenate([x2, v2], axis=-1)
    if nxt.ndim == 1:
        return nxt, float(reward), bool(done)
    return nxt, reward, done


# --- scripted behavior -----------------------------------------------------

@dataclass(frozen=True)
class StitchLayout:
    """L-shaped route: start -> waypoint along x, waypoint -> goal along y.

    Past the waypoint, controller A turns away toward ``distractor``, so the
    logged behavior at the junction mixes a rewarded and an unrewarded branch.
    """

    start: tuple[float, float] = (-0.7, -0.7)
    waypoint: tuple[float, float] = (0.7, -0.7)
    goal: tuple[float, float] = (0.7, 0.7)
    distractor: tuple[float, float] = (0.95, -0.95)
    switch_margin: float = 0.1
    start_noise: float = 0.1
    noise: float = 0.1


def pd_action(state, target, kp: float = EXPERT_KP, kd: float = EXPERT_KD) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    return kp * (np.asarray(target) - state[..., :2]) - kd * state[..., 2:]


def scripted_behavior(kind: str, state, rng: np.random.Generator, env: PointMassEnv | None = None,
                      layout: StitchLayout | None = None) -> np.ndarray:
    """Unclipped scripted action for ``state``.

    expert: PD controller to the goal.  medium: half-gain expert plus N(0, 0.3^2).
    stitch_A: noisy PD to the route waypoint, then on to the distractor.
    stitch_B: noisy PD to the goal.
    """
    env = env if env is not None else PointMassEnv()
    layout = layout if layout is not None else StitchLayout()
    state = np.asarray(state, dtype=np.float64)
    if kind == "expert":
        return pd_action(state, env.goal)
    if kind == "medium":
        return 0.5 * pd_action(state, env.goal) + MEDIUM_NOISE * rng.standard_normal(state.shape[:-1] + (2,))
    if kind == "stitch_A":
        past = state[..., :1] >= layout.waypoint[0] - layout.switch_margin
        base = np.where(past, pd_action(state, layout.distractor), pd_action(state, layout.waypoint))
    elif kind == "stitch_B":
        base = pd_action(state, layout.goal)
    else:
        raise ValueError(f"unknown behavior {kind!r}")
    return base + layout.noise * rng.standard_normal(state.shape[:-1] + (2,))


def stitch_env(layout: StitchLayout | None = None, horizon: int = 100) -> PointMassEnv:
    layout = layout if layout is not None else StitchLayout()
    return PointMassEnv(goal=layout.goal, start=layout.start, start_noise=layout.start_noise,
                        reward_mode="sparse", horizon=horizon)


def rollout_behavior(env: PointMassEnv, kind: str, n_episodes: int, rng: np.random.Generator,
                     start=None, start_noise=None, layout: StitchLayout | None = None) -> OfflineDataset:
    """Roll out a scripted controller and log transitions with next actions.

    The next action of a time-limit-truncated final step is queried from the
    controller at ``s'`` so the row stays non-terminal with a valid ``a'``.
    """
    state = env.reset(rng, n_episodes, start, start_noise)
    action = np.clip(scripted_behavior(kind, state, rng, env, layout), -1, 1)
    alive = np.ones(n_episodes, bool)
    cols = {k: [] for k in ("s", "a", "r", "s2", "a2", "d")}
    for _ in range(env.horizon):
        nxt, reward, done = pointmass_step(env, state, action)
        next_action = np.clip(scripted_behavior(kind, nxt, rng, env, layout), -1, 1)
        idx = np.flatnonzero(alive)
        cols["s"].append(state[idx])
        cols["a"].append(action[idx])
        cols["r"].append(reward[idx])
        cols["s2"].append(nxt[idx])
        cols["a2"].append(np.where(done[idx, None], 0.0, next_action[idx]))
        cols["d"].append(done[idx])
        alive &= ~done
        state, action = nxt, next_action
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return OfflineDataset(cat["s"], cat["a"], cat["r"], cat["s2"], cat["a2"], cat["d"],
                          env_tag=f"pointmass-{env.reward_mode}-{kind}")


def generate_pointmass_dataset(kind: str, n_episodes: int, rng: np.random.Generator,
                               env: PointMassEnv | None = None) -> OfflineDataset:
    """``expert``, ``medium`` or ``mixed`` (half expert, half medium episodes)."""
    env = env if env is not None else PointMassEnv()
    if kind == "mixed":
        half = n_episodes // 2
        parts = [rollout_behavior(env, "expert", half, rng),
                 rollout_behavior(env, "medium", n_episodes - half, rng)]
        return concat(parts, env_tag="pointmass-dense-mixed")
    return rollout_behavior(env, kind, n_episodes, rng)


def generate_stitch_dataset(n_episodes: int, rng: np.random.Generator,
                            layout: StitchLayout | None = None, horizon: int = 100) -> OfflineDataset:
    """Half stitch_A episodes from the start, half stitch_B episodes from the waypoint."""
    layout = layout if layout is not None else StitchLayout()
    env = stitch_env(layout, horizon)
    half = n_episodes // 2
    parts = [rollout_behavior(env, "stitch_A", half, rng, layout=layout),
             rollout_behavior(env, "stitch_B", n_episodes - half, rng, start=layout.waypoint,
                              start_noise=layout.start_noise, layout=layout)]
    return concat(parts, env_tag="pointmass-sparse-stitch")
