"""Desk-scale presets and end-to-end protocols for the synthetic tasks."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .config import FULL_FIDELITY, TrainConfig
from .critic import FixedQ
from .dataset import OfflineDataset
from .ebm import EnergyModel, density_grid, train_ebm
from .envs import (BanditSpec, PointMassEnv, bandit_reward, generate_bandit_dataset,
                   generate_pointmass_dataset, generate_stitch_dataset, stitch_env)
from .nn import save_checkpoint
from .trainer import (RunArtifacts, ScriptedPolicy, env_for, evaluate, prepare_dataset, rng_streams,
                      train, train_bc, train_bpr)

# Desk presets: widths, batches and step counts sized for one CPU core.
BANDIT_PRESET = dict(steps=100_000, batch_size=64, ebm_steps=2_000, ebm_batch_size=64, ebm_negatives=64,
                     policy_hidden=(), ebm_hidden=(64, 64), eval_every=0, eval_episodes=1)
# Dense rewards are scaled so per-step magnitudes sit near locomotion scale, where
# the fixed entropy weight (alpha = 0.2) no longer swamps the reward.
POINTMASS_PRESET = dict(steps=10_000, batch_size=128, ebm_steps=4_000, ebm_batch_size=64, ebm_negatives=64,
                        policy_hidden=(64, 64), critic_hidden=(64, 64), ebm_hidden=(64, 64),
                        eval_every=2_500, eval_episodes=10, gamma=0.99, reward_scale=15.0)
STITCH_PRESET = dict(POINTMASS_PRESET, steps=30_000, eval_every=10_000, gamma=0.999, reward_scale=100.0,
                     critic_steps=20_000, eval_episodes=100)

BANDIT_SAMPLES = 10_000
POINTMASS_EPISODES = 100


def preset_config(task: str, full: bool = False, **overrides) -> TrainConfig:
    base = {"bandit": BANDIT_PRESET, "pointmass": POINTMASS_PRESET, "stitch": STITCH_PRESET}[task]
    d = dict(base)
    if full:
        d.update(FULL_FIDELITY)
        d.update(policy_hidden=(256, 256), critic_hidden=(256, 256), ebm_hidden=(512,) * 4,
                 ebm_batch_size=256, ebm_negatives=256)
        if task == "bandit":
            d.update(steps=100_000, policy_hidden=())
    d.update(overrides)
    return TrainConfig(**d)


def make_dataset(name: str, seed: int, size: int | None = None) -> OfflineDataset:
    """bandit, pointmass-expert, pointmass-medium, pointmass-mixed or stitch."""
    rng = np.random.default_rng(seed)
    if name == "bandit":
        return generate_bandit_dataset(BanditSpec(), size or BANDIT_SAMPLES, rng)
    if name.startswith("pointmass-"):
        return generate_pointmass_dataset(name.split("-", 1)[1], size or POINTMASS_EPISODES, rng)
    if name == "stitch":
        return generate_stitch_dataset(size or POINTMASS_EPISODES, rng)
    raise ValueError(f"unknown dataset {name!r}")


# --- bandit -------------------------------------------------------------------

def bandit_q(spec: BanditSpec, s, a):
    return bandit_reward(spec, np.clip(np.asarray(a, np.float64)[..., 0], -1.0, 1.0))


def policy_mean(policy, n: int = 20_000, seed: int = 0) -> float:
    """Mean action of the (state-free) bandit policy, estimated by sampling."""
    s = np.zeros((n, policy.state_dim), policy.net.dtype)
    a, _ = policy.sample(s, np.random.default_rng(seed))
    return float(a.mean())


@dataclass
class BanditResult:
    seed: int
    self_play_mean: float
    reference_mean: float
    self_play: RunArtifacts
    reference: RunArtifacts
    ebm: EnergyModel

    def summary(self) -> str:
        return (f"seed {self.seed}: self-play policy mean {self.self_play_mean:+.4f}, "
                f"reference-sampling policy mean {self.reference_mean:+.4f}")


def run_bandit(seed: int, out_dir=None, cfg: TrainConfig | None = None, n_samples: int = BANDIT_SAMPLES,
               spec: BanditSpec | None = None) -> BanditResult:
    """Train one energy model, then a policy per sampling mode against the known reward."""
    spec = spec if spec is not None else BanditSpec()
    cfg = (cfg if cfg is not None else preset_config("bandit")).replace(seed=seed)
    ds = prepare_dataset(cfg, generate_bandit_dataset(spec, n_samples, np.random.default_rng(seed)))
    ebm = train_ebm(ds, cfg, rng_streams(seed)["ebm"], log_every=0)
    q = FixedQ(functools.partial(bandit_q, spec))
    out = Path(out_dir) if out_dir is not None else None
    arts = {}
    for mode in ("self_play", "reference"):
        arts[mode] = train_bpr(cfg.replace(mode=mode), ds, ebm=ebm, critic=q, prepared=True,
                               run_dir=None if out is None else out / mode)
    res = BanditResult(seed, policy_mean(arts["self_play"].policy), policy_mean(arts["reference"].policy),
                       arts["self_play"], arts["reference"], ebm)
    if out is not None:
        save_checkpoint(ebm.net, out / "ebm.bprw", "ebm")
        emit_bandit_plot(res, spec, out / "bandit.svg")
        (out / "summary.json").write_text(json.dumps(
            {"seed": seed, "self_play_mean": res.self_play_mean, "reference_mean": res.reference_mean},
            indent=2, sort_keys=True) + "\n")
    return res


def emit_bandit_plot(res: BanditResult, spec: BanditSpec, path):
    """Three panels: reward with the learned behavior density, then each fitted policy."""
    grid = np.linspace(-0.99, 0.99, 199)
    reward = bandit_reward(spec, grid)
    behavior = density_grid(res.ebm, [0.0], grid)
    panels = [plotting.Panel("reward and behavior density", [
        plotting.Series("reward", grid, reward),
        plotting.Series("behavior (EBM)", grid, behavior / behavior.max())], "action", "scaled")]
    for title, art in (("reference sampling", res.reference), ("self-play", res.self_play)):
        s = np.zeros((len(grid), 1), art.policy.net.dtype)
        dens = np.exp(art.policy.log_prob(s, grid[:, None]))
        panels.append(plotting.Panel(title, [
            plotting.Series("reward", grid, reward),
            plotting.Series("behavior (EBM)", grid, behavior / behavior.max()),
            plotting.Series("policy", grid, dens / dens.max())], "action", "scaled"))
    return plotting.emit_plot(panels, path)


# --- point mass ---------------------------------------------------------------

def expert_reference(env: PointMassEnv, episodes: int = 100, seed: int = 12345) -> tuple[float, float]:
    """Returns of the scripted expert and of a uniform-random policy on ``env``."""
    rng = np.random.default_rng(seed)
    expert, _ = evaluate(ScriptedPolicy("expert", env), env, episodes, rng)
    random_policy = _UniformPolicy(np.random.default_rng(seed + 1))
    rand, _ = evaluate(random_policy, env, episodes, rng)
    return expert, rand


class _UniformPolicy:
    def __init__(self, rng):
        self.rng = rng

    def deterministic(self, s):
        return self.rng.uniform(-1.0, 1.0, np.shape(s)[:-1] + (2,))


def normalized_score(ret: float, expert: float, random: float) -> float:
    """0 at the random policy's return, 1 at the expert's."""
    return (ret - random) / (expert - random)


def run_offline(dataset: str, algo: str, seed: int, cfg: TrainConfig | None = None, data_seed: int | None = None,
                ebm: EnergyModel | None = None, run_dir=None) -> RunArtifacts:
    """Generate ``dataset`` and train ``algo`` (bpr or bc) on it with the matching preset."""
    task = "stitch" if dataset == "stitch" else "pointmass"
    cfg = (cfg if cfg is not None else preset_config(task)).replace(seed=seed)
    ds = make_dataset(dataset, seed if data_seed is None else data_seed)
    return train(cfg, ds, algo, env=env_for(ds), ebm=ebm, run_dir=run_dir)


@dataclass
class PointMassSeed:
    seed: int
    expert_bpr: float
    expert_score: float
    mixed_bpr: float
    mixed_bc: float


def pointmass_protocol(seeds, cfg: TrainConfig | None = None, log=None) -> list[PointMassSeed]:
    """Off-policy BPR on the expert and mixed datasets plus BC on mixed, one row per seed."""
    cfg = cfg if cfg is not None else preset_config("pointmass")
    expert, rand = expert_reference(PointMassEnv())
    rows = []
    for seed in seeds:
        e = run_offline("pointmass-expert", "bpr", seed, cfg).final_eval[0]
        m = run_offline("pointmass-mixed", "bpr", seed, cfg).final_eval[0]
        b = run_offline("pointmass-mixed", "bc", seed, cfg).final_eval[0]
        rows.append(PointMassSeed(seed, e, normalized_score(e, expert, rand), m, b))
        if log is not None:
            log(rows[-1])
    return rows


@dataclass
class StitchSeed:
    seed: int
    ensemble: float
    onestep: float
    bc: float


def stitch_protocol(seeds, cfg: TrainConfig | None = None, log=None) -> list[StitchSeed]:
    """Goal-reaching rate of ensemble-LCB BPR, Onestep BPR and BC on the stitching data."""
    cfg = cfg if cfg is not None else preset_config("stitch")
    rows = []
    for seed in seeds:
        ds = make_dataset("stitch", seed)
        env = env_for(ds)
        c = cfg.replace(seed=seed)
        ens = train(c.replace(regime="ensemble_lcb"), ds, "bpr", env=env).final_eval[0]
        one = train(c.replace(regime="onestep"), ds, "bpr", env=env).final_eval[0]
        bc = train(c, ds, "bc", env=env).final_eval[0]
        rows.append(StitchSeed(seed, ens, one, bc))
        if log is not None:
            log(rows[-1])
    return rows
