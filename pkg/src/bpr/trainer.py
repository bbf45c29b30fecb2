"""Training loops, evaluation rollouts, run directories and the lambda sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .config import TrainConfig
from .critic import CriticSet, FixedQ, critic_update, regime_targets, sarsa_target, target_soft_update
from .dataset import OfflineDataset, normalize_states, sample_batch, scale_rewards
from .ebm import EnergyModel, train_ebm
from .envs import BanditEnv, PointMassEnv, scripted_behavior, stitch_env
from .errors import ConfigError
from .nn import save_checkpoint
from .policy import TanhGaussianPolicy, bc_step, policy_step

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "critic_loss", "policy_loss", "eval_mean", "eval_std")
STREAMS = ("init", "ebm", "batch", "policy", "eval")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per concern so adding one consumer never shifts another."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


@dataclass
class RunArtifacts:
    config: dict
    seed: int
    run_dir: Path | None = None
    checkpoints: dict[str, str] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    policy: TanhGaussianPolicy | None = None
    critic: CriticSet | None = None
    ebm: EnergyModel | None = None
    dataset: OfflineDataset | None = None
    final_eval: tuple[float, float] | None = None
    policy_queries_in_critic_phase: int | None = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in self.metrics:
            w.writerow(["" if row[k] is None else (row[k] if k == "step" else repr(float(row[k])))
                        for k in METRIC_FIELDS])
        return buf.getvalue()


# --- environments and evaluation -------------------------------------------

def env_for(ds: OfflineDataset):
    tag = ds.env_tag
    if tag == "bandit":
        return BanditEnv()
    if tag.startswith("pointmass-sparse"):
        return stitch_env()
    if tag.startswith("pointmass"):
        return PointMassEnv()
    raise ConfigError(f"no environment registered for dataset tag {tag!r}")


def default_eval_episodes(env, cfg: TrainConfig) -> int:
    if isinstance(env, PointMassEnv) and env.reward_mode == "sparse":
        return max(cfg.eval_episodes, 100)
    return cfg.eval_episodes


class ScriptedPolicy:
    """Wraps a scripted controller in the ``deterministic`` interface."""

    def __init__(self, kind: str, env: PointMassEnv, rng=None):
        self.kind, self.env = kind, env
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def deterministic(self, s):
        return np.clip(scripted_behavior(self.kind, s, self.rng, self.env), -1.0, 1.0)


def evaluate(policy, env, n_episodes: int, rng: np.random.Generator, obs_fn=None) -> tuple[float, float]:
    """Mean and population std of undiscounted episode returns with ``tanh(mean)`` actions.

    All episodes run as one batch; ``obs_fn`` maps raw observations to the
    policy's input coordinates.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    state = env.reset(rng, n_episodes)
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, bool)
    for _ in range(env.horizon):
        obs = obs_fn(state) if obs_fn is not None else state
        action = np.asarray(policy.deterministic(obs), dtype=np.float64)
        state, reward, done = env.step(state, action)
        returns += np.where(alive, reward, 0.0)
        alive &= ~np.asarray(done, bool)
        if not alive.any():
            break
    return float(returns.mean()), float(returns.std())


# --- shared plumbing ----------------------------------------------------------

def prepare_dataset(cfg: TrainConfig, ds: OfflineDataset) -> OfflineDataset:
    if ds.count == 0:
        raise ConfigError("dataset is empty")
    if cfg.reward_scale != 1.0:
        ds = scale_rewards(ds, cfg.reward_scale)
    if cfg.normalize_states and ds.count >= 2:
        ds = normalize_states(ds)
    return ds


def make_policy(cfg: TrainConfig, ds: OfflineDataset, rng) -> TanhGaussianPolicy:
    return TanhGaussianPolicy(ds.state_dim, ds.action_dim, cfg.policy_hidden, layer_norm=cfg.policy_layer_norm,
                              rng=rng, lr=cfg.actor_lr, weight_decay=cfg.weight_decay)


class _Run:
    """State shared by the loops: metric accumulation, evaluation and checkpoints."""

    def __init__(self, cfg, ds, env, run_dir, resume):
        self.cfg = cfg
        self.ds = ds
        self.env = env
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.art = RunArtifacts(cfg.to_dict(), cfg.seed, self.run_dir, dataset=ds)
        self.rngs = rng_streams(cfg.seed)
        self.acc = {"critic": [], "policy": []}
        self.start = time.perf_counter()
        self.resume = resume
        if self.run_dir is not None:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "plots").mkdir(exist_ok=True)
            cfg_path = self.run_dir / "config.json"
            text = cfg.to_json() + "\n"
            if resume and cfg_path.exists() and cfg_path.read_text() != text:
                raise ConfigError(f"{cfg_path} differs from the requested config; refusing to resume")
            cfg_path.write_text(text)

    @property
    def n_eval(self):
        return default_eval_episodes(self.env, self.cfg) if self.env is not None else 0

    def evaluate(self, policy):
        if self.env is None:
            return None, None
        return evaluate(policy, self.env, self.n_eval, self.rngs["eval"], self.ds.normalize_obs)

    def log_row(self, step, policy=None, do_eval=True):
        mean = lambda xs: float(np.mean(xs)) if xs else None
        row = {"step": step, "critic_loss": mean(self.acc["critic"]), "policy_loss": mean(self.acc["policy"]),
               "eval_mean": None, "eval_std": None}
        if do_eval and policy is not None:
            row["eval_mean"], row["eval_std"] = self.evaluate(policy)
        self.acc = {"critic": [], "policy": []}
        self.art.metrics.append(row)
        log.info("step %d %s", step, {k: v for k, v in row.items() if k != "step"})
        self.flush_metrics()
        return row

    def flush_metrics(self):
        if self.run_dir is not None:
            (self.run_dir / "metrics.csv").write_text(self.art.metrics_csv())

    def due(self, step, total):
        return step == total or (self.cfg.eval_every > 0 and step % self.cfg.eval_every == 0)

    # resume state holds every mutable object plus RNG states
    def resume_path(self):
        return self.run_dir / "checkpoints" / "resume.pkl" if self.run_dir is not None else None

    def save_resume(self, step, phase, objects):
        path = self.resume_path()
        if path is None:
            return
        state = {"step": step, "phase": phase, "objects": objects, "metrics": self.art.metrics,
                 "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()}}
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(state, fh)
        os.replace(tmp, path)

    def load_resume(self):
        path = self.resume_path()
        if not self.resume or path is None or not path.exists():
            return None
        with open(path, "rb") as fh:
            state = pickle.load(fh)
        for k, g in self.rngs.items():
            g.bit_generator.state = state["rngs"][k]
        self.art.metrics = state["metrics"]
        return state

    def finish(self, policy, critic, ebm):
        art = self.art
        art.policy, art.critic, art.ebm = policy, critic, ebm
        if art.metrics and art.metrics[-1]["eval_mean"] is not None:
            art.final_eval = (art.metrics[-1]["eval_mean"], art.metrics[-1]["eval_std"])
        if self.run_dir is not None:
            ck = self.run_dir / "checkpoints"
            save_checkpoint(policy.net, ck / "policy.bprw", "policy")
            art.checkpoints["policy"] = str(ck / "policy.bprw")
            if critic is not None:
                for i, net in enumerate(critic.members):
                    p = ck / f"critic{i}.bprw"
                    save_checkpoint(net, p, f"critic[{i}]")
                    art.checkpoints[f"critic[{i}]"] = str(p)
            if ebm is not None:
                save_checkpoint(ebm.net, ck / "ebm.bprw", "ebm")
                art.checkpoints["ebm"] = str(ck / "ebm.bprw")
            self.flush_metrics()
            ds = self.ds
            (self.run_dir / "dataset.json").write_text(json.dumps({
                "env_tag": ds.env_tag, "state_mean": ds.state_mean.tolist(), "state_std": ds.state_std.tolist(),
                "reward_scale": ds.reward_scale}, indent=2, sort_keys=True) + "\n")
            if art.metrics:
                pts = [(r["step"], r["eval_mean"]) for r in art.metrics if r["eval_mean"] is not None]
                if pts:
                    plotting.emit_plot(plotting.Series("eval return", *zip(*pts)),
                                       self.run_dir / "plots" / "eval.svg", "evaluation", "step", "return")
        art.wall_clock = time.perf_counter() - self.start
        return art


def _ebm_for(cfg, ds, ebm, rngs):
    if ebm is not None:
        if not ebm.trained:
            raise ConfigError("supplied energy model is untrained")
        return ebm
    return train_ebm(ds, cfg, rngs["ebm"], log_every=0)


def _step_error(exc, step):
    exc.step = step
    if exc.args and isinstance(exc.args[0], str):
        exc.args = (f"step {step}: {exc.args[0]}",) + exc.args[1:]
    raise exc


# --- training loops -------------------------------------------------------------

def train_bpr(cfg: TrainConfig, ds: OfflineDataset, *, ebm: EnergyModel | None = None, env=None,
              run_dir=None, resume: bool = False, call_log: list | None = None,
              prepared: bool = False, critic: CriticSet | FixedQ | None = None) -> RunArtifacts:
    """EBM pretraining, then per step: batch, critic target, critic update,
    target soft update, policy update, all on the same batch.

    A :class:`FixedQ` critic skips the three critic stages.
    """
    ds = ds if prepared else prepare_dataset(cfg, ds)
    run = _Run(cfg, ds, env, run_dir, resume)
    rngs = run.rngs
    state = run.load_resume()
    if state is not None:
        policy, critic, ebm = state["objects"]
        start = state["step"]
    else:
        ebm = _ebm_for(cfg, ds, ebm, rngs)
        policy = make_policy(cfg, ds, rngs["init"])
        if critic is None:
            critic = CriticSet.from_config(cfg, ds.state_dim, ds.action_dim, rngs["init"])
        start = 0
    learn_q = not isinstance(critic, FixedQ)
    note = call_log.append if call_log is not None else (lambda _: None)
    for step in range(start + 1, cfg.steps + 1):
        try:
            batch = sample_batch(ds, cfg.batch_size, rngs["batch"])
            note("sample_batch")
            if learn_q:
                y = regime_targets(critic, batch, policy, rngs["policy"])
                note("critic_target")
                run.acc["critic"].append(float(np.mean(critic_update(critic, batch, y))))
                note("critic_update")
                target_soft_update(critic)
                note("target_soft_update")
            run.acc["policy"].append(policy_step(cfg, policy, ebm, critic, batch, rngs["policy"]))
            note("policy_step")
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            _step_error(exc, step)
        if run.due(step, cfg.steps):
            run.log_row(step, policy)
            run.save_resume(step, "bpr", (policy, critic, ebm))
    return run.finish(policy, critic, ebm)


def train_onestep(cfg: TrainConfig, ds: OfflineDataset, *, ebm: EnergyModel | None = None, env=None,
                  run_dir=None, resume: bool = False, prepared: bool = False,
                  critic: CriticSet | None = None) -> RunArtifacts:
    """Phase 1 fits SARSA critics for ``critic_steps``; phase 2 trains the
    policy for ``steps`` against the frozen critics."""
    if cfg.regime == "off_policy":
        raise ConfigError("train_onestep needs the onestep or ensemble_lcb regime")
    ds = ds if prepared else prepare_dataset(cfg, ds)
    run = _Run(cfg, ds, env, run_dir, resume)
    rngs = run.rngs
    state = run.load_resume()
    if state is not None:
        policy, critic, ebm = state["objects"]
        done_steps, phase = state["step"], state["phase"]
    else:
        ebm = _ebm_for(cfg, ds, ebm, rngs)
        policy = make_policy(cfg, ds, rngs["init"])
        fresh = critic is None
        if fresh:
            critic = CriticSet.from_config(cfg, ds.state_dim, ds.action_dim, rngs["init"])
        done_steps, phase = (0, "critic") if fresh else (cfg.critic_steps, "policy")
    queries = policy.query_count
    total = cfg.critic_steps + cfg.steps
    for step in range(done_steps + 1, cfg.critic_steps + 1):
        try:
            batch = sample_batch(ds, cfg.batch_size, rngs["batch"])
            run.acc["critic"].append(float(np.mean(critic_update(critic, batch, sarsa_target(critic, batch)))))
            target_soft_update(critic)
        except Exception as exc:  # noqa: BLE001
            _step_error(exc, step)
        if run.due(step, total):
            run.log_row(step, do_eval=False)
            run.save_resume(step, "critic", (policy, critic, ebm))
    run.art.policy_queries_in_critic_phase = policy.query_count - queries
    for step in range(max(done_steps, cfg.critic_steps) + 1, total + 1):
        try:
            batch = sample_batch(ds, cfg.batch_size, rngs["batch"])
            run.acc["policy"].append(policy_step(cfg, policy, ebm, critic, batch, rngs["policy"]))
        except Exception as exc:  # noqa: BLE001
            _step_error(exc, step)
        if run.due(step, total):
            run.log_row(step, policy)
            run.save_resume(step, "policy", (policy, critic, ebm))
    return run.finish(policy, critic, ebm)


def train_bc(cfg: TrainConfig, ds: OfflineDataset, *, env=None, run_dir=None, resume: bool = False,
             prepared: bool = False) -> RunArtifacts:
    """Maximum likelihood on dataset actions with the same policy class and step budget."""
    ds = ds if prepared else prepare_dataset(cfg, ds)
    run = _Run(cfg, ds, env, run_dir, resume)
    rngs = run.rngs
    state = run.load_resume()
    if state is not None:
        (policy,) = state["objects"]
        start = state["step"]
    else:
        policy = make_policy(cfg, ds, rngs["init"])
        start = 0
    for step in range(start + 1, cfg.steps + 1):
        try:
            run.acc["policy"].append(bc_step(policy, sample_batch(ds, cfg.batch_size, rngs["batch"])))
        except Exception as exc:  # noqa: BLE001
            _step_error(exc, step)
        if run.due(step, cfg.steps):
            run.log_row(step, policy)
            run.save_resume(step, "bc", (policy,))
    return run.finish(policy, None, None)


def train(cfg: TrainConfig, ds: OfflineDataset, algo: str = "bpr", **kw) -> RunArtifacts:
    """Dispatch on ``algo`` (bpr or bc) and, for BPR, on the critic regime."""
    if algo == "bc":
        kw.pop("ebm", None)
        return train_bc(cfg, ds, **kw)
    if algo != "bpr":
        raise ConfigError(f"unknown algorithm {algo!r}")
    if cfg.regime == "off_policy":
        return train_bpr(cfg, ds, **kw)
    return train_onestep(cfg, ds, **kw)


# --- lambda sweep ---------------------------------------------------------------

def _sweep_arm(args):
    base, lam, ds, ebm, algo = args
    try:
        cfg = base.replace(lam=lam)
        art = train(cfg, ds, algo, ebm=ebm, env=env_for(ds), prepared=True)
        mean, std = art.final_eval if art.final_eval is not None else (math.nan, math.nan)
        return {"lambda": lam, "mean": mean, "std": std, "seed": base.seed, "status": "ok"}
    except Exception as exc:  # noqa: BLE001 - one failed arm must not stop the sweep
        return {"lambda": lam, "mean": math.nan, "std": math.nan, "seed": base.seed,
                "status": f"error: {type(exc).__name__}: {exc}".replace("\n", " ")}


def ablate_lambda(cfg: TrainConfig, values, ds: OfflineDataset, out_dir, *, ebm: EnergyModel | None = None,
                  workers: int | None = None) -> list[dict]:
    """One training run per lambda, all with ``cfg.seed``; writes lambda.csv and lambda.svg.

    The energy model does not depend on lambda, so it is trained once and shared.
    """
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("need at least one lambda value")
    if workers is None:
        workers = int(os.environ.get("BPR_THREADS", "1"))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(cfg, ds)
    if ebm is None:
        ebm = train_ebm(ds, cfg, rng_streams(cfg.seed)["ebm"], log_every=0)
    arms = [(cfg, v, ds, ebm, "bpr") for v in values]
    if workers > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(arms))) as pool:
            rows = list(pool.map(_sweep_arm, arms))
    else:
        rows = [_sweep_arm(a) for a in arms]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "mean", "std", "seed", "status"])
    for r in rows:
        w.writerow([repr(r["lambda"]), repr(float(r["mean"])), repr(float(r["std"])), r["seed"], r["status"]])
    (out_dir / "lambda.csv").write_text(buf.getvalue())
    bar = plotting.Series("final return", [r["lambda"] for r in rows],
                          [0.0 if math.isnan(r["mean"]) else r["mean"] for r in rows], kind="bar",
                          err=[0.0 if math.isnan(r["std"]) else r["std"] for r in rows])
    plotting.emit_plot(bar, out_dir / "lambda.svg", "lambda ablation", "lambda", "return")
    (out_dir / "config.json").write_text(json.dumps({"base": cfg.to_dict(), "values": values}, indent=2,
                                                    sort_keys=True) + "\n")
    return rows
