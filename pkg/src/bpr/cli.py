"""Command-line entry point: ``bpr <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as dataset_io
from . import oracle
from .config import TrainConfig
from .ebm import EnergyModel, train_ebm
from .errors import BPRError, ConfigError
from .experiments import make_dataset, preset_config, run_bandit
from .nn import load_checkpoint, save_checkpoint
from .policy import TanhGaussianPolicy
from .trainer import ablate_lambda, default_eval_episodes, env_for, evaluate, prepare_dataset, rng_streams, train

REGIME_FLAGS = {"off-policy": "off_policy", "onestep": "onestep", "ensemble": "ensemble_lcb"}
MODE_FLAGS = {"self-play": "self_play", "reference": "reference"}
DATASETS = ("bandit", "pointmass-expert", "pointmass-medium", "pointmass-mixed", "stitch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--regime", choices=sorted(REGIME_FLAGS), default="off-policy")
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="self-play")
    p.add_argument("--steps", type=int, help="policy steps (overrides the preset)")
    p.add_argument("--full", action="store_true", help="full-fidelity step counts and widths")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpr", description="Offline RL with behavior-preference regression.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic offline dataset")
    _common(p)
    p.add_argument("--env", choices=DATASETS, required=True)
    p.add_argument("--size", type=int, help="episodes (point mass) or samples (bandit)")

    p = sub.add_parser("train-ebm", help="pretrain the energy-based behavior model")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("train", help="train a policy on a dataset")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--ebm", type=Path, help="pretrained energy model checkpoint")
    p.add_argument("--algo", choices=("bpr", "bc"), default="bpr")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    _common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("bandit", help="reference sampling vs self-play on the 1-D bandit")
    _common(p)

    p = sub.add_parser("ablate-lambda", help="one run per lambda value")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--values", default="0.5,1.0,1.5,2.0")

    p = sub.add_parser("verify", help="run the exact tabular checks")
    _common(p)
    p.add_argument("--instances", type=int, default=100)
    return parser


def _task_for(ds) -> str:
    if ds.env_tag == "bandit":
        return "bandit"
    return "stitch" if "sparse" in ds.env_tag else "pointmass"


def make_config(args, task: str) -> TrainConfig:
    overrides = {}
    if args.config is not None:
        try:
            overrides = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    base = preset_config(task, full=args.full).to_dict()
    base.update(overrides)
    base.update(seed=args.seed, lam=args.lam, regime=REGIME_FLAGS[args.regime], mode=MODE_FLAGS[args.mode])
    if args.steps is not None:
        base["steps"] = args.steps
    return TrainConfig.from_dict(base)


def _need(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required input: {what}")
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out(args, default: str) -> Path:
    return args.out if args.out is not None else Path(default)


def _load_ebm(path: Path, ds) -> EnergyModel:
    net, role = load_checkpoint(path)
    if role != "ebm":
        raise ConfigError(f"{path} holds a {role!r} checkpoint, not an energy model")
    if net.input_dim != ds.state_dim + ds.action_dim:
        raise ConfigError("energy model dimensions do not match the dataset")
    return EnergyModel.from_net(net, ds.state_dim)


def cmd_gen_data(args) -> int:
    ds = make_dataset(args.env, args.seed, args.size)
    out = _out(args, f"{args.env}-seed{args.seed}.bprd")
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_io.save(ds, out)
    print(json.dumps({"dataset": str(out), "transitions": ds.count, "env": ds.env_tag}))
    return 0


def cmd_train_ebm(args) -> int:
    raw = dataset_io.load(_need(args.data, "--data dataset"))
    cfg = make_config(args, _task_for(raw))
    ds = prepare_dataset(cfg, raw)
    m = train_ebm(ds, cfg, rng_streams(cfg.seed)["ebm"])
    out = _out(args, "ebm.bprw")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(m.net, out, "ebm")
    print(json.dumps({"ebm": str(out), "final_loss": m.loss_trace[-1] if m.loss_trace else None}))
    return 0


def cmd_train(args) -> int:
    raw = dataset_io.load(_need(args.data, "--data dataset"))
    cfg = make_config(args, _task_for(raw))
    ebm = None
    if args.ebm is not None:
        ebm = _load_ebm(_need(args.ebm, "--ebm checkpoint"), prepare_dataset(cfg, raw))
    out = _out(args, f"runs/{args.algo}-seed{cfg.seed}")
    art = train(cfg, raw, args.algo, env=env_for(raw), ebm=ebm, run_dir=out, resume=args.resume)
    mean, std = art.final_eval if art.final_eval else (None, None)
    print(json.dumps({"run": str(out), "eval_mean": mean, "eval_std": std, "wall_clock": art.wall_clock}))
    return 0


def cmd_eval(args) -> int:
    run = _need(args.run, "--run directory")
    meta = json.loads(_need(run / "dataset.json", "run dataset stats").read_text())
    cfg = TrainConfig.from_dict(json.loads((run / "config.json").read_text()))
    net, _ = load_checkpoint(_need(run / "checkpoints" / "policy.bprw", "policy checkpoint"))
    policy = TanhGaussianPolicy.from_net(net)
    stub = dataset_io.OfflineDataset(np.zeros((1, net.input_dim)), np.zeros((1, net.output_dim // 2)), [0.0],
                                     np.zeros((1, net.input_dim)), np.zeros((1, net.output_dim // 2)), [True],
                                     env_tag=meta["env_tag"], state_mean=meta["state_mean"],
                                     state_std=meta["state_std"])
    env = env_for(stub)
    n = args.episodes or default_eval_episodes(env, cfg)
    mean, std = evaluate(policy, env, n, np.random.default_rng(args.seed), stub.normalize_obs)
    print(json.dumps({"run": str(run), "episodes": n, "eval_mean": mean, "eval_std": std}))
    return 0


def cmd_bandit(args) -> int:
    cfg = make_config(args, "bandit")
    out = _out(args, f"runs/bandit-seed{cfg.seed}")
    res = run_bandit(cfg.seed, out, cfg)
    print(res.summary())
    return 0


def cmd_ablate(args) -> int:
    raw = dataset_io.load(_need(args.data, "--data dataset"))
    cfg = make_config(args, _task_for(raw))
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    out = _out(args, f"runs/ablate-lambda-seed{cfg.seed}")
    rows = ablate_lambda(cfg, values, raw, out)
    print(json.dumps({"csv": str(out / "lambda.csv"), "svg": str(out / "lambda.svg"), "rows": rows}))
    return 0


def cmd_verify(args) -> int:
    reports = oracle.verify_suite(args.instances, args.seed, lam=args.lam)
    out = _out(args, f"verify-seed{args.seed}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(reports, indent=2, default=float) + "\n")
    failed = [r["check"] for r in reports if r["violations"]]
    for r in reports:
        print(json.dumps(r, default=float))
    if failed:
        print(json.dumps({"error": "verification failed", "checks": failed, "report": str(out)}))
        return 1
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train-ebm": cmd_train_ebm, "train": cmd_train, "eval": cmd_eval,
            "bandit": cmd_bandit, "ablate-lambda": cmd_ablate, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (BPRError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
