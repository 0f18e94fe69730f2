"""Batch entry points: ``leuq {generate, train, eval, invert}``.

Settings come from an optional JSON config (sections ``solver``, ``model``,
``train``, ``eval``, ``inverse``) overridden by flags. The fully resolved
settings are written to every output directory before work starts.

Exit codes: 0 success, 2 configuration, 3 solver failure, 4 training
divergence, 5 checkpoint problem, 6 inversion failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data.dataset import SolverFailure, generate_dataset, load_dataset, make_bundled_windows, save_dataset
from .data.navier_stokes import SolverConfig
from .errors import ConfigError, ContractError, FormatError, InversionError, NumericError, TrainingDiverged
from .evaluation import evaluate_rollout
from .inverse import inverse_uq, problem_from_trajectory, save_inversion
from .model import ModelConfig
from .training import LossWeights, TrainRunConfig, load_ensemble, save_run, train_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_INVERSION = 0, 2, 3, 4, 5, 6


class CheckpointError(Exception):
    pass


# -- config resolution ---------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _resolve(defaults: dict, section: dict, flags: dict) -> dict:
    """defaults < config section < explicitly given flags."""
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {**defaults, **section}
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def _flags(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if v is not None}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_path(data: str | None, split: str) -> Path:
    if data is None:
        raise ConfigError("--data is required")
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.lds"
    if not p.is_file():
        raise ConfigError(f"dataset {p} not found")
    return p


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    conf = _load_config(args.config)
    flags = _flags(args)
    solver = _resolve(SolverConfig().to_dict(), conf.get("solver", {}), flags)
    split = _resolve({"train": 50, "test": 10}, conf.get("split", {}), flags)
    cfg = SolverConfig.from_dict(solver).validate()
    out = Path(args.out)
    _write_json(out / "resolved_config.json", {"solver": solver, "split": split})
    try:
        train, test = generate_dataset(cfg, split["train"], split["test"])
    except (SolverFailure, NumericError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    files = {}
    for ts in (train, test):
        path = out / f"{ts.split}.lds"
        save_dataset(ts, path)
        files[ts.split] = {"file": path.name, "shape": list(ts.states.shape), "sha256": _sha256(path)}
    _write_json(out / "manifest.json", {"solver": solver, "splits": files})
    return EXIT_OK


def _model_defaults() -> dict:
    d = ModelConfig().to_dict()
    for k in ("latent", "with_sigma", "propagate_zsigma", "data_scale", "seed"):
        d.pop(k)
    d["variant"] = "latent+sigma+zsigma"
    return d


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    flags = _flags(args)
    path = _dataset_path(args.data, "train")
    ts = load_dataset(path)
    model_d = _resolve({**_model_defaults(), "n": ts.n}, conf.get("model", {}), flags)
    train_defaults = TrainRunConfig().to_dict()
    train_defaults.pop("weights")
    train_defaults.update({"alphas": None, "tail": 0.1})
    train_d = _resolve(train_defaults, conf.get("train", {}), flags)
    mkw = {k: v for k, v in model_d.items() if k != "variant"}
    mcfg = ModelConfig(**mkw).with_variant(model_d["variant"]).validate()
    if mcfg.n != ts.n:
        raise ConfigError(f"model grid {mcfg.n} does not match dataset grid {ts.n}")
    tkw = {k: v for k, v in train_d.items() if k not in ("alphas", "tail")}
    alphas = train_d["alphas"]
    tcfg = TrainRunConfig(**tkw, weights=LossWeights(None if alphas is None else tuple(alphas), train_d["tail"]))
    tcfg.validate()
    out = Path(args.out)
    resolved = {"model": model_d, "train": train_d, "data": str(path), "data_sha256": _sha256(path)}
    _write_json(out / "resolved_config.json", resolved)
    windows = make_bundled_windows(ts, mcfg.history, mcfg.horizon, mcfg.bundle)
    try:
        results = train_ensemble(windows, tcfg, mcfg)
    except TrainingDiverged as exc:
        print(f"training diverged (member {exc.member}, epoch {exc.epoch}): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_run(out, results, tcfg, extra={"resolved": resolved})
    return EXIT_OK


def _load_models(run_dir: str | None):
    if run_dir is None:
        raise ConfigError("a run directory with member checkpoints is required")
    try:
        return load_ensemble(run_dir)
    except (FileNotFoundError, FormatError, ConfigError) as exc:
        raise CheckpointError(str(exc)) from exc


def cmd_eval(args) -> int:
    conf = _load_config(args.config)
    opts = _resolve({"mode": "autoregressive", "horizon": 10, "bins": 100, "kind": "quantile"},
                    conf.get("eval", {}), _flags(args))
    path = _dataset_path(args.data, "test")
    models = _load_models(args.run)
    test = load_dataset(path)
    if test.n != models[0].config.n:
        raise CheckpointError(f"checkpoint grid {models[0].config.n} does not match dataset grid {test.n}")
    out = Path(args.out)
    _write_json(out / "resolved_config.json", {"eval": opts, "run": args.run, "data": str(path)})
    try:
        report = evaluate_rollout(models, test, opts["mode"], opts["horizon"], opts["bins"], opts["kind"])
    except ContractError as exc:
        raise CheckpointError(str(exc)) from exc
    report.save(out)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_invert(args) -> int:
    conf = _load_config(args.config)
    opts = _resolve({"route": "latent", "trajectory": 0, "t0": 0, "k_s": 1, "k_e": 10, "iterations": 500,
                     "lr": 1e-2, "member_sigma": False},
                    conf.get("inverse", {}), _flags(args))
    path = _dataset_path(args.data, "test")
    models = _load_models(args.ensemble_dir)
    test = load_dataset(path)
    cfg = models[0].config
    if test.n != cfg.n:
        raise CheckpointError(f"checkpoint grid {cfg.n} does not match dataset grid {test.n}")
    if not 0 <= opts["trajectory"] < test.n_traj:
        raise ConfigError(f"trajectory index {opts['trajectory']} outside [0, {test.n_traj})")
    out = Path(args.out)
    _write_json(out / "resolved_config.json", {"inverse": opts, "ensemble_dir": args.ensemble_dir, "data": str(path)})
    prob, truth = problem_from_trajectory(test.states[opts["trajectory"]], opts["t0"], cfg.bundle,
                                          opts["k_s"], opts["k_e"], iterations=opts["iterations"], lr=opts["lr"])
    try:
        sol = inverse_uq(models, prob, opts["route"], truth=truth, use_member_sigma=opts["member_sigma"])
    except InversionError as exc:
        print(f"inversion failed: {exc}", file=sys.stderr)
        return EXIT_INVERSION
    save_inversion(out, sol, prob, extra={"route": opts["route"], "trajectory": opts["trajectory"], "t0": opts["t0"]},
                   solver_config=test.config)
    print(json.dumps({"route": opts["route"], "relative_l2": sol.relative_l2,
                      "MA": sol.report.MA if sol.report else None}, sort_keys=True))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leuq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate Navier-Stokes trajectories")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--viscosity", type=float)
    g.add_argument("--forcing-amplitude", dest="forcing_amplitude", type=float)
    g.add_argument("--dt", type=float)
    g.add_argument("--snapshot-interval", dest="snapshot_interval", type=float)
    g.add_argument("--snapshots", dest="n_snapshots", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--ic-alpha", dest="ic_alpha", type=float)
    g.add_argument("--ic-tau", dest="ic_tau", type=float)
    g.add_argument("--ic-rms", dest="ic_rms", type=float)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a surrogate ensemble")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory or train file")
    t.add_argument("--out", required=True)
    t.add_argument("--variant")
    t.add_argument("--loss", choices=["nll", "mse", "l1"])
    t.add_argument("--ensemble", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-min", dest="lr_min", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--horizon", type=int, help="training rollout length M")
    t.add_argument("--history", type=int)
    t.add_argument("--bundle", type=int)
    t.add_argument("--d-z", dest="d_z", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--conv-blocks", dest="conv_blocks", type=int)
    t.add_argument("--no-normalize", dest="normalize", action="store_const", const=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an ensemble on the test split")
    e.add_argument("--config")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=["autoregressive", "teacher_forcing"])
    e.add_argument("--horizon", type=int)
    e.add_argument("--bins", type=int)
    e.add_argument("--kind", choices=["quantile", "interval"])
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("invert", help="recover an initial state from future observations")
    i.add_argument("--config")
    i.add_argument("--ensemble-dir", dest="ensemble_dir", required=True)
    i.add_argument("--data")
    i.add_argument("--out", required=True)
    i.add_argument("--route", choices=["latent", "input"])
    i.add_argument("--trajectory", type=int)
    i.add_argument("--t0", type=int)
    i.add_argument("--k-s", dest="k_s", type=int)
    i.add_argument("--k-e", dest="k_e", type=int)
    i.add_argument("--iterations", type=int)
    i.add_argument("--lr", type=float)
    i.add_argument("--member-sigma", dest="member_sigma", action="store_const", const=True)
    i.set_defaults(func=cmd_invert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, ValueError, FormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
