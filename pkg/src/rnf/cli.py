"""Command-line entry point: ``rnf {train,evaluate,predict,simulate,search}``.

Exit status is 0 on success, 1 on a runtime failure and 2 for usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import checkpoint
from .config import ConfigError, RunConfig
from .data import (DataError, LgssmSpec, NormStats, Trajectory, apply_norm, chronological_split, fit_norm,
                   kalman_oracle, load_electricity, load_quotes, load_trajectory, save_trajectory,
                   simulate_lgssm)
from .evaluation import multistep_mse, persistence_mse, picp, report
from .inference import Z95, filter_trajectory, multistep_predictions
from .training import TrainingError, random_search, train_model

log = logging.getLogger("rnf")

MODES = {"known": ["known_inputs"], "unknown": ["unknown_inputs"], "both": ["unknown_inputs", "known_inputs"]}


class UsageError(Exception):
    """Raised for problems the user fixes by changing arguments or config."""


# ------------------------------------------------------------------ data


def _load(path: str, fmt: str) -> Trajectory:
    if fmt == "electricity":
        return load_electricity(path)
    if fmt == "quotes":
        return load_quotes(path)
    return load_trajectory(path)


def _parts(cfg: RunConfig) -> dict[str, Trajectory]:
    """Raw train/valid/test trajectories named by the config."""
    fmt = cfg.get("data.format")
    out = {}
    if "data.path" in cfg:
        train, valid, test = chronological_split(_load(cfg.get("data.path"), fmt), tuple(cfg.get("data.split")))
        out.update(train=train, valid=valid, test=test)
    for name in ("train", "valid", "test"):
        if f"data.{name}" in cfg:
            out[name] = _load(cfg.get(f"data.{name}"), fmt)
    return out


def _training_data(cfg: RunConfig):
    parts = _parts(cfg)
    if "train" not in parts:
        raise ConfigError("training needs data.train or data.path")
    norm = fit_norm(parts["train"], cfg.get("data.normalize"))
    train = apply_norm(parts["train"], norm)
    valid = [apply_norm(parts["valid"], norm)] if "valid" in parts else []
    return [train], valid, norm


def _test_data(cfg: RunConfig) -> Trajectory:
    parts = _parts(cfg)
    if "test" not in parts:
        raise ConfigError("this command needs data.test or data.path")
    return parts["test"]


def _lgssm(cfg: RunConfig) -> LgssmSpec:
    section = cfg.section("lgssm")
    section.pop("T", None)
    try:
        return LgssmSpec.from_mapping(section)
    except KeyError as exc:
        raise ConfigError(f"missing required key 'lgssm.{exc.args[0]}'") from exc


# ------------------------------------------------------------------ output


def _columns(prefix: str, O: int) -> list[str]:
    return [prefix] if O == 1 else [f"{prefix}_{j + 1}" for j in range(O)]


def write_predictions(path: Path, mean, sigma, lo, hi) -> None:
    mean, sigma, lo, hi = (np.asarray(a, dtype=np.float64) for a in (mean, sigma, lo, hi))
    T, O = mean.shape
    data = {"t": np.arange(T)}
    for name, arr in (("mean", mean), ("sigma", sigma), ("lo90", lo), ("hi90", hi)):
        for j, col in enumerate(_columns(name, O)):
            data[col] = arr[:, j]
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.17g")


def read_predictions(path: str, O: int):
    df = pd.read_csv(path, float_precision="round_trip")
    try:
        return tuple(df[_columns(name, O)].to_numpy(dtype=np.float64)
                     for name in ("mean", "sigma", "lo90", "hi90"))
    except KeyError as exc:
        raise DataError(f"{path}: missing prediction column {exc}") from exc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("out"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved-config.txt")
    return out


def _to_original(norm: NormStats, mean, sigma, lo, hi):
    """Map normalised predictions back to data units where the map is per-step affine."""
    if norm.method in ("none", "ewm"):
        return mean, sigma, lo, hi
    a, b = norm.y_scale, norm.y_shift
    return mean * a + b, sigma * a, lo * a + b, hi * a + b


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig) -> int:
    config = cfg.train_config()
    train, valid, norm = _training_data(cfg)
    out = _out_dir(cfg)
    result = train_model(train, valid, config)
    checkpoint.save(out / "checkpoint.rnf", result.model, norm)
    with open(out / "training-log.txt", "w") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\twall_time\n")
        for r in result.log:
            fh.write(f"{r['epoch']}\t{r['train_loss']!r}\t{r['val_loss']!r}\t{r['wall_time']:.3f}\n")
    with open(out / "loss-log.txt", "w") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\n")
        for r in result.log:
            fh.write(f"{r['epoch']}\t{r['train_loss']!r}\t{r['val_loss']!r}\n")
        fh.write(f"# best_epoch {result.best_epoch} best_val {result.best_val!r}\n")
    log.info("best epoch %s, validation NLL %.6f", result.best_epoch, result.best_val)
    return 0


def _model(cfg: RunConfig):
    try:
        return checkpoint.load(cfg.require("model.checkpoint"))
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc


def _samples(cfg: RunConfig, model) -> int | None:
    return cfg.train_config().samples_test if model.variational else None


def _evaluate_file(cfg: RunConfig, test: Trajectory) -> dict:
    """Metrics for a predictions CSV (for example Kalman-oracle output)."""
    mean, sigma, lo, hi = read_predictions(cfg.get("eval.predictions"), test.obs_dim)
    if len(mean) != len(test):
        raise DataError(f"predictions cover {len(mean)} steps, trajectory has {len(test)}")
    ref = persistence_mse(test) if test.obs_mask.sum() > 2 else None
    ref = ref if ref else None
    rep = report(mean, test.y, lo, hi, ref, 1, test.obs_mask)
    return {"one_step": rep.to_dict(), "reference": "persistence", "reference_mse": ref}


def _evaluate_model(cfg: RunConfig, test: Trajectory) -> dict:
    model, norm = _model(cfg)
    test = apply_norm(test, norm)
    samples = _samples(cfg, model)
    seed = cfg.get("seed")
    ref = persistence_mse(test)
    filtered = filter_trajectory(model, test, samples, seed)
    doc = {"one_step": report(filtered.mean, test.y, filtered.lo, filtered.hi, ref, 1, test.obs_mask).to_dict(),
           "reference": "persistence", "reference_mse": ref, "multistep": {}}
    taus = cfg.get("eval.tau")
    if any(t < 1 for t in taus):
        raise ConfigError("eval.tau entries must be at least 1")
    for mode in MODES[cfg.get("eval.input_mode")]:
        by_tau = {}
        horizon = max(taus)
        ms = multistep_predictions(model, test, horizon, mode, filtered, samples, seed)
        for tau in taus:
            err = multistep_mse(ms.mean, ms.target, tau, ms.valid)
            cover = picp(ms.target[:, :tau], ms.lo[:, :tau], ms.hi[:, :tau], ms.valid[:, :tau])
            by_tau[str(tau)] = {"mse": err, "normalized_mse": err / ref, "picp": cover, "tau": tau,
                                "n": int(ms.valid[:, :tau].sum())}
        doc["multistep"][mode.split("_")[0]] = by_tau
    if "lgssm.A" in cfg:
        if norm.method != "none":
            log.warning("oracle comparison assumes un-normalised data; skipped")
        else:
            oracle = kalman_oracle(_lgssm(cfg), test, "known")
            sd = np.sqrt(oracle.pred_var)
            ok = test.obs_mask
            omse = report(oracle.pred_mean, test.y, oracle.pred_mean - Z95 * sd, oracle.pred_mean + Z95 * sd,
                          ref, 1, ok)
            doc["oracle"] = omse.to_dict()
            doc["mse_ratio_vs_oracle"] = doc["one_step"]["mse"] / omse.mse
    return doc


def cmd_evaluate(cfg: RunConfig) -> int:
    test = _test_data(cfg)
    out = _out_dir(cfg)
    doc = _evaluate_file(cfg, test) if "eval.predictions" in cfg else _evaluate_model(cfg, test)
    _write_json(out / "metrics.json", doc)
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    test = _test_data(cfg)
    model, norm = _model(cfg)
    out = _out_dir(cfg)
    filtered = filter_trajectory(model, apply_norm(test, norm), _samples(cfg, model), cfg.get("seed"))
    write_predictions(out / "predictions.csv",
                      *_to_original(norm, filtered.mean, filtered.sigma, filtered.lo, filtered.hi))
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    spec = _lgssm(cfg)
    T = cfg.require("lgssm.T")
    out = _out_dir(cfg)
    traj, states = simulate_lgssm(spec, T, np.random.default_rng(cfg.get("seed")))
    save_trajectory(traj, out / "trajectory.csv", {f"x_{j + 1}": states[:, j] for j in range(states.shape[1])})
    oracle = kalman_oracle(spec, traj, "known")
    sd = np.sqrt(oracle.pred_var)
    write_predictions(out / "predictions.csv", oracle.pred_mean, sd,
                      oracle.pred_mean - Z95 * sd, oracle.pred_mean + Z95 * sd)
    return 0


def cmd_search(cfg: RunConfig) -> int:
    base = cfg.train_config()
    train, valid, norm = _training_data(cfg)
    out = _out_dir(cfg)
    grid = cfg.search_grid()
    result = random_search(grid, cfg.get("search.iterations"), train, valid, base, cfg.get("seed"))
    names = ["rank", "candidate", *grid, "val_nll", "best_epoch"]
    with open(out / "leaderboard.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in result.leaderboard:
            writer.writerow({k: row[k] for k in names})
    checkpoint.save(out / "checkpoint.rnf", result.best_model, norm)
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "simulate": cmd_simulate, "search": cmd_search}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnf", description="LSTM-based Bayesian filtering toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--variant", choices=["rnf", "vrnf-kf", "vrnf-nn"])
        p.add_argument("--tau", help="comma-separated forecast horizons")
        p.add_argument("--input-mode", choices=["known", "unknown", "both"])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict[str, str]:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        over[key.strip()] = value.strip()
    for flag, key in (("seed", "seed"), ("out", "out"), ("variant", "variant"), ("tau", "eval.tau"),
                      ("input_mode", "eval.input_mode")):
        value = getattr(args, flag)
        if value is not None:
            over[key] = str(value)
    return over


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"rnf: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingError, checkpoint.CheckpointError, OSError, ValueError,
            FloatingPointError) as exc:
        print(f"rnf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
