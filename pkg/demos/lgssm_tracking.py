"""Train a small RNF on a simulated 1-D LGSSM and compare it with the exact
Kalman filter.

Usage: ``python3 demos/lgssm_tracking.py [--epochs N] [--steps T]``. The
defaults finish in about a minute on one CPU; ``--epochs 30`` matches the
acceptance setting.
"""
import argparse
import time

import numpy as np

from rnf.data import LgssmSpec, kalman_oracle, simulate_lgssm
from rnf.evaluation import mse, multistep_mse, picp
from rnf.inference import filter_trajectory, multistep_predictions
from rnf.training import TrainConfig, train_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--missing-rate", type=float, default=0.0)
    args = ap.parse_args()

    spec = LgssmSpec(A=[[0.9]], B=[[0.5]], H=[[1.0]], Q=[[0.1]], R=[[0.1]], c=[0.0], D=[[1.0]],
                     x0_mean=[0.0], x0_cov=[[0.5]])
    rng = np.random.default_rng(7)
    train, valid, test = (simulate_lgssm(spec, n, rng)[0] for n in (args.steps, args.steps // 8, 5000))

    cfg = TrainConfig(state_size=10, learning_rate=1e-3, minibatch_size=4, max_epochs=args.epochs,
                      missing_rate=args.missing_rate, samples_valid=1, seed=0)
    start = time.perf_counter()
    fit = train_model([train], [valid], cfg)
    print(f"trained {args.epochs} epochs in {time.perf_counter() - start:.0f} s, best epoch {fit.best_epoch}")

    fo = filter_trajectory(fit.model, test)
    oracle = kalman_oracle(spec, test, "known")
    model_mse, oracle_mse = mse(fo.mean, test.y), mse(oracle.pred_mean, test.y)
    print(f"one-step MSE  model {model_mse:.4f}  oracle {oracle_mse:.4f}  ratio {model_mse / oracle_mse:.3f}")
    print(f"90% PICP      {picp(test.y, fo.lo, fo.hi):.3f}")
    for tau in (5, 10):
        row = []
        for mode in ("unknown_inputs", "known_inputs"):
            out = multistep_predictions(fit.model, test, tau, mode, fo)
            row.append(f"{mode.split('_')[0]} {multistep_mse(out.mean, out.target, tau):.3f}")
        print(f"tau={tau:<3d} MSE  " + "  ".join(row))


if __name__ == "__main__":
    main()
