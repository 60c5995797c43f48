"""Drive the ``rnf`` command line end to end in a scratch directory:
simulate data, train, evaluate against the Kalman oracle and write
predictions.

Usage: ``python3 demos/cli_walkthrough.py [workdir]``.
"""
import json
import sys
import tempfile
from pathlib import Path

from rnf.cli import main

LGSSM = ["lgssm.state_dim=1", "lgssm.input_dim=1", "lgssm.obs_dim=1", "lgssm.A=0.9", "lgssm.B=0.5", "lgssm.H=1",
         "lgssm.Q=0.1", "lgssm.R=0.1", "lgssm.c=0", "lgssm.D=1"]


def sets(items):
    return [a for kv in items for a in ("--set", kv)]


def run(argv):
    print("$ rnf " + " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)


def walk(root: Path) -> None:
    for name, T, seed in (("train", 20000, "1"), ("valid", 2500, "2"), ("test", 5000, "3")):
        run(["simulate", "--seed", seed, "--out", str(root / name), *sets(LGSSM + [f"lgssm.T={T}"])])
    data = {k: root / k / "trajectory.csv" for k in ("train", "valid", "test")}
    run(["train", "--seed", "0", "--out", str(root / "run"),
         *sets([f"data.train={data['train']}", f"data.valid={data['valid']}", "train.state_size=10",
                "train.max_epochs=8", "train.minibatch_size=4", "train.missing_rate=0"])])
    ckpt = root / "run" / "checkpoint.rnf"
    run(["evaluate", "--out", str(root / "eval"), "--tau", "1,5",
         *sets([f"model.checkpoint={ckpt}", f"data.test={data['test']}", *LGSSM])])
    run(["predict", "--out", str(root / "pred"), *sets([f"model.checkpoint={ckpt}", f"data.test={data['test']}"])])
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    print(json.dumps({k: metrics[k] for k in ("one_step", "mse_ratio_vs_oracle") if k in metrics}, indent=1))
    print(f"predictions: {root / 'pred' / 'predictions.csv'}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        walk(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            walk(Path(tmp))
