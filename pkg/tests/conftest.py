"""Shared LGSSM data and trained models.

Training is deterministic, so each model is fitted once per session and
reused by the inference checks and the acceptance suite.
"""
import time
from dataclasses import dataclass

import numpy as np
import pytest

from rnf.data import LgssmSpec, Trajectory, simulate_lgssm
from rnf.training import FitResult, TrainConfig, train_model


@dataclass
class LgssmData:
    spec: LgssmSpec
    train: Trajectory
    valid: Trajectory
    test: Trajectory


@dataclass
class Trained:
    result: FitResult
    config: TrainConfig
    seconds: float

    @property
    def model(self):
        return self.result.model


def lgssm_spec() -> LgssmSpec:
    return LgssmSpec(A=[[0.9]], B=[[0.5]], H=[[1.0]], Q=[[0.1]], R=[[0.1]], c=[0.0], D=[[1.0]],
                     x0_mean=[0.0], x0_cov=[[0.5]])


# state size 10 from the allowed {10, 25}; minibatch 4 keeps 30 epochs inside the time budget
BASE = dict(state_size=10, learning_rate=1e-3, minibatch_size=4, max_epochs=30, samples_valid=1, seed=0)

CONFIGS = {
    "full": TrainConfig(missing_rate=0.0, **BASE),
    "skip": TrainConfig(missing_rate=0.5, **BASE),
    "io": TrainConfig(missing_rate=0.0, alpha_x=0.0, alpha_y=0.0, **BASE),
}


@pytest.fixture(scope="session")
def lgssm() -> LgssmData:
    spec = lgssm_spec()
    rng = np.random.default_rng(7)
    train = simulate_lgssm(spec, 20_000, rng)[0]
    valid = simulate_lgssm(spec, 2_500, rng)[0]
    test = simulate_lgssm(spec, 5_000, rng)[0]
    return LgssmData(spec, train, valid, test)


class _Models:
    def __init__(self, data: LgssmData):
        self.data = data
        self._cache: dict[str, Trained] = {}

    def __getitem__(self, name: str) -> Trained:
        if name not in self._cache:
            cfg = CONFIGS[name]
            start = time.perf_counter()
            res = train_model([self.data.train], [self.data.valid], cfg)
            self._cache[name] = Trained(res, cfg, time.perf_counter() - start)
        return self._cache[name]


@pytest.fixture(scope="session")
def lgssm_models(lgssm) -> _Models:
    """Lazily trained models: ``full`` (r=0), ``skip`` (r=0.5) and ``io``
    (r=0 with only the input-dynamics output scored)."""
    return _Models(lgssm)
