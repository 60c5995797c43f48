"""Forecast metrics: MSE, normalised MSE, multistep MSE and PICP."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    mse: float
    normalized_mse: float | None
    picp: float | None
    tau: int
    n: int
    picp_degenerate: bool = False

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be non-negative")
        if self.picp is not None and not 0.0 <= self.picp <= 1.0:
            raise ValueError("picp must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {"mse": self.mse, "normalized_mse": self.normalized_mse, "picp": self.picp,
             "tau": self.tau, "n": self.n}
        if self.picp_degenerate:
            d["picp_degenerate"] = True
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _mask(shape, valid) -> np.ndarray:
    """Boolean mask over per-target error positions (the observation axis excluded)."""
    if valid is None:
        return np.ones(shape, bool)
    return np.broadcast_to(np.asarray(valid, bool), shape)


def _error_shape(shape) -> tuple:
    return tuple(shape[:-1]) if len(shape) > 1 else tuple(shape)


def mse(predictions, targets, valid=None) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} differs from target shape {y.shape}")
    err = (p - y) ** 2
    if err.ndim > 1:
        err = err.mean(axis=-1)
    ok = _mask(err.shape, valid)
    if not ok.any():
        raise ValueError("no valid targets")
    return float(err[ok].mean())


def normalized_mse(predictions, targets, reference_mse: float, valid=None) -> float:
    """Model MSE divided by a reference one-step MSE."""
    if not reference_mse > 0:
        raise ValueError("reference MSE must be positive")
    return mse(predictions, targets, valid) / reference_mse


def persistence_forecast(y: np.ndarray) -> np.ndarray:
    """``y_hat_t = y_{t-1}``; the first step has no forecast (NaN)."""
    y = np.asarray(y, dtype=np.float64)
    out = np.full_like(y, np.nan)
    out[1:] = y[:-1]
    return out


def persistence_mse(traj) -> float:
    """One-step MSE of the persistence forecast over steps whose current and
    previous observations are both present."""
    ok = traj.obs_mask[1:] & traj.obs_mask[:-1]
    return mse(traj.y[:-1], traj.y[1:], ok)


def multistep_mse(predictions, targets, tau: int, valid=None, horizon_only: bool = False) -> float:
    """Average squared error over horizons ``1..tau`` and all origins.

    Arrays are (N origins, horizons, O). ``horizon_only`` reports the
    horizon-``tau`` error alone.
    """
    if tau < 1:
        raise ValueError("tau must be at least 1")
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.ndim == 2:
        p, y = p[..., None], y[..., None]
    if p.shape[1] < tau:
        raise ValueError(f"predictions cover {p.shape[1]} horizons, need {tau}")
    ok = _mask(p.shape[:-1], valid)
    sl = slice(tau - 1, tau) if horizon_only else slice(0, tau)
    return mse(p[:, sl], y[:, sl], ok[:, sl])


def picp(targets, lo, hi, valid=None) -> float:
    """Fraction of targets strictly inside their interval."""
    y, lo, hi = (np.asarray(a, dtype=np.float64) for a in (targets, lo, hi))
    if not (y.shape == lo.shape == hi.shape):
        raise ValueError("targets and interval bounds must have equal shapes")
    if np.any(lo > hi):
        raise ValueError("interval lower bound exceeds upper bound")
    inside = (lo < y) & (y < hi)
    if valid is not None:
        ok = np.asarray(valid, bool)
        if inside.ndim > ok.ndim:
            ok = np.broadcast_to(ok[..., None], inside.shape)
        inside = inside[ok]
    if inside.size == 0:
        raise ValueError("no targets")
    return float(inside.mean())


def report(predictions, targets, lo, hi, reference_mse: float | None, tau: int = 1, valid=None) -> MetricReport:
    err = mse(predictions, targets, valid)
    norm = err / reference_mse if reference_mse else None
    ok = _mask(_error_shape(np.shape(predictions)), valid)
    degenerate = bool(np.all(np.asarray(hi)[ok] == np.asarray(lo)[ok]))
    cover = picp(targets, lo, hi, valid)
    return MetricReport(err, norm, cover, tau, int(ok.sum()), degenerate)
