"""Run-time routing of the encoder stages, forecasting and prediction intervals.

Propagation always runs; input dynamics runs when ``u_t`` is available and
error correction when ``y_t`` is. The one-step prediction decodes the input
dynamics output when inputs were seen, otherwise the propagation output.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .core import (BeliefState, GaussianPrediction, Network, RnfModel, bernoulli_logits,
                   emit_gaussian, encode_step, latent_stats)
from .numerics import Tensor
from scipy.special import expit, logsumexp
from scipy.stats import norm

Z95 = 1.6448536269514722
LOG_2PI = math.log(2.0 * math.pi)


class StepAvailability(NamedTuple):
    has_input: bool
    has_observation: bool


def _net(model) -> Network:
    return model if isinstance(model, Network) else Network.of(model)


def _rows(mask, value):
    if isinstance(mask, (bool, np.bool_)):
        return bool(mask) == value
    return bool(np.all(np.asarray(mask) == value))


def decode(net: Network, s: Tensor, samples: int | None = None,
           rng: np.random.Generator | None = None) -> GaussianPrediction:
    """Decode a stage output into a predictive distribution.

    Variational networks decode ``samples`` latent draws and report the
    moment-matched mixture with the draws kept in ``components``; with
    ``samples=None`` they decode the latent mean.
    """
    z = s
    if net.latent is not None:
        m, sig = latent_stats(net.latent, s)
        if samples is None:
            z = m
        else:
            if rng is None:
                raise ValueError("sampling a variational forecast needs an rng")
            noise = rng.standard_normal((samples,) + m.shape)
            zs = m.value[None] + sig.value[None] * noise
            flat = zs.reshape((-1, m.shape[-1]))
            comp = _emit(net, Tensor(flat))
            mu_l = comp[0].reshape(zs.shape[:-1] + (-1,))
            sd_l = comp[1].reshape(zs.shape[:-1] + (-1,))
            mean = mu_l.mean(axis=0)
            var = (sd_l ** 2 + mu_l ** 2).mean(axis=0) - mean ** 2
            return GaussianPrediction(mean, np.sqrt(np.maximum(var, 0.0)), (mu_l, sd_l))
    mu, sd = _emit(net, z)
    return GaussianPrediction(mu, sd)


def _emit(net: Network, z) -> tuple[np.ndarray, np.ndarray]:
    if net.head == "gaussian":
        return emit_gaussian(net.decoder, z).values()
    p = expit(bernoulli_logits(net.decoder, z).value)
    return p, np.sqrt(p * (1.0 - p))


def _pick(mask, a: GaussianPrediction, b: GaussianPrediction) -> GaussianPrediction:
    if _rows(mask, 1):
        return a
    if _rows(mask, 0):
        return b
    m = np.asarray(mask, dtype=bool)[:, None]
    comps = None
    if a.components is not None:
        comps = tuple(np.where(m[None], x, y) for x, y in zip(a.components, b.components))
    return GaussianPrediction(np.where(m, a.mean, b.mean), np.where(m, a.sigma, b.sigma), comps)


def filter_step(model, belief: BeliefState, avail: StepAvailability, u=None, y=None,
                samples: int | None = None, rng: np.random.Generator | None = None):
    """Advance the belief by one step and return ``(belief, prediction)``.

    The prediction is the one-step forecast of ``y_t`` made before ``y_t`` is
    used. ``avail`` fields may be booleans or per-row arrays for a batch.
    """
    net = _net(model)
    has_u, has_y = avail
    if not _rows(has_u, 0) and u is None:
        raise ValueError("availability claims inputs but none were supplied")
    if not _rows(has_y, 0) and y is None:
        raise ValueError("availability claims an observation but none was supplied")
    new = encode_step(net.stack, belief.terminal, u, y, has_u, has_y)
    if new.input is None:
        pred = decode(net, new.prop.s, samples, rng)
    elif _rows(has_u, 1):
        pred = decode(net, new.input.s, samples, rng)
    else:
        # same rng stream for both branches keeps rows reproducible
        state = rng.bit_generator.state if rng is not None else None
        a = decode(net, new.input.s, samples, rng)
        if state is not None:
            rng.bit_generator.state = state
        pred = _pick(has_u, a, decode(net, new.prop.s, samples, rng))
    return new, pred


def multistep_forecast(model, belief: BeliefState, horizon: int, mode: str = "unknown_inputs",
                       future_inputs=None, samples: int | None = None,
                       rng: np.random.Generator | None = None) -> list[GaussianPrediction]:
    """Project the belief ``horizon`` steps ahead without observations.

    ``unknown_inputs`` uses the propagation encoder alone; ``known_inputs``
    also runs input dynamics on ``future_inputs`` (horizon x I, or horizon x
    B x I for a batched belief).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if mode not in ("unknown_inputs", "known_inputs"):
        raise ValueError(f"unknown forecast mode {mode!r}")
    known = mode == "known_inputs"
    if known:
        if future_inputs is None or len(future_inputs) < horizon:
            raise ValueError("known-inputs forecasting needs one input vector per step")
    net = _net(model)
    preds = []
    for k in range(horizon):
        u = future_inputs[k] if known else None
        belief, pred = filter_step(net, belief, StepAvailability(known, False), u, None, samples, rng)
        preds.append(pred)
    return preds


# --------------------------------------------------------------- intervals


def predictive_interval(pred: GaussianPrediction, level: float = 0.90,
                        rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central interval: analytic Gaussian quantiles, or empirical
    percentiles of one observation draw per latent sample for variational
    forecasts."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    if pred.components is None:
        mean, sigma = pred.values()
        z = Z95 if level == 0.90 else float(norm.ppf(0.5 + level / 2))
        return mean - z * sigma, mean + z * sigma
    if rng is None:
        raise ValueError("empirical intervals need an rng")
    mu_l, sd_l = pred.components
    draws = mu_l + sd_l * rng.standard_normal(mu_l.shape)
    return empirical_interval(draws, level)


def empirical_interval(draws: np.ndarray, level: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
    """Percentile interval over the leading (sample) axis."""
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(draws, [tail, 100.0 - tail], axis=0)
    return lo, hi


# ---------------------------------------------------------- whole sequences


class FilterOutput(NamedTuple):
    mean: np.ndarray          # (T, O)
    sigma: np.ndarray         # (T, O)
    lo: np.ndarray            # (T, O) 90% interval
    hi: np.ndarray
    terminal_s: np.ndarray    # (T, J) belief after step t
    terminal_c: np.ndarray
    components: tuple | None  # variational draws, (T, L, O) each


def filter_trajectory(model: RnfModel, traj, samples: int | None = None, seed: int = 0,
                      level: float = 0.90) -> FilterOutput:
    """One-step predictions over a whole trajectory, with observed data routed
    through the stages it is available for."""
    net = _net(model)
    rng = np.random.default_rng(seed) if model.variational and samples else None
    T, O, J = len(traj), model.obs_dim, model.state_size
    mean, sigma = np.empty((T, O)), np.empty((T, O))
    lo, hi = np.empty((T, O)), np.empty((T, O))
    ts, tc = np.empty((T, J)), np.empty((T, J))
    comps = (np.empty((T, samples, O)), np.empty((T, samples, O))) if rng is not None else None
    belief = BeliefState.initial(J)
    for t in range(T):
        avail = StepAvailability(bool(traj.input_mask[t]), bool(traj.obs_mask[t]))
        belief, pred = filter_step(net, belief, avail, traj.u[t], traj.y[t], samples if rng else None, rng)
        mean[t], sigma[t] = pred.values()
        lo[t], hi[t] = predictive_interval(pred, level, rng)
        if comps is not None:
            comps[0][t], comps[1][t] = pred.components
        ts[t], tc[t] = belief.terminal.s.value, belief.terminal.c.value
    return FilterOutput(mean, sigma, lo, hi, ts, tc, comps)


class MultistepOutput(NamedTuple):
    mean: np.ndarray     # (N, tau, O)
    sigma: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    target: np.ndarray   # (N, tau, O)
    valid: np.ndarray    # (N, tau) target observed
    origins: np.ndarray  # (N,) index of the last step seen


def multistep_predictions(model: RnfModel, traj, horizon: int, mode: str,
                          filtered: FilterOutput | None = None, samples: int | None = None,
                          seed: int = 0, chunk: int = 4096, level: float = 0.90) -> MultistepOutput:
    """Forecasts from every origin with ``horizon`` steps of trailing data.

    Origin ``t`` holds the belief after step ``t``; its forecasts target
    ``t+1 .. t+horizon``. All origins are advanced together as one batch.
    """
    from .cells import LstmState

    net = _net(model)
    if filtered is None:
        filtered = filter_trajectory(model, traj, samples, seed)
    T = len(traj)
    origins = np.arange(0, T - horizon)
    N, O = len(origins), model.obs_dim
    out = [np.empty((N, horizon, O)) for _ in range(4)]
    target = np.stack([traj.y[origins + k + 1] for k in range(horizon)], axis=1) if N else np.empty((0, horizon, O))
    valid = (np.stack([traj.obs_mask[origins + k + 1] for k in range(horizon)], axis=1) if N
             else np.empty((0, horizon), bool))
    rng = np.random.default_rng([seed, 3]) if model.variational and samples else None
    known = mode == "known_inputs"
    for a in range(0, N, chunk):
        idx = origins[a:a + chunk]
        belief = BeliefState(LstmState(Tensor(filtered.terminal_s[idx]), Tensor(filtered.terminal_c[idx])))
        for k in range(horizon):
            steps = idx + k + 1
            has_u = traj.input_mask[steps] if known else False
            u = traj.u[steps] if known else None
            belief, pred = filter_step(net, belief, StepAvailability(has_u, False), u, None,
                                       samples if rng else None, rng)
            lo, hi = predictive_interval(pred, level, rng)
            m, s = pred.values()
            for arr, val in zip(out, (m, s, lo, hi)):
                arr[a:a + len(idx), k] = val
    return MultistepOutput(*out, target, valid, origins)


# -------------------------------------------------------------- validation


def gaussian_log_density(y, mean, sigma) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    z = (y - mean) / sigma
    return -0.5 * np.sum(LOG_2PI + 2.0 * np.log(sigma) + z * z, axis=-1)


def predictive_nll(model: RnfModel, traj, samples: int | None = None, seed: int = 0) -> tuple[float, int]:
    """Total one-step NLL over observed targets and the count of those targets."""
    out = filter_trajectory(model, traj, samples, seed)
    ok = traj.obs_mask
    if not ok.any():
        return 0.0, 0
    y = traj.y[ok]
    if model.head == "bernoulli":
        if out.components is not None:
            p = out.components[0][ok].mean(axis=1)
        else:
            p = out.mean[ok]
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return float(-np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))), int(ok.sum())
    if out.components is None:
        return float(-gaussian_log_density(y, out.mean[ok], out.sigma[ok]).sum()), int(ok.sum())
    mu_l, sd_l = out.components[0][ok], out.components[1][ok]
    logp = gaussian_log_density(y[:, None], mu_l, sd_l)
    mix = logsumexp(logp, axis=1) - math.log(mu_l.shape[1])
    return float(-mix.sum()), int(ok.sum())


def validation_nll(model: RnfModel, valid: Sequence, config) -> float:
    """Mean one-step predictive NLL per observed target; ``inf`` if filtering diverges."""
    samples = config.samples_valid if model.variational else None
    total, count = 0.0, 0
    for k, traj in enumerate(valid):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                nll, n = predictive_nll(model, traj, samples, seed=config.seed * 1000 + k)
        except FloatingPointError:
            # the filter diverged on this trajectory; the model is unusable
            return math.inf
        total += nll
        count += n
    return total / count if count else math.inf
