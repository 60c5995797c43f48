"""Latent-state priors for the variational variants and their KL term.

Both priors return a diagonal Gaussian ``(mean, variance)`` per stage,
conditioned on posterior statistics of an earlier encoder stage:

* ``prop``: previous step's terminal posterior ``(m, V)``
* ``input``: same conditioning plus ``u_t`` (Kalman prior) or the
  propagation posterior plus ``u_t`` (network prior)
* ``corr``: the input-stage posterior (or propagation when inputs were
  skipped) plus ``y_t``
"""
from __future__ import annotations

from typing import Mapping

import numpy as np
from scipy.linalg import solve_discrete_are

from . import numerics as nx
from .numerics import Tensor


def softplus_inverse(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("softplus inverse needs positive values")
    return np.where(x > 30, x, np.log(np.expm1(np.minimum(x, 30))))


def init_kf_prior(rng: np.random.Generator, J: int, I: int, O: int) -> dict[str, np.ndarray]:
    return {
        "kf.a": softplus_inverse(np.full(J, 0.9)),
        "kf.c": np.zeros(J),
        "kf.qp": softplus_inverse(np.full(J, 0.5)),
        "kf.B": rng.uniform(-0.1, 0.1, size=(I, J)),
        "kf.q": softplus_inverse(np.full(J, 0.5)),
        "kf.k": softplus_inverse(np.full(J, 0.5)),
        "kf.H": rng.uniform(-0.1, 0.1, size=(O, J)),
    }


def _need(stage, u, y):
    if stage not in ("prop", "input", "corr"):
        raise ValueError(f"unknown prior stage {stage!r}")
    if stage == "input" and u is None:
        raise ValueError("input-dynamics prior needs u_t")
    if stage == "corr" and y is None:
        raise ValueError("error-correction prior needs y_t")


def kf_prior_step(p: Mapping[str, Tensor], stage: str, prev_m, prev_V, u=None, y=None):
    """Diagonal constant-gain Kalman prior.

    propagation: ``a*m + c'``, ``a*V*a + q'``; input: ``a*m + B u``,
    ``a*V*a + q``; correction: ``k'*m - H' y``, ``k'*V``.
    """
    _need(stage, u, y)
    if stage == "corr":
        k = nx.softplus(p["kf.k"])
        mean = nx.sub(nx.hadamard(k, prev_m), nx.matmul(y, p["kf.H"]))
        return mean, nx.hadamard(k, prev_V)
    a = nx.softplus(p["kf.a"])
    var = nx.hadamard(nx.square(a), prev_V)
    if stage == "prop":
        return nx.add(nx.hadamard(a, prev_m), p["kf.c"]), nx.add(var, nx.softplus(p["kf.qp"]))
    mean = nx.add(nx.hadamard(a, prev_m), nx.matmul(u, p["kf.B"]))
    return mean, nx.add(var, nx.softplus(p["kf.q"]))


def kf_prior_from_lgssm(A, H, Q, R, B=None, c=None, D=None) -> dict[str, np.ndarray]:
    """Raw Kalman-prior parameters matched to a steady-state filter.

    Uses the diagonals of the exact steady-state matrices, so for a 1-D
    model the prior recursion has the exact steady-state fixed point.
    """
    A, H, Q, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, H, Q, R))
    J = A.shape[0]
    P_pred = solve_discrete_are(A.T, H.T, Q, R)
    K = P_pred @ H.T @ np.linalg.inv(H @ P_pred @ H.T + R)
    k_prime = np.diag(np.eye(J) - K @ H)
    B = np.zeros((J, 1)) if B is None else np.atleast_2d(B)
    c = np.zeros(B.shape[1]) if c is None else np.atleast_1d(c)
    D = np.zeros((B.shape[1], B.shape[1])) if D is None else np.atleast_2d(D)
    Qp = B @ D @ B.T + Q
    return {
        "kf.a": softplus_inverse(np.diag(A)),
        "kf.c": B @ c,
        "kf.qp": softplus_inverse(np.diag(Qp)),
        "kf.B": B.T.copy(),
        "kf.q": softplus_inverse(np.diag(Q)),
        "kf.k": softplus_inverse(k_prime),
        # the prior subtracts ``y @ H'``, so the gain enters negated
        "kf.H": -K.T.copy(),
    }


# ------------------------------------------------------------ network prior

def init_nn_prior(rng: np.random.Generator, J: int, I: int, O: int) -> dict[str, np.ndarray]:
    extra = {"prop": 0, "input": I, "corr": O}
    params = {}
    for stage, n_extra in extra.items():
        for out in ("beta", "gamma"):
            n_in = J + n_extra
            bound = 1.0 / np.sqrt(n_in)
            name = f"nn.{stage}.{out}"
            params[f"{name}.hidden.W"] = rng.uniform(-bound, bound, size=(n_in, J))
            params[f"{name}.hidden.b"] = np.zeros(J)
            params[f"{name}.out.W"] = rng.uniform(-1 / np.sqrt(J), 1 / np.sqrt(J), size=(J, J))
            params[f"{name}.out.b"] = np.zeros(J)
    return params


def _mlp(p, name, x, kind=None):
    h = nx.dense(x, p[f"{name}.hidden.W"], p[f"{name}.hidden.b"], "elu")
    return nx.dense(h, p[f"{name}.out.W"], p[f"{name}.out.b"], kind)


def nn_prior_step(p: Mapping[str, Tensor], stage: str, prev_m, prev_V, u=None, y=None):
    """MLP prior; the deviation MLP ends in a softplus and the variance is its square."""
    _need(stage, u, y)
    extra = {"prop": None, "input": u, "corr": y}[stage]
    mean_in, var_in = prev_m, prev_V
    if extra is not None:
        mean_in = nx.concat([prev_m, extra])
        var_in = nx.concat([prev_V, extra])
    beta = _mlp(p, f"nn.{stage}.beta", mean_in)
    gamma = _mlp(p, f"nn.{stage}.gamma", var_in, "softplus")
    return beta, nx.square(gamma)


def prior_step(variant: str, p, stage, prev_m, prev_V, u=None, y=None):
    if variant == "vrnf-kf":
        return kf_prior_step(p, stage, prev_m, prev_V, u, y)
    if variant == "vrnf-nn":
        return nn_prior_step(p, stage, prev_m, prev_V, u, y)
    raise ValueError(f"variant {variant!r} has no prior")


# ----------------------------------------------------------------------- KL


def kl_diag(q_m, q_sigma, p_beta, p_gamma) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Arguments are means and standard deviations. Returns one value per row
    for batched inputs.
    """
    q_m, q_sigma, p_beta, p_gamma = (nx.constant(t) for t in (q_m, q_sigma, p_beta, p_gamma))
    if np.any(q_sigma.value <= 0) or np.any(p_gamma.value <= 0):
        raise ValueError("KL needs strictly positive deviations")
    log_ratio = nx.sub(nx.log(p_gamma), nx.log(q_sigma))
    num = nx.add(nx.square(q_sigma), nx.square(nx.sub(q_m, p_beta)))
    quad = nx.div(num, nx.scale(nx.square(p_gamma), 2.0))
    terms = nx.add(log_ratio, nx.add(quad, -0.5))
    return nx.sum(terms, axis=-1)
