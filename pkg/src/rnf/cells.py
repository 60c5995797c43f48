"""LSTM cell with ELU candidate/output nonlinearities and memory dropout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .numerics import Tensor

# gate blocks inside the stacked 4J pre-activation
INPUT, FORGET, OUTPUT, CANDIDATE = range(4)


class LstmParams(NamedTuple):
    """Stacked weights for the input, forget, output and candidate blocks.

    ``W_x`` is (n_in, 4J), ``W_h`` is (J, 4J) and ``b`` is (4J,); the four
    per-gate bias vectors are stored back to back in ``b``.
    """
    W_x: Tensor
    W_h: Tensor
    b: Tensor

    @property
    def state_size(self) -> int:
        return self.W_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[0]

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "LstmParams":
        return cls(params[f"{prefix}.W_x"], params[f"{prefix}.W_h"], params[f"{prefix}.b"])


@dataclass(frozen=True)
class LstmState:
    s: Tensor  # cell output
    c: Tensor  # cell memory

    @property
    def size(self) -> int:
        return self.s.shape[-1]


def init_lstm(rng: np.random.Generator, n_in: int, J: int, prefix: str) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(J)
    b = np.zeros(4 * J)
    b[FORGET * J:(FORGET + 1) * J] = 1.0
    return {
        f"{prefix}.W_x": rng.uniform(-bound, bound, size=(n_in, 4 * J)),
        f"{prefix}.W_h": rng.uniform(-bound, bound, size=(J, 4 * J)),
        f"{prefix}.b": b,
    }


def lstm_init_state(J: int, batch: int | None = None) -> LstmState:
    if J < 1:
        raise ValueError("state size must be at least 1")
    shape = (J,) if batch is None else (batch, J)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def lstm_step_composed(params: LstmParams, prev: LstmState, x) -> LstmState:
    """Reference LSTM update built from elementary primitives.

    Same values as :func:`lstm_step`; used to cross-check its fused adjoint.
    """
    x = nx.constant(x)
    _check_step(params, prev, x)
    J = params.state_size
    z = nx.add(nx.add(nx.matmul(x, params.W_x), nx.matmul(prev.s, params.W_h)), params.b)
    gates = nx.sigmoid(nx.take(z, 0, 3 * J))
    i = nx.take(gates, INPUT * J, (INPUT + 1) * J)
    f = nx.take(gates, FORGET * J, (FORGET + 1) * J)
    o = nx.take(gates, OUTPUT * J, (OUTPUT + 1) * J)
    g = nx.elu(nx.take(z, 3 * J, 4 * J))
    c = nx.add(nx.hadamard(f, prev.c), nx.hadamard(i, g))
    s = nx.hadamard(o, nx.elu(c))
    return LstmState(s, c)



def _check_step(params: LstmParams, prev: LstmState, x: Tensor) -> None:
    if x.shape[-1] != params.input_size:
        raise nx.ShapeError(f"lstm input has size {x.shape[-1]}, expected {params.input_size}")
    if prev.size != params.state_size:
        raise nx.ShapeError(f"lstm state has size {prev.size}, expected {params.state_size}")


def lstm_step(params: LstmParams, prev: LstmState, x) -> LstmState:
    """One LSTM update; gates are sigmoid, candidate and cell output are ELU.

    The whole cell is one tape node emitting ``[s', c']``.
    """
    x = nx.constant(x)
    _check_step(params, prev, x)
    J = params.state_size
    s, c = nx.constant(prev.s), nx.constant(prev.c)
    xv, sv, cv = x.value, s.value, c.value
    Wx, Wh = params.W_x.value, params.W_h.value
    z = xv @ Wx + sv @ Wh + params.b.value
    gates = expit(z[..., :3 * J])
    i, f, o = gates[..., :J], gates[..., J:2 * J], gates[..., 2 * J:]
    g, dg = nx._elu_value(z[..., 3 * J:])
    c_new = f * cv + i * g
    e, de = nx._elu_value(c_new)
    s_new = o * e

    def adjoint(G):
        gs, gc = G[..., :J], G[..., J:]
        gc = gc + gs * o * de
        dz = np.concatenate([gc * g, gc * cv, gs * e], axis=-1) * gates * (1.0 - gates)
        dz = np.concatenate([dz, gc * i * dg], axis=-1)
        dz2 = nx._as_matrix(dz)
        ub = nx._unbroadcast
        return (ub(dz @ Wx.T, xv.shape), ub(dz @ Wh.T, sv.shape), ub(gc * f, cv.shape),
                nx._as_matrix(xv).T @ dz2, nx._as_matrix(sv).T @ dz2, dz2.sum(axis=0))

    both = nx.fused("lstm", np.concatenate([s_new, c_new], axis=-1),
                    (x, s, c, params.W_x, params.W_h, params.b), adjoint)
    return LstmState(nx.take(both, 0, J), nx.take(both, J, 2 * J))

def dropout_masks(shape, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted-dropout masks for the output and memory vectors."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return np.ones(shape), np.ones(shape)
    if rate == 1.0:
        return np.zeros(shape), np.zeros(shape)
    keep = 1.0 - rate
    return ((rng.random(shape) < keep) / keep, (rng.random(shape) < keep) / keep)


def apply_dropout(state: LstmState, masks) -> LstmState:
    if masks is None:
        return state
    ms, mc = masks
    return LstmState(nx.hadamard(state.s, ms), nx.hadamard(state.c, mc))


def memory_dropout(state: LstmState, rate: float, rng: np.random.Generator | None = None,
                   training: bool = True) -> LstmState:
    """Inverted dropout on both the output and memory vectors.

    Identity when ``training`` is false or ``rate`` is zero.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    if not training or rate == 0.0:
        return state
    if rng is None:
        raise ValueError("dropout needs an rng")
    return apply_dropout(state, dropout_masks(state.s.shape, rate, rng))
