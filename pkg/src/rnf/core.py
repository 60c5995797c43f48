"""Encoder stack, variational head and shared emission decoder.

Parameters live in a flat ``dict[str, ndarray]`` owned by :class:`RnfModel`.
Forward code receives the same mapping as :class:`~rnf.numerics.Tensor`
objects, either bound to a tape (training) or as constants (inference).

Stage names follow the filtering steps: ``prop`` (propagation), ``input``
(input dynamics) and ``corr`` (error correction).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import numerics as nx
from .cells import LstmParams, LstmState, apply_dropout, init_lstm, lstm_init_state, lstm_step
from .numerics import Tensor

VARIANTS = ("rnf", "vrnf-kf", "vrnf-nn")
HEADS = ("gaussian", "bernoulli")
STAGES = ("prop", "input", "corr")


@dataclass
class RnfModel:
    variant: str
    state_size: int
    input_dim: int
    obs_dim: int
    params: dict[str, np.ndarray]
    head: str = "gaussian"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def variational(self) -> bool:
        return self.variant != "rnf"

    def copy(self) -> "RnfModel":
        return RnfModel(self.variant, self.state_size, self.input_dim, self.obs_dim,
                        {k: v.copy() for k, v in self.params.items()}, self.head)

    def constants(self) -> dict[str, Tensor]:
        return nx.constants(self.params)


def _dense(rng, n_in, n_out, name):
    bound = 1.0 / np.sqrt(n_in)
    return {f"{name}.W": rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.b": np.zeros(n_out)}


def init_model(variant: str, input_dim: int, obs_dim: int, state_size: int,
               rng: np.random.Generator, head: str = "gaussian") -> RnfModel:
    J, I, O = state_size, input_dim, obs_dim
    if min(J, I, O) < 1:
        raise ValueError("state size and data dimensions must be positive")
    params: dict[str, np.ndarray] = {}
    params.update(init_lstm(rng, 1, J, "prop"))
    params.update(init_lstm(rng, I, J, "input"))
    params.update(init_lstm(rng, O, J, "corr"))
    if variant != "rnf":
        params.update(_dense(rng, J, J, "var.m"))
        params.update(_dense(rng, J, J, "var.s"))
    params.update(_dense(rng, J, J, "dec.hidden"))
    if head == "gaussian":
        params.update(_dense(rng, J, O, "dec.mu"))
        params.update(_dense(rng, J, O, "dec.sigma"))
    else:
        params.update(_dense(rng, J, O, "dec.logit"))
    if variant == "vrnf-kf":
        from .priors import init_kf_prior
        params.update(init_kf_prior(rng, J, I, O))
    elif variant == "vrnf-nn":
        from .priors import init_nn_prior
        params.update(init_nn_prior(rng, J, I, O))
    return RnfModel(variant, J, I, O, params, head)


def dense(p: Mapping[str, Tensor], name: str, x, kind: str | None = None) -> Tensor:
    return nx.dense(x, p[f"{name}.W"], p[f"{name}.b"], kind)


# ------------------------------------------------------------------ encoders


class EncoderStack(NamedTuple):
    prop: LstmParams
    input: LstmParams
    corr: LstmParams

    @classmethod
    def from_mapping(cls, p: Mapping[str, Tensor]) -> "EncoderStack":
        return cls(*(LstmParams.from_mapping(p, s) for s in STAGES))

    @property
    def state_size(self) -> int:
        return self.prop.state_size


def _ones_feed(state: LstmState) -> np.ndarray:
    return np.ones(state.s.shape[:-1] + (1,))


def propagate(stack: EncoderStack, prev: LstmState) -> LstmState:
    """Time-evolution stage; the cell is fed a constant 1."""
    return lstm_step(stack.prop, prev, _ones_feed(prev))


def apply_input(stack: EncoderStack, state: LstmState, u) -> LstmState:
    return lstm_step(stack.input, state, u)


def correct(stack: EncoderStack, state: LstmState, y) -> LstmState:
    return lstm_step(stack.corr, state, y)


def _is_all(mask, value: bool) -> bool:
    if isinstance(mask, (bool, np.bool_)):
        return bool(mask) == value
    return bool(np.all(np.asarray(mask) == (1 if value else 0)))


def _blend(mask, new: LstmState, old: LstmState) -> LstmState:
    """Row-wise select ``new`` where mask is 1, else ``old``."""
    m = np.asarray(mask, dtype=np.float64)[:, None]
    keep = 1.0 - m
    return LstmState(nx.add(nx.hadamard(new.s, m), nx.hadamard(old.s, keep)),
                     nx.add(nx.hadamard(new.c, m), nx.hadamard(old.c, keep)))


@dataclass
class BeliefState:
    """Stage outputs for one step plus the memory handed to the next step.

    ``input`` and ``corr`` are ``None`` when the stage was skipped for every
    row; with row-wise masks they hold computed values for all rows and the
    masks say which rows actually used them.
    """
    terminal: LstmState
    prop: LstmState | None = None
    input: LstmState | None = None
    corr: LstmState | None = None
    has_input: object = False
    has_obs: object = False

    @classmethod
    def initial(cls, J: int, batch: int | None = None) -> "BeliefState":
        return cls(terminal=lstm_init_state(J, batch))


def encode_step(stack: EncoderStack, prev: LstmState, u=None, y=None,
                has_input=True, has_obs=True, dropout: Mapping | None = None) -> BeliefState:
    """Run the three stages for one time step.

    ``has_input`` / ``has_obs`` are booleans or per-row 0/1 arrays. Skipped
    stages pass memory through unchanged, so the terminal memory is the error
    correction state when ``y`` was seen, else the input state when ``u`` was
    seen, else the propagation state.
    """
    dropout = dropout or {}
    prop = apply_dropout(propagate(stack, prev), dropout.get("prop"))
    after = prop
    inp = None
    if not _is_all(has_input, False):
        if u is None:
            raise ValueError("input stage requested without inputs")
        inp = apply_dropout(apply_input(stack, prop, u), dropout.get("input"))
        after = inp if _is_all(has_input, True) else _blend(has_input, inp, prop)
    corr = None
    terminal = after
    if not _is_all(has_obs, False):
        if y is None:
            raise ValueError("correction stage requested without observations")
        corr = apply_dropout(correct(stack, after, y), dropout.get("corr"))
        terminal = corr if _is_all(has_obs, True) else _blend(has_obs, corr, after)
    return BeliefState(terminal, prop, inp, corr, has_input, has_obs)


# ---------------------------------------------------------------- heads


class VariationalHead(NamedTuple):
    W_m: Tensor
    b_m: Tensor
    W_s: Tensor
    b_s: Tensor

    @classmethod
    def from_mapping(cls, p):
        return cls(p["var.m.W"], p["var.m.b"], p["var.s.W"], p["var.s.b"])


def latent_stats(head: VariationalHead, s) -> tuple[Tensor, Tensor]:
    """Posterior mean and (positive) deviation of the latent state."""
    return nx.dense(s, head.W_m, head.b_m), nx.dense(s, head.W_s, head.b_s, "softplus")


def draw_latent(m, sigma, noise) -> Tensor:
    """Reparameterised sample ``m + sigma * noise``."""
    m, sigma = nx.constant(m), nx.constant(sigma)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != m.shape or sigma.shape != m.shape:
        raise nx.ShapeError(f"latent shapes differ: {m.shape}, {sigma.shape}, {noise.shape}")
    return nx.add(m, nx.hadamard(sigma, noise))


def select_z(variant: str, s, x=None):
    if variant == "rnf":
        return s
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if x is None:
        raise ValueError(f"{variant} decodes a latent sample; none supplied")
    return x


class EmissionDecoder(NamedTuple):
    W_hidden: Tensor
    b_hidden: Tensor
    W_mu: Tensor | None = None
    b_mu: Tensor | None = None
    W_sigma: Tensor | None = None
    b_sigma: Tensor | None = None
    W_logit: Tensor | None = None
    b_logit: Tensor | None = None

    @classmethod
    def from_mapping(cls, p):
        get = p.get
        return cls(p["dec.hidden.W"], p["dec.hidden.b"], get("dec.mu.W"), get("dec.mu.b"),
                   get("dec.sigma.W"), get("dec.sigma.b"), get("dec.logit.W"), get("dec.logit.b"))


@dataclass
class GaussianPrediction:
    """Per-step predictive mean and diagonal deviation.

    Fields are tensors when produced by the decoder and plain arrays at
    inference time. Variational forecasts also carry the per-sample decoder
    outputs in ``components`` as ``(means, sigmas)`` with a leading sample axis.
    """
    mean: object
    sigma: object
    components: tuple[np.ndarray, np.ndarray] | None = None

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        get = lambda x: x.value if isinstance(x, Tensor) else np.asarray(x)  # noqa: E731
        return get(self.mean), get(self.sigma)


def emit_gaussian(dec: EmissionDecoder, z) -> GaussianPrediction:
    """Mean and deviation read from one shared ELU hidden layer."""
    hidden = nx.dense(z, dec.W_hidden, dec.b_hidden, "elu")
    return GaussianPrediction(nx.dense(hidden, dec.W_mu, dec.b_mu),
                              nx.dense(hidden, dec.W_sigma, dec.b_sigma, "softplus"))


def bernoulli_logits(dec: EmissionDecoder, z) -> Tensor:
    hidden = nx.dense(z, dec.W_hidden, dec.b_hidden, "elu")
    return nx.dense(hidden, dec.W_logit, dec.b_logit)


def emit_bernoulli(dec: EmissionDecoder, z) -> Tensor:
    return nx.sigmoid(bernoulli_logits(dec, z))


@dataclass
class Network:
    """Parameter views for one forward pass."""
    variant: str
    head: str
    p: Mapping[str, Tensor]
    stack: EncoderStack = field(init=False)
    decoder: EmissionDecoder = field(init=False)
    latent: VariationalHead | None = field(init=False)

    def __post_init__(self):
        self.stack = EncoderStack.from_mapping(self.p)
        self.decoder = EmissionDecoder.from_mapping(self.p)
        self.latent = VariationalHead.from_mapping(self.p) if self.variant != "rnf" else None

    @classmethod
    def of(cls, model: RnfModel, p: Mapping[str, Tensor] | None = None) -> "Network":
        return cls(model.variant, model.head, model.constants() if p is None else p)
