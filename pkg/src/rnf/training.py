"""Losses, artificial missingness, Adam with clipping, the training loop and
random search."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .cells import dropout_masks
from .core import (STAGES, VARIANTS, BeliefState, Network, RnfModel,
                   bernoulli_logits, draw_latent, emit_gaussian, encode_step, init_model,
                   latent_stats)
from .data import Trajectory
from .numerics import Tensor
from .priors import kl_diag, prior_step

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "rnf"
    alpha_x: float = 1.0
    alpha_y: float = 1.0
    missing_rate: float = 0.5
    dropout: float = 0.0
    state_size: int = 10
    learning_rate: float = 1e-3
    max_grad_norm: float = 1.0
    minibatch_size: int = 256
    segment_length: int = 50
    max_epochs: int = 100
    patience: int = 10
    kl_mode: str = "routed"
    samples_train: int = 1
    samples_valid: int = 30
    samples_test: int = 100
    head: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.alpha_x < 0 or self.alpha_y < 0:
            raise ValueError("alpha weights must be non-negative")
        for name in ("missing_rate", "dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.segment_length < 2:
            raise ValueError("segment_length must be at least 2")
        if self.kl_mode not in ("routed", "all"):
            raise ValueError("kl_mode must be 'routed' or 'all'")
        if self.state_size < 1 or self.minibatch_size < 1 or self.max_epochs < 0:
            raise ValueError("state_size and minibatch_size must be positive, max_epochs >= 0")
        if min(self.samples_train, self.samples_valid, self.samples_test) < 1:
            raise ValueError("sample counts must be positive")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate and max_grad_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MissingnessMask:
    input_present: np.ndarray
    obs_present: np.ndarray

    def __len__(self):
        return self.input_present.shape[-1]

    @classmethod
    def full(cls, T: int) -> "MissingnessMask":
        return cls(np.ones(T, bool), np.ones(T, bool))


def apply_missingness(T: int, r: float, rng: np.random.Generator, batch: int | None = None) -> MissingnessMask:
    """Independent Bernoulli(1 - r) keep flags for the input and observation streams."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"missingness rate must lie in [0, 1], got {r}")
    shape = (T,) if batch is None else (batch, T)
    return MissingnessMask(rng.random(shape) >= r, rng.random(shape) >= r)


# ------------------------------------------------------------------ losses


def gaussian_nll(y, mu, sigma) -> Tensor:
    """``0.5 * sum_j [log(2 pi sigma_j^2) + ((y_j - mu_j) / sigma_j)^2]`` per row."""
    y, mu, sigma = nx.constant(y), nx.constant(mu), nx.constant(sigma)
    if np.any(sigma.value <= 0):
        raise ValueError("gaussian_nll needs strictly positive deviations")
    yv, mv, sv = y.value, mu.value, sigma.value
    r = (yv - mv) / sv
    rows = 0.5 * np.sum(LOG_2PI + 2.0 * np.log(sv) + r * r, axis=-1)

    def adjoint(g):
        g = np.expand_dims(g, -1)
        ub = nx._unbroadcast
        return ub(g * r / sv, yv.shape), ub(-g * r / sv, mv.shape), ub(g * (1.0 - r * r) / sv, sv.shape)

    return nx.fused("gaussian_nll", rows, (y, mu, sigma), adjoint)


def bernoulli_nll(y, logits) -> Tensor:
    """Binary cross-entropy from logits, ``softplus(f) - y f``, per row."""
    logits = nx.constant(logits)
    return nx.sum(nx.sub(nx.softplus(logits), nx.hadamard(logits, y)), axis=-1)


@dataclass
class Batch:
    """Stacked segments: ``u`` (B, T, I), ``y`` (B, T, O), masks (B, T)."""
    u: np.ndarray
    y: np.ndarray
    input_mask: np.ndarray
    obs_mask: np.ndarray
    target_mask: np.ndarray

    @property
    def shape(self):
        return self.y.shape[:2]

    @classmethod
    def from_trajectory(cls, traj: Trajectory, mask: MissingnessMask | None = None) -> "Batch":
        im = traj.input_mask.copy()
        om = traj.obs_mask.copy()
        if mask is not None:
            im &= np.asarray(mask.input_present, bool)
            om &= np.asarray(mask.obs_present, bool)
        return cls(traj.u[None], traj.y[None], im[None].astype(float), om[None].astype(float),
                   traj.obs_mask[None].astype(float))


def _stage_nll(net: Network, s: Tensor, y: np.ndarray, noise, stats=None) -> Tensor:
    """Per-row reconstruction NLL for one stage output, averaged over samples."""
    if net.latent is None:
        zs = [s]
    else:
        m, sig = stats if stats is not None else latent_stats(net.latent, s)
        zs = [draw_latent(m, sig, e) for e in noise]
    total = None
    for z in zs:
        if net.head == "gaussian":
            pred = emit_gaussian(net.decoder, z)
            nll = gaussian_nll(y, pred.mean, pred.sigma)
        else:
            nll = bernoulli_nll(y, bernoulli_logits(net.decoder, z))
        total = nll if total is None else nx.add(total, nll)
    if len(zs) > 1:
        total = nx.scale(total, 1.0 / len(zs))
    return total


def _masked_sum(values: Tensor, weights: np.ndarray) -> Tensor | None:
    if not np.any(weights):
        return None
    return nx.sum(nx.hadamard(values, weights))


def _acc(total, term):
    if term is None:
        return total
    return term if total is None else nx.add(total, term)


def _select(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    if np.all(mask == 1):
        return a
    if np.all(mask == 0):
        return b
    m = mask[:, None]
    return nx.add(nx.hadamard(a, m), nx.hadamard(b, 1.0 - m))


def sequence_loss(net: Network, batch: Batch, alpha_x: float, alpha_y: float, *,
                  samples: int = 1, noise: np.ndarray | None = None,
                  rng: np.random.Generator | None = None, kl_mode: str = "routed",
                  dropout: Mapping | None = None) -> Tensor:
    """Summed multi-stage loss over a batch of equal-length segments.

    Each step decodes every stage that ran; stage NLLs are weighted 1 (input
    dynamics), ``alpha_x`` (propagation) and ``alpha_y`` (error correction).
    Variational networks add analytic KL terms against the prior.
    ``noise`` has shape (T, 3, samples, B, J) and freezes the latent draws.
    """
    B, T = batch.shape
    J = net.stack.state_size
    variational = net.latent is not None
    if variational and noise is None:
        if rng is None:
            raise ValueError("variational loss needs noise or an rng")
        noise = rng.standard_normal((T, 3, samples, B, J))
    terminal = BeliefState.initial(J, B).terminal
    prev_stats = latent_stats(net.latent, terminal.s) if variational else None
    total = None
    for t in range(T):
        im, om, tm = batch.input_mask[:, t], batch.obs_mask[:, t], batch.target_mask[:, t]
        belief = encode_step(net.stack, terminal, batch.u[:, t], batch.y[:, t], im, om, dropout)
        y_t = batch.y[:, t]
        weights = {"prop": alpha_x * tm, "input": im * tm, "corr": alpha_y * om}
        stats = {}
        for k, stage in enumerate(STAGES):
            state = getattr(belief, stage)
            if state is None:
                continue
            st = latent_stats(net.latent, state.s) if variational else None
            stats[stage] = st
            if np.any(weights[stage]):
                eps = noise[t, k] if variational else None
                nll = _stage_nll(net, state.s, y_t, eps, st)
                total = _acc(total, _masked_sum(nll, weights[stage]))
        if variational:
            total = _acc(total, _kl_terms(net, belief, stats, prev_stats, y_t, im, om, tm,
                                          alpha_x, alpha_y, kl_mode, batch.u[:, t]))
            prev_stats = latent_stats(net.latent, belief.terminal.s)
        terminal = belief.terminal
    if total is None:
        return nx.sum(nx.scale(terminal.s, 0.0))
    return total


def _kl_terms(net, belief, stats, prev_stats, y_t, im, om, tm, alpha_x, alpha_y, kl_mode, u_t):
    p = net.p
    variant = net.variant
    prev_m, prev_s = prev_stats
    prev_V = nx.square(prev_s)
    total = None

    def kl_against(stage, q, prior_m, prior_v, w):
        if not np.any(w):
            return None
        return _masked_sum(kl_diag(q[0], q[1], prior_m, nx.sqrt(prior_v)), w)

    # propagation
    pm, pv = prior_step(variant, p, "prop", prev_m, prev_V)
    q_prop = stats["prop"]
    if kl_mode == "all":
        total = _acc(total, kl_against("prop", q_prop, pm, pv, alpha_x * tm))
    else:
        total = _acc(total, kl_against("prop", q_prop, pm, pv, (1.0 - im) * tm))
    q_after = q_prop
    if belief.input is not None:
        q_in = stats["input"]
        if variant == "vrnf-kf":
            im_m, im_v = prior_step(variant, p, "input", prev_m, prev_V, u=u_t)
        else:
            im_m, im_v = prior_step(variant, p, "input", q_prop[0], nx.square(q_prop[1]), u=u_t)
        total = _acc(total, kl_against("input", q_in, im_m, im_v, im * tm))
        q_after = (_select(im, q_in[0], q_prop[0]), _select(im, q_in[1], q_prop[1]))
    if kl_mode == "all" and belief.corr is not None:
        cm, cv = prior_step(variant, p, "corr", q_after[0], nx.square(q_after[1]), y=y_t)
        total = _acc(total, kl_against("corr", stats["corr"], cm, cv, alpha_y * om))
    return total


def _network(model: RnfModel, params: Mapping[str, Tensor] | None) -> Network:
    return Network.of(model, params)


def combined_loss(model: RnfModel, trajectory: Trajectory, mask: MissingnessMask | None,
                  config: TrainConfig, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Summed ``L(input) + alpha_x L(prop) + alpha_y L(corr)`` for a deterministic network."""
    if model.variational:
        raise ValueError("combined_loss is for the deterministic variant; use vrnf_elbo_loss")
    net = _network(model, params)
    return sequence_loss(net, Batch.from_trajectory(trajectory, mask), config.alpha_x, config.alpha_y)


def vrnf_elbo_loss(model: RnfModel, trajectory: Trajectory, mask: MissingnessMask | None,
                   config: TrainConfig, rng: np.random.Generator | None = None,
                   params: Mapping[str, Tensor] | None = None, noise: np.ndarray | None = None) -> Tensor:
    """Negative SGVB evidence bound with analytic KL against the model's prior."""
    if not model.variational:
        raise ValueError(f"variant {model.variant!r} is not variational")
    net = _network(model, params)
    return sequence_loss(net, Batch.from_trajectory(trajectory, mask), config.alpha_x, config.alpha_y,
                         samples=config.samples_train, noise=noise, rng=rng, kl_mode=config.kl_mode)


# --------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def optimize_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                  adam: AdamState, lr: float, max_norm: float) -> dict[str, np.ndarray]:
    """Global-norm clip followed by one bias-corrected Adam update."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient for {k}")
    grads, _ = clip_by_global_norm(grads, max_norm)
    adam.step += 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1 ** adam.step
    c2 = 1.0 - b2 ** adam.step
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        m = adam.m.get(k, np.zeros_like(p))
        v = adam.v.get(k, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        adam.m[k], adam.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return out


# ------------------------------------------------------------ training loop


def segment_bounds(T: int, length: int) -> list[tuple[int, int]]:
    """Consecutive windows of ``length`` steps; a short tail is replaced by
    the final full-length window."""
    if T <= length:
        return [(0, T)]
    bounds = [(s, s + length) for s in range(0, T - length + 1, length)]
    if bounds[-1][1] < T:
        bounds.append((T - length, T))
    return bounds


def _minibatches(segments, size, rng):
    by_len: dict[int, list] = {}
    for seg in segments:
        by_len.setdefault(seg[2] - seg[1], []).append(seg)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        order = rng.permutation(len(group))
        for i in range(0, len(group), size):
            batches.append([group[j] for j in order[i:i + size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def _stack(trajs, members, mask: MissingnessMask) -> Batch:
    u = np.stack([trajs[k].u[a:b] for k, a, b in members])
    y = np.stack([trajs[k].y[a:b] for k, a, b in members])
    im = np.stack([trajs[k].input_mask[a:b] for k, a, b in members])
    om = np.stack([trajs[k].obs_mask[a:b] for k, a, b in members])
    return Batch(u, y, (im & mask.input_present).astype(float), (om & mask.obs_present).astype(float),
                 om.astype(float))


@dataclass
class FitResult:
    model: RnfModel
    log: list[dict]
    best_epoch: int | None
    best_val: float


def fit(model: RnfModel, train: Sequence[Trajectory], valid: Sequence[Trajectory],
        config: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Minibatch training on fixed-length segments with early stopping.

    Every epoch reshuffles segments, redraws missingness and dropout masks,
    and restarts each segment from a zero belief. The returned model is the
    one with the lowest validation NLL.
    """
    from .inference import validation_nll

    train = list(train)
    valid = list(valid)
    if not train or not any(len(t) for t in train):
        raise TrainingError("empty training set")
    rng = np.random.default_rng(config.seed)
    segments = [(k, a, b) for k, tr in enumerate(train) for a, b in segment_bounds(len(tr), config.segment_length)]
    params = {k: v.copy() for k, v in model.params.items()}
    adam = AdamState()
    best = model.copy()
    best_val = math.inf
    best_epoch = None
    stale = 0
    records = []
    start = time.perf_counter()
    J = model.state_size
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0.0
        for members in _minibatches(segments, config.minibatch_size, rng):
            B, T = len(members), members[0][2] - members[0][1]
            mask = apply_missingness(T, config.missing_rate, rng, batch=B)
            batch = _stack(train, members, mask)
            drop = None
            if config.dropout > 0:
                drop = {s: dropout_masks((B, J), config.dropout, rng) for s in STAGES}
            n = float(batch.target_mask.sum())
            if n == 0:
                continue
            tape = nx.Tape()
            net = Network(model.variant, model.head, tape.bind(params))
            loss = sequence_loss(net, batch, config.alpha_x, config.alpha_y,
                                 samples=config.samples_train, rng=rng, kl_mode=config.kl_mode,
                                 dropout=drop)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = nx.backward(tape, loss)
            grads = {k: g / n for k, g in grads.items()}
            try:
                params = optimize_step(params, grads, adam, config.learning_rate, config.max_grad_norm)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            total += value
            count += n
        current = RnfModel(model.variant, model.state_size, model.input_dim, model.obs_dim,
                           params, model.head)
        val = validation_nll(current, valid, config) if valid else total / max(count, 1.0)
        record = {"epoch": epoch, "train_loss": total / max(count, 1.0), "val_loss": val,
                  "wall_time": time.perf_counter() - start}
        records.append(record)
        log.info("epoch %d train %.6f val %.6f", epoch, record["train_loss"], val)
        if on_epoch is not None:
            on_epoch(record)
        if not math.isfinite(val):
            log.warning("epoch %d: validation filtering diverged", epoch)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = current.copy()
        else:
            stale += 1
            if stale >= config.patience:
                break
    return FitResult(best, records, best_epoch, best_val)


def train_model(train: Sequence[Trajectory], valid: Sequence[Trajectory], config: TrainConfig,
                on_epoch=None) -> FitResult:
    """Initialise a model from ``config.seed`` and fit it."""
    first = next(t for t in train)
    rng = np.random.default_rng([config.seed, 1])
    model = init_model(config.variant, first.input_dim, first.obs_dim, config.state_size, rng, config.head)
    return fit(model, train, valid, config, on_epoch)


# ----------------------------------------------------------- random search

SEARCH_GRID = {
    "dropout": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    "state_size": [5, 10, 25, 50, 100, 150],
    "minibatch_size": [256, 512, 1024],
    "learning_rate": [0.0001, 0.001, 0.01, 0.1, 1.0],
    "max_grad_norm": [0.0001, 0.001, 0.01, 0.1, 1.0, 10.0],
    "missing_rate": [0.25, 0.5, 0.75],
}


def sample_grid(grid: Mapping[str, Sequence], iterations: int, rng: np.random.Generator) -> list[dict]:
    """Distinct grid points drawn uniformly without replacement."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    names = list(grid)
    sizes = [len(grid[n]) for n in names]
    total = math.prod(sizes)
    if iterations > total:
        log.warning("grid has only %d points; requested %d", total, iterations)
    picks = rng.choice(total, size=min(iterations, total), replace=False)
    out = []
    for flat in picks:
        point = {}
        for name, n in zip(reversed(names), reversed(sizes)):
            flat, idx = divmod(int(flat), n)
            point[name] = grid[name][idx]
        out.append({n: point[n] for n in names})
    return out


@dataclass
class SearchResult:
    best_config: TrainConfig
    best_model: RnfModel
    leaderboard: list[dict]


def random_search(grid: Mapping[str, Sequence], iterations: int, train, valid,
                  base: TrainConfig | None = None, seed: int = 0) -> SearchResult:
    base = base or TrainConfig()
    valid_names = {f.name for f in fields(TrainConfig)}
    unknown = set(grid) - valid_names
    if unknown:
        raise ValueError(f"grid names unknown settings: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    rows = []
    best = None
    for i, point in enumerate(sample_grid(grid, iterations, rng)):
        cfg = replace(base, **point, seed=base.seed + i)
        result = train_model(train, valid, cfg)
        rows.append({"candidate": i, **point, "val_nll": result.best_val, "best_epoch": result.best_epoch})
        if best is None or result.best_val < best[0]:
            best = (result.best_val, cfg, result.model)
    rows.sort(key=lambda r: (r["val_nll"], r["candidate"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return SearchResult(best[1], best[2], rows)

