"""Trajectories, synthetic LGSSM data with an exact Kalman filter, and
feature pipelines for the electricity, volatility and quote datasets."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd


class DataError(ValueError):
    pass


@dataclass
class Trajectory:
    """Inputs ``u`` (T x I) and observations ``y`` (T x O) with per-step masks.

    Entries at masked-out steps are stored as zeros so they can flow through
    arithmetic without producing NaNs.
    """
    u: np.ndarray
    y: np.ndarray
    input_mask: np.ndarray | None = None
    obs_mask: np.ndarray | None = None
    source: str = ""
    times: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64).T).T.copy()
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64).T).T.copy()
        T = len(self.y)
        if len(self.u) != T:
            raise DataError(f"inputs have {len(self.u)} steps, observations {T}")
        u_ok = np.all(np.isfinite(self.u), axis=1)
        y_ok = np.all(np.isfinite(self.y), axis=1)
        for given in (self.input_mask, self.obs_mask):
            if given is not None and np.shape(given) != (T,):
                raise DataError("masks must have one entry per step")
        self.input_mask = u_ok if self.input_mask is None else np.asarray(self.input_mask, bool) & u_ok
        self.obs_mask = y_ok if self.obs_mask is None else np.asarray(self.obs_mask, bool) & y_ok
        self.u[~self.input_mask] = 0.0
        self.y[~self.obs_mask] = 0.0
        if self.times is not None and len(self.times) != T:
            raise DataError("times must have one entry per step")

    def __len__(self):
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.u.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.y.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.u[start:stop], self.y[start:stop], self.input_mask[start:stop],
                          self.obs_mask[start:stop], self.source,
                          None if self.times is None else self.times[start:stop])


# ---------------------------------------------------------------- LGSSM


def _mat(x, rows, cols, name):
    a = np.asarray(x, dtype=np.float64)
    if a.size != rows * cols:
        raise DataError(f"{name} needs {rows}x{cols} entries, got {a.size}")
    return a.reshape(rows, cols)


def _check_psd(M, name):
    if not np.allclose(M, M.T, atol=1e-12):
        raise DataError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -1e-12:
        raise DataError(f"{name} is not positive semi-definite")


@dataclass
class LgssmSpec:
    """``x_t = A x_{t-1} + B u_t + eps``, ``y_t = H x_t + e``, ``u_t ~ N(c, D)``."""
    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    c: np.ndarray
    D: np.ndarray
    x0_mean: np.ndarray | None = None
    x0_cov: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        J = self.A.shape[0]
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64).reshape(J, -1)
        I, O = self.B.shape[1], self.H.shape[0]
        self.Q = _mat(self.Q, J, J, "Q")
        self.R = _mat(self.R, O, O, "R")
        self.c = np.asarray(self.c, dtype=np.float64).reshape(I)
        self.D = _mat(self.D, I, I, "D")
        self.x0_mean = np.zeros(J) if self.x0_mean is None else np.asarray(self.x0_mean, float).reshape(J)
        self.x0_cov = np.zeros((J, J)) if self.x0_cov is None else _mat(self.x0_cov, J, J, "x0_cov")
        if self.A.shape != (J, J) or self.H.shape[1] != J:
            raise DataError("A must be JxJ and H must be OxJ")
        for name in ("Q", "R", "D", "x0_cov"):
            _check_psd(getattr(self, name), name)
        if self.spectral_radius >= 1:
            warnings.warn(f"transition matrix has spectral radius {self.spectral_radius:.3f} >= 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.B.shape[1], self.H.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    @classmethod
    def from_mapping(cls, d) -> "LgssmSpec":
        """Build from flat row-major lists keyed ``A, B, H, Q, R, c, D``
        plus ``state_dim, input_dim, obs_dim``."""
        J, I, O = int(d["state_dim"]), int(d["input_dim"]), int(d["obs_dim"])
        get = lambda k, shape: _mat(d[k], *shape, k) if k in d else None  # noqa: E731
        return cls(get("A", (J, J)), get("B", (J, I)), get("H", (O, J)), get("Q", (J, J)),
                   get("R", (O, O)), np.asarray(d["c"], float).reshape(I), get("D", (I, I)),
                   np.asarray(d["x0_mean"], float) if "x0_mean" in d else None, get("x0_cov", (J, J)))


def _gauss(rng, mean, cov, size):
    """Draws via a symmetric square root; exact zeros when ``cov`` is zero."""
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0, None))
    return mean + rng.standard_normal((size, len(mean))) @ root.T


def simulate_lgssm(spec: LgssmSpec, T: int, rng: np.random.Generator) -> tuple[Trajectory, np.ndarray]:
    """Simulate ``T`` steps; returns the trajectory and the latent states."""
    if T < 1:
        raise DataError("T must be at least 1")
    J, I, O = spec.dims
    u = _gauss(rng, spec.c, spec.D, T)
    eps = _gauss(rng, np.zeros(J), spec.Q, T)
    e = _gauss(rng, np.zeros(O), spec.R, T)
    x = _gauss(rng, spec.x0_mean, spec.x0_cov, 1)[0]
    xs = np.empty((T, J))
    ys = np.empty((T, O))
    for t in range(T):
        x = spec.A @ x + spec.B @ u[t] + eps[t]
        xs[t] = x
        ys[t] = spec.H @ x + e[t]
    return Trajectory(u, ys, source="lgssm"), xs


@dataclass
class KalmanResult:
    filtered_mean: np.ndarray   # (T, J)
    filtered_cov: np.ndarray    # (T, J, J)
    pred_state_mean: np.ndarray  # (T, J), before seeing y_t
    pred_state_cov: np.ndarray  # (T, J, J)
    pred_mean: np.ndarray       # (T, O) one-step predictive mean of y_t
    pred_cov: np.ndarray        # (T, O, O)

    @property
    def pred_var(self) -> np.ndarray:
        return np.diagonal(self.pred_cov, axis1=1, axis2=2).copy()


def _gain(P, H, R):
    S = H @ P @ H.T + R
    PHt = P @ H.T
    try:
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise np.linalg.LinAlgError
        return PHt @ np.linalg.inv(S)
    except np.linalg.LinAlgError:
        # a singular innovation is fine only when the state is already exact
        if np.allclose(PHt, 0.0, atol=1e-300):
            return np.zeros_like(PHt)
        raise DataError("singular innovation covariance") from None


def kalman_oracle(spec: LgssmSpec, traj: Trajectory, input_mode: str = "known") -> KalmanResult:
    """Exact full-covariance Kalman filter.

    ``known`` conditions on ``u_t``; ``marginalised`` integrates it out under
    ``N(c, D)``. Steps with a masked input fall back to the marginal form and
    steps with a masked observation skip the update.
    """
    if input_mode not in ("known", "marginalised"):
        raise ValueError(f"input_mode must be 'known' or 'marginalised', got {input_mode!r}")
    J, I, O = spec.dims
    if traj.input_dim != I or traj.obs_dim != O:
        raise DataError("trajectory dimensions do not match the model")
    A, B, H, Q, R = spec.A, spec.B, spec.H, spec.Q, spec.R
    Q_marg = B @ spec.D @ B.T + Q
    T = len(traj)
    out = KalmanResult(np.empty((T, J)), np.empty((T, J, J)), np.empty((T, J)), np.empty((T, J, J)),
                       np.empty((T, O)), np.empty((T, O, O)))
    m, P = spec.x0_mean.copy(), spec.x0_cov.copy()
    for t in range(T):
        if input_mode == "known" and traj.input_mask[t]:
            m_pred = A @ m + B @ traj.u[t]
            P_pred = A @ P @ A.T + Q
        else:
            m_pred = A @ m + B @ spec.c
            P_pred = A @ P @ A.T + Q_marg
        out.pred_state_mean[t], out.pred_state_cov[t] = m_pred, P_pred
        out.pred_mean[t] = H @ m_pred
        out.pred_cov[t] = H @ P_pred @ H.T + R
        if traj.obs_mask[t]:
            K = _gain(P_pred, H, R)
            m = m_pred + K @ (traj.y[t] - H @ m_pred)
            IKH = np.eye(J) - K @ H
            # Joseph form keeps P symmetric PSD
            P = IKH @ P_pred @ IKH.T + K @ R @ K.T
        else:
            m, P = m_pred, P_pred
        out.filtered_mean[t], out.filtered_cov[t] = m, P
    return out


def kalman_forecast(spec: LgssmSpec, mean: np.ndarray, cov: np.ndarray, horizon: int,
                    future_u: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Multistep predictive moments of y from filtered states.

    ``mean`` is (N, J), ``cov`` (N, J, J); ``future_u`` (N, horizon, I) or None
    to marginalise inputs. Returns means (N, horizon, O) and variances
    (N, horizon, O).
    """
    A, B, H = spec.A, spec.B, spec.H
    Qk, Qm = spec.Q, B @ spec.D @ B.T + spec.Q
    m, P = mean.copy(), cov.copy()
    N = len(m)
    O = H.shape[0]
    means = np.empty((N, horizon, O))
    vars_ = np.empty((N, horizon, O))
    for k in range(horizon):
        if future_u is None:
            m = m @ A.T + B @ spec.c
            P = A @ P @ A.T + Qm
        else:
            m = m @ A.T + future_u[:, k] @ B.T
            P = A @ P @ A.T + Qk
        means[:, k] = m @ H.T
        vars_[:, k] = np.einsum("oj,njk,ok->no", H, P, H) + np.diag(spec.R)
    return means, vars_


def riccati_steady_state(A, H, Q, R, tol: float = 1e-14, max_iter: int = 100_000) -> float | np.ndarray:
    """Iterate the predicted-covariance Riccati recursion to convergence."""
    A, H, Q, R = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (A, H, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        S = H @ P @ H.T + R
        P_new = A @ (P - P @ H.T @ np.linalg.solve(S, H @ P)) @ A.T + Q
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    return P


# --------------------------------------------------------- trajectory files


def save_trajectory(traj: Trajectory, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Comma-separated file with ``u_1..u_I``, ``y_1..y_O``, ``mask_u``, ``mask_y``."""
    cols = {"t": np.arange(len(traj))}
    for i in range(traj.input_dim):
        cols[f"u_{i + 1}"] = traj.u[:, i]
    for j in range(traj.obs_dim):
        cols[f"y_{j + 1}"] = traj.y[:, j]
    cols["mask_u"] = traj.input_mask.astype(int)
    cols["mask_y"] = traj.obs_mask.astype(int)
    for k, v in (extra or {}).items():
        cols[k] = v
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def load_trajectory(path) -> Trajectory:
    df = pd.read_csv(path, float_precision="round_trip")
    ucols = sorted((c for c in df.columns if c.startswith("u_")), key=lambda c: int(c[2:]))
    ycols = sorted((c for c in df.columns if c.startswith("y_")), key=lambda c: int(c[2:]))
    if not ycols:
        raise DataError(f"{path}: no y_ columns")
    u = df[ucols].to_numpy(float) if ucols else np.zeros((len(df), 0))
    mu = df["mask_u"].to_numpy(bool) if "mask_u" in df else None
    my = df["mask_y"].to_numpy(bool) if "mask_y" in df else None
    return Trajectory(u, df[ycols].to_numpy(float), mu, my, source=str(path))


# ------------------------------------------------------------ electricity

UCI_COLUMNS = ["Date", "Time", "Global_active_power", "Global_reactive_power", "Voltage",
               "Global_intensity", "Sub_metering_1", "Sub_metering_2", "Sub_metering_3"]
UCI_TARGET = "Global_active_power"
UCI_INPUTS = ["Global_reactive_power", "Global_intensity", "Voltage",
              "Sub_metering_1", "Sub_metering_2", "Sub_metering_3"]


def load_electricity(path) -> Trajectory:
    """Parse the UCI household power file.

    Active power is the observation; the six other measurements are inputs.
    Rows holding ``?`` are kept and masked in both streams.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, sep=";", dtype=str, keep_default_na=False, on_bad_lines="error")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    missing = [c for c in UCI_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if raw.empty:
        raise DataError(f"{path}: no data rows")
    values = {}
    unknown = np.zeros(len(raw), dtype=bool)
    for col in UCI_COLUMNS[2:]:
        text = raw[col].str.strip()
        num = pd.to_numeric(text, errors="coerce")
        bad = num.isna() & (text != "?") & (text != "")
        if bad.any():
            lines = (np.flatnonzero(bad.to_numpy()) + 2)[:10].tolist()
            raise DataError(f"{path}: unparseable {col} on lines {lines}")
        # the published file leaves the last field empty on missing rows
        gap = (text == "?") | (text == "")
        unknown |= gap.to_numpy()
        values[col] = num.to_numpy(float)
    times = pd.to_datetime(raw["Date"] + " " + raw["Time"], format="%d/%m/%Y %H:%M:%S",
                           errors="coerce")
    if times.isna().any():
        lines = (np.flatnonzero(times.isna().to_numpy()) + 2)[:10].tolist()
        raise DataError(f"{path}: bad date/time on lines {lines}")
    u = np.column_stack([values[c] for c in UCI_INPUTS])
    y = values[UCI_TARGET][:, None]
    ok = ~unknown
    return Trajectory(u, y, ok, ok, source=f"uci:{path.name}", times=times.to_numpy())


def chronological_split(traj: Trajectory, fractions=(0.6, 0.2, 0.2)):
    """Contiguous train/validation/test parts; sizes are floored, remainder to test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    T = len(traj)
    if T < 3:
        raise DataError("need at least 3 steps to split")
    n_train = int(np.floor(fractions[0] * T + 1e-9))
    n_val = int(np.floor(fractions[1] * T + 1e-9))
    return (traj.slice(0, n_train), traj.slice(n_train, n_train + n_val),
            traj.slice(n_train + n_val, T))


# ----------------------------------------------------------- normalisation

NORM_METHODS = ("none", "zscore", "minmax", "ewm")


@dataclass
class NormStats:
    method: str
    u_shift: np.ndarray
    u_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray
    halflife: float | None = None

    def to_dict(self) -> dict:
        return {"method": self.method, "u_shift": self.u_shift.tolist(), "u_scale": self.u_scale.tolist(),
                "y_shift": self.y_shift.tolist(), "y_scale": self.y_scale.tolist(),
                "halflife": self.halflife}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(d["method"], np.asarray(d["u_shift"], float), np.asarray(d["u_scale"], float),
                   np.asarray(d["y_shift"], float), np.asarray(d["y_scale"], float), d.get("halflife"))

    @classmethod
    def identity(cls, I: int, O: int) -> "NormStats":
        return cls("none", np.zeros(I), np.ones(I), np.zeros(O), np.ones(O))


def _column_stats(x, mask, method, name):
    shift = np.zeros(x.shape[1])
    scale = np.ones(x.shape[1])
    rows = x[mask]
    if not len(rows):
        return shift, scale
    if method == "zscore":
        shift = rows.mean(axis=0)
        scale = rows.std(axis=0)
    else:
        shift = rows.min(axis=0)
        scale = rows.max(axis=0) - shift
    flat = scale == 0
    if flat.any():
        warnings.warn(f"{name} columns {np.flatnonzero(flat).tolist()} are constant; left unscaled")
        scale[flat] = 1.0
    return shift, scale


def fit_norm(train: Trajectory, method: str) -> NormStats:
    """Normalising constants from the training partition only."""
    if method not in NORM_METHODS:
        raise ValueError(f"unknown normalisation {method!r}")
    if method in ("none", "ewm"):
        stats = NormStats.identity(train.input_dim, train.obs_dim)
        return replace(stats, method=method, halflife=EWM_HALFLIFE if method == "ewm" else None)
    us, uc = _column_stats(train.u, train.input_mask, method, "input")
    ys, yc = _column_stats(train.y, train.obs_mask, method, "observation")
    return NormStats(method, us, uc, ys, yc)


def apply_norm(traj: Trajectory, stats: NormStats) -> Trajectory:
    if stats.method == "ewm":
        y, _ = ewm_normalize(traj.y, stats.halflife, traj.obs_mask)
        return replace(traj, y=y)
    return replace(traj, u=(traj.u - stats.u_shift) / stats.u_scale,
                   y=(traj.y - stats.y_shift) / stats.y_scale)


def invert_norm(traj: Trajectory, stats: NormStats, ewm_scale: np.ndarray | None = None) -> Trajectory:
    if stats.method == "ewm":
        if ewm_scale is None:
            raise ValueError("inverting ewm normalisation needs the deviation series")
        return replace(traj, y=traj.y * ewm_scale)
    return replace(traj, u=traj.u * stats.u_scale + stats.u_shift,
                   y=traj.y * stats.y_scale + stats.y_shift)


def normalize(traj: Trajectory, method: str, fitted_on: Trajectory) -> tuple[Trajectory, NormStats]:
    stats = fit_norm(fitted_on, method)
    return apply_norm(traj, stats), stats


EWM_HALFLIFE = 10_000


def ewm_normalize(x: np.ndarray, halflife: float = EWM_HALFLIFE, mask=None):
    """Divide each column by its exponentially weighted moving deviation.

    Returns the scaled array and the deviation series used.
    """
    x = np.asarray(x, dtype=np.float64)
    df = pd.DataFrame(x)
    if mask is not None:
        df[~np.asarray(mask, bool)] = np.nan
    sd = df.ewm(halflife=halflife, ignore_na=True).std().bfill().ffill().to_numpy()
    sd = np.where(np.isfinite(sd) & (sd > 0), sd, 1.0)
    return x / sd, sd


# ------------------------------------------------------------- volatility


def realized_variance_series(prices, window: int = 30, spike_factor: float | None = 10.0,
                             spike_window: int = 200) -> np.ndarray:
    """Rolling sum of squared one-step log returns over ``window`` returns.

    Output element ``k`` covers returns ``k .. k+window-1``. Values above
    ``spike_factor`` times their trailing ``spike_window`` deviation are
    replaced by the preceding (cleaned) value.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    p = np.asarray(prices, dtype=np.float64)
    if np.any(p <= 0):
        raise DataError("prices must be positive")
    r = np.diff(np.log(p))
    if len(r) < window:
        return np.zeros(0)
    csum = np.concatenate([[0.0], np.cumsum(r * r)])
    rv = csum[window:] - csum[:-window]
    rv = np.maximum(rv, 0.0)
    if spike_factor is not None:
        rv = remove_spikes(rv, spike_factor, spike_window)
    return rv


def remove_spikes(x, factor: float = 10.0, window: int = 200) -> np.ndarray:
    s = pd.Series(np.asarray(x, dtype=np.float64))
    # deviation of the preceding values only, so a spike cannot inflate its own threshold
    sd = s.rolling(window, min_periods=2).std().shift(1)
    spike = (s > factor * sd).to_numpy()
    spike[0] = False
    cleaned = s.mask(spike).ffill()
    return cleaned.to_numpy()


# ------------------------------------------------------------------ quotes


@dataclass
class QuoteFeatures:
    microprice: np.ndarray
    returns: np.ndarray     # length T-1, return from step t-1 to t
    imbalance: np.ndarray


def microstructure_features(bid, ask, bid_vol, ask_vol) -> QuoteFeatures:
    bid, ask, bid_vol, ask_vol = (np.asarray(a, dtype=np.float64) for a in (bid, ask, bid_vol, ask_vol))
    total = bid_vol + ask_vol
    if np.any(total <= 0):
        raise DataError("bid plus ask volume must be positive")
    micro = (ask_vol * bid + bid_vol * ask) / total
    imbalance = np.clip((bid_vol - ask_vol) / total, -1.0, 1.0)
    returns = np.diff(micro) / micro[:-1]
    return QuoteFeatures(micro, returns, imbalance)


def session_mask(times, start: str = "08:30", end: str = "16:00") -> np.ndarray:
    """True for timestamps whose time of day lies in ``[start, end]``."""
    t = pd.to_datetime(pd.Series(times))
    tod = t.dt.hour * 60 + t.dt.minute + t.dt.second / 60
    h0, m0 = map(int, start.split(":"))
    h1, m1 = map(int, end.split(":"))
    return ((tod >= h0 * 60 + m0) & (tod <= h1 * 60 + m1)).to_numpy()


def load_quotes(path, session: tuple[str, str] | None = ("08:30", "16:00")) -> Trajectory:
    """Level-1 quote file with columns ``bid, ask, bid_size, ask_size`` and an
    optional ``time`` column.

    The observation at step t is the microprice return into t; the input is
    the volume imbalance at t-1.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    need = ["bid", "ask", "bid_size", "ask_size"]
    if any(c not in df for c in need):
        raise DataError(f"{path}: quote files need columns {need}")
    times = None
    if "time" in df:
        if session is not None:
            df = df[session_mask(df["time"], *session)].reset_index(drop=True)
        times = pd.to_datetime(df["time"]).to_numpy()[1:]
    f = microstructure_features(df["bid"], df["ask"], df["bid_size"], df["ask_size"])
    return Trajectory(f.imbalance[:-1, None], f.returns[:, None], source=f"quotes:{Path(path).name}",
                      times=times)
