"""Low-rank probing of convolution weights.

Each unfolded weight matrix is split into a low-rank signal and noise with
the global analytic solution of empirical variational Bayesian matrix
factorization (Nakajima et al., JMLR 2013; thresholds from Nakajima et al.,
NIPS 2012).  The retained singular values then give three layer metrics:

* rank       ``N'_d / N_d``
* condition  ``sigma_1 / sigma_N'`` over the retained (shrunk) values
* rank-slope ``(Rbar(t2) - Rbar(t1)) / (t2 - t1)`` over a training history
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import ConsistencyError, InputError
from .tensor import ConvTensor, SingularSpectrum, UnfoldedMatrix, svd, unfold

# Condition number of a layer that retains nothing.  Compares greater than
# any finite threshold, so callers treat it as "shrink".
UNDEFINED = math.inf

PLATEAU_WINDOW = 3
PLATEAU_EPSILON = 1e-3


@dataclass(frozen=True)
class LowRankFactorization:
    retained_values: tuple[float, ...]
    estimated_rank: int
    noise_variance: float
    shape: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.estimated_rank != len(self.retained_values):
            raise ConsistencyError("estimated_rank must equal the number of retained values")
        if any(v <= 0 for v in self.retained_values):
            raise ConsistencyError("retained values must be positive")


# ---------------------------------------------------------------------------
# empirical VB matrix factorization
# ---------------------------------------------------------------------------

@lru_cache(maxsize=512)
def evb_tau_threshold(alpha: float) -> float:
    """Zero crossing of ``log(t+1) + alpha*log(t/alpha+1) - t`` above sqrt(alpha)."""
    def f(t):
        return math.log1p(t) + alpha * math.log1p(t / alpha) - t

    lo = math.sqrt(alpha)
    hi = 3.0
    while f(hi) > 0:
        hi *= 2.0
    return brentq(f, lo, hi, xtol=1e-14, rtol=1e-15)


def _tau(x, alpha):
    b = x - (1.0 + alpha)
    return 0.5 * (b + np.sqrt(np.maximum(b * b - 4.0 * alpha, 0.0)))


def _psi1(x, alpha):
    t = _tau(x, alpha)
    return np.log1p(t) + alpha * np.log1p(t / alpha) - t


def _noise_objective(sigma2, s2, L, M, alpha, x_bar):
    """``2F/M`` up to an additive constant, with c_a c_b profiled out."""
    x = s2 / (M * sigma2)
    keep = x > x_bar
    gain = float(np.sum(_psi1(x[keep], alpha))) if keep.any() else 0.0
    return L * math.log(sigma2) + float(s2.sum()) / (M * sigma2) + gain


def _noise_bounds(s2, L, M, alpha, x_bar):
    upper = float(s2.sum()) / (L * M)
    # at most h_max components can ever be retained
    h_max = min(math.ceil(L / (1.0 + alpha)) - 1, L)
    tail = s2[h_max:]
    lower = max(float(tail[0]) / (M * x_bar) if tail.size else 0.0,
                float(tail.mean()) / M if tail.size else 0.0)
    lower = max(lower, upper * 1e-12)
    return min(lower, upper), upper


def estimate_noise_variance(s, L, M):
    """Global minimizer of the empirical VB free energy over the noise variance.

    The objective is smooth between the breakpoints where a singular value
    crosses the retention threshold, so each piece is minimized separately and
    the best piece wins.
    """
    alpha = L / M
    tau_bar = evb_tau_threshold(alpha)
    x_bar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar)
    s2 = np.asarray(s, dtype=np.float64) ** 2
    lower, upper = _noise_bounds(s2, L, M, alpha, x_bar)
    if lower >= upper:
        return upper
    breaks = s2 / (M * x_bar)
    edges = np.unique(np.concatenate([[lower, upper], breaks[(breaks > lower) & (breaks < upper)]]))

    def obj(u):
        return _noise_objective(math.exp(u), s2, L, M, alpha, x_bar)

    best_u, best_f = None, math.inf
    for u in np.log(edges):
        f = obj(u)
        if f < best_f:
            best_u, best_f = u, f
    logs = np.log(edges)
    for a, b in zip(logs[:-1], logs[1:]):
        if b - a < 1e-12:
            continue
        res = minimize_scalar(obj, bounds=(a, b), method="bounded",
                              options={"xatol": 1e-10 * max(1.0, abs(a))})
        if res.fun < best_f:
            best_u, best_f = float(res.x), float(res.fun)
    return math.exp(best_u)


def vbmf_factorize(matrix) -> LowRankFactorization:
    """Empirical VBMF with unknown noise variance and prior product ``c_a c_b``.

    Accepts an :class:`UnfoldedMatrix`, a raw 2-D array, or a precomputed
    :class:`SingularSpectrum` (only the spectrum enters the solution).
    """
    spectrum = matrix if isinstance(matrix, SingularSpectrum) else svd(matrix)
    rows, cols = spectrum.shape
    L, M = min(rows, cols), max(rows, cols)
    s = spectrum.as_array()
    if not np.any(s > 0):
        return LowRankFactorization((), 0, 0.0, (rows, cols))
    alpha = L / M
    tau_bar = evb_tau_threshold(alpha)
    x_bar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar)
    sigma2 = estimate_noise_variance(s, L, M)
    threshold = math.sqrt(M * sigma2 * x_bar)
    kept = s[s > threshold]
    # EVB shrinkage estimator of each retained component
    q = (L + M) * sigma2 / kept**2
    disc = np.maximum((1.0 - q) ** 2 - 4.0 * L * M * sigma2**2 / kept**4, 0.0)
    shrunk = 0.5 * kept * (1.0 - q + np.sqrt(disc))
    shrunk = shrunk[shrunk > 0]
    return LowRankFactorization(tuple(float(v) for v in shrunk), len(shrunk),
                                float(sigma2), (rows, cols))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rank_measure(fact: LowRankFactorization, channel_size: int) -> float:
    if channel_size < 1:
        raise InputError(f"channel size must be >= 1, got {channel_size}")
    if fact.estimated_rank > channel_size:
        raise ConsistencyError(
            f"estimated rank {fact.estimated_rank} exceeds channel size {channel_size}")
    return fact.estimated_rank / channel_size


def condition_measure(fact: LowRankFactorization) -> float:
    vals = fact.retained_values
    if not vals:
        return UNDEFINED
    if len(vals) == 1:
        return 1.0
    return vals[0] / vals[-1]


@dataclass(frozen=True)
class LayerMetrics:
    rank_in: float
    rank_out: float
    rank_avg: float
    cond_in: float
    cond_out: float
    cond_avg: float


def _mean_defined(a, b):
    defined = [c for c in (a, b) if c != UNDEFINED]
    if not defined:
        return UNDEFINED
    return sum(defined) / len(defined)


def layer_metrics(tensor: ConvTensor) -> LayerMetrics:
    """Input (mode 3) and output (mode 4) rank and condition of one layer."""
    _, _, n_in, n_out = tensor.dims
    f_in = vbmf_factorize(unfold(tensor, 3))
    f_out = vbmf_factorize(unfold(tensor, 4))
    r_in = rank_measure(f_in, n_in)
    r_out = rank_measure(f_out, n_out)
    c_in = condition_measure(f_in)
    c_out = condition_measure(f_out)
    return LayerMetrics(r_in, r_out, (r_in + r_out) / 2, c_in, c_out, _mean_defined(c_in, c_out))


@dataclass(frozen=True)
class LayerMetricsHistory:
    """Metrics of one layer at epochs ``0 .. len - 1``."""

    metrics: tuple[LayerMetrics, ...]

    def __len__(self):
        return len(self.metrics)

    def __getitem__(self, t):
        return self.metrics[t]

    @property
    def rank_avg(self) -> list[float]:
        return [m.rank_avg for m in self.metrics]

    @property
    def max_rank_out(self) -> float:
        return max(m.rank_out for m in self.metrics)


def plateau_epoch(history: LayerMetricsHistory, window: int = PLATEAU_WINDOW,
                  epsilon: float = PLATEAU_EPSILON) -> int:
    """First epoch ending ``window`` consecutive average-rank gains below ``epsilon``.

    Falls back to the final epoch when the rank never stalls.
    """
    if len(history) < 2:
        raise InputError("plateau detection needs at least 2 epochs")
    if window < 1 or not epsilon > 0:
        raise InputError("window must be >= 1 and epsilon > 0")
    r = history.rank_avg
    run = 0
    for t in range(1, len(r)):
        run = run + 1 if r[t] - r[t - 1] < epsilon else 0
        if run >= window:
            return t
    return len(r) - 1


def rank_slope(history: LayerMetricsHistory, t1: int, t2: int) -> float:
    if t2 <= t1:
        raise InputError(f"rank slope needs t2 > t1, got t1={t1}, t2={t2}")
    if t1 < 0 or t2 >= len(history):
        raise InputError(f"epochs ({t1}, {t2}) outside history of length {len(history)}")
    return (history[t2].rank_avg - history[t1].rank_avg) / (t2 - t1)


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("trial", "epoch", "layer_name", "rank_in", "rank_out", "rank_avg",
                  "cond_in", "cond_out", "cond_avg")


def fmt(x: float) -> str:
    """9 significant digits; the undefined condition prints as ``inf``."""
    return "%.9g" % x


def metric_rows(trial: int, histories: dict[str, LayerMetricsHistory]):
    for name, hist in histories.items():
        for epoch, m in enumerate(hist.metrics):
            yield (str(trial), str(epoch), name, fmt(m.rank_in), fmt(m.rank_out),
                   fmt(m.rank_avg), fmt(m.cond_in), fmt(m.cond_out), fmt(m.cond_avg))


def append_metrics_csv(path, trial: int, histories: dict[str, LayerMetricsHistory]) -> None:
    """Append one row per layer per epoch, writing the header on first use."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerows(metric_rows(trial, histories))
