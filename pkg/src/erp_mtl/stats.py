"""Proportion of variance explained, t-tests, BHY false-discovery control, Pearson r.

Student-t tail probabilities come from the regularized incomplete beta
function, evaluated with the modified Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_Q = 0.01
# |t| reported for paired differences that are exactly constant and nonzero
T_CAP = 1e12


class StatsError(ValueError):
    pass


class DegenerateSampleError(StatsError):
    pass


def pove(mse: float, variance: float) -> float:
    """1 - mse/variance; negative when worse than predicting the mean."""
    if not variance > 0:
        raise StatsError(f"variance must be positive, got {variance}")
    return 1.0 - mse / variance


# ---- incomplete beta / Student t -----------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise StatsError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, x)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - half if t >= 0 else half


def t_pvalue(t: float, df: float, alternative: str = "two-sided") -> float:
    if alternative == "two-sided":
        return t_sf_two_sided(t, df)
    if alternative == "greater":
        return 1.0 - t_cdf(t, df)
    if alternative == "less":
        return t_cdf(t, df)
    raise StatsError(f"unknown alternative {alternative!r}")


# ---- t-tests ---------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean: float
    exact: str | None = None  # "different" when every paired difference is the same nonzero value

    def __iter__(self):
        return iter((self.t, self.p))


def one_sample_ttest(values: Sequence[float], mu0: float = 0.0, alternative: str = "two-sided") -> TTestResult:
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise DegenerateSampleError("one-sample t-test needs at least two values")
    sd = x.std(ddof=1)
    mean = float(x.mean())
    if not sd > 0 or sd <= 1e-14 * max(1.0, abs(mean)):
        raise DegenerateSampleError("sample standard deviation is zero")
    t = (mean - mu0) / (sd / math.sqrt(n))
    return TTestResult(float(t), t_pvalue(t, n - 1, alternative), n - 1, mean)


@dataclass(frozen=True)
class PairedSample:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise StatsError("paired samples must be 1-D and of equal length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def differences(self) -> np.ndarray:
        return self.a - self.b


def paired_ttest(sample: PairedSample, alternative: str = "two-sided") -> TTestResult:
    """One-sample t-test on the per-run differences ``a - b``.

    Identical samples raise; a constant nonzero difference returns a
    capped t with ``exact="different"``.
    """
    d = sample.differences
    if d.size < 2:
        raise DegenerateSampleError("paired t-test needs at least two pairs")
    if np.all(d == d[0]):
        if d[0] == 0:
            raise DegenerateSampleError("paired samples are identical")
        t = math.copysign(T_CAP, d[0])
        p = t_pvalue(t, d.size - 1, alternative)
        return TTestResult(t, p, d.size - 1, float(d[0]), exact="different")
    return one_sample_ttest(d, 0.0, alternative)


# ---- false discovery rate -------------------------------------------------------

def harmonic(m: int) -> float:
    return float(sum(1.0 / i for i in range(1, m + 1)))


def bhy_adjust(pvalues: Sequence[float], q: float = DEFAULT_Q) -> np.ndarray:
    """Benjamini-Hochberg-Yekutieli step-up; returns a boolean rejection mask.

    With p sorted ascending, reject the k smallest where k is the largest
    i with p_(i) <= i*q / (m*c(m)), c(m) = sum_{j<=m} 1/j.
    """
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1:
        raise StatsError("p-values must be a flat sequence")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise StatsError("p-values must lie in [0, 1]")
    m = p.size
    reject = np.zeros(m, dtype=bool)
    if m == 0:
        return reject
    order = np.argsort(p, kind="stable")
    thresholds = np.arange(1, m + 1) * q / (m * harmonic(m))
    passing = np.nonzero(p[order] <= thresholds)[0]
    if passing.size:
        reject[order[: passing[-1] + 1]] = True
    return reject


def bhy_adjusted_pvalues(pvalues: Sequence[float]) -> np.ndarray:
    """Step-up adjusted p-values: reject at level q iff adjusted <= q."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m * harmonic(m) / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


# ---- correlation ----------------------------------------------------------------

def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError("pearson needs two 1-D sequences of equal length")
    if a.size < 2:
        raise DegenerateSampleError("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise DegenerateSampleError("pearson is undefined for a constant input")
    r = float(da @ db) / (sa * sb)
    return max(-1.0, min(1.0, r))


def correlation_matrix(series: np.ndarray, names: Sequence[str]) -> dict[tuple[str, str], float]:
    """Pairwise Pearson r over rows where both columns are present."""
    out = {}
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            ok = ~np.isnan(series[:, i]) & ~np.isnan(series[:, j])
            try:
                out[(a, b)] = pearson(series[ok, i], series[ok, j])
            except DegenerateSampleError:
                out[(a, b)] = float("nan")
    return out
