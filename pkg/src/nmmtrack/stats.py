"""Oscillation gate: Anderson-Darling normality and Ljung-Box whiteness tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc, log_ndtr

from .errors import DegenerateSampleError, SampleSizeError

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 1e-4


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    reject: bool

    # keep pytest from collecting this as a test class
    __test__ = False


def _as_samples(samples, min_n):
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_n:
        raise SampleSizeError(f"need at least {min_n} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    if np.ptp(x) == 0 or x.std() <= 1e-12 * max(1.0, np.abs(x).max()):
        raise DegenerateSampleError("sample has zero variance")
    return x


def ad_pvalue(a2_star):
    """Upper-tail p-value of the corrected statistic (D'Agostino & Stephens 1986)."""
    a = float(a2_star)
    if a >= 0.6:
        p = np.exp(1.2937 - 5.709 * a + 0.0186 * a * a)
    elif a >= 0.34:
        p = np.exp(0.9177 - 4.279 * a - 1.38 * a * a)
    elif a >= 0.2:
        p = 1.0 - np.exp(-8.318 + 42.796 * a - 59.938 * a * a)
    else:
        p = 1.0 - np.exp(-13.436 + 101.14 * a - 223.73 * a * a)
    return float(np.clip(p, 0.0, 1.0))


def ad_statistic(samples) -> float:
    """Corrected ``A^2 * (1 + 0.75/n + 2.25/n^2)`` against a fitted normal."""
    x = np.sort(_as_samples(samples, 8))
    n = x.size
    z = (x - x.mean()) / x.std(ddof=1)
    i = np.arange(1, n + 1)
    s = np.sum((2 * i - 1) * (log_ndtr(z) + log_ndtr(-z[::-1])))
    a2 = -n - s / n
    return float(a2 * (1.0 + 0.75 / n + 2.25 / n**2))


def anderson_darling(samples, alpha=DEFAULT_ALPHA) -> TestResult:
    stat = ad_statistic(samples)
    p = ad_pvalue(stat)
    return TestResult(stat, p, p < alpha)


def chi2_survival(x, k) -> float:
    """``P(X > x)`` for a chi-squared variable with ``k`` degrees of freedom."""
    if x < 0 or k < 1:
        raise ValueError("need x >= 0 and k >= 1")
    return float(gammaincc(k / 2.0, x / 2.0))


def default_lags(n) -> int:
    return max(1, min(20, n // 10))


def ljung_box(samples, lags=None, alpha=DEFAULT_ALPHA) -> TestResult:
    x = np.asarray(samples, dtype=float).ravel()
    h = default_lags(x.size) if lags is None else int(lags)
    if h < 1 or x.size <= h:
        raise SampleSizeError(f"need n > lags >= 1 (n={x.size}, lags={h})")
    x = _as_samples(x, h + 1)
    n = x.size
    d = x - x.mean()
    denom = d @ d
    acf = np.array([d[k:] @ d[:-k] for k in range(1, h + 1)]) / denom
    q = n * (n + 2) * np.sum(acf**2 / (n - np.arange(1, h + 1)))
    p = chi2_survival(q, h)
    return TestResult(float(q), p, p < alpha)


def detect_oscillation(samples, alpha=DEFAULT_ALPHA, lags=None) -> bool:
    """True when either test rejects its null at ``alpha``.

    A flat segment cannot oscillate, so degenerate input returns False.
    """
    try:
        ad = anderson_darling(samples, alpha)
        lb = ljung_box(samples, lags, alpha)
    except DegenerateSampleError:
        log.warning("degenerate (constant) segment treated as non-oscillatory")
        return False
    return bool(ad.reject or lb.reject)
