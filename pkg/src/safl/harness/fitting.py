"""Least-squares fits on log-log axes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    r2: float


def fit_loglog_slope(xs, ys) -> LogLogFit:
    """OLS of log10(y) on log10(x).

    r2 is reported as 0 when y is constant (no variance to explain).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("log-log fit needs strictly positive finite values")
    lx, ly = np.log10(x), np.log10(y)
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 0.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return LogLogFit(float(slope), float(intercept), r2)


def sign_test_greater(wins: int, n: int) -> float:
    """One-sided sign-test p-value for observing at least ``wins`` of ``n``."""
    from scipy.stats import binomtest

    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
