"""Monte-Carlo checks of the learnability results.

Two settings live here.  The two-point construction shows that an
adversarial participation process keeps conventional FL from being PAC
learnable.  The 1-D threshold class on uniform distributions shows SA-FL
(client data from D mixed with server data from P) recovering the
centralized rate.  Excess errors on the threshold class are computed from
closed-form CDFs, never by test-set sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .harness.fitting import LogLogFit, fit_loglog_slope
from .rng import stream

X1, X2 = 0, 1


# --------------------------------------------------------------------------
# impossibility construction


@dataclass(frozen=True)
class ImpossibilityInstance:
    """Two-point distribution P(x1) = 1 - 4 eps, P(x2) = 4 eps.

    ``epsilon`` defaults to (1 - omega) / 8; pass it explicitly to study
    omega = 1 (every sample kept).
    """

    M: int
    n: int
    omega: float
    trials: int = 10_000
    epsilon: float | None = None

    def __post_init__(self):
        if self.M < 1 or self.n < 1 or self.trials < 1:
            raise ValueError("M, n and trials must be positive")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("omega must lie in (0, 1]")
        if self.epsilon is None:
            if self.omega >= 1.0:
                raise ValueError("omega = 1 needs an explicit epsilon")
            object.__setattr__(self, "epsilon", (1.0 - self.omega) / 8.0)
        if not 0.0 < self.epsilon < 0.125:
            raise ValueError("epsilon must lie in (0, 1/8)")

    @property
    def rare_mass(self) -> float:
        return 4.0 * self.epsilon

    @property
    def total(self) -> int:
        return self.M * self.n

    @property
    def budget(self) -> int:
        return int(round(self.omega * self.total))

    @property
    def risk_threshold(self) -> float:
        return (1.0 - self.omega) / 8.0


def adversarial_select(samples, budget: int) -> np.ndarray:
    """Keep as many x1 points as the budget allows, pad with x2."""
    samples = np.asarray(samples)
    if budget > samples.size or budget < 0:
        raise ValueError("budget must lie in [0, len(samples)]")
    n1 = int(np.count_nonzero(samples == X1))
    k1 = min(n1, budget)
    return np.concatenate([np.full(k1, X1), np.full(budget - k1, X2)]).astype(samples.dtype)


# f1 and f2 agree on x1 and disagree on x2
_TARGETS = ((1, 1), (1, -1))


def _erm_two_hypotheses(train: np.ndarray, target) -> int:
    """Index of the hypothesis with fewest training mistakes; ties go to f1."""
    errs = []
    for h in _TARGETS:
        mistakes = sum(int(np.count_nonzero(train == pt)) for pt in (X1, X2) if h[pt] != target[pt])
        errs.append(mistakes)
    return int(np.argmin(errs))


def _risk(h_index: int, target, rare_mass: float) -> float:
    h = _TARGETS[h_index]
    risk = 0.0
    if h[X1] != target[X1]:
        risk += 1.0 - rare_mass
    if h[X2] != target[X2]:
        risk += rare_mass
    return risk


def _draw_samples(inst: ImpossibilityInstance, rng: np.random.Generator) -> np.ndarray:
    return np.where(rng.random(inst.total) < inst.rare_mass, X2, X1).astype(np.int8)


def impossibility_trial(inst: ImpossibilityInstance, rng: np.random.Generator) -> float:
    """P-risk of the ERM learner against the worse of the two targets."""
    selected = adversarial_select(_draw_samples(inst, rng), inst.budget)
    worst = 0.0
    for target in _TARGETS:
        h = _erm_two_hypotheses(selected, target)
        worst = max(worst, _risk(h, target, inst.rare_mass))
    return worst


@dataclass(frozen=True)
class RateEstimate:
    successes: int
    trials: int
    low: float
    high: float

    @property
    def fraction(self) -> float:
        return self.successes / self.trials


def wilson(successes: int, trials: int, level: float = 0.95) -> RateEstimate:
    ci = binomtest(successes, trials).proportion_ci(confidence_level=level, method="wilson")
    return RateEstimate(successes, trials, float(ci.low), float(ci.high))


def impossibility_failure_rate(inst: ImpossibilityInstance, seed: int) -> RateEstimate:
    """Fraction of trials with risk > (1 - omega)/8, with a Wilson 95% interval."""
    if inst.trials < 1000:
        raise ValueError("need at least 1000 trials")
    fails = 0
    for t in range(inst.trials):
        if impossibility_trial(inst, stream(seed, "trial", t)) > inst.risk_threshold:
            fails += 1
    return wilson(fails, inst.trials)


def rare_count_tail(inst: ImpossibilityInstance, seed: int) -> RateEstimate:
    """Fraction of trials where the x2 count reaches (1 - omega) M n.

    Uses the same per-trial streams as ``impossibility_failure_rate``, so
    both statistics describe the same simulated datasets.
    """
    cut = (1.0 - inst.omega) * inst.total
    hits = 0
    for t in range(inst.trials):
        s = int(np.count_nonzero(_draw_samples(inst, stream(seed, "trial", t)) == X2))
        if s >= cut:
            hits += 1
    return wilson(hits, inst.trials)


# --------------------------------------------------------------------------
# threshold class on the real line


@dataclass(frozen=True)
class ThresholdInstance:
    """P = U[a, b] (server / target), D = U[a2, b2] (participating clients).

    Labels are y = 1{x >= t_star}.  ``lambda1`` and ``lambda2`` weight D and
    P in the training mixture Q.
    """

    a: float = 0.0
    b: float = 1.0
    a2: float = 0.25
    b2: float = 0.75
    t_star: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    n_T: int = 100
    n_S: int = 900

    def __post_init__(self):
        if not self.a <= self.a2 < self.b2 <= self.b or self.a >= self.b:
            raise ValueError("need a <= a2 < b2 <= b")
        if not self.a <= self.t_star <= self.b:
            raise ValueError("t_star must lie in [a, b]")
        if self.lambda1 < 0 or self.lambda2 < 0 or abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")

    def mass_between(self, lo: float, hi: float, dist: str) -> float:
        """Probability mass of [lo, hi] under 'P', 'D' or the mixture 'Q'."""
        lo, hi = min(lo, hi), max(lo, hi)

        def uniform(a, b):
            return max(0.0, min(hi, b) - max(lo, a)) / (b - a)

        if dist == "P":
            return uniform(self.a, self.b)
        if dist == "D":
            return uniform(self.a2, self.b2)
        if dist == "Q":
            return self.lambda1 * uniform(self.a2, self.b2) + self.lambda2 * uniform(self.a, self.b)
        raise ValueError(f"unknown distribution {dist!r}")

    def excess_error(self, t: float, dist: str = "P") -> float:
        """Excess zero-one error of h_t; the best-in-class error is 0."""
        return self.mass_between(t, self.t_star, dist)

    def label(self, x):
        return (np.asarray(x) >= self.t_star).astype(np.int8)


def sample_mixture(inst: ThresholdInstance, n: int | None, rng: np.random.Generator):
    """round(lambda2 * n) points from P and the rest from D, labelled by t_star."""
    if n is None:
        n_T, n_S = inst.n_T, inst.n_S
    else:
        n_T = int(round(inst.lambda2 * n))
        n_S = n - n_T
    x = np.concatenate([rng.uniform(inst.a, inst.b, n_T), rng.uniform(inst.a2, inst.b2, n_S)])
    return x, inst.label(x)


def erm_threshold(xs, ys) -> float:
    """Empirical-risk minimising threshold for h_t(x) = 1{x >= t}.

    On separable data this is the midpoint between the largest negative and
    smallest positive sample.  If only one label occurs, the boundary sample
    itself is returned (nudged up by one ulp for all-negative data so that
    it is still classified negative).  Noisy data falls back to a sorted
    scan over the candidate cut points.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    if xs.size == 0:
        raise ValueError("erm_threshold needs at least one sample")
    pos = xs[ys == 1]
    neg = xs[ys != 1]
    if neg.size == 0:
        return float(pos.min())
    if pos.size == 0:
        return float(np.nextafter(neg.max(), np.inf))
    lo, hi = neg.max(), pos.min()
    if lo < hi:
        return float(0.5 * (lo + hi))
    order = np.argsort(xs, kind="stable")
    xs, y = xs[order], (ys[order] == 1).astype(np.int64)
    # mistakes when cutting before index k: positives left of k plus negatives from k on
    pos_left = np.concatenate([[0], np.cumsum(y)])
    neg_right = np.concatenate([np.cumsum((1 - y)[::-1])[::-1], [0]])
    errs = pos_left + neg_right
    # a cut between equal x values is not realisable
    valid = np.ones(errs.size, dtype=bool)
    valid[1:-1] = xs[1:] > xs[:-1]
    errs = np.where(valid, errs, np.iinfo(np.int64).max)
    k = int(np.argmin(errs))
    if k == 0:
        return float(xs[0])
    if k == xs.size:
        return float(np.nextafter(xs[-1], np.inf))
    return float(0.5 * (xs[k - 1] + xs[k]))


@dataclass
class PacRateResult:
    n_grid: list[int]
    mean_excess: list[float]
    fit: LogLogFit | None
    used: list[int]

    @property
    def slope(self) -> float:
        return self.fit.slope


def _fit_rate(n_grid, means) -> tuple[LogLogFit | None, list[int]]:
    used = list(range(len(n_grid)))
    if means[0] > 0.2:
        used = used[1:]
    if len(used) < 3:
        return None, used
    return fit_loglog_slope([n_grid[i] for i in used], [means[i] for i in used]), used


def pac_rate_experiment(inst: ThresholdInstance, n_grid, trials: int, seed: int) -> PacRateResult:
    """Mean excess P-error of the mixture ERM at each total sample size n.

    Each n is split as round(lambda2 n) server points from P plus client
    points from D.  The slope is an unweighted log-log fit; the first grid
    point is dropped if its mean error exceeds 0.2.
    """
    n_grid = [int(n) for n in n_grid]
    means = []
    for gi, n in enumerate(n_grid):
        errs = np.empty(trials)
        for t in range(trials):
            x, y = sample_mixture(inst, n, stream(seed, "trial", gi, t))
            errs[t] = inst.excess_error(erm_threshold(x, y), "P")
        means.append(float(errs.mean()))
    fit, used = _fit_rate(n_grid, means)
    return PacRateResult(n_grid, means, fit, used)


def centralized_baseline(inst: ThresholdInstance, n_T: int, trials: int, seed: int) -> float:
    """Mean excess P-error of ERM trained on n_T samples from P alone."""
    errs = np.empty(trials)
    for t in range(trials):
        rng = stream(seed, "trial", 1_000_000 + n_T, t)
        x = rng.uniform(inst.a, inst.b, n_T)
        errs[t] = inst.excess_error(erm_threshold(x, inst.label(x)), "P")
    return float(errs.mean())


def safl_excess(inst: ThresholdInstance, n_T: int, n_S: int, trials: int, seed: int) -> float:
    """Mean excess P-error with n_T server samples from P plus n_S from D."""
    errs = np.empty(trials)
    for t in range(trials):
        rng = stream(seed, "trial", 2_000_000 + n_T, t)
        x = np.concatenate([rng.uniform(inst.a, inst.b, n_T), rng.uniform(inst.a2, inst.b2, n_S)])
        errs[t] = inst.excess_error(erm_threshold(x, inst.label(x)), "P")
    return float(errs.mean())


def check_positively_related(inst: ThresholdInstance, t_grid) -> tuple[float, float]:
    """Fit |eps_P - eps_Q| = alpha * eps_Q^beta on a threshold grid.

    Returns (alpha, beta).  When P and Q coincide the difference is zero
    everywhere; alpha is then 0 and beta is undefined (nan).
    """
    if not inst.a2 <= inst.t_star <= inst.b2:
        raise ValueError("t_star must lie inside [a2, b2]")
    t = np.asarray(t_grid, dtype=np.float64)
    if np.any(t < inst.a2) or np.any(t > inst.b2):
        raise ValueError("t_grid must lie inside [a2, b2]")
    t = t[t != inst.t_star]
    eq = np.array([inst.excess_error(v, "Q") for v in t])
    ep = np.array([inst.excess_error(v, "P") for v in t])
    diff = np.abs(ep - eq)
    if np.all(diff <= 1e-15 * np.maximum(ep, 1.0)):
        return 0.0, math.nan
    keep = diff > 0
    fit = fit_loglog_slope(eq[keep], diff[keep])
    return float(10.0**fit.intercept), float(fit.slope)
