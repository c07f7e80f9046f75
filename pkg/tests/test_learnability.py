import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from safl.learnability import (
    X1,
    X2,
    ImpossibilityInstance,
    ThresholdInstance,
    adversarial_select,
    centralized_baseline,
    check_positively_related,
    erm_threshold,
    impossibility_failure_rate,
    impossibility_trial,
    pac_rate_experiment,
    safl_excess,
    sample_mixture,
)
from safl.rng import stream


# -- impossibility --------------------------------------------------------------

def test_select_counting():
    s = np.array([X1] * 7 + [X2] * 3)
    out = adversarial_select(s, 7)
    assert np.sum(out == X1) == 7 and np.sum(out == X2) == 0
    s = np.array([X1] * 5 + [X2] * 5)
    out = adversarial_select(s, 7)
    assert np.sum(out == X1) == 5 and np.sum(out == X2) == 2
    assert np.all(adversarial_select(np.full(10, X1), 4) == X1)


@given(st.integers(0, 50), st.integers(0, 50), st.data())
def test_select_property(n1, n2, data):
    s = np.array([X1] * n1 + [X2] * n2, dtype=np.int8)
    budget = data.draw(st.integers(0, n1 + n2))
    out = adversarial_select(s, budget)
    assert out.size == budget
    assert np.sum(out == X1) == min(n1, budget)


def test_epsilon_range():
    inst = ImpossibilityInstance(10, 20, 0.5)
    assert inst.epsilon == 1 / 16 and 0 < inst.rare_mass < 0.5
    with pytest.raises(ValueError):
        ImpossibilityInstance(10, 20, 1.0)


def test_no_rare_point_means_risk_four_eps():
    inst = ImpossibilityInstance(2, 5, 0.5)
    # find a trial stream with no x2 among the kept samples: with budget 5 of
    # 10 and at most 5 rare points, the selection holds x1 only
    risk = impossibility_trial(inst, stream(0, "trial", 0))
    assert risk == pytest.approx(inst.rare_mass)


def test_full_budget_recovers_target():
    inst = ImpossibilityInstance(10, 20, 1.0, trials=1000, epsilon=1 / 80)
    risks = [impossibility_trial(inst, stream(4, "trial", t)) for t in range(1000)]
    assert np.mean(np.array(risks) == 0.0) >= 0.99
    rate = impossibility_failure_rate(inst, 4)
    assert rate.fraction <= 0.01


def test_mean_risk_at_least_epsilon():
    inst = ImpossibilityInstance(10, 20, 0.5, trials=10_000)
    risks = [impossibility_trial(inst, stream(1, "trial", t)) for t in range(10_000)]
    assert np.mean(risks) >= inst.epsilon


def test_failure_rate_and_n_independence():
    lo = impossibility_failure_rate(ImpossibilityInstance(10, 20, 0.5, trials=10_000), 7)
    hi = impossibility_failure_rate(ImpossibilityInstance(10, 200, 0.5, trials=10_000), 7)
    assert lo.low > 0.05 and hi.low > 0.05
    assert lo.low <= lo.fraction <= lo.high


def test_failure_rate_needs_trials():
    with pytest.raises(ValueError):
        impossibility_failure_rate(ImpossibilityInstance(10, 20, 0.5, trials=999), 0)


# -- threshold class ---------------------------------------------------------------

def test_erm_examples():
    assert erm_threshold([0.2, 0.8], [0, 1]) == 0.5
    assert erm_threshold([0.3, 0.9, 0.5], [1, 1, 1]) == 0.3
    with pytest.raises(ValueError):
        erm_threshold([], [])


def test_erm_accuracy_on_uniform():
    inst = ThresholdInstance(t_star=0.4)
    bad = 0
    for t in range(500):
        rng = stream(3, "trial", 0, t)
        x = rng.uniform(0, 1, 1000)
        bad += abs(erm_threshold(x, inst.label(x)) - 0.4) > 0.02
    assert bad / 500 <= 0.01


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0, 1))
def test_erm_zero_empirical_error(xs, t_star):
    xs = np.array(xs)
    ys = (xs >= t_star).astype(int)
    t = erm_threshold(xs, ys)
    assert np.array_equal((xs >= t).astype(int), ys)


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_erm_minimises_noisy_error(pairs):
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    t = erm_threshold(xs, ys)
    err = np.sum((xs >= t).astype(int) != ys)
    cands = np.concatenate([xs, [np.inf]])
    best = min(np.sum((xs >= c).astype(int) != ys) for c in cands)
    assert err == best


def test_mixture_support_and_labels():
    inst = ThresholdInstance(a=0.0, b=1.0, a2=0.2, b2=0.7, t_star=0.5, lambda1=0.5, lambda2=0.5)
    x, y = sample_mixture(inst, 5000, stream(0, "trial"))
    assert np.all((x >= 0) & (x <= 1))
    assert not np.any((x >= 0.5) & (y == 0))
    assert not np.any((x < 0.5) & (y == 1))


def test_pure_p_is_uniform():
    inst = ThresholdInstance(lambda1=0.0, lambda2=1.0)
    x, _ = sample_mixture(inst, 5000, stream(2, "trial"))
    assert stats.kstest(x, "uniform").pvalue > 0.05


def test_analytic_excess_matches_sampling():
    inst = ThresholdInstance(a=0.0, b=1.0, a2=0.2, b2=0.7, t_star=0.45, lambda1=0.5, lambda2=0.5)
    rng = stream(5, "trial")
    N = 1_000_000
    for t in rng.uniform(0, 1, 20):
        x, _ = sample_mixture(inst, N, rng)
        disagree = (x >= t) != (x >= inst.t_star)
        p = inst.mass_between(t, inst.t_star, "Q")
        se = np.sqrt(max(p * (1 - p), 1e-12) / N)
        assert abs(disagree.mean() - p) <= 3 * se + 1e-9


def test_excess_equals_disagreement_mass():
    # zero-noise labels: P(h_t != h*) is the excess error, the Bernstein condition with beta = 1
    inst = ThresholdInstance(a=0.0, b=2.0, a2=0.5, b2=1.5, t_star=1.0)
    for t in np.linspace(0, 2, 21):
        assert inst.excess_error(t, "P") == pytest.approx(abs(t - 1.0) / 2.0)


def test_positively_related_examples():
    alpha, beta = check_positively_related(ThresholdInstance(lambda1=1.0, lambda2=0.0), np.linspace(0.25, 0.75, 41))
    assert abs(beta - 1) <= 0.01 and abs(alpha - 0.5) <= 0.01
    same = ThresholdInstance(a2=0.0, b2=1.0, lambda1=1.0, lambda2=0.0)
    assert check_positively_related(same, np.linspace(0, 1, 11))[0] == 0.0
    _, beta = check_positively_related(ThresholdInstance(lambda1=0.5, lambda2=0.5), np.linspace(0.25, 0.75, 41))
    assert abs(beta - 1) <= 0.01


def test_positively_related_rejects_outside():
    with pytest.raises(ValueError):
        check_positively_related(ThresholdInstance(t_star=0.9), np.linspace(0.25, 0.75, 5))


def baseline_oracle(n, t=0.5):
    """Exact E|t_hat - t*| for n uniform samples on [0, 1] with the midpoint rule."""
    a, b = t, 1 - t
    total = 0.0
    for k in range(n + 1):
        w = stats.binom.pmf(k, n, t)
        if w < 1e-300:
            continue
        if k == 0:
            total += w * b / (n + 1)
            continue
        if k == n:
            total += w * a / (n + 1)
            continue
        # gaps below and above t* are scaled Beta(1, k) and Beta(1, n - k)
        def FA(z):
            return 1 - (1 - min(z, a) / a) ** k

        def FB(z):
            return 1 - (1 - min(z, b) / b) ** (n - k)

        f = lambda z: FA(z) * (1 - FB(z)) + FB(z) * (1 - FA(z))  # noqa: E731
        total += w * 0.5 * integrate.quad(f, 0, max(a, b), limit=200, points=[5.0 / n, 20.0 / n])[0]
    return total


def test_centralized_baseline_order_statistics():
    inst = ThresholdInstance()
    n, trials = 1000, 4000
    exact = baseline_oracle(n)
    assert 0.5 <= exact * (n + 1) <= 2.0
    mc = centralized_baseline(inst, n, trials, 0)
    # excess is roughly exponential, so its sd is about its mean
    assert abs(mc - exact) <= 4 * exact / np.sqrt(trials)


def test_centralized_decreases():
    inst = ThresholdInstance()
    vals = [centralized_baseline(inst, n, 200, 1) for n in (10, 100, 1000, 10_000)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_pure_p_rate():
    inst = ThresholdInstance(lambda1=0.0, lambda2=1.0)
    res = pac_rate_experiment(inst, [100, 1000, 10_000, 100_000], 200, 0)
    assert -1.25 <= res.slope <= -0.8


def test_d_only_still_decays():
    inst = ThresholdInstance(a2=0.2, b2=0.7, lambda1=1.0, lambda2=0.0)
    res = pac_rate_experiment(inst, [100, 1000, 10_000], 200, 0)
    assert res.mean_excess[-1] < res.mean_excess[0]


def test_safl_no_worse_small_grid():
    inst = ThresholdInstance(a2=0.2, b2=0.7)
    for n_T in (10, 100):
        assert safl_excess(inst, n_T, 9 * n_T, 200, 0) <= 1.15 * centralized_baseline(inst, n_T, 200, 0)


def test_instance_validation():
    with pytest.raises(ValueError):
        ThresholdInstance(a2=0.8, b2=0.7)
    with pytest.raises(ValueError):
        ThresholdInstance(lambda1=0.7, lambda2=0.7)
