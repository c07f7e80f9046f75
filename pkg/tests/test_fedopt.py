import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safl.errors import DivergenceError
from safl.fedopt import (
    SafariConfig,
    aggregate,
    local_update,
    q_bound_nonconvex,
    q_bound_strongly_convex,
    run_centralized_sgd,
    run_fedavg,
    run_safari,
    server_step,
    summarize,
)
from safl.objectives import QuadraticObjective
from safl.population import (
    ParticipationProcess,
    make_quadratic_population,
    make_quadratic_server,
)
from safl.rng import stream


def default_setup(sigma=0.1, sigma_s=0.1, s=4):
    pop = make_quadratic_population(10, 10, 1.0, sigma=sigma)
    proc = ParticipationProcess("excluded", 10, 5, s) if s else ParticipationProcess("uniform", 10, 5)
    return pop, proc, make_quadratic_server(pop, sigma_s)


# -- config -------------------------------------------------------------------

@given(st.floats(1e-6, 1.0), st.integers(1, 50))
def test_coupling(eta_s, K):
    cfg = SafariConfig(eta_s=eta_s, K=K, couple_steps=True)
    assert abs(cfg.eta_c - 2 * eta_s / K) <= 1e-15 * (2 * eta_s / K)


def test_coupling_conflict_rejected():
    with pytest.raises(ValueError):
        SafariConfig(eta_s=0.1, K=5, eta_c=0.5, couple_steps=True)


@pytest.mark.parametrize("kw", [{"q": 1.5}, {"K": 0}, {"R": 0}, {"eta_s": -1.0}, {"server_steps": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SafariConfig(**kw)


# -- building blocks ----------------------------------------------------------

@given(st.floats(0.1, 3.0), st.floats(0.0, 0.3), st.integers(1, 20))
def test_local_update_closed_form(h, eta, K):
    c = np.array([1.0, -2.0])
    obj = QuadraticObjective(h, c)
    x0 = np.array([0.5, 0.5])
    out = local_update(x0, obj, K, eta, stream(0, "client-noise"))
    assert np.allclose(out, c + (1 - eta * h) ** K * (x0 - c), rtol=1e-10, atol=1e-12)


def test_local_update_fixed_point_and_zero_step():
    obj = QuadraticObjective(2.0, np.array([1.0, 1.0]), 0.0)
    assert np.array_equal(local_update(obj.center, obj, 5, 0.1, stream(0, "client-noise")), obj.center)
    noisy = QuadraticObjective(2.0, np.array([1.0, 1.0]), 0.5)
    x = np.array([3.0, 4.0])
    assert np.array_equal(local_update(x, noisy, 5, 0.0, stream(0, "client-noise")), x)


def test_local_update_divergence():
    obj = QuadraticObjective(1.0, np.zeros(2))
    with pytest.raises(DivergenceError):
        local_update(np.ones(2), obj, 200, 10.0, stream(0, "client-noise"))


def test_aggregate_examples():
    assert np.array_equal(aggregate([np.array([1.0, 2.0])]), [1.0, 2.0])
    assert np.array_equal(aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])
    with pytest.raises(ValueError):
        aggregate([])


@given(st.lists(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=8), st.randoms())
def test_aggregate_order_invariant(models, rnd):
    shuffled = list(models)
    rnd.shuffle(shuffled)
    assert aggregate(models).tobytes() == aggregate(shuffled).tobytes()
    keyed = dict(enumerate(models))
    rev = dict(reversed(list(keyed.items())))
    assert aggregate(keyed).tobytes() == aggregate(rev).tobytes()


def test_server_step_examples():
    pop = make_quadratic_population(10, 4, 1.0, hessian=[0.5, 1.0, 1.5, 2.0])
    server = make_quadratic_server(pop, 0.0)
    x_star = pop.global_optimum
    assert np.allclose(server_step(x_star, server, 0.3, stream(0, "server-noise")), x_star, atol=1e-15)
    x = x_star + np.array([1.0, -1.0, 2.0, 0.5])
    out = server_step(x, server, 0.3, stream(0, "server-noise"))
    assert np.allclose(out - x_star, (1 - 0.3 * np.array([0.5, 1.0, 1.5, 2.0])) * (x - x_star), atol=1e-12)
    assert np.array_equal(server_step(x, server, 0.0, stream(0, "server-noise")), x)


# -- round loops ----------------------------------------------------------------

def test_kinds_partition_rounds():
    pop, proc, server = default_setup()
    summary, recs = run_safari(pop, proc, server, SafariConfig(q=0.5, eta_s=0.05, K=5, R=200, couple_steps=True))
    assert len(recs) == 200
    assert summary.n_client_rounds + summary.n_server_rounds == 200
    assert {r.kind for r in recs} == {"client", "server"}
    for r in recs:
        assert (r.participating is None) == (r.kind == "server")


def test_q1_matches_fedavg_bitwise():
    pop, proc, server = default_setup()
    cfg = SafariConfig(q=1.0, eta_s=0.05, K=5, R=100, couple_steps=True, seed=3, x0=np.ones(10))
    _, a = run_safari(pop, proc, server, cfg)
    _, b = run_fedavg(pop, proc, cfg)
    assert a == b


def test_q0_matches_centralized_sgd_bitwise():
    pop, proc, server = default_setup()
    cfg = SafariConfig(q=0.0, eta_s=0.05, K=5, R=100, couple_steps=True, seed=3, x0=np.ones(10))
    _, a = run_safari(pop, proc, server, cfg)
    _, b = run_centralized_sgd(pop, server, cfg)
    assert a == b


def test_q0_noiseless_gd_closed_form():
    pop = make_quadratic_population(10, 5, 1.0, hessian=2.0)
    server = make_quadratic_server(pop, 0.0)
    proc = ParticipationProcess("uniform", 10, 5)
    x0 = pop.global_optimum + 1.0
    eta, R = 0.1, 50
    summary, _ = run_safari(pop, proc, server, SafariConfig(q=0.0, eta_s=eta, R=R, x0=x0))
    expected = (1 - eta * 2.0) ** (2 * R) * 5.0
    assert summary.final_dist_sq == pytest.approx(expected, rel=1e-10)


def test_determinism():
    pop, proc, server = default_setup()
    cfg = SafariConfig(q=0.5, eta_s=0.05, K=3, R=80, couple_steps=True, seed=11)
    s1, a = run_safari(pop, proc, server, cfg)
    s2, b = run_safari(pop, proc, server, cfg)
    assert a == b
    assert s1.diagnostics == s2.diagnostics


def test_fedavg_homogeneous_converges():
    pop = make_quadratic_population(10, 5, 0.0, sigma=0.0)
    summary, _ = run_fedavg(pop, ParticipationProcess("uniform", 10, 3), SafariConfig(eta_c=0.1, K=5, R=200, x0=np.ones(5)))
    assert summary.final_dist_sq <= 1e-20


def test_fedavg_all_included_reaches_fixed_point():
    from safl.population import fedavg_fixed_point

    pop = make_quadratic_population(10, 10, 1.0, sigma=0.0)
    proc = ParticipationProcess("excluded", 10, 6, 4)
    summary, _ = run_fedavg(pop, proc, SafariConfig(eta_c=0.05, K=5, R=10_000, x0=np.ones(10)))
    assert np.linalg.norm(summary.final_x - fedavg_fixed_point(pop, range(6))) <= 1e-6


@pytest.mark.parametrize("K", [1, 3])
def test_noiseless_monotone(K):
    pop = make_quadratic_population(10, 6, 0.0, hessian=np.linspace(0.5, 2.0, 6), sigma=0.0)
    server = make_quadratic_server(pop, 0.0)
    cfg = SafariConfig(q=0.5, eta_s=0.4, K=K, R=100, couple_steps=True, x0=np.full(6, 3.0))
    _, recs = run_safari(pop, ParticipationProcess("uniform", 10, 4), server, cfg)
    losses = [pop.loss(cfg.x0)] + [r.loss for r in recs]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_diagnostics_shapes():
    pop, proc, server = default_setup()
    summary, recs = run_safari(pop, proc, server, SafariConfig(q=0.5, eta_s=0.05, K=5, R=60, couple_steps=True))
    d = summary.diagnostics
    assert d.g1 >= 0 and d.g2 >= 0
    assert len(d.g3) == len(d.g4) == 60
    for r, g4 in zip(recs, d.g4):
        assert (g4 is None) == (r.kind == "server")
    g_server = [d.g3[i] for i, r in enumerate(recs) if r.kind == "server"]
    assert d.g1 == max(g_server)


def test_divergence_keeps_last_state():
    pop, proc, server = default_setup(sigma=0.0, sigma_s=0.0)
    with pytest.raises(DivergenceError) as info:
        run_safari(pop, proc, server, SafariConfig(q=0.0, eta_s=5.0, R=500, x0=np.ones(10)))
    err = info.value
    assert err.last_state is not None and np.all(np.isfinite(err.last_state))
    assert err.round_index is not None


def test_band_warning():
    pop, proc, server = default_setup()
    cfg = SafariConfig(q=0.9, eta_s=0.05, K=2, R=50, couple_steps=True, rs_rc_band=(0.5, 2.0))
    with pytest.warns(RuntimeWarning, match="R_s/R_c"):
        run_safari(pop, proc, server, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_safari(pop, proc, server, SafariConfig(q=0.9, eta_s=0.05, K=2, R=50, couple_steps=True, rs_rc_band=(0.0, 10.0)))


def test_server_steps_take_several_sgd_steps():
    pop, proc, server = default_setup(sigma_s=0.0)
    cfg1 = SafariConfig(q=0.0, eta_s=0.1, R=6, x0=np.ones(10))
    cfg3 = SafariConfig(q=0.0, eta_s=0.1, R=2, x0=np.ones(10), server_steps=3)
    s1, _ = run_safari(pop, proc, server, cfg1)
    s3, _ = run_safari(pop, proc, server, cfg3)
    assert np.allclose(s1.final_x, s3.final_x, atol=1e-14)


def test_summarize_pure():
    pop, proc, server = default_setup()
    summary, recs = run_safari(pop, proc, server, SafariConfig(q=0.5, eta_s=0.05, K=5, R=40, couple_steps=True))
    assert summarize(recs).core() == summary.core()


def test_fedavg_without_server_client_only():
    pop, proc, _ = default_setup()
    with pytest.raises(ValueError):
        run_safari(pop, proc, None, SafariConfig(q=0.5))


# -- q bounds --------------------------------------------------------------------

def nonconvex_oracle(sg2, g1, g2, K, L, eta):
    frac = (4 * sg2 - 4 * g2 * (1 / (2 * K * K) - 2 * L * eta * eta / (K * K))) / ((1 - L * eta) * g1)
    return 1.0 if frac <= 0 else 1.0 / (frac + 1.0)


def sconvex_oracle(g3, g4, L, mu, eb):
    a = L * eb / mu
    top = 4 * eb / mu**2 * (1 + 30 * a * (1 + 2 * a)) * g3 - 4 * g4 / mu
    bottom = g3 * (1 / (L + mu) - (L + mu) ** 2 * eb / (4 * L * L * mu * mu))
    frac = top / bottom
    return 1.0 if frac <= 0 else 1.0 / (frac + 1.0)


def test_nonconvex_bound_examples():
    b = q_bound_nonconvex(1.0, 1.0, 0.0, 5, 1.0, 0.5)
    assert b.status == "ok" and b.q_max == pytest.approx(1 / 9, rel=1e-15)
    h = q_bound_nonconvex(0.0, 1.0, 1.0, 5, 1.0, 0.1)
    assert h.status == "vacuous" and h.q_max == 1.0
    assert q_bound_nonconvex(1e12, 1.0, 0.0, 5, 1.0, 0.5).q_max < 1e-11
    assert q_bound_nonconvex(1.0, 0.0, 0.0, 5, 1.0, 0.5).status == "undefined"
    with pytest.raises(ValueError):
        q_bound_nonconvex(1.0, 1.0, 0.0, 5, 1.0, 1.0)


@given(st.floats(0, 10), st.floats(1e-3, 10), st.floats(0, 10), st.integers(1, 20), st.floats(0.1, 5), st.floats(0.0, 0.99))
def test_nonconvex_matches_oracle(sg2, g1, g2, K, L, Leta):
    eta = Leta / L
    b = q_bound_nonconvex(sg2, g1, g2, K, L, eta)
    assert 0 < b.q_max <= 1
    assert b.q_max == pytest.approx(nonconvex_oracle(sg2, g1, g2, K, L, eta), rel=1e-12)


def test_sconvex_bound_example():
    b = q_bound_strongly_convex(1.0, 0.0, 1.0, 1.0, 0.1)
    assert b.status == "ok"
    assert b.q_max == pytest.approx(sconvex_oracle(1.0, 0.0, 1.0, 1.0, 0.1), rel=1e-14)
    assert b.q_max == pytest.approx(5 / 28, rel=1e-14)


def test_sconvex_clamps():
    assert q_bound_strongly_convex(1.0, 100.0, 1.0, 1.0, 0.1).q_max == 1.0
    assert q_bound_strongly_convex(1.0, 0.5, 2.0, 1.0, 1e-9).status == "vacuous"
    assert q_bound_strongly_convex(0.0, 0.0, 1.0, 1.0, 0.1).status in ("vacuous", "undefined")
    assert q_bound_strongly_convex(0.0, -1.0, 1.0, 1.0, 0.1).status == "undefined"
    with pytest.raises(ValueError):
        q_bound_strongly_convex(1.0, 0.0, 1.0, 1.0, 1.5)


@given(st.floats(1e-3, 10), st.floats(-5, 5), st.floats(1.0, 5.0), st.floats(0.01, 0.9))
def test_sconvex_matches_oracle(g3, g4, L, frac_eta):
    mu = 1.0
    eb = frac_eta * 4 * L * mu / (L + mu) ** 2
    b = q_bound_strongly_convex(g3, g4, L, mu, eb)
    bottom = 1 / (L + mu) - (L + mu) ** 2 * eb / (4 * L * L * mu * mu)
    if bottom <= 0:
        assert b.status == "undefined"
    else:
        assert b.q_max == pytest.approx(sconvex_oracle(g3, g4, L, mu, eb), rel=1e-12)
        assert math.isfinite(b.q_max) and 0 < b.q_max <= 1
