"""Preset construction, momentum forms, and potential certificates."""

import numpy as np
import pytest

from bnbpep.gram import Basis, Preset, StepsizeSchedule, stepsize_convert
from bnbpep.presets import (
    MomentumForm,
    NotRepresentableError,
    classical_proof_residual,
    exact_potential_objective,
    initial_schedule,
    make_problem,
    momentum_form,
    momentum_to_stepsizes,
    potential_certificate,
    potential_rates,
    solve_potential_chain,
    thg_stepsize,
)


# -- problem construction -----------------------------------------------------

def test_make_problem_template():
    spec = make_problem("sc-grad", 2, mu=0.1, L=1.0, R=1.0)
    assert spec.preset is Preset.SC_GRAD
    assert (spec.N, spec.mu, spec.L, spec.R) == (2, 0.1, 1.0, 1.0)
    assert spec.performance == "final_gradient_norm_sq"


def test_make_problem_nonconvex_epigraph_measure():
    spec = make_problem("nonconvex-grad", 1, L=1.0, R=1.0)
    assert spec.performance == "min_gradient_norm_sq"


def test_make_problem_normalizes_weak_convexity():
    spec = make_problem("wc-potential", 1, rho=2.0, L=4.0, R=0.1)
    assert spec.L_tilde == pytest.approx(2.0)


def test_make_problem_rejects_other_smoothing():
    with pytest.raises(ValueError):
        make_problem("wc-potential", 1, rho_hat=3)


def test_initial_schedules():
    assert initial_schedule(make_problem("sc-grad", 3, mu=0.1)).diagonal_values().tolist() == [1, 1, 1]
    spec = make_problem("wc-potential", 1, R=0.1)
    assert initial_schedule(spec).get(1, 0) == pytest.approx(0.1 / np.sqrt(2))


# -- constant-stepsize conjecture ------------------------------------------------

@pytest.mark.parametrize("N", [1, 2, 3, 5, 8])
def test_thg_root_residual(N):
    h = thg_stepsize(N)
    assert 0 < h < 2
    assert abs(1.0 / (2 * N * h + 1) - (1 - h) ** (2 * N)) <= 1e-12


def test_thg_matches_known_value():
    assert thg_stepsize(1) == pytest.approx(1.5, abs=1e-12)


# -- momentum form ----------------------------------------------------------------

def test_momentum_single_step():
    form = MomentumForm((0.0,), (0.1547,))
    sched = momentum_to_stepsizes(form)
    assert sched.get(1, 0) == pytest.approx(1.1547)
    back = momentum_form(sched)
    assert back.zeta[0] == pytest.approx(0.0, abs=1e-12)
    assert back.eta[0] == pytest.approx(0.1547, abs=1e-12)


def test_momentum_published_two_step_table():
    h = StepsizeSchedule.from_matrix([[1.157583, 0.0], [0.023142, 1.146857]],
                                     Basis.H, (0.0, 1.0))
    form = momentum_form(h, tol=1e-4)
    assert form.zeta == pytest.approx([0.0, 0.146858], abs=1e-5)
    assert form.eta == pytest.approx([0.157583, 0.0], abs=1e-5)


def test_momentum_roundtrip_random(rng):
    for N in (1, 2, 4, 5):
        for _ in range(5):
            # the first momentum coefficient is normalized away (see
            # MomentumForm); draw representatives with zeta_1 = 0
            zeta = tuple([0.0] + list(rng.uniform(-0.3, 0.3, N - 1)))
            eta = tuple(rng.uniform(-0.3, 0.3, N))
            sched = momentum_to_stepsizes(MomentumForm(zeta, eta))
            back = momentum_form(sched)
            assert np.allclose(back.zeta, zeta, atol=1e-9)
            assert np.allclose(back.eta, eta, atol=1e-9)


def test_momentum_not_representable(rng):
    # at N=4 the anchored table has 10 coefficients against 8 momentum
    # parameters; a generic table falls outside the family
    rows = tuple(tuple(float(v) for v in rng.uniform(0.2, 1.5, i + 1))
                 for i in range(4))
    sched = StepsizeSchedule(4, Basis.HBAR, rows, (0.0, 1.0))
    with pytest.raises(NotRepresentableError) as err:
        momentum_form(sched)
    assert np.abs(err.value.residual).max() > 0


# -- potential certificates -------------------------------------------------------

def test_certificate_collapse_at_half():
    cert = potential_certificate(0.5, 3, kappa=0.1)
    assert np.allclose(cert.b[:-1], 4.0)
    assert cert.b[-1] == pytest.approx(0.0)
    assert np.allclose(cert.c[:-1], 1.0)
    assert cert.c[-1] == pytest.approx(0.0)
    N = 3
    want = (N + 4 * 0.1 ** 2) / (N + 1)
    assert cert.objective == pytest.approx(want, abs=1e-12)


def test_certificate_published_value():
    cert = potential_certificate(0.01, 1, kappa=0.1)
    assert cert.objective == pytest.approx(0.0398, abs=5e-4)
    ok, resid, eig = cert.validate()
    assert ok and resid <= 1e-10 and eig >= -1e-9


def test_certificate_block_spectrum(rng):
    for _ in range(10):
        h = rng.uniform(0.01, 0.5)
        N = int(rng.integers(0, 8))
        cert = potential_certificate(h, N, kappa=0.2)
        for k, Z in enumerate(cert.Z):
            w = np.linalg.eigvalsh(Z)
            assert np.allclose(w[:-1], 0.0, atol=1e-12)
            want = 0.25 * (1 + 2 * h * h) * cert.b[k + 1]
            assert w[-1] == pytest.approx(want, abs=1e-10)


def test_certificate_sweep_random(rng):
    # mechanized telescoping proof over random admissible inputs
    for _ in range(50):
        h = rng.uniform(1e-3, 0.5)
        N = int(rng.integers(0, 21))
        cert = potential_certificate(h, N, kappa=0.1)
        ok, resid, eig = cert.validate()
        assert ok, (h, N, resid, eig)
        # backward recursion and slope identity
        assert np.allclose(4 + (1 - 2 * h) * cert.b[1:], cert.b[:-1], atol=1e-12)
        assert np.allclose(cert.c, h * h * cert.b[1:], atol=1e-12)


def test_certificate_rejects_bad_stepsize():
    with pytest.raises(ValueError):
        potential_certificate(0.6, 1)
    with pytest.raises(ValueError):
        potential_certificate(0.0, 1)


def test_telescoping_identity(rng):
    for _ in range(20):
        h = rng.uniform(1e-3, 0.5)
        N = int(rng.integers(0, 15))
        kappa = rng.uniform(0.05, 0.5)
        cert = potential_certificate(h, N, kappa=kappa)
        lhs = np.sum(cert.c) + kappa ** 2 * cert.b[0]
        assert lhs == pytest.approx((N + 1) * cert.objective, abs=1e-10)


def test_exact_objective_nonnegative_dense():
    hs = np.linspace(1e-4, 0.5, 500)
    for N in (0, 1, 5, 20):
        vals = [exact_potential_objective(h, N, 0.1) for h in hs]
        assert min(vals) >= 0.0


def test_rates_chain_and_threshold():
    r = potential_rates(99, 0.1)
    assert r.corollary_rate == pytest.approx((2 * np.sqrt(5) - 1) / 100, abs=1e-9)
    assert r.corollary_rate < r.dd_rate
    assert r.improvement_threshold == pytest.approx(13.0625)
    for N in range(1, 30):
        rN = potential_rates(N, 0.1)
        better = rN.corollary_rate < rN.dd_rate
        assert better == (N >= 14)
        # the closed-form stepsize is dominated by its own bound
        assert rN.exact_objective(rN.h_ub) <= rN.corollary_rate + 1e-12


def test_rates_pointwise_upper_bound(rng):
    r = potential_rates(7, 0.2)
    for _ in range(200):
        h = rng.uniform(1e-4, 0.5)
        ub = (1.0 / 8) * (-1 + (1.0 / (2 * h)) * (1.0 / 8 + 4 * 0.2 ** 2)
                          + 2 * h * 8)
        assert r.exact_objective(h) <= ub + 1e-12


def test_exact_objective_reference_points():
    r = potential_rates(1, 0.1)
    assert r.exact_objective(0.01) == pytest.approx(0.0398, abs=5e-4)
    assert r.h_ub == pytest.approx(np.sqrt(1.08) / 4, abs=1e-12)
    assert r.exact_objective(0.01) <= r.exact_objective(r.h_ub)


def test_classical_proof_identity(rng):
    worst = 0.0
    for _ in range(100):
        h = rng.uniform(1e-3, 0.5)
        b1 = rng.uniform(0.0, 30.0)
        q, l = classical_proof_residual(h, b1)
        worst = max(worst, q, l)
    assert worst <= 1e-12


# -- verification chain -----------------------------------------------------------

def test_chain_matches_warm_start_value():
    spec = make_problem("wc-potential", 1, R=0.1)
    ch = solve_potential_chain(spec, 0.1 / np.sqrt(2))
    assert ch.objective == pytest.approx(0.04717, abs=5e-5)


def test_chain_matches_analytic_certificate():
    spec = make_problem("wc-potential", 1, R=0.1)
    ch = solve_potential_chain(spec, 0.01)
    cert = potential_certificate(0.01, 1, kappa=0.1)
    assert ch.objective <= cert.objective + 1e-7
