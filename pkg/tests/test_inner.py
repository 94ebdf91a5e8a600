"""Worst-case evaluation against the published reference values."""

import numpy as np
import pytest

from bnbpep.gram import Basis, Preset, StepsizeSchedule
from bnbpep.inner import (
    CapInfeasibleError,
    ProblemSpec,
    build_inner_pair,
    canonical_schedule,
    evaluate_worst_case,
    solve_dual_extremal,
)
from bnbpep.presets import make_problem, thg_stepsize


def gd_schedule(spec):
    return canonical_schedule(
        spec, StepsizeSchedule.gradient_descent(spec.N, Basis.H,
                                                (spec.mu, spec.L)))


GD_WARM_START = {1: 0.2244, 2: 0.0893, 3: 0.0449, 4: 0.0257, 5: 0.0159}


def printed_tol(v, rel=1e-3):
    """Tolerance for a value printed with finite digits: the stated relative
    tolerance or half an ulp of the rounding, whichever is wider."""
    import math
    digits = len(str(v).split(".")[1])
    return max(rel * abs(v), 0.5 * 10.0 ** (-digits))


@pytest.mark.parametrize("N", [1, 2, 3, 4, 5])
def test_strongly_convex_warm_start_column(N):
    spec = make_problem("sc-grad", N, mu=0.1)
    wc = evaluate_worst_case(spec, gd_schedule(spec), solve_primal=False)
    assert wc.value == pytest.approx(GD_WARM_START[N],
                                     abs=printed_tol(GD_WARM_START[N]))


@pytest.mark.parametrize("N", [1, 2, 3, 4, 5])
def test_unit_step_function_gap_closed_form(N):
    spec = make_problem("gd-nomomentum", N)
    sched = StepsizeSchedule.diagonal([1.0] * N, Basis.H)
    wc = evaluate_worst_case(spec, sched, solve_primal=False)
    assert wc.value == pytest.approx(1.0 / (4 * N + 2), abs=1e-6)


THG_COLUMN = {1: 0.125, 2: 0.067355, 3: 0.045364, 4: 0.033976, 5: 0.0270701}


@pytest.mark.parametrize("N", [1, 2, 3, 4, 5])
def test_constant_stepsize_conjecture_column(N):
    spec = make_problem("gd-nomomentum", N)
    h = thg_stepsize(N)
    sched = StepsizeSchedule.diagonal([h] * N, Basis.H)
    wc = evaluate_worst_case(spec, sched, solve_primal=False)
    assert wc.value == pytest.approx(THG_COLUMN[N], rel=1e-3)


def test_nonconvex_unit_step():
    spec = make_problem("nonconvex-grad", 1)
    sched = canonical_schedule(spec, StepsizeSchedule.diagonal([1.0], Basis.H))
    wc = evaluate_worst_case(spec, sched, 1e-10, 1e-10, solve_primal=False)
    assert wc.value == pytest.approx(0.8, abs=1e-6)


def test_nonconvex_long_step():
    spec = make_problem("nonconvex-grad", 1)
    h = 2.0 / np.sqrt(3.0)
    sched = canonical_schedule(spec, StepsizeSchedule.diagonal([h], Basis.H))
    wc = evaluate_worst_case(spec, sched, 1e-10, 1e-10, solve_primal=False)
    assert wc.value == pytest.approx(0.7875254, rel=1e-4)


def test_nonconvex_two_steps_prior_art():
    spec = make_problem("nonconvex-grad", 2)
    h = 2.0 / np.sqrt(3.0)
    sched = canonical_schedule(spec, StepsizeSchedule.diagonal([h, h], Basis.H))
    wc = evaluate_worst_case(spec, sched, 1e-10, 1e-10, solve_primal=False)
    assert wc.value == pytest.approx(0.4902920, rel=1e-4)


def test_published_optimal_table_value_N2():
    spec = make_problem("sc-grad", 2, mu=0.1)
    h = StepsizeSchedule.from_matrix([[1.5018, 0.0], [0.0494, 1.5018]],
                                     Basis.H, (0.1, 1.0))
    wc = evaluate_worst_case(spec, canonical_schedule(spec, h),
                             solve_primal=False)
    assert wc.value == pytest.approx(0.0409, abs=1e-3)


def test_duality_gap_small_on_template_instances():
    spec = make_problem("sc-grad", 2, mu=0.1)
    wc = evaluate_worst_case(spec, gd_schedule(spec))
    assert wc.duality_gap <= 1e-6
    assert wc.value >= wc.primal_value - 1e-6


def test_certificate_replay():
    for pid, N in [("sc-grad", 2), ("gd-nomomentum", 2), ("nonconvex-grad", 1)]:
        spec = make_problem(pid, N, mu=0.1) if pid == "sc-grad" else make_problem(pid, N)
        sched = gd_schedule(spec) if pid != "nonconvex-grad" else canonical_schedule(
            spec, StepsizeSchedule.gradient_descent(N, Basis.H, (0.0, 1.0)))
        wc = evaluate_worst_case(spec, sched, solve_primal=False)
        a_res, z_res = wc.certificate.residuals(spec, sched)
        assert a_res <= 1e-7
        assert z_res <= 1e-7
        assert wc.certificate.multiplier_floor() >= -1e-9
        assert np.linalg.eigvalsh(wc.certificate.Z)[0] >= -1e-8


def test_schedule_basis_is_enforced():
    spec = make_problem("sc-grad", 1, mu=0.1)
    raw = StepsizeSchedule.gradient_descent(1, Basis.H, (0.1, 1.0))
    with pytest.raises(ValueError):
        build_inner_pair(spec, raw)


def test_potential_preset_has_no_anchored_inner():
    spec = make_problem("wc-potential", 1, R=0.1)
    sched = StepsizeSchedule.diagonal([0.01], Basis.H)
    with pytest.raises(ValueError):
        build_inner_pair(spec, sched)


def test_extremal_cap_infeasible():
    spec = make_problem("sc-grad", 1, mu=0.1)
    sched = gd_schedule(spec)
    with pytest.raises(CapInfeasibleError):
        solve_dual_extremal(spec, sched, c_lambda=1.0, cap=0.1, sense="min",
                            cap_slack=0.0)


def test_primal_dual_pair_shapes():
    spec = make_problem("nonconvex-grad", 1)
    sched = canonical_schedule(spec, StepsizeSchedule.diagonal([1.0], Basis.H))
    pair = build_inner_pair(spec, sched)
    primal, dual = pair
    assert primal.psd_dims == [3]
    assert dual.psd_dims == [3]
    assert dual.var_info["lam"][1] == 6
    assert dual.var_info["tau"][1] == 2
    assert dual.var_info["eta"][1] == 2
