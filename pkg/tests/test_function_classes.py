"""Interpolation-inequality generation and the numeric verifier."""

import numpy as np
import pytest

from bnbpep.function_classes import (
    InterpolationPoint,
    SmoothConvex,
    SmoothNonconvex,
    SmoothStronglyConvex,
    WeaklyConvexBounded,
    interpolation_inequalities,
    verify_interpolation,
)
from bnbpep.gram import STAR


def quad_points(L, xs):
    """Samples of f(x) = (L/2)||x||^2 with exact gradients."""
    return [InterpolationPoint(x, L * x, 0.5 * L * x @ x) for x in xs]


def index_set(N):
    return list(range(N + 1)) + [STAR]


# -- generation ----------------------------------------------------------------

def test_smooth_convex_pair_structure():
    cons = interpolation_inequalities(SmoothConvex(2.0), [0, 1])
    assert len(cons) == 2
    c01 = next(c for c in cons if c.key == (0, 1))
    assert c01.f_coeffs == {1: 1.0, 0: -1.0}
    assert c01.blocks[("A", (0, 1))] == 1.0
    assert c01.blocks[("C", (0, 1))] == pytest.approx(1.0 / 4.0)
    assert c01.tight


def test_strongly_convex_reparametrized_modulus():
    cons = interpolation_inequalities(SmoothStronglyConvex(0.1, 1.0), [0, 1])
    c = cons[0]
    assert c.blocks[("C", c.key)] == pytest.approx(1.0 / (2 * 0.9))


def test_nonconvex_star_lower_bounds():
    cons = interpolation_inequalities(SmoothNonconvex(1.0), index_set(1))
    lower = [c for c in cons if c.label == "star_lower"]
    assert len(lower) == 2
    assert lower[0].blocks[("GSQ", 0)] == pytest.approx(0.5)
    pairs = [c for c in cons if c.label == "pair"]
    assert pairs[0].blocks[("B", pairs[0].key)] == pytest.approx(-0.25)
    assert pairs[0].blocks[("Atilde", pairs[0].key)] == pytest.approx(0.5)


def test_weakly_convex_forms_and_flags():
    cons = interpolation_inequalities(WeaklyConvexBounded(1.0, 1.0), [0, 1])
    pairs = [c for c in cons if c.label == "pair"]
    caps = [c for c in cons if c.label == "grad_bound"]
    assert len(pairs) == 2 and len(caps) == 2
    assert pairs[0].blocks[("B", pairs[0].key)] == pytest.approx(-0.5)
    assert caps[0].rhs == pytest.approx(1.0)
    assert not pairs[0].tight and not caps[0].tight


def test_constraint_counts():
    for N in (1, 2, 4):
        idx = index_set(N)
        sc = interpolation_inequalities(SmoothConvex(1.0), idx)
        assert len(sc) == (N + 2) * (N + 1)
        nc = interpolation_inequalities(SmoothNonconvex(1.0), idx)
        assert len(nc) == (N + 2) * (N + 1) + (N + 1)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        SmoothConvex(0.0)
    with pytest.raises(ValueError):
        SmoothStronglyConvex(1.0, 1.0)
    with pytest.raises(ValueError):
        WeaklyConvexBounded(0.0, 1.0)
    with pytest.raises(ValueError):
        interpolation_inequalities(SmoothConvex(1.0), [])


# -- verification ---------------------------------------------------------------

def test_quadratic_passes_its_class():
    xs = [np.zeros(2), np.array([1.0, 0.0]), np.array([2.0, 0.0])]
    res = verify_interpolation(SmoothConvex(1.0), quad_points(1.0, xs), 1e-12)
    assert res.passed


def test_quadratic_fails_smaller_modulus():
    xs = [np.zeros(2), np.array([1.0, 0.0]), np.array([2.0, 0.0])]
    res = verify_interpolation(SmoothConvex(0.5), quad_points(1.0, xs), 1e-9)
    assert not res.passed
    assert res.worst_violation > 0.1


def test_empty_passes_vacuously():
    assert verify_interpolation(SmoothConvex(1.0), [], 0.0).passed


def test_dimension_mismatch():
    pts = [InterpolationPoint(np.zeros(2), np.zeros(2), 0.0),
           InterpolationPoint(np.zeros(3), np.zeros(3), 0.0)]
    with pytest.raises(ValueError):
        verify_interpolation(SmoothConvex(1.0), pts, 0.0)


def test_negative_tolerance_rejected():
    with pytest.raises(ValueError):
        verify_interpolation(SmoothConvex(1.0), [], -1.0)


def test_random_convex_quadratics(rng):
    L = 1.0
    for _ in range(10):
        d = 4
        w = rng.uniform(0.0, L, size=d)
        Q = np.diag(w)
        xs = rng.standard_normal((5, d))
        pts = [InterpolationPoint(x, Q @ x, 0.5 * x @ Q @ x) for x in xs]
        assert verify_interpolation(SmoothConvex(L), pts, 1e-9).passed
        assert verify_interpolation(SmoothStronglyConvex(0.0, L), pts, 1e-9).passed


def test_concave_quadratic_passes_nonconvex_pairwise(rng):
    L = 1.0
    xs = rng.standard_normal((5, 3))
    pts = [InterpolationPoint(x, -L * x, -0.5 * L * x @ x) for x in xs]
    assert verify_interpolation(SmoothNonconvex(L), pts, 1e-9).passed


def test_weakly_convex_verifier_checks_gradient_caps():
    pts = [InterpolationPoint(np.zeros(1), np.array([3.0]), 0.0)]
    res = verify_interpolation(WeaklyConvexBounded(1.0, 1.0), pts, 1e-9)
    assert not res.passed
    assert res.worst_pair == (0,)


def test_worst_pair_reported():
    xs = [np.zeros(2), np.array([1.0, 0.0])]
    res = verify_interpolation(SmoothConvex(0.5), quad_points(1.0, xs), 1e-9)
    assert res.worst_pair in ((0, 1), (1, 0))
