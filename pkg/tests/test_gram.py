"""Selector bases, symmetric outer products, and stepsize-basis algebra."""

import numpy as np
import pytest

from bnbpep.gram import (
    STAR,
    Basis,
    Preset,
    StepsizeSchedule,
    constraint_matrices,
    eval_matrix_poly,
    selector_basis,
    stepsize_convert,
    sym_outer,
    sym_outer_poly,
    VecPoly,
    tri_pairs,
)


def e(k, n):
    v = np.zeros(n)
    v[k] = 1.0
    return v


# -- selector bases ---------------------------------------------------------

def test_selector_basis_anchored_N1():
    b = selector_basis(1)
    assert (b.n, b.m) == (3, 2)
    assert np.array_equal(b.x0(), e(0, 3))
    assert np.array_equal(b.g(0), e(1, 3))
    assert np.array_equal(b.g(1), e(2, 3))
    assert np.array_equal(b.f(0), e(0, 2))
    assert np.array_equal(b.f(1), e(1, 2))
    assert not b.g(STAR).any()
    assert not b.f(STAR).any()


def test_selector_basis_potential_block():
    b = selector_basis(0, "potential_block")
    assert (b.n, b.m) == (5, 4)
    assert np.array_equal(b.x0(), e(0, 5))
    for i in range(4):
        assert np.array_equal(b.g(i), e(i + 1, 5))


def test_selector_basis_rejects_N0():
    with pytest.raises(ValueError):
        selector_basis(0, "anchored")


def test_selectors_orthonormal():
    b = selector_basis(3)
    gs = np.stack([b.g(i) for i in range(4)])
    assert np.allclose(gs @ gs.T, np.eye(4))


# -- symmetric outer product --------------------------------------------------

def test_sym_outer_unit_cases():
    assert np.array_equal(sym_outer(e(0, 2), e(0, 2)), [[1, 0], [0, 0]])
    assert np.array_equal(sym_outer(e(0, 2), e(1, 2)), [[0, 0.5], [0.5, 0]])


def test_sym_outer_direct_evaluation():
    u, v = np.array([1.0, 2.0]), np.array([3.0, 0.0])
    assert np.array_equal(sym_outer(u, v), [[3, 3], [3, 0]])


def test_sym_outer_length_mismatch():
    with pytest.raises(ValueError):
        sym_outer(np.ones(2), np.ones(3))


def test_sym_outer_bilinearity(rng):
    for _ in range(20):
        u, v, w = rng.standard_normal((3, 5))
        a, b = rng.standard_normal(2)
        lhs = sym_outer(a * u + b * v, w)
        rhs = a * sym_outer(u, w) + b * sym_outer(v, w)
        assert np.allclose(lhs, rhs, atol=1e-12)


# -- constraint matrices -------------------------------------------------------

def test_constraint_matrices_C10_mu0():
    basis = selector_basis(1)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.0, 1.0))
    d = e(2, 3) - e(1, 3)
    assert np.allclose(blocks[(1, 0)].C, np.outer(d, d))


def test_iterate_carries_mu_factor():
    # with strong convexity the anchor coefficient shrinks by mu/L per step
    basis = selector_basis(1)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.1, 1.0))
    B = blocks[(1, STAR)].B  # x_1 (.) x_1
    # entry (0,0) is (1 - 0.1 a)^2 = 1 - 0.2 a + 0.01 a^2
    cst, lin, quad = B.entry_terms(0, 0)
    assert cst == pytest.approx(1.0)
    assert lin[0] == pytest.approx(-0.2)
    assert quad[(0, 0)] == pytest.approx(0.01)


def test_a_vector_star_row():
    basis = selector_basis(1)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.0, 1.0))
    assert np.array_equal(blocks[(STAR, 1)].a, basis.f(1))


@pytest.mark.parametrize("preset,params", [
    (Preset.SC_GRAD, (0.1, 1.0)),
    (Preset.NONCONVEX_GRAD, (0.0, 1.0)),
    (Preset.GD_NOMOMENTUM, (0.0, 1.0)),
])
def test_trace_identities_against_explicit_iterates(preset, params, rng):
    """tr(G * block) must reproduce the inner products of explicitly
    reconstructed iterates (an independent numeric oracle)."""
    N = 3
    basis = selector_basis(N)
    blocks = constraint_matrices(basis, None, preset, params)
    nvars = {Preset.SC_GRAD: N * (N + 1) // 2,
             Preset.NONCONVEX_GRAD: N * (N + 1) // 2,
             Preset.GD_NOMOMENTUM: N}[preset]
    point = rng.standard_normal(nvars) * 0.7
    mu, L = params

    # explicit reconstruction of the selector vectors
    x = {STAR: np.zeros(basis.n), 0: basis.x0()}
    for i in range(1, N + 1):
        xi = basis.x0().copy()
        for j in range(i):
            if preset is Preset.SC_GRAD:
                a = point[(i - 1) * i // 2 + j]
                xi += a * (-(mu / L) * basis.x0() - basis.g(j) / L)
            elif preset is Preset.NONCONVEX_GRAD:
                xi -= point[(i - 1) * i // 2 + j] * basis.g(j) / L
            else:
                xi -= point[j] * basis.g(j) / L
        x[i] = xi

    Q = rng.standard_normal((basis.n, basis.n))
    G = Q.T @ Q
    idx = list(range(N + 1)) + [STAR]
    for i in idx:
        for j in idx:
            if i is j:
                continue
            blk = blocks[(i, j)]
            dx = x[i] - x[j]
            gj = basis.g(j)
            want_A = gj @ G @ dx
            want_B = dx @ G @ dx
            assert np.trace(G @ blk.A.eval(point)) == pytest.approx(want_A, abs=1e-9)
            assert np.trace(G @ blk.B.eval(point)) == pytest.approx(want_B, abs=1e-9)


def test_constraint_matrices_basis_mismatch():
    basis = selector_basis(1)
    sched = StepsizeSchedule.gradient_descent(1, Basis.H, (0.1, 1.0))
    with pytest.raises(ValueError):
        constraint_matrices(basis, sched, Preset.SC_GRAD)


# -- stepsize conversions -------------------------------------------------------

def test_convert_single_step_all_bases():
    for mu in (0.0, 0.3):
        s = StepsizeSchedule.from_matrix([[0.77]], Basis.H, (mu, 1.0))
        assert stepsize_convert(s, Basis.HBAR).get(1, 0) == pytest.approx(0.77)
        assert stepsize_convert(s, Basis.ALPHA).get(1, 0) == pytest.approx(0.77)


def test_convert_hbar_accumulates():
    s = StepsizeSchedule.from_matrix([[1.0, 0.0], [0.25, 1.0]], Basis.H, (0.0, 1.0))
    hbar = stepsize_convert(s, Basis.HBAR)
    assert hbar.get(2, 0) == pytest.approx(1.0 + 0.25)


def test_convert_alpha_hand_computed():
    # h = {h10=1, h21=1, h20=0}, mu=0.1:  a20 = a10 + 0 - 0.1 * h21 * a10
    s = StepsizeSchedule.from_matrix([[1.0, 0.0], [0.0, 1.0]], Basis.H, (0.1, 1.0))
    alpha = stepsize_convert(s, Basis.ALPHA)
    assert alpha.get(2, 0) == pytest.approx(0.9)
    assert alpha.get(2, 1) == pytest.approx(1.0)


def test_convert_roundtrips(rng):
    for mu in (0.0, 0.1, 0.5):
        for N in (1, 3, 6, 10):
            rows = tuple(tuple(rng.standard_normal()) if False else
                         tuple(float(v) for v in rng.standard_normal(i + 1))
                         for i in range(N))
            s = StepsizeSchedule(N, Basis.H, rows, (mu, 1.0))
            for target in (Basis.HBAR, Basis.ALPHA):
                there = stepsize_convert(s, target)
                back = stepsize_convert(there, Basis.H)
                assert np.allclose(back.as_matrix(), s.as_matrix(), atol=1e-12)
            chained = stepsize_convert(
                stepsize_convert(stepsize_convert(s, Basis.ALPHA), Basis.HBAR),
                Basis.H)
            assert np.allclose(chained.as_matrix(), s.as_matrix(), atol=1e-12)


def test_mu_zero_alpha_equals_hbar(rng):
    N = 5
    rows = tuple(tuple(float(v) for v in rng.standard_normal(i + 1))
                 for i in range(N))
    s = StepsizeSchedule(N, Basis.H, rows, (0.0, 1.0))
    assert np.allclose(stepsize_convert(s, Basis.ALPHA).as_matrix(),
                       stepsize_convert(s, Basis.HBAR).as_matrix(), atol=1e-14)


def test_convert_requires_class_params():
    s = StepsizeSchedule.from_matrix([[1.0]], Basis.H)
    with pytest.raises(ValueError):
        stepsize_convert(s, Basis.ALPHA)


# -- polynomial evaluation -------------------------------------------------------

def test_eval_constant_poly():
    from bnbpep.gram import MatrixPoly

    M = np.array([[2.0, 1.0], [1.0, 0.0]])
    mp = MatrixPoly.constant(M)
    assert np.array_equal(eval_matrix_poly(mp, np.zeros(1)), M)
    assert np.array_equal(eval_matrix_poly(mp, np.array([5.0])), M)


def test_eval_B_at_zero_steps_is_anchor():
    basis = selector_basis(2)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.0, 1.0))
    B = blocks[(2, STAR)].B
    out = eval_matrix_poly(B, np.zeros(3))
    want = np.zeros((4, 4))
    want[0, 0] = 1.0
    assert np.allclose(out, want)


def test_eval_A_substitution():
    basis = selector_basis(1)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.0, 1.0))
    A = blocks[(1, 0)].A  # g_0 (.) (x_1 - x_0) = g_0 (.) (-a g_0)
    out = eval_matrix_poly(A, np.array([2.0]))
    want = np.zeros((3, 3))
    want[1, 1] = -2.0
    assert np.allclose(out, want)


def test_eval_missing_variable_errors():
    basis = selector_basis(2)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.0, 1.0))
    with pytest.raises(ValueError):
        blocks[(2, 0)].B.eval(np.zeros(1))


def test_eval_symmetry_and_trace_sign(rng):
    basis = selector_basis(2)
    blocks = constraint_matrices(basis, None, Preset.SC_GRAD, (0.1, 1.0))
    point = rng.standard_normal(3)
    Q = rng.standard_normal((4, 4))
    G = Q.T @ Q  # PSD
    for (i, j), blk in blocks.items():
        A = blk.A.eval(point)
        assert np.allclose(A, A.T, atol=1e-12)
        assert np.trace(G @ blk.B.eval(point)) >= -1e-9


def test_sym_outer_poly_matches_numeric(rng):
    n = 4
    for _ in range(10):
        u = VecPoly(rng.standard_normal(n), {0: rng.standard_normal(n)})
        v = VecPoly(rng.standard_normal(n), {0: rng.standard_normal(n),
                                             1: rng.standard_normal(n)})
        mp = sym_outer_poly(u, v)
        pt = rng.standard_normal(2)
        want = sym_outer(u.eval(pt), v.eval(pt))
        assert np.allclose(mp.eval(pt), want, atol=1e-12)


def test_tri_pairs_row_major():
    assert tri_pairs(3) == [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]
