"""Gram-basis bookkeeping for performance estimation.

All worst-case quantities of a fixed-step first-order method reduce to
traces against a Gram matrix G plus affine terms in a vector F of function
values.  This module provides the selector vectors spanning that basis, the
symmetric outer product, and the stepsize-parameterized coefficient matrices

    A_{i,j} = g_j (.) (x_i - x_j)          <g_j, x_i - x_j> = tr(G A_{i,j})
    B_{i,j} = (x_i - x_j) (.) (x_i - x_j)  ||x_i - x_j||^2  = tr(G B_{i,j})
    C_{i,j} = (g_i - g_j) (.) (g_i - g_j)  ||g_i - g_j||^2  = tr(G C_{i,j})
    a_{i,j} = f_j - f_i                    f_j - f_i        = F @ a_{i,j}

where (.) is the symmetric outer product.  Because iterates are affine in
the stepsize coefficients, A is affine and B is quadratic in them; entries
are stored as sparse degree-<=2 polynomials keyed by stepsize-variable
index so that downstream QCQP assembly can read off bilinear terms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "STAR",
    "Basis",
    "Preset",
    "GramBasis",
    "StepsizeSchedule",
    "MatrixPoly",
    "VecPoly",
    "ConstraintBlock",
    "selector_basis",
    "sym_outer",
    "sym_outer_poly",
    "constraint_matrices",
    "stepsize_convert",
    "eval_matrix_poly",
    "tri_index",
    "tri_pairs",
]


class _Star:
    """Index of the optimal point; its selectors are identically zero."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "star"

    def __lt__(self, other):  # sort after all integer indices
        return False

    def __gt__(self, other):
        return not isinstance(other, _Star)


STAR = _Star()

Index = "int | _Star"


def is_star(i) -> bool:
    return isinstance(i, _Star)


class Basis(enum.Enum):
    """Stepsize coordinate systems for the same method."""

    H = "h"          # incremental: x_i = x_{i-1} - (1/L) sum_j h_{i,j} g_j
    HBAR = "hbar"    # anchored:    x_i = x_0 - (1/L) sum_j hbar_{i,j} g_j
    ALPHA = "alpha"  # mu-reparametrized anchored coefficients


class Preset(enum.Enum):
    SC_GRAD = "sc-grad"                # grad norm of smooth strongly convex
    GD_NOMOMENTUM = "gd-nomomentum"    # function gap, per-step scalar steps
    NONCONVEX_GRAD = "nonconvex-grad"  # min grad norm, smooth nonconvex
    WC_POTENTIAL = "wc-potential"      # Moreau stationarity, weakly convex


# ---------------------------------------------------------------------------
# stepsize variable indexing (row-major over the lower triangle; fixed
# everywhere, including the lifted-relaxation vectorization)
# ---------------------------------------------------------------------------

def tri_index(i: int, j: int) -> int:
    """Position of coefficient (i, j), 0 <= j < i, in the row-major order."""
    if not 0 <= j < i:
        raise ValueError(f"need 0 <= j < i, got ({i}, {j})")
    return (i - 1) * i // 2 + j


def tri_pairs(N: int):
    """All (i, j) with 0 <= j < i <= N in row-major order."""
    return [(i, j) for i in range(1, N + 1) for j in range(i)]


def step_variable_names(preset: Preset, N: int) -> list[str]:
    """Decision-variable names for the preset's stepsize parameterization."""
    if preset is Preset.SC_GRAD:
        return [f"alpha[{i},{j}]" for i, j in tri_pairs(N)]
    if preset is Preset.NONCONVEX_GRAD:
        return [f"hbar[{i},{j}]" for i, j in tri_pairs(N)]
    if preset is Preset.GD_NOMOMENTUM:
        return [f"h[{k}]" for k in range(N)]
    if preset is Preset.WC_POTENTIAL:
        return ["h"]
    raise ValueError(preset)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepsizeSchedule:
    """Lower-triangular stepsize table of an N-step method in one basis.

    ``rows[i-1][j]`` holds the coefficient (i, j) for 0 <= j < i <= N.
    ``class_params = (mu, L)`` is required whenever the ALPHA basis is
    involved in a conversion.
    """

    N: int
    basis: Basis
    rows: tuple[tuple[float, ...], ...]
    class_params: tuple[float, float] | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("schedule needs N >= 1")
        if len(self.rows) != self.N or any(
            len(r) != i + 1 for i, r in enumerate(self.rows)
        ):
            raise ValueError("rows must form a lower triangle with row i of length i")

    @staticmethod
    def from_matrix(mat, basis: Basis, class_params=None) -> "StepsizeSchedule":
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        N = mat.shape[0]
        rows = tuple(tuple(float(mat[i, j]) for j in range(i + 1)) for i in range(N))
        return StepsizeSchedule(N, basis, rows, class_params)

    @staticmethod
    def diagonal(values, basis: Basis = Basis.H, class_params=None) -> "StepsizeSchedule":
        """Schedule with coefficient (i, i-1) = values[i-1] and zeros elsewhere."""
        values = list(map(float, np.atleast_1d(values)))
        N = len(values)
        rows = tuple(
            tuple((values[i] if j == i else 0.0) for j in range(i + 1))
            for i in range(N)
        )
        return StepsizeSchedule(N, basis, rows, class_params)

    @staticmethod
    def gradient_descent(N: int, basis: Basis = Basis.H, class_params=None):
        """The unit-stepsize warm start: coefficient 1 on the subdiagonal."""
        return StepsizeSchedule.diagonal([1.0] * N, basis, class_params)

    def get(self, i: int, j: int) -> float:
        return self.rows[i - 1][j]

    def as_matrix(self) -> np.ndarray:
        mat = np.zeros((self.N, self.N))
        for i in range(1, self.N + 1):
            for j in range(i):
                mat[i - 1, j] = self.get(i, j)
        return mat

    def as_vector(self) -> np.ndarray:
        """Row-major triangle, matching the stepsize-variable indexing."""
        return np.array([self.get(i, j) for i, j in tri_pairs(self.N)])

    def diagonal_values(self) -> np.ndarray:
        return np.array([self.get(i, i - 1) for i in range(1, self.N + 1)])

    def is_diagonal(self, tol: float = 0.0) -> bool:
        return all(
            abs(self.get(i, j)) <= tol
            for i in range(1, self.N + 1)
            for j in range(i - 1)
        )


def _require_params(schedule: StepsizeSchedule) -> tuple[float, float]:
    if schedule.class_params is None:
        raise ValueError("conversion to/from the ALPHA basis needs class_params (mu, L)")
    mu, L = schedule.class_params
    if not 0 <= mu < L:
        raise ValueError(f"need 0 <= mu < L, got mu={mu}, L={L}")
    return mu, L


def stepsize_convert(schedule: StepsizeSchedule, target: Basis) -> StepsizeSchedule:
    """Exact change of stepsize basis by triangular forward/back-substitution."""
    if schedule.basis is target:
        return schedule
    N = schedule.N
    g = schedule.get
    out = [[0.0] * (i + 1) for i in range(N)]

    def done():
        return replace(schedule, basis=target, rows=tuple(tuple(r) for r in out))

    if schedule.basis is Basis.H and target is Basis.HBAR:
        for i in range(1, N + 1):
            for j in range(i):
                prev = out[i - 2][j] if j <= i - 2 else 0.0
                out[i - 1][j] = g(i, j) + prev if j <= i - 2 else g(i, j)
        return done()
    if schedule.basis is Basis.HBAR and target is Basis.H:
        for i in range(1, N + 1):
            for j in range(i):
                prev = g(i - 1, j) if j <= i - 2 else 0.0
                out[i - 1][j] = g(i, j) - prev
        return done()
    if schedule.basis is Basis.H and target is Basis.ALPHA:
        mu, L = _require_params(schedule)
        for i in range(1, N + 1):
            for j in range(i):
                if j == i - 1:
                    out[i - 1][j] = g(i, j)
                else:
                    corr = sum(g(i, k) * out[k - 1][j] for k in range(j + 1, i))
                    out[i - 1][j] = out[i - 2][j] + g(i, j) - (mu / L) * corr
        return done()
    if schedule.basis is Basis.ALPHA and target is Basis.H:
        mu, L = _require_params(schedule)
        for i in range(1, N + 1):
            for j in range(i - 1, -1, -1):
                if j == i - 1:
                    out[i - 1][j] = g(i, j)
                else:
                    corr = sum(out[i - 1][k] * g(k, j) for k in range(j + 1, i))
                    out[i - 1][j] = g(i, j) - g(i - 1, j) + (mu / L) * corr
        return done()
    # remaining conversions go through H
    return stepsize_convert(stepsize_convert(schedule, Basis.H), target)


# ---------------------------------------------------------------------------
# polynomials over stepsize variables
# ---------------------------------------------------------------------------

def _canon(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i <= j else (j, i)


@dataclass
class VecPoly:
    """Vector whose entries are affine in the stepsize variables."""

    const: np.ndarray
    lin: dict[int, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def constant(v: np.ndarray) -> "VecPoly":
        return VecPoly(np.asarray(v, dtype=float))

    def __add__(self, other: "VecPoly") -> "VecPoly":
        lin = {k: v.copy() for k, v in self.lin.items()}
        for k, v in other.lin.items():
            lin[k] = lin.get(k, 0.0) + v
        return VecPoly(self.const + other.const, lin)

    def __sub__(self, other: "VecPoly") -> "VecPoly":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "VecPoly":
        return VecPoly(a * self.const, {k: a * v for k, v in self.lin.items()})

    def add_term(self, var: int, vec: np.ndarray) -> None:
        self.lin[var] = self.lin.get(var, 0.0) + np.asarray(vec, dtype=float)

    def eval(self, point: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for k, v in self.lin.items():
            out += point[k] * v
        return out


@dataclass
class MatrixPoly:
    """Symmetric matrix with degree-<=2 polynomial entries.

    Stored as a constant part plus sparse linear/quadratic coefficient maps
    keyed by stepsize-variable index (pairs canonicalized with i <= j).
    """

    dim: int
    const: np.ndarray = None
    lin: dict[int, np.ndarray] = field(default_factory=dict)
    quad: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.const is None:
            self.const = np.zeros((self.dim, self.dim))

    @staticmethod
    def constant(mat: np.ndarray) -> "MatrixPoly":
        mat = np.asarray(mat, dtype=float)
        return MatrixPoly(mat.shape[0], mat.copy())

    def degree(self) -> int:
        if any(np.any(m != 0) for m in self.quad.values()):
            return 2
        if any(np.any(m != 0) for m in self.lin.values()):
            return 1
        return 0

    def __add__(self, other: "MatrixPoly") -> "MatrixPoly":
        out = MatrixPoly(self.dim, self.const + other.const)
        for src in (self.lin, other.lin):
            for k, m in src.items():
                out.lin[k] = out.lin.get(k, 0.0) + m
        for src in (self.quad, other.quad):
            for k, m in src.items():
                out.quad[k] = out.quad.get(k, 0.0) + m
        return out

    def __sub__(self, other: "MatrixPoly") -> "MatrixPoly":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "MatrixPoly":
        return MatrixPoly(
            self.dim,
            a * self.const,
            {k: a * m for k, m in self.lin.items()},
            {k: a * m for k, m in self.quad.items()},
        )

    def eval(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        needed = set(self.lin)
        for i, j in self.quad:
            needed.update((i, j))
        if needed and point.size <= max(needed):
            raise ValueError(
                f"point of length {point.size} does not cover variable "
                f"index {max(needed)}"
            )
        out = self.const.copy()
        for k, m in self.lin.items():
            out += point[k] * m
        for (i, j), m in self.quad.items():
            out += point[i] * point[j] * m
        return out

    def entry_terms(self, r: int, c: int):
        """(const, {var: coef}, {(v1,v2): coef}) of the (r, c) entry."""
        cst = float(self.const[r, c])
        lin = {k: float(m[r, c]) for k, m in self.lin.items() if m[r, c] != 0.0}
        quad = {k: float(m[r, c]) for k, m in self.quad.items() if m[r, c] != 0.0}
        return cst, lin, quad


def sym_outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """u (.) v = (u v^T + v u^T) / 2."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return 0.5 * (np.outer(u, v) + np.outer(v, u))


def sym_outer_poly(u: VecPoly, v: VecPoly) -> MatrixPoly:
    """Symmetric outer product of two affine vector polynomials."""
    dim = u.const.shape[0]
    out = MatrixPoly(dim, sym_outer(u.const, v.const))
    for k, vec in v.lin.items():
        out.lin[k] = out.lin.get(k, 0.0) + sym_outer(u.const, vec)
    for k, vec in u.lin.items():
        out.lin[k] = out.lin.get(k, 0.0) + sym_outer(vec, v.const)
    for ku, mu_vec in u.lin.items():
        for kv, nv_vec in v.lin.items():
            key = _canon(ku, kv)
            out.quad[key] = out.quad.get(key, 0.0) + sym_outer(mu_vec, nv_vec)
    return out


# ---------------------------------------------------------------------------
# selector bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GramBasis:
    """Orthonormal selectors for iterates, (sub)gradients, and values.

    ``n`` is the Gram dimension, ``m`` the function-value dimension.  The
    star index maps to all-zero selectors.  For anchored problems the
    iterate selectors with index >= 1 depend on the stepsizes and are
    produced by :func:`constraint_matrices`; only x_0 lives here.
    """

    n: int
    m: int
    layout: str  # "anchored" | "potential_block"
    indices: tuple

    def e(self, k: int) -> np.ndarray:
        v = np.zeros(self.n)
        v[k] = 1.0
        return v

    def x0(self) -> np.ndarray:
        return self.e(0)

    def g(self, i) -> np.ndarray:
        if is_star(i):
            return np.zeros(self.n)
        return self.e(i + 1)

    def f(self, i) -> np.ndarray:
        if is_star(i):
            return np.zeros(self.m)
        v = np.zeros(self.m)
        v[i] = 1.0
        return v

    def a(self, i, j) -> np.ndarray:
        """a_{i,j} = f_j - f_i."""
        return self.f(j) - self.f(i)


def selector_basis(N: int, layout: str = "anchored") -> GramBasis:
    """Selector vectors for the anchored (N+2 / N+1) or the fixed per-step
    potential-block (5 / 4) Gram spaces."""
    if layout == "anchored":
        if N < 1:
            raise ValueError("anchored layout needs N >= 1")
        return GramBasis(N + 2, N + 1, layout, tuple(range(N + 1)) + (STAR,))
    if layout == "potential_block":
        return GramBasis(5, 4, layout, (0, 1, 2, 3, STAR))
    raise ValueError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------
# constraint matrices
# ---------------------------------------------------------------------------

@dataclass
class ConstraintBlock:
    """The (A, B, C, a) data of one index pair, plus the symmetrized
    A-tilde variant used by the nonconvex interpolation inequalities."""

    A: MatrixPoly
    B: MatrixPoly
    C: np.ndarray
    a: np.ndarray
    Atilde: MatrixPoly | None = None


_PRESET_BASIS = {
    Preset.SC_GRAD: Basis.ALPHA,
    Preset.GD_NOMOMENTUM: Basis.H,
    Preset.NONCONVEX_GRAD: Basis.HBAR,
    Preset.WC_POTENTIAL: Basis.H,
}


def iterate_selectors(basis: GramBasis, preset: Preset, N: int,
                      class_params=None) -> dict:
    """Iterate selector vectors as affine polynomials in the stepsize
    variables, per the preset's parameterization."""
    x = {STAR: VecPoly.constant(np.zeros(basis.n))}
    if preset is Preset.WC_POTENTIAL:
        # per-step block over points (w_0, w_1, w_2, w_3); single variable h
        w0 = VecPoly.constant(basis.x0())
        w1 = VecPoly.constant(basis.x0())
        w1.add_term(0, -basis.g(0))
        w2 = w0 - VecPoly.constant(0.5 * basis.g(2))
        w3 = w1 - VecPoly.constant(0.5 * basis.g(3))
        x.update({0: w0, 1: w1, 2: w2, 3: w3})
        return x

    x[0] = VecPoly.constant(basis.x0())
    if preset is Preset.SC_GRAD:
        mu, L = class_params
        for i in range(1, N + 1):
            xi = VecPoly.constant(basis.x0())
            for j in range(i):
                v = tri_index(i, j)
                xi.add_term(v, -(mu / L) * basis.x0() - (1.0 / L) * basis.g(j))
            x[i] = xi
    elif preset is Preset.NONCONVEX_GRAD:
        _, L = class_params
        for i in range(1, N + 1):
            xi = VecPoly.constant(basis.x0())
            for j in range(i):
                xi.add_term(tri_index(i, j), -(1.0 / L) * basis.g(j))
            x[i] = xi
    elif preset is Preset.GD_NOMOMENTUM:
        _, L = class_params
        for i in range(1, N + 1):
            xi = VecPoly.constant(basis.x0())
            for j in range(i):
                # variable k is the scalar step applied at iteration k
                xi.add_term(j, -(1.0 / L) * basis.g(j))
            x[i] = xi
    else:
        raise ValueError(preset)
    return x


def constraint_matrices(basis: GramBasis, schedule: StepsizeSchedule | None,
                        preset: Preset, class_params=None) -> dict:
    """All (A, B, C, a) blocks keyed by ordered index pair (i, j), i != j.

    The blocks are symbolic in the preset's stepsize variables; evaluating
    them at a numeric schedule reproduces the inner products of the method's
    iterates.  ``schedule`` (when given) is checked against the preset's
    expected parameterization; its values are not consumed here.
    """
    if schedule is not None:
        want = _PRESET_BASIS[preset]
        if schedule.basis is not want:
            raise ValueError(
                f"{preset.value} expects schedule in basis {want.value!r}, "
                f"got {schedule.basis.value!r}"
            )
        if class_params is None:
            class_params = schedule.class_params
    if preset is Preset.WC_POTENTIAL:
        N = 0  # unused; the block is fixed
        if basis.layout != "potential_block":
            raise ValueError("wc-potential uses the potential_block layout")
    else:
        if basis.layout != "anchored":
            raise ValueError(f"{preset.value} uses the anchored layout")
        N = basis.n - 2
    if class_params is None:
        class_params = (0.0, 1.0)

    x = iterate_selectors(basis, preset, N, class_params)
    indices = basis.indices
    blocks = {}
    for i in indices:
        for j in indices:
            if i is j:
                continue
            gi, gj = basis.g(i), basis.g(j)
            dx = x[i] - x[j]
            A = sym_outer_poly(VecPoly.constant(gj), dx)
            B = sym_outer_poly(dx, dx)
            C = sym_outer(gi - gj, gi - gj)
            At = sym_outer_poly(VecPoly.constant(gi + gj), dx)
            blocks[(i, j)] = ConstraintBlock(A, B, C, basis.a(i, j), At)
    return blocks


def eval_matrix_poly(mp: MatrixPoly, point) -> np.ndarray:
    """Evaluate a matrix polynomial at a stepsize point (row-major order)."""
    return mp.eval(point)
