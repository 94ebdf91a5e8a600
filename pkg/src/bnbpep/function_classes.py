"""Quadratic representability inequalities for the supported function classes.

Each class yields a finite family of inequalities on triples (x_i, g_i, f_i)
that is either exactly interpolating (smooth convex / strongly convex /
smooth nonconvex) or sufficient-only (weakly convex with bounded
subgradients, which has no known interpolation theorem; worst cases built
on it are upper bounds).

Constraints are emitted structurally, as coefficients on the f-values and
on the (A, Atilde, B, C) trace blocks of :mod:`bnbpep.gram`, so SDP
builders can assemble them against any iterate parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gram import STAR, is_star, sym_outer

__all__ = [
    "SmoothConvex",
    "SmoothStronglyConvex",
    "SmoothNonconvex",
    "WeaklyConvexBounded",
    "InterpolationPoint",
    "QuadConstraint",
    "interpolation_inequalities",
    "verify_interpolation",
]


# ---------------------------------------------------------------------------
# classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothConvex:
    L: float

    def __post_init__(self):
        if not 0 < self.L < np.inf:
            raise ValueError(f"need 0 < L < inf, got L={self.L}")


@dataclass(frozen=True)
class SmoothStronglyConvex:
    mu: float
    L: float

    def __post_init__(self):
        if not (0 <= self.mu < self.L < np.inf):
            raise ValueError(f"need 0 <= mu < L < inf, got mu={self.mu}, L={self.L}")


@dataclass(frozen=True)
class SmoothNonconvex:
    L: float

    def __post_init__(self):
        if not 0 < self.L < np.inf:
            raise ValueError(f"need 0 < L < inf, got L={self.L}")


@dataclass(frozen=True)
class WeaklyConvexBounded:
    rho: float
    L: float

    def __post_init__(self):
        if self.rho <= 0 or self.L <= 0:
            raise ValueError(f"need rho > 0 and L > 0, got rho={self.rho}, L={self.L}")


@dataclass(frozen=True)
class InterpolationPoint:
    x: np.ndarray
    g: np.ndarray
    f: float


# ---------------------------------------------------------------------------
# structural constraints
# ---------------------------------------------------------------------------

@dataclass
class QuadConstraint:
    """One inequality:  sum_i f_coeffs[i] * f_i + sum tr(G * block) <= rhs.

    ``blocks`` maps ("A" | "Atilde" | "B" | "C" | "GSQ", key) to a scalar
    coefficient, where key is an ordered index pair (or a single index for
    GSQ, the squared-gradient block g_i (.) g_i).  ``tight`` records
    whether the family is interpolating or merely sufficient.
    """

    label: str
    key: tuple
    f_coeffs: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)
    rhs: float = 0.0
    tight: bool = True


def interpolation_inequalities(fclass, indices) -> list[QuadConstraint]:
    """Inequality family of ``fclass`` over an index set (star allowed)."""
    indices = list(indices)
    if not indices:
        raise ValueError("index set must be nonempty")
    pairs = [(i, j) for i in indices for j in indices if i is not j]
    cons: list[QuadConstraint] = []

    if isinstance(fclass, SmoothStronglyConvex):
        # handled in the mu-reparametrized smooth-convex form; the iterate
        # parameterization upstream absorbs the curvature shift
        eff = SmoothConvex(fclass.L - fclass.mu)
        out = interpolation_inequalities(eff, indices)
        return out

    if isinstance(fclass, SmoothConvex):
        L = fclass.L
        for i, j in pairs:
            cons.append(QuadConstraint(
                "pair", (i, j),
                f_coeffs={j: 1.0, i: -1.0},
                blocks={("A", (i, j)): 1.0, ("C", (i, j)): 1.0 / (2 * L)},
            ))
        return cons

    if isinstance(fclass, SmoothNonconvex):
        L = fclass.L
        for i, j in pairs:
            cons.append(QuadConstraint(
                "pair", (i, j),
                f_coeffs={j: 1.0, i: -1.0},
                blocks={
                    ("B", (i, j)): -L / 4.0,
                    ("Atilde", (i, j)): 0.5,
                    ("C", (i, j)): 1.0 / (4 * L),
                },
            ))
        if any(is_star(i) for i in indices):
            for i in indices:
                if is_star(i):
                    continue
                # f_star <= f_i - (1/2L) ||g_i||^2
                cons.append(QuadConstraint(
                    "star_lower", (i, STAR),
                    f_coeffs={STAR: 1.0, i: -1.0},
                    blocks={("GSQ", i): 1.0 / (2 * L)},
                ))
        return cons

    if isinstance(fclass, WeaklyConvexBounded):
        rho, L = fclass.rho, fclass.L
        for i, j in pairs:
            cons.append(QuadConstraint(
                "pair", (i, j),
                f_coeffs={j: 1.0, i: -1.0},
                blocks={("A", (i, j)): 1.0, ("B", (i, j)): -rho / 2.0},
                tight=False,
            ))
        for i in indices:
            cons.append(QuadConstraint(
                "grad_bound", (i,),
                blocks={("GSQ", i): 1.0},
                rhs=L * L,
                tight=False,
            ))
        return cons

    raise ValueError(f"unsupported function class {fclass!r}")


# ---------------------------------------------------------------------------
# numeric verification
# ---------------------------------------------------------------------------

@dataclass
class VerifyResult:
    passed: bool
    worst_violation: float
    worst_pair: tuple | None


def verify_interpolation(fclass, points: list[InterpolationPoint],
                         tol: float) -> VerifyResult:
    """Check discrete data against the class inequalities.

    Star-specific families (minimality lower bounds) are not checked here;
    only the pairwise family and, for bounded-subgradient classes, the
    gradient-norm caps.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if not points:
        return VerifyResult(True, 0.0, None)
    d = np.asarray(points[0].x).shape
    for p in points:
        if np.asarray(p.x).shape != d or np.asarray(p.g).shape != d:
            raise ValueError("points have mismatched dimensions")

    if isinstance(fclass, SmoothStronglyConvex):
        # check the direct F_{mu,L} pairwise inequality
        mu, L = fclass.mu, fclass.L
        worst, arg = -np.inf, None
        for a, pi in enumerate(points):
            for b, pj in enumerate(points):
                if a == b:
                    continue
                dx = pi.x - pj.x
                dg = pi.g - pj.g
                rhs = (
                    pj.f + pj.g @ dx
                    + 0.5 / (L - mu) * (
                        (1.0 / L) * dg @ dg
                        + mu * dx @ dx
                        - 2.0 * (mu / L) * dg @ dx
                    )
                )
                v = rhs - pi.f
                if v > worst:
                    worst, arg = v, (a, b)
        return VerifyResult(worst <= tol, float(worst), arg)

    worst, arg = -np.inf, None

    def track(v, key):
        nonlocal worst, arg
        if v > worst:
            worst, arg = v, key

    for a, pi in enumerate(points):
        for b, pj in enumerate(points):
            if a == b:
                continue
            dx = pi.x - pj.x
            dg = pi.g - pj.g
            if isinstance(fclass, SmoothConvex):
                v = pj.f + pj.g @ dx + dg @ dg / (2 * fclass.L) - pi.f
            elif isinstance(fclass, SmoothNonconvex):
                L = fclass.L
                v = (pj.f - (L / 4) * dx @ dx + 0.5 * (pi.g + pj.g) @ dx
                     + dg @ dg / (4 * L) - pi.f)
            elif isinstance(fclass, WeaklyConvexBounded):
                v = pj.f + pj.g @ dx - (fclass.rho / 2) * dx @ dx - pi.f
            else:
                raise ValueError(f"unsupported function class {fclass!r}")
            track(v, (a, b))
    if isinstance(fclass, WeaklyConvexBounded):
        for a, pi in enumerate(points):
            track(pi.g @ pi.g - fclass.L ** 2, (a,))
    return VerifyResult(worst <= tol, float(worst), arg)


def gsq_matrix(basis, i) -> np.ndarray:
    """The g_i (.) g_i block referenced by GSQ terms."""
    g = basis.g(i)
    return sym_outer(g, g)
