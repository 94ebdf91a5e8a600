"""Worst-case evaluation of a fixed method: inner primal/dual SDP pair.

For a fixed stepsize schedule, the worst-case performance over the chosen
function class is a semidefinite program in the Gram matrix G and the value
vector F.  Its dual minimizes over multipliers (lambda, nu, and per-preset
tau / eta) and a slack matrix Z; any dual-feasible point is a convergence
proof, so the dual optimum is reported as the rigorous bound whether or not
the primal/dual values coincide.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicBuilder, ConicModel, solve_conic, solve_conic_robust
from .function_classes import (
    SmoothConvex,
    SmoothNonconvex,
    SmoothStronglyConvex,
    WeaklyConvexBounded,
    gsq_matrix,
    interpolation_inequalities,
)
from .gram import (
    STAR,
    Basis,
    MatrixPoly,
    Preset,
    StepsizeSchedule,
    constraint_matrices,
    is_star,
    selector_basis,
    stepsize_convert,
)

__all__ = [
    "ProblemSpec",
    "solve_dual_max_margin",
    "worst_case_gradient",
    "DualCertificate",
    "InnerPair",
    "WorstCase",
    "build_inner_pair",
    "evaluate_worst_case",
    "solve_dual_extremal",
    "ordered_pairs",
]

DUALITY_GAP_WARN = 1e-6


@dataclass(frozen=True)
class ProblemSpec:
    """A problem instance: preset, horizon, class parameters, initial radius."""

    preset: Preset
    N: int
    mu: float = 0.0
    L: float = 1.0
    rho: float = 1.0
    L_tilde: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("need N >= 1")
        if self.R <= 0:
            raise ValueError("need R > 0")
        if self.preset is Preset.SC_GRAD:
            if not 0 <= self.mu < self.L:
                raise ValueError("SC_GRAD needs 0 <= mu < L")
        elif self.preset in (Preset.GD_NOMOMENTUM, Preset.NONCONVEX_GRAD):
            if self.L <= 0:
                raise ValueError("need L > 0")
        elif self.preset is Preset.WC_POTENTIAL:
            if self.rho <= 0 or self.L_tilde <= 0:
                raise ValueError("need rho > 0 and L_tilde > 0")

    @property
    def kappa(self) -> float:
        return self.R / self.L_tilde

    @property
    def performance(self) -> str:
        return {
            Preset.SC_GRAD: "final_gradient_norm_sq",
            Preset.GD_NOMOMENTUM: "final_function_gap",
            Preset.NONCONVEX_GRAD: "min_gradient_norm_sq",
            Preset.WC_POTENTIAL: "mean_moreau_gradient_norm_sq",
        }[self.preset]

    def function_class(self):
        if self.preset is Preset.SC_GRAD:
            return SmoothStronglyConvex(self.mu, self.L)
        if self.preset is Preset.GD_NOMOMENTUM:
            return SmoothConvex(self.L)
        if self.preset is Preset.NONCONVEX_GRAD:
            return SmoothNonconvex(self.L)
        return WeaklyConvexBounded(1.0, self.L_tilde)


def ordered_pairs(indices):
    return [(i, j) for i in indices for j in indices if i is not j]


@dataclass
class DualCertificate:
    """Inner-dual solution proving a worst-case bound for a fixed method."""

    lambdas: dict
    nu: float
    Z: np.ndarray
    objective: float
    tau: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)

    def multiplier_floor(self) -> float:
        vals = [self.nu, *self.lambdas.values(), *self.tau.values(),
                *self.eta.values()]
        return float(min(vals))

    def residuals(self, spec: ProblemSpec, schedule: StepsizeSchedule):
        """(a-equation residual, Z-equation residual), both inf-norms."""
        data = _preset_data(spec, schedule)
        point = _schedule_point(spec, schedule)
        a_res = _a_equation_residual(data, self, spec)
        z_lhs = _z_equation_lhs(data, self, spec, point)
        z_res = float(np.abs(z_lhs - self.Z).max())
        return a_res, z_res


@dataclass
class InnerPair:
    primal: ConicModel
    dual: ConicModel
    pairs: list
    basis: object
    blocks: dict

    def __iter__(self):  # unpacks like (primal, dual)
        return iter((self.primal, self.dual))


@dataclass
class WorstCase:
    value: float
    certificate: DualCertificate
    duality_gap: float
    primal_value: float


# ---------------------------------------------------------------------------
# shared preset data
# ---------------------------------------------------------------------------

@dataclass
class _PresetData:
    basis: object
    blocks: dict
    pairs: list
    point_indices: list  # non-star indices


def _preset_data(spec: ProblemSpec, schedule: StepsizeSchedule | None) -> _PresetData:
    if spec.preset is Preset.WC_POTENTIAL:
        raise ValueError(
            "wc-potential has no anchored inner problem; use the per-step "
            "chain in bnbpep.presets"
        )
    basis = selector_basis(spec.N, "anchored")
    params = (spec.mu, spec.L)
    blocks = constraint_matrices(basis, schedule, spec.preset, class_params=params)
    pairs = ordered_pairs(basis.indices)
    return _PresetData(basis, blocks, pairs, list(range(spec.N + 1)))


def _schedule_point(spec: ProblemSpec, schedule: StepsizeSchedule) -> np.ndarray:
    if spec.preset is Preset.GD_NOMOMENTUM:
        if not schedule.is_diagonal(tol=0.0):
            raise ValueError("gd-nomomentum schedules are diagonal in the H basis")
        return schedule.diagonal_values()
    return schedule.as_vector()


def _interp_matrix(data: _PresetData, con, point: np.ndarray) -> np.ndarray:
    """Numeric Gram-side matrix of one structural constraint."""
    n = data.basis.n
    M = np.zeros((n, n))
    for (kind, key), coef in con.blocks.items():
        if kind == "GSQ":
            M += coef * gsq_matrix(data.basis, key)
            continue
        blk = data.blocks[key]
        part = {"A": blk.A, "Atilde": blk.Atilde, "B": blk.B}.get(kind)
        if part is None and kind == "C":
            M += coef * blk.C
        else:
            M += coef * part.eval(point)
    return M


def _interp_fvec(data: _PresetData, con) -> np.ndarray:
    v = np.zeros(data.basis.m)
    for idx, coef in con.f_coeffs.items():
        v += coef * data.basis.f(idx)
    return v


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _check_schedule(spec: ProblemSpec, schedule: StepsizeSchedule) -> None:
    if spec.preset is Preset.WC_POTENTIAL:
        raise ValueError(
            "wc-potential has no anchored inner problem; use the per-step "
            "chain in bnbpep.presets"
        )
    want = {
        Preset.SC_GRAD: Basis.ALPHA,
        Preset.GD_NOMOMENTUM: Basis.H,
        Preset.NONCONVEX_GRAD: Basis.HBAR,
    }[spec.preset]
    if schedule.basis is not want:
        raise ValueError(
            f"{spec.preset.value} expects a schedule in basis {want.value!r}; "
            f"got {schedule.basis.value!r} (convert with stepsize_convert)"
        )
    if schedule.N != spec.N:
        raise ValueError(f"schedule has N={schedule.N}, spec has N={spec.N}")


def canonical_schedule(spec: ProblemSpec, schedule: StepsizeSchedule) -> StepsizeSchedule:
    """Convert a schedule to the preset's native basis, filling class params."""
    if spec.preset is Preset.SC_GRAD:
        sched = schedule
        if sched.class_params is None:
            sched = StepsizeSchedule(sched.N, sched.basis, sched.rows, (spec.mu, spec.L))
        return stepsize_convert(sched, Basis.ALPHA)
    if spec.preset is Preset.NONCONVEX_GRAD:
        return stepsize_convert(schedule, Basis.HBAR)
    return stepsize_convert(schedule, Basis.H)


def _objective_matrix_poly(spec: ProblemSpec, data: _PresetData) -> MatrixPoly:
    """Gram-side objective C_{N,star} + mu^2 B_{N,star} - 2 mu A_{star,N}."""
    N = spec.N
    mu = spec.mu
    blkNs = data.blocks[(N, STAR)]
    blksN = data.blocks[(STAR, N)]
    obj = MatrixPoly.constant(blkNs.C)
    if mu != 0.0:
        obj = obj + blkNs.B.scale(mu * mu) - blksN.A.scale(2.0 * mu)
    return obj


def build_inner_pair(spec: ProblemSpec, schedule: StepsizeSchedule,
                     lam_support=None) -> InnerPair:
    """Primal (maximize over G, F) and dual (minimize over multipliers)
    worst-case SDPs for a fixed numeric schedule.

    ``lam_support`` optionally restricts the pairwise interpolation family
    to a detected support (a certificate-structure device: the restricted
    dual upper-bounds the full one and coincides when the pattern is
    exact)."""
    _check_schedule(spec, schedule)
    data = _preset_data(spec, schedule)
    point = _schedule_point(spec, schedule)
    n, m = data.basis.n, data.basis.m
    R2 = spec.R ** 2
    fclass = spec.function_class()
    cons = interpolation_inequalities(fclass, list(data.basis.indices))
    pair_cons = [c for c in cons if c.label == "pair"]
    if lam_support is not None:
        pair_cons = [c for c in pair_cons if c.key in lam_support]
    star_cons = [c for c in cons if c.label == "star_lower"]

    # -- primal ---------------------------------------------------------
    pb = ConicBuilder()
    pb.add_free("F", m)
    if spec.preset is Preset.NONCONVEX_GRAD:
        pb.add_free("t", 1)
    pb.add_psd("G", n)

    for con in pair_cons + star_cons:
        M = _interp_matrix(data, con, point)
        terms = pb.trace_terms("G", M)
        for k, coef in enumerate(_interp_fvec(data, con)):
            if coef:
                terms[("F", k)] = terms.get(("F", k), 0.0) + coef
        pb.add_ub(terms, con.rhs)

    if spec.preset is Preset.SC_GRAD:
        init_M = data.blocks[(0, STAR)].B.eval(point)
        pb.add_trace_ub("G", init_M, rhs=R2)
        obj = _objective_matrix_poly(spec, data).eval(point)
        pb.objective_trace("G", -obj)  # maximize via minimizing the negative
    elif spec.preset is Preset.GD_NOMOMENTUM:
        init_M = data.blocks[(0, STAR)].B.eval(point)
        pb.add_trace_ub("G", init_M, rhs=R2)
        avec = data.basis.a(STAR, spec.N)
        pb.set_objective({("F", k): -float(avec[k]) for k in range(m) if avec[k]})
    else:  # NONCONVEX_GRAD
        # t <= ||g_i||^2 for every observed iterate; f_0 - f_star <= R^2
        for i in data.point_indices:
            terms = pb.trace_terms("G", -gsq_matrix(data.basis, i))
            terms[("t", 0)] = 1.0
            pb.add_ub(terms, 0.0)
        avec = data.basis.a(STAR, 0)
        pb.add_ub({("F", k): float(avec[k]) for k in range(m) if avec[k]}, R2)
        pb.set_objective({("t", 0): -1.0})
    primal = pb.build()

    # -- dual -------------------------------------------------------------
    db = ConicBuilder()
    db.add_nonneg("lam", len(pair_cons))
    if spec.preset is Preset.NONCONVEX_GRAD:
        db.add_nonneg("tau", spec.N + 1)
        db.add_nonneg("eta", spec.N + 1)
    db.add_nonneg("nu", 1)
    db.add_psd("Z", n)

    # stationarity in F:  sum of multipliers times f-coefficients = target
    a_target = np.zeros(m)
    if spec.preset is Preset.GD_NOMOMENTUM:
        a_target = data.basis.a(STAR, spec.N)
    for r in range(m):
        terms = {}
        for k, con in enumerate(pair_cons):
            coef = float(_interp_fvec(data, con)[r])
            if coef:
                terms[("lam", k)] = coef
        if spec.preset is Preset.NONCONVEX_GRAD:
            for i in data.point_indices:
                coef = float(data.basis.a(i, STAR)[r])
                if coef:
                    terms[("tau", i)] = coef
            coef = float(data.basis.a(STAR, 0)[r])
            if coef:
                terms[("nu", 0)] = coef
        if terms or a_target[r]:
            db.add_eq(terms, float(a_target[r]))

    # stationarity in G:  multiplier combination of Gram blocks equals Z
    zrhs = np.zeros((n, n))
    base = np.zeros((n, n))
    if spec.preset in (Preset.SC_GRAD, Preset.GD_NOMOMENTUM):
        nu_mat = data.blocks[(0, STAR)].B.eval(point)
        if spec.preset is Preset.SC_GRAD:
            base = -_objective_matrix_poly(spec, data).eval(point)
    else:
        nu_mat = np.zeros((n, n))
    from .conic import svec, svec_dim  # local import to avoid cycle noise

    sv_dim = svec_dim(n)
    sv = {
        "base": svec(base),
        "nu": svec(nu_mat),
        "Z": None,
    }
    lam_sv = [svec(_interp_matrix(data, con, point)) for con in pair_cons]
    tau_sv = eta_sv = None
    if spec.preset is Preset.NONCONVEX_GRAD:
        tau_sv = [svec(gsq_matrix(data.basis, i) / (2 * spec.L))
                  for i in data.point_indices]
        eta_sv = [svec(-gsq_matrix(data.basis, i)) for i in data.point_indices]
    for r in range(sv_dim):
        terms = {("Z", r): -1.0}
        if sv["nu"][r]:
            terms[("nu", 0)] = float(sv["nu"][r])
        for k, v in enumerate(lam_sv):
            if v[r]:
                terms[("lam", k)] = float(v[r])
        if spec.preset is Preset.NONCONVEX_GRAD:
            for i in data.point_indices:
                coef = 0.0
                if tau_sv[i][r]:
                    terms[("tau", i)] = float(tau_sv[i][r])
                if eta_sv[i][r]:
                    terms[("eta", i)] = float(eta_sv[i][r])
                del coef
        db.add_eq(terms, float(-sv["base"][r]))

    if spec.preset is Preset.NONCONVEX_GRAD:
        db.add_eq({("eta", i): 1.0 for i in data.point_indices}, 1.0)
        # star lower bounds enter through tau; lambda covers pair family only
    db.set_objective({("nu", 0): R2})
    dual = db.build()

    return InnerPair(primal, dual, [c.key for c in pair_cons], data.basis, data.blocks)


def _extract_certificate(spec: ProblemSpec, inner: InnerPair,
                         x: np.ndarray, objective: float,
                         model=None) -> DualCertificate:
    dual = model if model is not None else inner.dual
    lam = dual.value("lam", x)
    lam = np.atleast_1d(lam)
    lambdas = {pair: float(v) for pair, v in zip(inner.pairs, lam)}
    tau, eta = {}, {}
    if spec.preset is Preset.NONCONVEX_GRAD:
        tvals = np.atleast_1d(dual.value("tau", x))
        evals = np.atleast_1d(dual.value("eta", x))
        tau = {i: float(v) for i, v in enumerate(tvals)}
        eta = {i: float(v) for i, v in enumerate(evals)}
    return DualCertificate(
        lambdas=lambdas,
        nu=float(dual.value("nu", x)),
        Z=dual.value("Z", x),
        objective=float(objective),
        tau=tau,
        eta=eta,
    )


def evaluate_worst_case(spec: ProblemSpec, schedule: StepsizeSchedule,
                        feas_tol: float = 1e-8, gap_tol: float = 1e-8,
                        solve_primal: bool = True,
                        lam_support=None) -> WorstCase:
    """Rigorous worst-case value of a fixed method.

    The reported value is the dual optimum, a valid upper bound regardless
    of strong duality; the primal value is kept for diagnostics and a
    warning is emitted when the gap exceeds 1e-6.
    """
    inner = build_inner_pair(spec, schedule, lam_support=lam_support)
    dsol = solve_conic_robust(inner.dual, feas_tol, gap_tol)
    if not dsol.ok:
        raise RuntimeError(f"inner dual solve failed: {dsol.status}")
    cert = _extract_certificate(spec, inner, dsol.x, dsol.objective)
    primal_value = np.nan
    gap = np.nan
    if solve_primal:
        psol = solve_conic_robust(inner.primal, feas_tol, gap_tol)
        if psol.ok:
            primal_value = -psol.objective
            gap = abs(primal_value - dsol.objective)
            if gap > DUALITY_GAP_WARN * max(1.0, abs(dsol.objective)):
                warnings.warn(
                    f"inner primal/dual gap {gap:.3e} exceeds "
                    f"{DUALITY_GAP_WARN:.0e}; reporting the dual bound",
                    RuntimeWarning,
                )
        else:
            warnings.warn(
                f"inner primal solve failed ({psol.status}); "
                "reporting the dual bound",
                RuntimeWarning,
            )
    return WorstCase(float(dsol.objective), cert, gap, primal_value)


def worst_case_gradient(spec: ProblemSpec, schedule: StepsizeSchedule,
                        feas_tol: float = 1e-9, gap_tol: float = 1e-9,
                        lam_support=None):
    """Value and exact stepsize gradient of the worst-case map.

    Sensitivity of the inner optimum: with G* the worst-case Gram matrix
    and multipliers from the dual, the derivative in a stepsize direction
    is the derivative of the Lagrangian, i.e. the objective blocks'
    derivative traced against G* minus the multiplier-weighted derivative
    of each inequality block.  Valid wherever the active set is stable.
    """
    inner = build_inner_pair(spec, schedule, lam_support=lam_support)
    dsol = solve_conic_robust(inner.dual, feas_tol, gap_tol)
    psol = solve_conic_robust(inner.primal, feas_tol, gap_tol)
    if not (dsol.ok and psol.ok):
        raise RuntimeError("inner solve failed while computing the gradient")
    Gstar = inner.primal.value("G", psol.x)
    cert = _extract_certificate(spec, inner, dsol.x, dsol.objective)
    data = _preset_data(spec, schedule)
    point = _schedule_point(spec, schedule)
    nvar = point.size
    grad = np.zeros(nvar)

    def add_poly_grad(poly, weight):
        for v, mat in poly.lin.items():
            grad[v] += weight * float(np.tensordot(Gstar, mat))
        for (v1, v2), mat in poly.quad.items():
            t = float(np.tensordot(Gstar, mat))
            if v1 == v2:
                grad[v1] += weight * 2.0 * point[v1] * t
            else:
                grad[v1] += weight * point[v2] * t
                grad[v2] += weight * point[v1] * t

    if spec.preset is Preset.SC_GRAD and spec.mu != 0.0:
        blkNs = data.blocks[(spec.N, STAR)]
        blksN = data.blocks[(STAR, spec.N)]
        add_poly_grad(blkNs.B, spec.mu ** 2)
        add_poly_grad(blksN.A, -2.0 * spec.mu)
    for (i, j), lam in cert.lambdas.items():
        if lam <= 1e-12:
            continue
        blk = data.blocks[(i, j)]
        if spec.preset is Preset.NONCONVEX_GRAD:
            add_poly_grad(blk.B, lam * spec.L / 4.0)
            add_poly_grad(blk.Atilde, -lam * 0.5)
        else:
            add_poly_grad(blk.A, -lam)
    return float(dsol.objective), grad


# ---------------------------------------------------------------------------
# extremal multipliers over optimal (or capped) dual solutions
# ---------------------------------------------------------------------------

def solve_dual_extremal(spec: ProblemSpec, schedule: StepsizeSchedule,
                        c_lambda: float = 0.0, c_trace: float = 0.0,
                        cap: float | None = None, sense: str = "max",
                        feas_tol: float = 1e-9, gap_tol: float = 1e-9,
                        cap_slack: float = 1e-9):
    """Optimize c_lambda * sum(lambda) + c_trace * tr(Z) over dual-feasible
    points with objective capped at ``cap`` (defaults to the dual optimum).

    Returns (value, DualCertificate).  Used both for sparsification and for
    heuristic variable-bound estimation.  ``cap_slack`` relaxes the cap
    relatively, since capping exactly at the optimum leaves a face with no
    interior and stalls interior-point solvers.
    """
    inner = build_inner_pair(spec, schedule)
    if cap is None:
        base = solve_conic_robust(inner.dual, feas_tol, gap_tol)
        if not base.ok:
            raise RuntimeError(f"dual solve failed: {base.status}")
        cap = base.objective
    dual = inner.dual
    db = _rebuilder_with_cap(dual, cap * (1.0 + cap_slack) + 1e-12)
    n_lam = dual.var_info["lam"][1]
    nZ = dual.var_info["Z"][1]
    terms = {}
    for k in range(n_lam):
        if c_lambda:
            terms[("lam", k)] = c_lambda
    if c_trace:
        for t, coef in db.trace_terms("Z", np.eye(nZ)).items():
            terms[t] = terms.get(t, 0.0) + c_trace * coef
    sgn = -1.0 if sense == "max" else 1.0
    db.set_objective({k: sgn * v for k, v in terms.items()})
    model = db.build()
    sol = solve_conic_robust(model, feas_tol, gap_tol)
    if sol.status == "infeasible":
        raise CapInfeasibleError(cap)
    if not sol.ok:
        raise RuntimeError(f"extremal dual solve failed: {sol.status}")
    cert = _extract_certificate(spec, inner, sol.x,
                                float(model.c @ sol.x * sgn), model=model)
    # recover the achieved nu R^2 for reporting
    cert.objective = float(model.value("nu", sol.x)) * spec.R ** 2
    value = float(sgn * sol.objective)
    return value, cert


def solve_dual_max_margin(spec: ProblemSpec, schedule: StepsizeSchedule,
                          cap: float | None = None, cap_slack: float = 1e-9,
                          feas_tol: float = 1e-9, gap_tol: float = 1e-9):
    """The certificate maximizing Z's smallest eigenvalue among all
    certificates with objective within the cap.

    Degenerate instances admit optimal faces on which interior-point
    solvers return slightly indefinite slack matrices; re-solving for the
    max-margin member gives a cleanly factorable one.
    """
    inner = build_inner_pair(spec, schedule)
    if cap is None:
        base = solve_conic_robust(inner.dual, feas_tol, gap_tol)
        if not base.ok:
            raise RuntimeError(f"dual solve failed: {base.status}")
        cap = base.objective
    db = _rebuilder_with_cap(inner.dual, cap * (1.0 + cap_slack) + 1e-12)
    n = inner.dual.var_info["Z"][1]
    db.add_free("margin", 1)
    db.add_psd("Zshift", n)
    from .conic import svec_entry_index

    for r in range(n):
        for c in range(r, n):
            k = svec_entry_index(n, r, c)
            terms = {("Zshift", k): 1.0, ("Z", k): -1.0}
            if r == c:
                terms[("margin", 0)] = 1.0
            db.add_eq(terms, 0.0)
    db.set_objective({("margin", 0): -1.0})
    model = db.build()
    sol = solve_conic_robust(model, feas_tol, gap_tol)
    if not sol.ok:
        raise RuntimeError(f"max-margin dual solve failed: {sol.status}")
    cert = _extract_certificate(spec, inner, sol.x, cap, model=model)
    cert.objective = float(model.value("nu", sol.x)) * spec.R ** 2
    return cert


class CapInfeasibleError(RuntimeError):
    """The optimality cap is below the attainable dual objective."""

    def __init__(self, cap: float):
        super().__init__(f"no dual-feasible point attains objective <= {cap}")
        self.cap = cap


def _rebuilder_with_cap(dual: ConicModel, cap: float) -> ConicBuilder:
    """Clone the dual model into a builder and cap nu R^2 by ``cap``."""
    db = ConicBuilder()
    order = sorted(dual.var_info.items(), key=lambda kv: kv[1][0])
    for name, (off, size, kind) in order:
        if kind == "free":
            db.add_free(name, size)
        elif kind == "nonneg":
            db.add_nonneg(name, size)
        else:
            db.add_psd(name, size)
    back = {}
    for name, (off, size, kind) in order:
        realized = size if kind != "psd" else size * (size + 1) // 2
        for k in range(realized):
            back[off + k] = (name, k)
    A = dual.A_eq.tocoo()
    rows = {}
    for r, c, v in zip(A.row, A.col, A.data):
        rows.setdefault(r, {})[back[c]] = v
    for r in range(dual.A_eq.shape[0]):
        db.add_eq(rows.get(r, {}), float(dual.b_eq[r]))
    if dual.A_ub is not None:
        A = dual.A_ub.tocoo()
        rows = {}
        for r, c, v in zip(A.row, A.col, A.data):
            rows.setdefault(r, {})[back[c]] = v
        for r in range(dual.A_ub.shape[0]):
            db.add_ub(rows.get(r, {}), float(dual.b_ub[r]))
    # objective of the original dual is nu * R^2; cap it
    obj_terms = {back[k]: float(v) for k, v in enumerate(dual.c) if v}
    db.add_ub(obj_terms, float(cap))
    return db


# ---------------------------------------------------------------------------
# residual recomputation (certificate replay)
# ---------------------------------------------------------------------------

def _a_equation_residual(data: _PresetData, cert: DualCertificate,
                         spec: ProblemSpec) -> float:
    m = data.basis.m
    res = np.zeros(m)
    for (i, j), lam in cert.lambdas.items():
        res += lam * data.basis.a(i, j)
    if spec.preset is Preset.GD_NOMOMENTUM:
        res -= data.basis.a(STAR, spec.N)
    elif spec.preset is Preset.NONCONVEX_GRAD:
        for i, t in cert.tau.items():
            res += t * data.basis.a(i, STAR)
        res += cert.nu * data.basis.a(STAR, 0)
    return float(np.abs(res).max())


def _z_equation_lhs(data: _PresetData, cert: DualCertificate,
                    spec: ProblemSpec, point: np.ndarray) -> np.ndarray:
    n = data.basis.n
    lhs = np.zeros((n, n))
    if spec.preset is Preset.SC_GRAD:
        lhs += cert.nu * data.blocks[(0, STAR)].B.eval(point)
        lhs -= _objective_matrix_poly(spec, data).eval(point)
        for (i, j), lam in cert.lambdas.items():
            blk = data.blocks[(i, j)]
            lhs += lam * (blk.A.eval(point) + blk.C / (2 * (spec.L - spec.mu)))
    elif spec.preset is Preset.GD_NOMOMENTUM:
        lhs += cert.nu * data.blocks[(0, STAR)].B.eval(point)
        for (i, j), lam in cert.lambdas.items():
            blk = data.blocks[(i, j)]
            lhs += lam * (blk.A.eval(point) + blk.C / (2 * spec.L))
    else:
        L = spec.L
        for i, e in cert.eta.items():
            lhs -= e * gsq_matrix(data.basis, i)
        for i, t in cert.tau.items():
            lhs += t * gsq_matrix(data.basis, i) / (2 * L)
        for (i, j), lam in cert.lambdas.items():
            blk = data.blocks[(i, j)]
            lhs += lam * (
                -(L / 4) * blk.B.eval(point)
                + 0.5 * blk.Atilde.eval(point)
                + blk.C / (4 * L)
            )
    return lhs
