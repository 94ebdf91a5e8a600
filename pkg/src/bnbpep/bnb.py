"""Three-stage solve: warm start, local refinement, certified global search.

Stage 1 solves the inner dual at a canonical schedule.  Stage 2 refines the
stepsizes only, using the inner dual value as a black-box objective (the
problem is convex once the stepsizes freeze, so the multipliers are always
reconstructed by an exact solve).  Stage 3 runs a spatial branch-and-bound:
nodes are bounded by McCormick linear relaxations over the variable boxes,
semidefiniteness enters through a shared pool of eigenvector cuts
tr(Z u u^T) >= 0, and near-feasible relaxation points trigger exact inner
solves that propose incumbents.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .conic import (ConicBuilder, ConicModel, NotPsdError, min_eigpair,
                    project_psd, psd_cholesky)
from .gram import Preset, StepsizeSchedule
from .inner import DualCertificate, ProblemSpec, evaluate_worst_case
from .qcqp import (
    QcqpModel,
    VariableBounds,
    assemble_point,
    assemble_potential_point,
    build_bnbpep_qcqp,
    compute_variable_bounds,
    schedule_from_steps,
)

__all__ = [
    "BnbNode",
    "BnbResult",
    "stage1_feasible",
    "stage2_refine",
    "mccormick_relax",
    "lazy_psd_lower_bound",
    "merit_value",
    "solve_global",
    "run_pipeline",
    "PipelineReport",
]

log = logging.getLogger("bnbpep.bnb")

MERIT_HEURISTIC_EPS = 1e-2    # relaxation points at most this infeasible
INCUMBENT_FEAS_TOL = 1e-7     # trigger an exact inner solve
EIG_CUT_TOL = 1e-9
BRANCH_CLAMP = 0.2


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def stage1_feasible(spec: ProblemSpec, feas_tol: float = 1e-9,
                    gap_tol: float = 1e-9):
    """Warm start: canonical schedule, exact inner solve, Cholesky factor.

    Returns (schedule, certificate-or-chain, P factor(s)); the triple
    extends to a feasible point of the design QCQP.
    """
    from .presets import initial_schedule, solve_potential_chain

    sched = initial_schedule(spec)
    if spec.preset is Preset.WC_POTENTIAL:
        chain = solve_potential_chain(spec, sched.get(1, 0), feas_tol, gap_tol)
        factors = [psd_cholesky(project_psd(st["Z"]), 1e-9)[0]
                   for st in chain.steps]
        return sched, chain, factors
    from .inner import canonical_schedule

    native = canonical_schedule(spec, sched)
    wc = evaluate_worst_case(spec, native, feas_tol, gap_tol, solve_primal=False)
    P, _, _ = psd_cholesky(project_psd(wc.certificate.Z), 1e-9)
    return native, wc.certificate, P


# ---------------------------------------------------------------------------
# stage 2: nested local search over the stepsizes
# ---------------------------------------------------------------------------

def _inner_objective(spec: ProblemSpec, steps: np.ndarray,
                     feas_tol: float, gap_tol: float) -> float:
    from .presets import solve_potential_chain

    try:
        if spec.preset is Preset.WC_POTENTIAL:
            return solve_potential_chain(spec, float(steps[0]),
                                         feas_tol, gap_tol).objective
        sched = schedule_from_steps(spec, steps)
        return evaluate_worst_case(spec, sched, feas_tol, gap_tol,
                                   solve_primal=False).value
    except RuntimeError:
        return float("inf")


def _local_minimize(fun, x0: np.ndarray, max_iter: int = 120,
                    step_tol: float = 1e-8, fd_h: float = 1e-6,
                    grad_fun=None):
    """BFGS with backtracking line search.

    Gradients come from ``grad_fun`` when available (the exact sensitivity
    of the inner solve) and central differences otherwise; terminate on
    step-norm below ``step_tol``.
    """
    x = x0.astype(float).copy()
    f = fun(x)
    n = x.size
    H = np.eye(n)

    def grad(xc, fc):
        if grad_fun is not None:
            g = grad_fun(xc)
            if g is not None:
                return g
        g = np.zeros(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd_h * max(1.0, abs(xc[i]))
            g[i] = (fun(xc + e) - fun(xc - e)) / (2 * e[i])
        return g

    g = grad(x, f)
    for _ in range(max_iter):
        d = -H @ g
        if not np.all(np.isfinite(d)):
            break
        t = 1.0
        improved = False
        gd = float(g @ d)
        for _ in range(40):
            xn = x + t * d
            fn = fun(xn)
            if fn <= f + 1e-4 * t * gd or fn < f - 1e-15:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        s = xn - x
        if np.linalg.norm(s) < step_tol:
            x, f = xn, fn
            break
        gn = grad(xn, fn)
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) \
                + rho * np.outer(s, s)
        x, f, g = xn, fn, gn
    return x, f


def _newton_polish(fun, grad_fun, x0: np.ndarray, f0: float,
                   iters: int = 8, fd_h: float = 1e-5):
    """Newton iteration on the exact gradient system.

    Function values near the optimum sit at the solver noise floor, but the
    envelope gradient stays accurate, so root-finding on it recovers several
    more digits in the stepsizes.  Kinks (active-set changes) stall the
    damping and return the best point seen.
    """
    x = x0.astype(float).copy()
    g = grad_fun(x)
    if g is None:
        return x0, f0
    best_x, best_g = x.copy(), float(np.linalg.norm(g))
    n = x.size
    for _ in range(iters):
        if np.linalg.norm(g) <= 1e-11:
            break
        J = np.zeros((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = fd_h * max(1.0, abs(x[k]))
            gp = grad_fun(x + e)
            gm = grad_fun(x - e)
            if gp is None or gm is None:
                return best_x, fun(best_x)
            J[:, k] = (gp - gm) / (2 * e[k])
        try:
            step = np.linalg.lstsq(J, -g, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        t = 1.0
        moved = False
        for _ in range(20):
            xn = x + t * step
            gn = grad_fun(xn)
            if gn is not None and np.linalg.norm(gn) < np.linalg.norm(g):
                x, g = xn, gn
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        if np.linalg.norm(g) < best_g:
            best_x, best_g = x.copy(), float(np.linalg.norm(g))
    f_best = fun(best_x)
    return best_x, f_best


def stage2_refine(model: QcqpModel, start: np.ndarray,
                  bounds: VariableBounds | None = None,
                  feas_tol: float = 1e-9, gap_tol: float = 1e-9,
                  max_iter: int = 120) -> np.ndarray:
    """Local refinement: descend on the stepsizes with the exact inner
    value as objective, then rebuild the multipliers by one exact solve.

    Never returns a worse point than the start; any internal failure
    degrades to the identity.
    """
    spec = model.spec
    steps0 = model.step_values(start)
    f0 = model.objective_value(start)

    def fun(steps):
        if bounds is not None and np.abs(steps).max() > bounds.M_step:
            return float("inf")
        return _inner_objective(spec, steps, feas_tol, gap_tol)

    def grad_fun(steps):
        if spec.preset is Preset.WC_POTENTIAL:
            return None  # scalar problem; differences are plenty
        from .inner import worst_case_gradient

        try:
            _, g = worst_case_gradient(spec, schedule_from_steps(spec, steps))
            return g
        except RuntimeError:
            return None

    try:
        steps_best, f_best = _local_minimize(fun, steps0, max_iter=max_iter,
                                             grad_fun=grad_fun)
        from scipy.optimize import minimize as _sp_min

        polish = _sp_min(fun, steps_best, method="Nelder-Mead",
                         options={"xatol": 1e-9, "fatol": 1e-13,
                                  "maxiter": 400 * max(1, steps0.size)})
        if polish.fun <= f_best:
            steps_best, f_best = np.asarray(polish.x), float(polish.fun)
        # a final first-order polish sharpens the basin found by the search
        steps_fin, f_fin = _newton_polish(fun, grad_fun, steps_best, f_best)
        if f_fin <= f_best + 1e-11:
            steps_best, f_best = steps_fin, min(f_fin, f_best)
        if not np.isfinite(f_best) or f_best > f0 + 1e-12:
            return start
        return rebuild_point(model, steps_best, feas_tol, gap_tol)
    except RuntimeError:
        return start


def rebuild_point(model: QcqpModel, steps: np.ndarray,
                  feas_tol: float = 1e-9, gap_tol: float = 1e-9) -> np.ndarray:
    """Exact full QCQP point whose stepsizes are fixed at ``steps``.

    Retries at tighter solver tolerances until the certificate's slack
    matrix is numerically PSD (factorability is the only fragile part of
    the assignment).
    """
    from .presets import solve_potential_chain

    spec = model.spec
    if spec.preset is Preset.WC_POTENTIAL:
        chain = solve_potential_chain(spec, float(steps[0]), feas_tol, gap_tol)
        return assemble_potential_point(model, chain.h, chain.b, chain.c,
                                        chain.steps)
    sched = schedule_from_steps(spec, steps)

    def margin_cert():
        # degenerate optimum: the max-margin certificate on the optimal face
        from .inner import solve_dual_max_margin

        return solve_dual_max_margin(spec, sched, cap_slack=1e-8)

    last_err = None
    attempts = [
        lambda: evaluate_worst_case(spec, sched, feas_tol, gap_tol,
                                    solve_primal=False).certificate,
        lambda: evaluate_worst_case(spec, sched, 1e-10, 1e-10,
                                    solve_primal=False).certificate,
        margin_cert,
    ]
    for make_cert in attempts:
        try:
            x = assemble_point(model, steps, make_cert())
        except (NotPsdError, RuntimeError) as err:
            last_err = err
            continue
        if model.violation(x) <= INCUMBENT_FEAS_TOL:
            return x
        last_err = RuntimeError(
            f"assembled point violates the model by {model.violation(x):.3e}")
    raise RuntimeError(f"certificate assembly failed: {last_err}")


# ---------------------------------------------------------------------------
# McCormick machinery
# ---------------------------------------------------------------------------

class _LpSkeleton:
    """Static LP data shared by all nodes of one model."""

    def __init__(self, model: QcqpModel, drop_tags: tuple = ()):
        self.model = model
        nv = model.n_vars
        monos = set()
        self.quad_rows = []
        for con in model.quad_cons:
            if con.tag.startswith(drop_tags) and drop_tags:
                continue
            monos.update(con.quad.keys())
            self.quad_rows.append(con)
        self.mono_keys = sorted(monos)
        self.mono_pos = {k: nv + i for i, k in enumerate(self.mono_keys)}
        self.mono_of_var = {}
        for k in self.mono_keys:
            for v in set(k):
                self.mono_of_var.setdefault(v, []).append(k)
        self.ncols = nv + len(self.mono_keys)
        self.c = np.zeros(self.ncols)
        for i, coef in model.objective.items():
            self.c[i] = coef

        eq_rows, eq_rhs, ub_rows, ub_rhs = [], [], [], []
        for con in model.lin_cons:
            row = dict(con.terms)
            (eq_rows if con.sense == "==" else ub_rows).append(row)
            (eq_rhs if con.sense == "==" else ub_rhs).append(con.rhs)
        for con in self.quad_rows:
            row = dict(con.lin)
            for key, coef in con.quad.items():
                p = self.mono_pos[key]
                row[p] = row.get(p, 0.0) + coef
            (eq_rows if con.sense == "==" else ub_rows).append(row)
            (eq_rhs if con.sense == "==" else ub_rhs).append(con.rhs)
        self.A_eq, self.b_eq = _rows_to_csr(eq_rows, eq_rhs, self.ncols)
        self.static_ub_rows = ub_rows
        self.static_ub_rhs = ub_rhs

    def z_cut_row(self, blk, u: np.ndarray):
        """-tr(Z u u^T) <= 0 as a sparse row over the LP columns."""
        row = {}
        for (r, c), i in blk.entries.items():
            coef = u[r] * u[c] if r == c else 2.0 * u[r] * u[c]
            if coef:
                row[i] = -coef
        return row


def _rows_to_csr(rows, rhs, ncols):
    data, ri, ci = [], [], []
    for r, row in enumerate(rows):
        for ccol, val in row.items():
            if val != 0.0:
                data.append(val)
                ri.append(r)
                ci.append(ccol)
    A = sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), ncols))
    return A, np.array(rhs, dtype=float)


def _envelope_rows(skel: _LpSkeleton, lb: np.ndarray, ub: np.ndarray):
    """Envelope rows for every monomial over the current box.

    Bilinear: the four plane inequalities; squares: the secant from above
    and tangents at the endpoints and midpoint from below.  Degenerate
    (fixed) variables collapse to linear equalities.
    """
    rows, rhs, eq_rows, eq_rhs = [], [], [], []
    mono_lb = np.empty(len(skel.mono_keys))
    mono_ub = np.empty(len(skel.mono_keys))
    for kidx, (i, j) in enumerate(skel.mono_keys):
        p = skel.mono_pos[(i, j)]
        li, ui = lb[i], ub[i]
        lj, uj = lb[j], ub[j]
        if not (np.isfinite(li) and np.isfinite(ui) and np.isfinite(lj)
                and np.isfinite(uj)):
            raise ValueError(
                f"variable in quadratic term lacks finite box: "
                f"({skel.model.variables[i].name}, {skel.model.variables[j].name})"
            )
        if i == j:
            if ui - li <= 1e-12:
                eq_rows.append({p: 1.0})
                eq_rhs.append(li * ui)
                mono_lb[kidx] = mono_ub[kidx] = li * ui
                continue
            # secant: w <= (l+u) x - l u
            rows.append({p: 1.0, i: -(li + ui)})
            rhs.append(-li * ui)
            # tangents: w >= 2 t x - t^2 at t in {l, (l+u)/2, u}
            for t in (li, 0.5 * (li + ui), ui):
                rows.append({p: -1.0, i: 2.0 * t})
                rhs.append(t * t)
            mono_lb[kidx] = 0.0 if li <= 0.0 <= ui else min(li * li, ui * ui)
            mono_ub[kidx] = max(li * li, ui * ui)
            continue
        if ui - li <= 1e-12:
            eq_rows.append({p: 1.0, j: -li})
            eq_rhs.append(0.0)
        elif uj - lj <= 1e-12:
            eq_rows.append({p: 1.0, i: -lj})
            eq_rhs.append(0.0)
        else:
            # w >= l_i y + l_j x - l_i l_j ; w >= u_i y + u_j x - u_i u_j
            rows.append({p: -1.0, j: li, i: lj})
            rhs.append(li * lj)
            rows.append({p: -1.0, j: ui, i: uj})
            rhs.append(ui * uj)
            # w <= u_i y + l_j x - u_i l_j ; w <= l_i y + u_j x - l_i u_j
            rows.append({p: 1.0, j: -ui, i: -lj})
            rhs.append(-ui * lj)
            rows.append({p: 1.0, j: -li, i: -uj})
            rhs.append(-li * uj)
        prods = [li * lj, li * uj, ui * lj, ui * uj]
        mono_lb[kidx] = min(prods)
        mono_ub[kidx] = max(prods)
    return rows, rhs, eq_rows, eq_rhs, mono_lb, mono_ub


@dataclass
class _LpOutcome:
    status: str
    objective: float = np.inf
    x: np.ndarray | None = None


def _solve_node_lp(skel: _LpSkeleton, lb, ub, cut_rows, cut_rhs):
    env_rows, env_rhs, env_eq, env_eq_rhs, mlb, mub = _envelope_rows(skel, lb, ub)
    ub_rows = skel.static_ub_rows + env_rows + cut_rows
    ub_rhs = skel.static_ub_rhs + env_rhs + cut_rhs
    A_ub, b_ub = _rows_to_csr(ub_rows, ub_rhs, skel.ncols)
    if env_eq:
        A2, b2 = _rows_to_csr(env_eq, env_eq_rhs, skel.ncols)
        A_eq = sparse.vstack([skel.A_eq, A2]).tocsr()
        b_eq = np.concatenate([skel.b_eq, b2])
    else:
        A_eq, b_eq = skel.A_eq, skel.b_eq
    bounds = list(zip(lb, ub)) + list(zip(mlb, mub))
    res = linprog(skel.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        return _LpOutcome("infeasible")
    if res.status != 0:
        return _LpOutcome("failure")
    return _LpOutcome("optimal", float(res.fun), np.asarray(res.x))


def mccormick_relax(model: QcqpModel, box) -> ConicModel:
    """The node linear relaxation as a standalone conic (LP) model.

    Every QCQP-feasible point inside the box maps to a feasible point of
    the relaxation (monomials evaluated exactly).
    """
    lb, ub = box
    skel = _LpSkeleton(model)
    env_rows, env_rhs, env_eq, env_eq_rhs, mlb, mub = _envelope_rows(skel, lb, ub)
    cb = ConicBuilder()
    cb.add_free("x", model.n_vars)
    cb.add_free("w", len(skel.mono_keys))

    def conv(row):
        return {("x", k) if k < model.n_vars else ("w", k - model.n_vars): v
                for k, v in row.items()}

    A = skel.A_eq.tocoo()
    rows = {}
    for r, ccol, v in zip(A.row, A.col, A.data):
        rows.setdefault(r, {})[ccol] = v
    for r in range(skel.A_eq.shape[0]):
        cb.add_eq(conv(rows.get(r, {})), float(skel.b_eq[r]))
    for row, rv in zip(env_eq, env_eq_rhs):
        cb.add_eq(conv(row), rv)
    for row, rv in zip(skel.static_ub_rows + env_rows,
                       skel.static_ub_rhs + env_rhs):
        cb.add_ub(conv(row), rv)
    for k in range(model.n_vars):
        if np.isfinite(ub[k]):
            cb.add_ub({("x", k): 1.0}, float(ub[k]))
        if np.isfinite(lb[k]):
            cb.add_ub({("x", k): -1.0}, float(-lb[k]))
    for k in range(len(skel.mono_keys)):
        cb.add_ub({("w", k): 1.0}, float(mub[k]))
        cb.add_ub({("w", k): -1.0}, float(-mlb[k]))
    cb.set_objective({("x", i): coef for i, coef in model.objective.items()})
    return cb.build()


# ---------------------------------------------------------------------------
# merit function
# ---------------------------------------------------------------------------

def merit_value(model: QcqpModel, point: np.ndarray) -> float:
    """Infeasibility of a relaxation point: inf-norm residuals of the two
    stationarity systems plus the negative part of Z's minimum eigenvalue."""
    spec = model.spec
    steps = model.step_values(point)
    total = 0.0
    if spec.preset is Preset.WC_POTENTIAL:
        total += _potential_residual(model, point, steps)
    else:
        cert = _point_certificate(model, point)
        sched = schedule_from_steps(spec, steps)
        a_res, z_res = cert.residuals(spec, sched)
        total += a_res + z_res
        if spec.preset is Preset.NONCONVEX_GRAD:
            total += abs(sum(cert.eta.values()) - 1.0)
    for Z in model.z_matrices(point):
        total += abs(min(min_eigpair(Z)[0], 0.0))
    return float(total)


def _point_certificate(model: QcqpModel, x: np.ndarray) -> DualCertificate:
    spec = model.spec
    lambdas = {p: float(x[model.index(f"lam[{p[0]},{p[1]}]")])
               for p in model.pairs}
    tau, eta = {}, {}
    if spec.preset is Preset.NONCONVEX_GRAD:
        tau = {i: float(x[model.index(f"tau[{i}]")]) for i in range(spec.N + 1)}
        eta = {i: float(x[model.index(f"eta[{i}]")]) for i in range(spec.N + 1)}
    return DualCertificate(
        lambdas=lambdas,
        nu=float(x[model.index("nu")]),
        Z=model.z_matrices(x)[0],
        objective=model.objective_value(x),
        tau=tau,
        eta=eta,
    )


def _potential_residual(model: QcqpModel, x: np.ndarray, steps) -> float:
    from .gram import STAR, constraint_matrices, selector_basis

    spec = model.spec
    basis = model.extra["basis"]
    blocks = model.extra["blocks"]
    point = np.array([float(steps[0])])
    b = [x[model.index(f"b[{k}]")] for k in range(spec.N + 1)] + [0.0]
    c = [x[model.index(f"c[{k}]")] for k in range(spec.N + 1)]
    worst = 0.0
    for k, st in enumerate(model.extra["per_step"]):
        vres = -(b[k + 1] * basis.a(STAR, 3) - b[k] * basis.a(STAR, 2))
        lhs = -(blocks[(2, STAR)].C
                + b[k + 1] * blocks[(1, 3)].B.eval(point)
                - b[k] * blocks[(0, 2)].B.eval(point)
                - c[k] * blocks[(0, STAR)].C)
        for i, idx in st["tau"].items():
            if i is STAR:
                continue
            vres = vres + x[idx] * basis.a(i, STAR)
        for p, idx in st["lam"].items():
            lv = x[idx]
            vres = vres + lv * basis.a(*p)
            blk = blocks[p]
            lhs = lhs + lv * (blk.A.eval(point) - 0.5 * blk.B.eval(point))
        Z = np.zeros((basis.n, basis.n))
        for (r, cc), idx in st["zb"].entries.items():
            Z[r, cc] = Z[cc, r] = x[idx]
        worst = max(worst, float(np.abs(vres).max()),
                    float(np.abs(lhs - Z).max()))
    return worst


# ---------------------------------------------------------------------------
# lazy PSD lower bound (root relaxation with eigenvector cuts)
# ---------------------------------------------------------------------------

class _CutPool:
    """Global pool of eigenvector cuts; the random seed block stays, later
    cuts are evicted first-in-first-out beyond the capacity (dropping a
    valid cut only weakens relaxations, never hurts soundness)."""

    def __init__(self, model: QcqpModel, skel: _LpSkeleton, seed: int,
                 capacity: int = 800):
        rng = np.random.default_rng(seed)
        self.skel = skel
        self.base_rows, self.base_rhs = [], []
        for blk in model.z_blocks:
            for _ in range(2 * blk.n * blk.n):
                u = rng.standard_normal(blk.n)
                u /= np.linalg.norm(u)
                self.base_rows.append(skel.z_cut_row(blk, u))
                self.base_rhs.append(0.0)
        self.extra_rows: list = []
        self.capacity = max(capacity, len(self.base_rows))
        self.total_added = len(self.base_rows)

    def add(self, blk, u):
        self.extra_rows.append(self.skel.z_cut_row(blk, u))
        self.total_added += 1
        overflow = len(self.base_rows) + len(self.extra_rows) - self.capacity
        if overflow > 0:
            del self.extra_rows[:overflow]

    @property
    def rows(self):
        return self.base_rows + self.extra_rows

    @property
    def rhs(self):
        return [0.0] * (len(self.base_rows) + len(self.extra_rows))


def _initial_cut_pool(model: QcqpModel, skel: _LpSkeleton, seed: int):
    pool = _CutPool(model, skel, seed)
    return pool.base_rows.copy(), [0.0] * len(pool.base_rows)


def lazy_psd_lower_bound(model: QcqpModel, bounds: VariableBounds,
                         seed: int = 0, upper_hint: float | None = None,
                         node_budget: int = 4000, lp_budget: int = 1_000_000,
                         eig_tol: float = EIG_CUT_TOL,
                         time_limit: float = 120.0):
    """Valid lower bound on the QCQP optimum via the eigencut relaxation.

    The Cholesky coupling is dropped (it is implied by the cut family in
    the limit), leaving bilinear terms bounded by McCormick envelopes; the
    relaxation is then driven toward its optimum by best-bound branching
    while violated eigenvector cuts tr(Z u u^T) >= 0 accumulate in a pool
    shared by all nodes.  ``upper_hint`` (for example the local-stage value)
    only prunes; the returned value is a bound regardless.
    """
    skel = _LpSkeleton(model, drop_tags=("ppT",))
    lb0, ub0 = bounds.box_for(model)
    pool = _CutPool(model, skel, seed)
    t0 = time.perf_counter()
    lp_solves = 0
    heap: list = []
    counter = 0
    root = BnbNode(lb0, ub0, -np.inf, 0)
    heapq.heappush(heap, (root.lower_bound, counter, root))
    counter += 1
    best_bound = -np.inf
    prune_at = np.inf if upper_hint is None else upper_hint - 1e-9
    nodes = 0
    while heap and nodes < node_budget and lp_solves < lp_budget:
        if time.perf_counter() - t0 > time_limit:
            break
        bound_key, _, node = heapq.heappop(heap)
        best_bound = max(best_bound, min(bound_key, prune_at))
        if bound_key >= prune_at:
            # every remaining node is at least this good
            best_bound = min(prune_at, bound_key)
            heapq.heappush(heap, (bound_key, counter, node))
            counter += 1
            break
        nodes += 1
        out = None
        prev = -np.inf
        stalled = 0
        for _ in range(60):
            out = _solve_node_lp(skel, node.lb, node.ub, pool.rows, pool.rhs)
            lp_solves += 1
            if out.status != "optimal":
                break
            added = False
            for blk, Z in zip(model.z_blocks, model.z_matrices(out.x)):
                eig, u = min_eigpair(Z)
                if eig < -eig_tol:
                    pool.add(blk, u)
                    added = True
            if not added:
                break
            if out.objective <= prev + max(1e-12, 1e-9 * abs(prev)):
                stalled += 1
                if stalled >= 3:
                    break
            else:
                stalled = 0
            prev = out.objective
        if out is None or out.status == "infeasible":
            continue
        if out.status != "optimal":
            heapq.heappush(heap, (node.lower_bound, counter, node))
            counter += 1
            break
        bound = max(node.lower_bound, out.objective)
        if bound >= prune_at:
            continue
        x_lp = out.x
        scores = {}
        for key in skel.mono_keys:
            i, j = key
            viol = abs(x_lp[skel.mono_pos[key]] - x_lp[i] * x_lp[j])
            for v in set(key):
                scores[v] = max(scores.get(v, 0.0), viol)
        candidates = [(v, sc) for v, sc in scores.items()
                      if sc > 1e-9 and node.ub[v] - node.lb[v] > 1e-9]
        if not candidates:
            # PSD and product-exact: the relaxation optimum is attained here
            best_bound = max(best_bound, bound)
            continue
        best = max(sc for _, sc in candidates)
        branch_var = min(v for v, sc in candidates if sc == best)
        lo, hi = node.lb[branch_var], node.ub[branch_var]
        split = min(max(x_lp[branch_var], lo + BRANCH_CLAMP * (hi - lo)),
                    hi - BRANCH_CLAMP * (hi - lo))
        for side in (0, 1):
            clb, cub = node.lb.copy(), node.ub.copy()
            if side == 0:
                cub = cub.copy()
                cub[branch_var] = split
            else:
                clb = clb.copy()
                clb[branch_var] = split
            child = BnbNode(clb, cub, bound, node.depth + 1)
            heapq.heappush(heap, (child.lower_bound, counter, child))
            counter += 1
    if heap:
        best_bound = max(best_bound, min(heap[0][0], prune_at))
    elif upper_hint is not None:
        best_bound = max(best_bound, prune_at)
    return float(best_bound)


# ---------------------------------------------------------------------------
# global solve
# ---------------------------------------------------------------------------

@dataclass
class BnbNode:
    lb: np.ndarray
    ub: np.ndarray
    lower_bound: float
    depth: int
    pending_branch_var: int | None = None


@dataclass
class BnbResult:
    incumbent: np.ndarray
    upper_bound: float
    lower_bound: float
    gap: float
    node_count: int
    cut_count: int
    wall_time: float
    termination: str  # gap-closed | node-limit | time-limit
    schedule: StepsizeSchedule = None


def _gap_tol_value(ub: float, rel: float, abs_floor: float) -> float:
    return max(abs_floor, rel * abs(ub))


def solve_global(model: QcqpModel, bounds: VariableBounds,
                 warm_start: np.ndarray, gap_rel: float = 1e-4,
                 gap_abs: float = 1e-6, seed: int = 0,
                 node_limit: int = 200_000, time_limit: float = 1e9,
                 threads: int = 1, log_every: int = 0,
                 node_cut_rounds: int = 6, root_cut_rounds: int = 200,
                 cut_pool_capacity: int = 800) -> BnbResult:
    """Best-bound spatial branch-and-bound over the boxed QCQP.

    Branches on the variable with the largest McCormick violation at the
    node relaxation optimum (ties to the lowest index), splitting at the
    relaxation point clamped away from the box edges.  Certified bounds are
    valid for any thread count; node counts are deterministic only with
    one worker.
    """
    t0 = time.perf_counter()
    spec = model.spec
    # the Cholesky rows are equivalent to Z >= 0 (a factor always exists
    # inside the sqrt(M_Z) box), so nodes bound through the eigencut pool
    # and never branch on factor entries
    skel = _LpSkeleton(model, drop_tags=("ppT",))
    lb0, ub0 = bounds.box_for(model)

    if model.violation(warm_start) > INCUMBENT_FEAS_TOL:
        raise ValueError("warm start is not feasible for the QCQP")
    incumbent = np.clip(warm_start, lb0, ub0)
    if model.violation(incumbent) > INCUMBENT_FEAS_TOL:
        incumbent = warm_start.copy()
    p_ub = model.objective_value(incumbent)

    pool = _CutPool(model, skel, seed, capacity=cut_pool_capacity)
    heap: list = []
    counter = 0
    node_count = 0
    termination = "gap-closed"
    root = BnbNode(lb0.copy(), ub0.copy(), -np.inf, 0)
    heapq.heappush(heap, (root.lower_bound, counter, root))
    counter += 1
    p_lb = -np.inf

    def try_incumbent(x_cand):
        nonlocal p_ub, incumbent
        if x_cand is None:
            return
        if np.any(x_cand < lb0 - 1e-9) or np.any(x_cand > ub0 + 1e-9):
            return
        x_cand = np.clip(x_cand, lb0, ub0)
        if model.violation(x_cand) > INCUMBENT_FEAS_TOL:
            return
        obj = model.objective_value(x_cand)
        if obj < p_ub - 1e-12:
            p_ub, incumbent = obj, x_cand

    def heuristic_candidate(x_lp):
        steps = model.step_values(x_lp)
        try:
            return rebuild_point(model, steps)
        except (RuntimeError, ValueError):
            return None

    def process(node: BnbNode):
        """Bound one node; returns (bound, x_lp or None, status)."""
        rounds = root_cut_rounds if node.depth == 0 else node_cut_rounds
        out = None
        prev_obj = -np.inf
        stalled = 0
        for _ in range(max(rounds, 1)):
            out = _solve_node_lp(skel, node.lb, node.ub, pool.rows, pool.rhs)
            if out.status != "optimal":
                break
            added = False
            for blk, Z in zip(model.z_blocks, model.z_matrices(out.x)):
                eig, u = min_eigpair(Z)
                if eig < -EIG_CUT_TOL:
                    pool.add(blk, u)
                    added = True
            if not added:
                break
            if out.objective <= prev_obj + max(1e-12, 1e-9 * abs(prev_obj)):
                stalled += 1
                if stalled >= 3:
                    break
            else:
                stalled = 0
            prev_obj = out.objective
        if out is None or out.status == "infeasible":
            return -np.inf, None, "infeasible"
        if out.status != "optimal":
            return node.lower_bound, None, "failure"
        return max(node.lower_bound, out.objective), out.x, "optimal"

    executor = None
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        executor = ThreadPoolExecutor(max_workers=threads)
    try:
        while heap:
            tol = _gap_tol_value(p_ub, gap_rel, gap_abs)
            p_lb = heap[0][0] if heap else p_ub
            if p_lb > -np.inf and p_ub - p_lb <= tol:
                break
            if node_count >= node_limit:
                termination = "node-limit"
                break
            if time.perf_counter() - t0 > time_limit:
                termination = "time-limit"
                break

            # pop a sweep of nodes (one per worker); with one worker this is
            # the plain best-bound loop
            sweep = []
            while heap and len(sweep) < max(threads, 1):
                key, _, node = heapq.heappop(heap)
                if node.lower_bound >= p_ub - tol and np.isfinite(node.lower_bound):
                    continue
                sweep.append(node)
            if not sweep:
                continue
            node_count += len(sweep)

            if executor is None:
                results = [process(n) for n in sweep]
            else:
                results = list(executor.map(process, sweep))

            for node, (bound, x_lp, status) in zip(sweep, results):
                if status == "infeasible":
                    continue
                if bound >= p_ub - tol:
                    continue
                branch_var = None
                if x_lp is not None:
                    scores = {}
                    for key in skel.mono_keys:
                        i, j = key
                        viol = abs(x_lp[skel.mono_pos[key]] - x_lp[i] * x_lp[j])
                        for v in set(key):
                            scores[v] = max(scores.get(v, 0.0), viol)
                    candidates = [(v, s) for v, s in scores.items()
                                  if s > 1e-9 and node.ub[v] - node.lb[v] > 1e-9]
                    if candidates:
                        best = max(s for _, s in candidates)
                        branch_var = min(v for v, s in candidates if s == best)

                    merit = merit_value(model, x_lp)
                    if merit <= INCUMBENT_FEAS_TOL:
                        try_incumbent(x_lp)
                    if merit <= MERIT_HEURISTIC_EPS:
                        try_incumbent(heuristic_candidate(x_lp))

                    if branch_var is None:
                        # all products exact at the relaxation point: solved leaf
                        continue
                else:
                    widths = node.ub - node.lb
                    branch_var = int(np.argmax(widths))
                    if widths[branch_var] <= 1e-9:
                        continue

                lo, hi = node.lb[branch_var], node.ub[branch_var]
                point = x_lp[branch_var] if x_lp is not None else 0.5 * (lo + hi)
                split = min(max(point, lo + BRANCH_CLAMP * (hi - lo)),
                            hi - BRANCH_CLAMP * (hi - lo))
                for side in (0, 1):
                    clb, cub = node.lb.copy(), node.ub.copy()
                    if side == 0:
                        cub[branch_var] = split
                    else:
                        clb[branch_var] = split
                    child = BnbNode(clb, cub, bound, node.depth + 1)
                    heapq.heappush(heap, (child.lower_bound, counter, child))
                    counter += 1

            if log_every and node_count % log_every < max(threads, 1):
                cur_lb = heap[0][0] if heap else p_ub
                log.info("node=%d depth=%d lb=%.9g ub=%.9g gap=%.3g",
                         node_count, sweep[-1].depth, cur_lb, p_ub,
                         p_ub - cur_lb)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    if heap:
        p_lb = min(p_lb, heap[0][0])
    else:
        p_lb = p_ub if termination == "gap-closed" else p_lb
    if termination == "gap-closed":
        p_lb = max(p_lb, p_ub - _gap_tol_value(p_ub, gap_rel, gap_abs))
    wall = time.perf_counter() - t0
    return BnbResult(
        incumbent=incumbent,
        upper_bound=float(p_ub),
        lower_bound=float(min(p_lb, p_ub)),
        gap=float(p_ub - min(p_lb, p_ub)),
        node_count=node_count,
        cut_count=pool.total_added,
        wall_time=wall,
        termination=termination,
        schedule=model.schedule_from_point(incumbent),
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    spec: ProblemSpec
    stage1_objective: float
    stage1_schedule: StepsizeSchedule
    stage2_objective: float | None = None
    stage2_schedule: StepsizeSchedule | None = None
    bounds: VariableBounds | None = None
    bnb: BnbResult | None = None
    certificate: object = None
    stage_times: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def objective(self) -> float:
        if self.bnb is not None:
            return self.bnb.upper_bound
        if self.stage2_objective is not None:
            return self.stage2_objective
        return self.stage1_objective

    @property
    def schedule(self) -> StepsizeSchedule:
        if self.bnb is not None:
            return self.bnb.schedule
        if self.stage2_schedule is not None:
            return self.stage2_schedule
        return self.stage1_schedule


def run_pipeline(spec: ProblemSpec, stages: int = 3, bounds_mode: str = "heuristic",
                 Mtilde: float = 1.01, gap_rel: float = 1e-4, gap_abs: float = 1e-6,
                 seed: int = 0, node_limit: int = 200_000,
                 time_limit: float = 1e9, threads: int = 1,
                 log_every: int = 0) -> PipelineReport:
    """Stage 1 (warm start), stage 2 (local), stage 3 (certified global).

    With ``stages=2`` the returned objective is the rigorous worst case of
    the refined schedule (an exact inner solve), not a local NLP value.
    With the heuristic bounds mode, boxes are estimated after stage 2; the
    relaxation-based mode derives them from the stage-1 value alone.
    """
    t = {}
    t0 = time.perf_counter()
    model = build_bnbpep_qcqp(spec)
    sched1, cert_or_chain, _ = stage1_feasible(spec)
    if spec.preset is Preset.WC_POTENTIAL:
        x1 = assemble_potential_point(model, cert_or_chain.h, cert_or_chain.b,
                                      cert_or_chain.c, cert_or_chain.steps)
        obj1 = cert_or_chain.objective
    else:
        x1 = assemble_point(model, sched1.as_vector() if spec.preset is not
                            Preset.GD_NOMOMENTUM else sched1.diagonal_values(),
                            cert_or_chain)
        obj1 = cert_or_chain.objective
    t["stage1"] = time.perf_counter() - t0
    report = PipelineReport(spec, obj1, sched1, certificate=cert_or_chain,
                            seed=seed, stage_times=t)
    if stages < 2:
        return report

    bounds = None
    if bounds_mode == "sdp":
        t1 = time.perf_counter()
        bounds = compute_variable_bounds(
            spec, "sdp", {"nu_init": obj1 / spec.R ** 2
                          if spec.preset is not Preset.WC_POTENTIAL else obj1,
                          "model": model})
        t["bounds"] = time.perf_counter() - t1

    t1 = time.perf_counter()
    x2 = stage2_refine(model, x1, bounds)
    obj2 = model.objective_value(x2)
    sched2 = model.schedule_from_point(x2)
    t["stage2"] = time.perf_counter() - t1
    report.stage2_objective = obj2
    report.stage2_schedule = sched2
    if stages < 3:
        report.bounds = bounds
        return report

    if bounds is None:
        t1 = time.perf_counter()
        stage_inputs = {"objective": obj2, "Mtilde": Mtilde,
                        "schedule": sched2, "steps": model.step_values(x2)}
        if spec.preset is Preset.WC_POTENTIAL:
            stage_inputs["h"] = float(model.step_values(x2)[0])
        bounds = compute_variable_bounds(spec, "heuristic", stage_inputs)
        t["bounds"] = time.perf_counter() - t1
    report.bounds = bounds

    t1 = time.perf_counter()
    result = solve_global(model, bounds, x2, gap_rel=gap_rel, gap_abs=gap_abs,
                          seed=seed, node_limit=node_limit,
                          time_limit=time_limit, threads=threads,
                          log_every=log_every)
    t["stage3"] = time.perf_counter() - t1
    report.bnb = result

    # the paper's interior check: heuristic boxes are unverified, so a
    # solution pinned to a box face triggers a relaxation-based redo
    if bounds.provenance == "heuristic" and _touches_box(model, bounds, result.incumbent):
        log.warning("incumbent touches a heuristic bound; re-solving with "
                    "relaxation-based bounds")
        nu_init = obj1 / spec.R ** 2 if spec.preset is not Preset.WC_POTENTIAL else obj1
        bounds = compute_variable_bounds(spec, "sdp", {"nu_init": nu_init,
                                                       "model": model})
        report.bounds = bounds
        result = solve_global(model, bounds, x2, gap_rel=gap_rel,
                              gap_abs=gap_abs, seed=seed,
                              node_limit=node_limit, time_limit=time_limit,
                              threads=threads, log_every=log_every)
        report.bnb = result
    return report


def _touches_box(model: QcqpModel, bounds: VariableBounds, x: np.ndarray,
                 tol: float = 1e-7) -> bool:
    """Heuristic-bound sanity: the optimum should sit strictly inside the
    estimated boxes.  The objective multiplier is exempt (it touches its
    cap exactly when the local stage was already optimal)."""
    lb, ub = bounds.box_for(model)
    for i, v in enumerate(model.variables):
        if v.kind not in ("step", "lam", "tau", "b", "c"):
            continue
        if ub[i] - lb[i] <= tol:
            continue
        if x[i] > ub[i] - tol and np.isfinite(ub[i]):
            return True
        if v.kind == "step" and x[i] < lb[i] + tol and np.isfinite(lb[i]):
            return True
    return False
