"""Assembly of the stepsize-design QCQP and its convex companions.

The inner dual's multipliers become decision variables jointly with the
stepsizes; the PSD slack Z is replaced by a Cholesky factor P (lower
triangular, nonnegative diagonal) through the quadratic equality
P P^T = Z, and any multiplier-times-quadratic-stepsize product is split to
degree two with auxiliary Theta variables pinned to the B blocks.

Also here: the redundant-but-essential linear facts implied by Z >= 0, the
rank-1 lifted SDP relaxation (quadratic monomials replaced by entries of a
PSD-bordered moment matrix), and variable-bound computation by both the
relaxation route and the stage-2 heuristic route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conic import (
    ConicBuilder,
    ConicModel,
    project_psd,
    psd_cholesky,
    solve_conic_robust,
    svec_entry_index,
)
from .gram import (
    STAR,
    MatrixPoly,
    Preset,
    StepsizeSchedule,
    constraint_matrices,
    selector_basis,
    step_variable_names,
    tri_pairs,
)
from .inner import DualCertificate, ProblemSpec, ordered_pairs

__all__ = [
    "Variable",
    "LinCon",
    "QuadCon",
    "QcqpModel",
    "VariableBounds",
    "BoundFailure",
    "build_bnbpep_qcqp",
    "add_implied_psd_facts",
    "lift_rank1_relaxation",
    "compute_variable_bounds",
    "standard_form_counts",
]

INF = float("inf")


@dataclass
class Variable:
    name: str
    kind: str  # step | nu | lam | tau | eta | Z | P | Theta | b | c
    lb: float = -INF
    ub: float = INF
    meta: tuple = ()


@dataclass
class LinCon:
    terms: dict  # var index -> coefficient
    sense: str   # "==" | "<="
    rhs: float
    tag: str = ""


@dataclass
class QuadCon:
    quad: dict   # (i, j) canonical var-index pair -> coefficient
    lin: dict    # var index -> coefficient
    rhs: float
    sense: str = "=="
    tag: str = ""


def _canon(i: int, j: int):
    return (i, j) if i <= j else (j, i)


@dataclass
class ZBlockInfo:
    name: str
    n: int
    entries: dict  # (r, c) with r <= c -> var index


@dataclass
class PBlockInfo:
    name: str
    n: int
    entries: dict  # (r, c) with r >= c -> var index (upper entries fixed at 0)
    z_name: str = ""


@dataclass
class QcqpModel:
    spec: ProblemSpec
    variables: list
    lin_cons: list
    quad_cons: list
    objective: dict           # var index -> coefficient (linear objective)
    objective_const: float
    step_vars: list           # indices of stepsize variables (fixed order)
    z_blocks: list
    p_blocks: list
    counted_sign_vars: list   # indices whose sign bound is a reported row
    implied_facts_added: bool = False
    pairs: list = field(default_factory=list)        # multiplier pair order
    extra: dict = field(default_factory=dict)

    def index(self, name: str) -> int:
        return self._by_name[name]

    def finalize(self):
        self._by_name = {v.name: k for k, v in enumerate(self.variables)}
        return self

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def objective_value(self, x: np.ndarray) -> float:
        return float(sum(c * x[i] for i, c in self.objective.items())
                     + self.objective_const)

    def violation(self, x: np.ndarray) -> float:
        """Worst constraint/bound violation at a point."""
        worst = 0.0
        for v, xi in zip(self.variables, x):
            worst = max(worst, v.lb - xi, xi - v.ub)
        for con in self.lin_cons:
            val = sum(c * x[i] for i, c in con.terms.items())
            worst = max(worst, val - con.rhs if con.sense == "<=" else abs(val - con.rhs))
        for con in self.quad_cons:
            val = sum(c * x[i] * x[j] for (i, j), c in con.quad.items())
            val += sum(c * x[i] for i, c in con.lin.items())
            worst = max(worst, val - con.rhs if con.sense == "<=" else abs(val - con.rhs))
        return float(worst)

    def z_matrices(self, x: np.ndarray) -> list:
        out = []
        for blk in self.z_blocks:
            Z = np.zeros((blk.n, blk.n))
            for (r, c), i in blk.entries.items():
                Z[r, c] = Z[c, r] = x[i]
            out.append(Z)
        return out

    def step_values(self, x: np.ndarray) -> np.ndarray:
        return np.array([x[i] for i in self.step_vars])

    def schedule_from_point(self, x: np.ndarray) -> StepsizeSchedule:
        return schedule_from_steps(self.spec, self.step_values(x))


def schedule_from_steps(spec: ProblemSpec, steps: np.ndarray) -> StepsizeSchedule:
    from .gram import Basis

    N = spec.N
    if spec.preset is Preset.SC_GRAD:
        rows, k = [], 0
        for i in range(1, N + 1):
            rows.append(tuple(float(steps[k + j]) for j in range(i)))
            k += i
        return StepsizeSchedule(N, Basis.ALPHA, tuple(rows), (spec.mu, spec.L))
    if spec.preset is Preset.NONCONVEX_GRAD:
        rows, k = [], 0
        for i in range(1, N + 1):
            rows.append(tuple(float(steps[k + j]) for j in range(i)))
            k += i
        return StepsizeSchedule(N, Basis.HBAR, tuple(rows), (0.0, spec.L))
    if spec.preset is Preset.GD_NOMOMENTUM:
        return StepsizeSchedule.diagonal([float(s) for s in steps], Basis.H,
                                         (0.0, spec.L))
    return StepsizeSchedule.diagonal([float(steps[0])] * max(N, 1), Basis.H)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

class _Ctx:
    """Mutable assembly state shared by the per-preset builders."""

    def __init__(self, spec):
        self.spec = spec
        self.variables: list[Variable] = []
        self.lin: list[LinCon] = []
        self.quad: list[QuadCon] = []
        self.by_name: dict[str, int] = {}
        self.counted: list[int] = []

    def add_var(self, name, kind, lb=-INF, ub=INF, counted=False, meta=()):
        idx = len(self.variables)
        self.variables.append(Variable(name, kind, lb, ub, meta))
        self.by_name[name] = idx
        if counted:
            self.counted.append(idx)
        return idx


def _add_z_p_blocks(ctx: _Ctx, tag: str, n: int, full_p: bool):
    """Declare a Z block (upper triangle) and its Cholesky factor P."""
    z_entries = {}
    for r in range(n):
        for c in range(r, n):
            z_entries[(r, c)] = ctx.add_var(f"Z{tag}[{r},{c}]", "Z")
    p_entries = {}
    for r in range(n):
        for c in range(n):
            if c > r and not full_p:
                continue
            if c > r:
                idx = ctx.add_var(f"P{tag}[{r},{c}]", "P", lb=0.0, ub=0.0)
            elif c == r:
                idx = ctx.add_var(f"P{tag}[{r},{c}]", "P", lb=0.0, counted=True)
            else:
                idx = ctx.add_var(f"P{tag}[{r},{c}]", "P")
            p_entries[(r, c)] = idx
    # P P^T = Z, one scalar row per upper-triangular entry
    ppT = []
    for r in range(n):
        for c in range(r, n):
            quad = {}
            for k in range(min(r, c) + 1):
                key = _canon(p_entries[(r, k)], p_entries[(c, k)])
                quad[key] = quad.get(key, 0.0) + 1.0
            ppT.append(QuadCon(quad, {z_entries[(r, c)]: -1.0}, 0.0, "==",
                               f"ppT{tag}"))
    ctx.quad.extend(ppT)
    zb = ZBlockInfo(f"Z{tag}", n, z_entries)
    pb = PBlockInfo(f"P{tag}", n, p_entries, f"Z{tag}")
    return zb, pb


def _poly_times_scalar_var(poly: MatrixPoly, r: int, c: int, scalar_idx: int,
                           step_idx: list, sign: float,
                           quad: dict, lin: dict, theta_entry=None):
    """Accumulate sign * scalar_var * poly[r, c] into (quad, lin).

    Affine entries produce scalar and scalar-times-step terms; quadratic
    entries require the Theta substitute for that entry (degree control).
    """
    cst, plin, pquad = poly.entry_terms(r, c)
    if pquad:
        if theta_entry is None:
            raise ValueError("quadratic block entry needs a Theta variable")
        key = _canon(scalar_idx, theta_entry)
        quad[key] = quad.get(key, 0.0) + sign
        return
    if cst:
        lin[scalar_idx] = lin.get(scalar_idx, 0.0) + sign * cst
    for v, coef in plin.items():
        key = _canon(scalar_idx, step_idx[v])
        quad[key] = quad.get(key, 0.0) + sign * coef


def _poly_linear_terms(poly: MatrixPoly, r: int, c: int, step_idx: list,
                       sign: float, quad: dict, lin: dict):
    """Accumulate sign * poly[r, c] (a bare polynomial of the steps)."""
    cst, plin, pquad = poly.entry_terms(r, c)
    for v, coef in plin.items():
        lin[step_idx[v]] = lin.get(step_idx[v], 0.0) + sign * coef
    for (v1, v2), coef in pquad.items():
        key = _canon(step_idx[v1], step_idx[v2])
        quad[key] = quad.get(key, 0.0) + sign * coef
    return sign * cst  # constant returned for the rhs


def build_bnbpep_qcqp(spec: ProblemSpec) -> QcqpModel:
    """The full stepsize-design QCQP for a preset, implied facts included."""
    if spec.preset in (Preset.SC_GRAD, Preset.GD_NOMOMENTUM):
        model = _build_anchored_convex(spec)
    elif spec.preset is Preset.NONCONVEX_GRAD:
        model = _build_nonconvex(spec)
    else:
        model = _build_potential(spec)
    add_implied_psd_facts(model)
    return model


def _build_anchored_convex(spec: ProblemSpec) -> QcqpModel:
    N = spec.N
    basis = selector_basis(N)
    blocks = constraint_matrices(basis, None, spec.preset,
                                 class_params=(spec.mu, spec.L))
    pairs = ordered_pairs(basis.indices)
    smooth = spec.L - spec.mu if spec.preset is Preset.SC_GRAD else spec.L

    ctx = _Ctx(spec)
    step_idx = [ctx.add_var(nm, "step") for nm in step_variable_names(spec.preset, N)]
    nu = ctx.add_var("nu", "nu", lb=0.0, counted=True)
    lam = {p: ctx.add_var(f"lam[{p[0]},{p[1]}]", "lam", lb=0.0, counted=True)
           for p in pairs}
    zb, pb = _add_z_p_blocks(ctx, "", basis.n, full_p=False)

    # value stationarity: sum lam * a_{i,j} = target
    target = (basis.a(STAR, N) if spec.preset is Preset.GD_NOMOMENTUM
              else np.zeros(basis.m))
    for r in range(basis.m):
        terms = {}
        for p in pairs:
            coef = float(basis.a(*p)[r])
            if coef:
                terms[lam[p]] = coef
        ctx.lin.append(LinCon(terms, "==", float(target[r]), "a_eq"))

    # Gram stationarity, entrywise on the upper triangle
    B0s = blocks[(0, STAR)].B  # constant (x_0 is schedule-free)
    obj_poly = None
    if spec.preset is Preset.SC_GRAD and spec.mu != 0.0:
        blkNs, blksN = blocks[(N, STAR)], blocks[(STAR, N)]
        obj_poly = (MatrixPoly.constant(blkNs.C)
                    + blkNs.B.scale(spec.mu ** 2)
                    - blksN.A.scale(2 * spec.mu))
    elif spec.preset is Preset.SC_GRAD:
        obj_poly = MatrixPoly.constant(blocks[(N, STAR)].C)

    n = basis.n
    for r in range(n):
        for c in range(r, n):
            quad, lin = {}, {}
            rhs = 0.0
            lin[nu] = float(B0s.const[r, c])
            if obj_poly is not None:
                rhs -= _poly_linear_terms(obj_poly, r, c, step_idx, -1.0, quad, lin)
            for p in pairs:
                blk = blocks[p]
                _poly_times_scalar_var(blk.A, r, c, lam[p], step_idx, 1.0, quad, lin)
                coefC = blk.C[r, c] / (2 * smooth)
                if coefC:
                    lin[lam[p]] = lin.get(lam[p], 0.0) + coefC
            lin[zb.entries[(r, c)]] = lin.get(zb.entries[(r, c)], 0.0) - 1.0
            lin = {k: v for k, v in lin.items() if v != 0.0}
            ctx.quad.append(QuadCon(quad, lin, rhs, "==", "z_eq"))

    model = QcqpModel(
        spec=spec,
        variables=ctx.variables,
        lin_cons=ctx.lin,
        quad_cons=ctx.quad,
        objective={nu: spec.R ** 2},
        objective_const=0.0,
        step_vars=step_idx,
        z_blocks=[zb],
        p_blocks=[pb],
        counted_sign_vars=ctx.counted,
        pairs=pairs,
        extra={"basis": basis, "blocks": blocks},
    ).finalize()
    return model


def _build_nonconvex(spec: ProblemSpec) -> QcqpModel:
    N = spec.N
    L = spec.L
    basis = selector_basis(N)
    blocks = constraint_matrices(basis, None, spec.preset, class_params=(0.0, L))
    pairs = ordered_pairs(basis.indices)
    pts = list(range(N + 1))

    ctx = _Ctx(spec)
    step_idx = [ctx.add_var(nm, "step") for nm in step_variable_names(spec.preset, N)]
    nu = ctx.add_var("nu", "nu", lb=0.0, counted=True)
    lam = {p: ctx.add_var(f"lam[{p[0]},{p[1]}]", "lam", lb=0.0, counted=True)
           for p in pairs}
    tau = {i: ctx.add_var(f"tau[{i}]", "tau", lb=0.0) for i in pts}
    eta = {i: ctx.add_var(f"eta[{i}]", "eta", lb=0.0, ub=1.0) for i in pts}
    zb, pb = _add_z_p_blocks(ctx, "", basis.n, full_p=False)
    theta = {}
    n = basis.n
    for p in pairs:
        for r in range(n):
            for c in range(r, n):
                theta[(p, r, c)] = ctx.add_var(
                    f"Theta[{p[0]},{p[1]}][{r},{c}]", "Theta", meta=(p, r, c))

    # value stationarity
    for r in range(basis.m):
        terms = {}
        for p in pairs:
            coef = float(basis.a(*p)[r])
            if coef:
                terms[lam[p]] = coef
        for i in pts:
            coef = float(basis.a(i, STAR)[r])
            if coef:
                terms[tau[i]] = coef
        coef = float(basis.a(STAR, 0)[r])
        if coef:
            terms[nu] = coef
        ctx.lin.append(LinCon(terms, "==", 0.0, "a_eq"))

    # eta simplex
    ctx.lin.append(LinCon({eta[i]: 1.0 for i in pts}, "==", 1.0, "eta_sum"))

    # Gram stationarity
    def gsq(i):
        g = basis.g(i)
        return np.outer(g, g)

    for r in range(n):
        for c in range(r, n):
            quad, lin = {}, {}
            for i in pts:
                coef = float(gsq(i)[r, c])
                if coef:
                    lin[eta[i]] = lin.get(eta[i], 0.0) - coef
                    lin[tau[i]] = lin.get(tau[i], 0.0) + coef / (2 * L)
            for p in pairs:
                blk = blocks[p]
                th = theta[(p, r, c)]
                key = _canon(lam[p], th)
                quad[key] = quad.get(key, 0.0) - L / 4.0
                _poly_times_scalar_var(blk.Atilde, r, c, lam[p], step_idx, 0.5,
                                       quad, lin)
                coefC = blk.C[r, c] / (4 * L)
                if coefC:
                    lin[lam[p]] = lin.get(lam[p], 0.0) + coefC
            lin[zb.entries[(r, c)]] = lin.get(zb.entries[(r, c)], 0.0) - 1.0
            lin = {k: v for k, v in lin.items() if v != 0.0}
            ctx.quad.append(QuadCon(quad, lin, 0.0, "==", "z_eq"))

    # Theta pinning: Theta[p][r,c] = B_p(h)[r,c]
    for p in pairs:
        Bp = blocks[p].B
        for r in range(n):
            for c in range(r, n):
                quad, lin = {}, {}
                lin[theta[(p, r, c)]] = 1.0
                rhs = _poly_linear_terms(Bp, r, c, step_idx, -1.0, quad, lin)
                ctx.quad.append(QuadCon(quad, lin, -rhs, "==", "theta_eq"))

    model = QcqpModel(
        spec=spec,
        variables=ctx.variables,
        lin_cons=ctx.lin,
        quad_cons=ctx.quad,
        objective={nu: spec.R ** 2},
        objective_const=0.0,
        step_vars=step_idx,
        z_blocks=[zb],
        p_blocks=[pb],
        counted_sign_vars=ctx.counted,
        pairs=pairs,
        extra={"basis": basis, "blocks": blocks, "theta": theta,
               "tau": tau, "eta": eta},
    ).finalize()
    return model


def _build_potential(spec: ProblemSpec) -> QcqpModel:
    """Per-iteration potential-verification QCQP for the weakly convex preset.

    One block of (lam, tau, Z, P, Theta) per step k in [0:N]; the potential
    weights b_k (terminal one eliminated at zero) and slopes c_k couple the
    blocks; a single scalar stepsize h.
    """
    N = spec.N
    Lt = spec.L_tilde
    basis = selector_basis(0, "potential_block")
    blocks = constraint_matrices(basis, None, Preset.WC_POTENTIAL)
    idxs = [0, 1, 2, 3, STAR]
    pairs = ordered_pairs(idxs)
    pts = [0, 1, 2, 3]

    ctx = _Ctx(spec)
    h = ctx.add_var("h", "step")
    b = {k: ctx.add_var(f"b[{k}]", "b", lb=0.0, counted=True) for k in range(N + 1)}
    c = {k: ctx.add_var(f"c[{k}]", "c", lb=0.0, counted=True) for k in range(N + 1)}

    per_step = []
    z_blocks, p_blocks = [], []
    for k in range(N + 1):
        lam = {p: ctx.add_var(f"lam{k}[{p[0]},{p[1]}]", "lam", lb=0.0,
                              counted=True) for p in pairs}
        # the tau family formally spans all five points; the star member
        # multiplies an identically-zero value row
        tau = {}
        for i in pts:
            tau[i] = ctx.add_var(f"tau{k}[{i}]", "tau", lb=0.0, counted=True)
        tau[STAR] = ctx.add_var(f"tau{k}[star]", "tau", lb=0.0)
        zb, pb = _add_z_p_blocks(ctx, f"_{k}", basis.n, full_p=True)
        theta = {}
        for p in pairs:
            for r in range(basis.n):
                for cc in range(r, basis.n):
                    theta[(p, r, cc)] = ctx.add_var(
                        f"Theta{k}[{p[0]},{p[1]}][{r},{cc}]", "Theta",
                        meta=(k, p, r, cc))
        per_step.append({"lam": lam, "tau": tau, "zb": zb, "pb": pb,
                         "theta": theta})
        z_blocks.append(zb)
        p_blocks.append(pb)

    C2s = blocks[(2, STAR)].C
    C0s = blocks[(0, STAR)].C
    B13 = blocks[(1, 3)].B
    B02 = blocks[(0, 2)].B
    n = basis.n
    step_idx = [h]

    for k in range(N + 1):
        st = per_step[k]
        lam, tau, zb, theta = st["lam"], st["tau"], st["zb"], st["theta"]
        b_next = b.get(k + 1)  # None at k = N (terminal weight is zero)

        # value stationarity: -q + sum tau a_{i,star} + sum lam a = 0,
        # with q = b_{k+1} a_{star,3} - b_k a_{star,2}
        for r in range(basis.m):
            terms = {}
            if b_next is not None:
                coef = float(basis.a(STAR, 3)[r])
                if coef:
                    terms[b_next] = -coef
            coef = float(basis.a(STAR, 2)[r])
            if coef:
                terms[b[k]] = terms.get(b[k], 0.0) + coef
            for i in pts:
                ca = float(basis.a(i, STAR)[r])
                if ca:
                    terms[tau[i]] = ca
            for p in pairs:
                ca = float(basis.a(*p)[r])
                if ca:
                    terms[lam[p]] = ca
            ctx.lin.append(LinCon(terms, "==", 0.0, f"a_eq_{k}"))

        # Gram stationarity: -Q + sum lam (A - Theta/2) = Z
        for r in range(n):
            for cc in range(r, n):
                quad, lin = {}, {}
                rhs = float(C2s[r, cc])  # move -C_{2,star} to the rhs
                if b_next is not None:
                    _poly_times_scalar_var(B13, r, cc, b_next, step_idx, -1.0,
                                           quad, lin,
                                           theta_entry=theta[((1, 3), r, cc)])
                _poly_times_scalar_var(B02, r, cc, b[k], step_idx, 1.0,
                                       quad, lin,
                                       theta_entry=theta[((0, 2), r, cc)])
                coefC = float(C0s[r, cc])
                if coefC:
                    lin[c[k]] = lin.get(c[k], 0.0) + coefC
                for p in pairs:
                    blk = blocks[p]
                    _poly_times_scalar_var(blk.A, r, cc, lam[p], step_idx, 1.0,
                                           quad, lin)
                    key = _canon(lam[p], theta[(p, r, cc)])
                    quad[key] = quad.get(key, 0.0) - 0.5
                lin[zb.entries[(r, cc)]] = lin.get(zb.entries[(r, cc)], 0.0) - 1.0
                lin = {kk: v for kk, v in lin.items() if v != 0.0}
                ctx.quad.append(QuadCon(quad, lin, rhs, "==", f"z_eq_{k}"))

        # Theta pinning
        for p in pairs:
            Bp = blocks[p].B
            for r in range(n):
                for cc in range(r, n):
                    quad, lin = {}, {}
                    lin[theta[(p, r, cc)]] = 1.0
                    rhs = _poly_linear_terms(Bp, r, cc, step_idx, -1.0, quad, lin)
                    ctx.quad.append(QuadCon(quad, lin, -rhs, "==",
                                            f"theta_eq_{k}"))

    scale = 1.0 / (N + 1)
    objective = {c[k]: Lt ** 2 * scale for k in range(N + 1)}
    objective[b[0]] = objective.get(b[0], 0.0) + spec.R ** 2 * scale

    model = QcqpModel(
        spec=spec,
        variables=ctx.variables,
        lin_cons=ctx.lin,
        quad_cons=ctx.quad,
        objective=objective,
        objective_const=0.0,
        step_vars=step_idx,
        z_blocks=z_blocks,
        p_blocks=p_blocks,
        counted_sign_vars=ctx.counted,
        pairs=pairs,
        extra={"basis": basis, "blocks": blocks, "per_step": per_step,
               "b": b, "c": c},
    ).finalize()
    return model


# ---------------------------------------------------------------------------
# implied facts and counting
# ---------------------------------------------------------------------------

def add_implied_psd_facts(model: QcqpModel) -> QcqpModel:
    """Linear facts implied by Z >= 0: a symmetric Z with nonnegative
    diagonal and |Z_ij| <= (Z_ii + Z_jj)/2.  Symmetry is structural here
    (one variable per unordered entry), so each n x n block contributes
    n + n(n-1) rows."""
    if model.implied_facts_added:
        raise ValueError("implied facts already present")
    for blk in model.z_blocks:
        n = blk.n
        for r in range(n):
            i = blk.entries[(r, r)]
            model.lin_cons.append(LinCon({i: -1.0}, "<=", 0.0, "implied_diag"))
        for r in range(n):
            for c in range(r + 1, n):
                off = blk.entries[(r, c)]
                dr = blk.entries[(r, r)]
                dc = blk.entries[(c, c)]
                model.lin_cons.append(LinCon(
                    {off: 1.0, dr: -0.5, dc: -0.5}, "<=", 0.0,
                    "implied_sandwich"))
                model.lin_cons.append(LinCon(
                    {off: -1.0, dr: -0.5, dc: -0.5}, "<=", 0.0,
                    "implied_sandwich"))
    model.implied_facts_added = True
    return model


def standard_form_counts(model: QcqpModel):
    """(variables, constraints) of the standard-form model.

    Constraints count scalar linear rows, scalar quadratic rows, and one
    sign row per variable in the counted set (the core dual-feasibility
    signs); plain box bounds attached for branch-and-bound do not count.
    """
    n_cons = len(model.lin_cons) + len(model.quad_cons) + len(model.counted_sign_vars)
    return model.n_vars, n_cons


# ---------------------------------------------------------------------------
# assignments: full QCQP points from inner solutions
# ---------------------------------------------------------------------------

def assemble_point(model: QcqpModel, schedule_values: np.ndarray,
                   cert: DualCertificate, psd_floor: float = -1e-7) -> np.ndarray:
    """Full variable assignment from stepsizes plus an inner-dual solution
    (anchored presets).  Slack matrices within ``psd_floor`` of the cone are
    projected onto it; the projection shift lands in the stationarity
    residual, so callers re-check overall feasibility."""
    spec = model.spec
    if spec.preset is Preset.WC_POTENTIAL:
        raise ValueError("use assemble_potential_point")
    x = np.zeros(model.n_vars)
    for i, v in zip(model.step_vars, schedule_values):
        x[i] = v
    x[model.index("nu")] = cert.nu
    for p in model.pairs:
        x[model.index(f"lam[{p[0]},{p[1]}]")] = cert.lambdas[p]
    for i, t in cert.tau.items():
        x[model.index(f"tau[{i}]")] = t
    for i, e in cert.eta.items():
        x[model.index(f"eta[{i}]")] = e
    zb = model.z_blocks[0]
    Z = project_psd(cert.Z, floor=psd_floor)
    for (r, c), i in zb.entries.items():
        x[i] = Z[r, c]
    P, _, _ = psd_cholesky(Z, tol=1e-9)
    pb = model.p_blocks[0]
    for (r, c), i in pb.entries.items():
        x[i] = P[r, c]
    theta = model.extra.get("theta")
    if theta is not None:
        blocks = model.extra["blocks"]
        for (p, r, c), i in theta.items():
            x[i] = blocks[p].B.eval(schedule_values)[r, c]
    return x


def assemble_potential_point(model: QcqpModel, h: float, b_vals, c_vals,
                             step_data) -> np.ndarray:
    """Full assignment for the potential preset.

    ``step_data[k]`` carries dicts ``lam``, ``tau`` and the matrix ``Z``.
    """
    spec = model.spec
    x = np.zeros(model.n_vars)
    x[model.index("h")] = h
    for k in range(spec.N + 1):
        x[model.index(f"b[{k}]")] = b_vals[k]
        x[model.index(f"c[{k}]")] = c_vals[k]
    blocks = model.extra["blocks"]
    point = np.array([h])
    for k, st in enumerate(model.extra["per_step"]):
        data = step_data[k]
        for p, idx in st["lam"].items():
            x[idx] = data["lam"].get(p, 0.0)
        for i, idx in st["tau"].items():
            if i is STAR:
                continue
            x[idx] = data["tau"].get(i, 0.0)
        Z = project_psd(data["Z"])
        for (r, c), idx in st["zb"].entries.items():
            x[idx] = Z[r, c]
        P, _, _ = psd_cholesky(Z, tol=1e-9)
        for (r, c), idx in st["pb"].entries.items():
            x[idx] = P[r, c]
        for (p, r, c), idx in st["theta"].items():
            x[idx] = blocks[p].B.eval(point)[r, c]
    return x


# ---------------------------------------------------------------------------
# rank-1 lifted relaxation
# ---------------------------------------------------------------------------

def _lift_variable_order(model: QcqpModel):
    """Vectorization order of the lifted moment vector.

    Stepsizes first, then nu, then the remaining quadratic participants in
    declaration order -- matching the fixed row-major indexing used during
    QCQP assembly.
    """
    in_quad = set()
    for con in model.quad_cons:
        for (i, j) in con.quad:
            in_quad.update((i, j))
    w = list(model.step_vars)
    if "nu" in model._by_name:
        w.append(model.index("nu"))
    p_vars = {i for blk in model.p_blocks for i in blk.entries.values()}
    for i, v in enumerate(model.variables):
        if i in w or i in p_vars:
            continue
        if i in in_quad:
            w.append(i)
    return w


def lift_rank1_relaxation(model: QcqpModel, extra_ub=None) -> ConicModel:
    """Convex SDP relaxation: quadratic monomials become entries of a moment
    matrix W constrained by the Schur block [[W, w], [w^T, 1]] >= 0; the
    Cholesky coupling is dropped in favor of Z >= 0.

    ``extra_ub`` is an optional list of (terms, rhs) rows over variable
    names, used by the bound computation to cap the objective.
    """
    w_order = _lift_variable_order(model)
    w_pos = {v: k for k, v in enumerate(w_order)}
    nw = len(w_order)
    p_vars = {i for blk in model.p_blocks for i in blk.entries.values()}

    cb = ConicBuilder()
    scalar_names = {}
    for i, v in enumerate(model.variables):
        if i in w_pos or i in p_vars:
            continue
        scalar_names[i] = f"s{i}"
        cb.add_free(f"s{i}", 1)
    cb.add_psd("S", nw + 1)  # bordered moment matrix
    for blk in model.z_blocks:
        cb.add_psd(blk.name, blk.n)

    z_entry_owner = {}
    for blk in model.z_blocks:
        for (r, c), i in blk.entries.items():
            z_entry_owner[i] = (blk.name, r, c, blk.n)

    def psd_entry_terms(name, r, c, n, coef):
        pos = svec_entry_index(n, r, c)
        scale = 1.0 if r == c else 1.0 / math.sqrt(2.0)
        return (name, pos), coef * scale

    def var_terms(i, coef, terms):
        if i in w_pos:
            key, val = psd_entry_terms("S", w_pos[i], nw, nw + 1, coef)
            terms[key] = terms.get(key, 0.0) + val
        elif i in z_entry_owner:
            name, r, c, n = z_entry_owner[i]
            key, val = psd_entry_terms(name, r, c, n, coef)
            terms[key] = terms.get(key, 0.0) + val
        elif i in p_vars:
            raise ValueError("Cholesky entries do not appear in the relaxation")
        else:
            terms[(scalar_names[i], 0)] = terms.get((scalar_names[i], 0), 0.0) + coef

    # corner of the moment matrix is 1
    corner = {}
    key, val = psd_entry_terms("S", nw, nw, nw + 1, 1.0)
    corner[key] = val
    cb.add_eq(corner, 1.0)

    def emit(con_terms_lin, con_quad, sense, rhs, skip_if_pp=False):
        terms = {}
        for i, coef in con_terms_lin.items():
            var_terms(i, coef, terms)
        for (i, j), coef in con_quad.items():
            if i in p_vars or j in p_vars:
                if skip_if_pp:
                    return
                raise ValueError("unexpected Cholesky product")
            key, val = psd_entry_terms("S", w_pos[i], w_pos[j], nw + 1, coef)
            terms[key] = terms.get(key, 0.0) + val
        if sense == "==":
            cb.add_eq(terms, rhs)
        else:
            cb.add_ub(terms, rhs)

    for con in model.lin_cons:
        emit(con.terms, {}, con.sense, con.rhs)
    for con in model.quad_cons:
        if con.tag.startswith("ppT"):
            continue  # replaced by the Z PSD blocks
        emit(con.lin, con.quad, con.sense, con.rhs)

    # variable sign/box information (skip Cholesky entries)
    for i, v in enumerate(model.variables):
        if i in p_vars:
            continue
        if v.lb > -INF:
            t = {}
            var_terms(i, -1.0, t)
            cb.add_ub(t, -v.lb)
        if v.ub < INF:
            t = {}
            var_terms(i, 1.0, t)
            cb.add_ub(t, v.ub)

    if extra_ub:
        for name_terms, rhs in extra_ub:
            t = {}
            for nm, coef in name_terms.items():
                var_terms(model.index(nm), coef, t)
            cb.add_ub(t, rhs)

    obj = {}
    for i, coef in model.objective.items():
        var_terms(i, coef, obj)
    cb.set_objective(obj)
    out = cb.build()
    out._lift = {"w_order": w_order, "nw": nw, "scalars": scalar_names}
    return out


# ---------------------------------------------------------------------------
# variable bounds
# ---------------------------------------------------------------------------

class BoundFailure(RuntimeError):
    pass


@dataclass
class VariableBounds:
    M_lambda: float
    M_Z: float
    M_P: float
    M_step: float
    M_nu: float
    provenance: str
    M_tilde: float | None = None
    extras: dict = field(default_factory=dict)  # M_tau, M_eta, M_b, M_c

    @property
    def M_alpha(self) -> float:  # spec naming for triangular presets
        return self.M_step

    def box_for(self, model: QcqpModel):
        """Per-variable (lb, ub) arrays for the branch-and-bound stage."""
        lb = np.full(model.n_vars, -INF)
        ub = np.full(model.n_vars, INF)
        caps = {
            "step": (-self.M_step, self.M_step),
            "nu": (0.0, self.M_nu),
            "lam": (0.0, self.M_lambda),
            "Z": (-self.M_Z, self.M_Z),
            "tau": (0.0, self.extras.get("M_tau", INF)),
            "eta": (0.0, 1.0),
            "b": (0.0, self.extras.get("M_b", INF)),
            "c": (0.0, self.extras.get("M_c", INF)),
        }
        for i, v in enumerate(model.variables):
            if v.kind in caps:
                lo, hi = caps[v.kind]
                lb[i], ub[i] = lo, hi
            elif v.kind == "P":
                lb[i], ub[i] = -self.M_P, self.M_P
            elif v.kind == "Theta":
                lb[i], ub[i] = self._theta_interval(model, v)
            lb[i] = max(lb[i], v.lb)
            ub[i] = min(ub[i], v.ub)
        return lb, ub

    def _theta_interval(self, model: QcqpModel, v: Variable):
        """Interval image of the pinned B entry over the stepsize box."""
        meta = v.meta
        p, r, c = (meta[-3], meta[-2], meta[-1])
        B = model.extra["blocks"][p].B
        cst, lin, quad = B.entry_terms(r, c)
        lo = hi = cst
        s = self.M_step
        for coef in lin.values():
            lo -= abs(coef) * s
            hi += abs(coef) * s
        for (v1, v2), coef in quad.items():
            if v1 == v2:
                lo += min(0.0, coef * s * s, coef * 0.0)
                hi += max(0.0, coef * s * s)
            else:
                lo -= abs(coef) * s * s
                hi += abs(coef) * s * s
        return lo, hi


def compute_variable_bounds(spec: ProblemSpec, mode: str,
                            stage_inputs: dict) -> VariableBounds:
    """Valid (relaxation route) or estimated (heuristic route) boxes.

    * ``mode="sdp"``: per-entry maximizations over the rank-1 lifted
      relaxation with the objective capped at the stage-1 value; one family
      of solves per unit cost class, never a summed objective (a summed
      objective can trade one bound below validity to inflate another).
    * ``mode="heuristic"``: extremal-multiplier SDPs at the stage-2
      stepsizes, inflated by M_tilde; unverified, so the caller re-checks
      that global solutions stay interior.
    """
    if mode == "sdp":
        return _bounds_sdp(spec, stage_inputs)
    if mode == "heuristic":
        return _bounds_heuristic(spec, stage_inputs)
    raise ValueError(f"unknown bounds mode {mode!r}")


def _bounds_sdp(spec: ProblemSpec, stage_inputs: dict) -> VariableBounds:
    """Relaxation-route boxes with safety ceilings.

    Multiplier and slack classes are maximized entrywise over the lifted
    relaxation under the warm-start objective cap.  Those maximizations can
    be unbounded (the moment matrix is free to inflate), so each class is
    clipped at a unit ceiling in the problem's normalization; the stepsize
    class is re-maximized under the clipped caps with product-envelope
    rows, iterated to a fixed point, and floored at the classical
    normalized stability range [-2, 2].  The ceilings are unverified in
    the same sense as the heuristic route; callers re-check that global
    solutions stay strictly interior and escalate otherwise.
    """
    nu_init = float(stage_inputs["nu_init"])
    model = stage_inputs.get("model") or build_bnbpep_qcqp(spec)
    ceiling = float(stage_inputs.get("ceiling", 1.0))
    step_floor = float(stage_inputs.get("step_floor", 2.0))
    min_step = float(stage_inputs.get("min_step_bound", 0.0))

    cap_rows = [({"nu": 1.0}, nu_init)] if "nu" in model._by_name else []
    relax = lift_rank1_relaxation(model, extra_ub=cap_rows)

    def entry_max(var_idx, sign=1.0, A_extra=None, b_extra=None):
        w_order = relax._lift["w_order"]
        nw = relax._lift["nw"]
        c = np.zeros(relax.dim)
        if var_idx in w_order:
            pos = w_order.index(var_idx)
            c[relax.offset("S") + svec_entry_index(nw + 1, pos, nw)] = \
                -sign / math.sqrt(2.0)
        else:
            name = relax._lift["scalars"].get(var_idx)
            if name is None:
                return None
            c[relax.offset(name)] = -sign
        A_ub, b_ub = relax.A_ub, relax.b_ub
        if A_extra is not None:
            from scipy import sparse as _sp
            A_ub = _sp.vstack([A_ub, A_extra]).tocsr()
            b_ub = np.concatenate([b_ub, b_extra])
        probe = ConicModel(relax.free_dim, relax.nonneg_dim, relax.psd_dims,
                           c, relax.A_eq, relax.b_eq, A_ub, b_ub,
                           relax.var_info)
        sol = solve_conic_robust(probe, 1e-7, 1e-7)
        if sol.status == "unbounded":
            return np.inf
        if not sol.ok:
            return None
        return float(-sign * sol.objective)

    def class_cap(kind):
        vals = []
        for i, v in enumerate(model.variables):
            if v.kind != kind:
                continue
            m = entry_max(i, 1.0)
            vals.append(np.inf if m is None else m)
        top = max(vals) if vals else 0.0
        return min(top, ceiling)

    M_lambda = class_cap("lam") if any(v.kind == "lam" for v in model.variables) else ceiling

    # Z diagonals live in their own PSD block of the relaxation
    z_vals = []
    for blk in model.z_blocks:
        for r in range(blk.n):
            c = np.zeros(relax.dim)
            c[relax.offset(blk.name) + svec_entry_index(blk.n, r, r)] = -1.0
            probe = ConicModel(relax.free_dim, relax.nonneg_dim, relax.psd_dims,
                               c, relax.A_eq, relax.b_eq, relax.A_ub,
                               relax.b_ub, relax.var_info)
            sol = solve_conic_robust(probe, 1e-7, 1e-7)
            z_vals.append(np.inf if not sol.ok else float(-sol.objective))
    M_Z = min(max(z_vals) if z_vals else 0.0, ceiling)

    M_step = _obbt_step_bound(model, relax, M_lambda, M_Z,
                              start=max(64.0, 4 * step_floor))
    M_step = max(M_step, step_floor, min_step)

    return VariableBounds(
        M_lambda=M_lambda, M_Z=M_Z, M_P=math.sqrt(max(M_Z, 0.0)),
        M_step=M_step, M_nu=nu_init, provenance="sdp",
        extras=_multiplier_extras(spec, None, 1.0) | {"M_b": 10.0 * (spec.N + 1),
                                                      "M_c": 10.0 * (spec.N + 1)},
    )


def _obbt_step_bound(model: QcqpModel, relax, M_lambda: float, M_Z: float,
                     start: float, rounds: int = 6) -> float:
    """Fixed-point stepsize bound: entrywise maximization with envelope
    rows over the current boxes, shrinking until stable."""
    from scipy import sparse as _sp

    w_order = relax._lift["w_order"]
    nw = relax._lift["nw"]
    offS = relax.offset("S")

    def w_entry(p, q):
        pos = svec_entry_index(nw + 1, p, q)
        return offS + pos, (1.0 if p == q else 1.0 / math.sqrt(2.0))

    A = start
    for _ in range(rounds):
        boxes = {}
        cap_rows, cap_rhs = [], []
        for i, v in enumerate(model.variables):
            if i not in w_order:
                continue
            if v.kind == "lam":
                boxes[w_order.index(i)] = (0.0, M_lambda)
            elif v.kind == "step":
                boxes[w_order.index(i)] = (-A, A)
        data, ri, ci, rhs = [], [], [], []
        row = 0

        def add(entries, rv):
            nonlocal row
            for ccol, cv in entries:
                data.append(cv)
                ri.append(row)
                ci.append(ccol)
            rhs.append(rv)
            row += 1

        keys = sorted(boxes)
        for a_i in range(len(keys)):
            for b_i in range(a_i, len(keys)):
                pk, qk = keys[a_i], keys[b_i]
                (li, ui), (lj, uj) = boxes[pk], boxes[qk]
                Wc, Ws = w_entry(pk, qk)
                xi = w_entry(pk, nw)
                xj = w_entry(qk, nw)
                add([(Wc, -Ws), (xj[0], li * xj[1]), (xi[0], lj * xi[1])], li * lj)
                add([(Wc, -Ws), (xj[0], ui * xj[1]), (xi[0], uj * xi[1])], ui * uj)
                add([(Wc, Ws), (xj[0], -ui * xj[1]), (xi[0], -lj * xi[1])], -ui * lj)
                add([(Wc, Ws), (xj[0], -li * xj[1]), (xi[0], -uj * xi[1])], -li * uj)
        for pk, (li, ui) in boxes.items():
            xc, xs = w_entry(pk, nw)
            add([(xc, xs)], ui)
            add([(xc, -xs)], -li)
        for blk in model.z_blocks:
            for r in range(blk.n):
                for c2 in range(r, blk.n):
                    pos = relax.offset(blk.name) + svec_entry_index(blk.n, r, c2)
                    scale = 1.0 if r == c2 else 1.0 / math.sqrt(2.0)
                    add([(pos, scale)], M_Z)
                    add([(pos, -scale)], M_Z)
        A_extra = _sp.csr_matrix((data, (ri, ci)), shape=(row, relax.dim))
        b_extra = np.array(rhs)

        best = 0.0
        ok = False
        for i in model.step_vars:
            if i not in w_order:
                continue
            pos = w_order.index(i)
            for sign in (1.0, -1.0):
                c = np.zeros(relax.dim)
                xc, xs = w_entry(pos, nw)
                c[xc] = -sign * xs
                A_ub = _sp.vstack([relax.A_ub, A_extra]).tocsr()
                b_ub = np.concatenate([relax.b_ub, b_extra])
                probe = ConicModel(relax.free_dim, relax.nonneg_dim,
                                   relax.psd_dims, c, relax.A_eq, relax.b_eq,
                                   A_ub, b_ub, relax.var_info)
                sol = solve_conic_robust(probe, 1e-7, 1e-7)
                if sol.ok:
                    ok = True
                    best = max(best, abs(sol.objective))
        if not ok:
            return A
        if best >= 0.995 * A:
            return A
        A = best
    return A


def _bounds_heuristic(spec: ProblemSpec, stage_inputs: dict) -> VariableBounds:
    from .inner import solve_dual_extremal
    from .presets import solve_potential_chain

    Mt = float(stage_inputs.get("Mtilde", 1.01))
    if Mt <= 1.0:
        raise ValueError("Mtilde must exceed 1")
    cap_slack = float(stage_inputs.get("cap_slack", 1e-3))
    objective = float(stage_inputs["objective"])

    if spec.preset is Preset.WC_POTENTIAL:
        h = float(stage_inputs["h"])
        chain = solve_potential_chain(spec, h)
        lam_max = max(max(st["lam"].values()) for st in chain.steps)
        z_max = max(np.diag(st["Z"]).max() for st in chain.steps)
        b_max = float(np.max(chain.b))
        c_max = float(np.max(chain.c))
        return VariableBounds(
            M_lambda=Mt * lam_max, M_Z=Mt * z_max,
            M_P=math.sqrt(Mt * z_max), M_step=5 * Mt * abs(h),
            M_nu=objective, provenance="heuristic", M_tilde=Mt,
            extras={"M_tau": 5 * Mt * max(
                max(st["tau"].values()) for st in chain.steps),
                "M_b": max(1.0, 5 * Mt * b_max),
                "M_c": max(1.0, 5 * Mt * c_max)},
        )

    schedule = stage_inputs["schedule"]
    cap = objective
    _, cert_l1 = solve_dual_extremal(spec, schedule, c_lambda=1.0, cap=cap,
                                     sense="max", cap_slack=cap_slack)
    _, cert_tr = solve_dual_extremal(spec, schedule, c_trace=1.0, cap=cap,
                                     sense="max", cap_slack=cap_slack)
    lam_max = max(cert_l1.lambdas.values())
    z_max = float(np.diag(cert_tr.Z).max())
    step_max = float(np.abs(np.asarray(stage_inputs["steps"])).max())
    return VariableBounds(
        M_lambda=Mt * lam_max, M_Z=Mt * z_max, M_P=math.sqrt(Mt * z_max),
        M_step=5 * Mt * step_max, M_nu=objective / spec.R ** 2,
        provenance="heuristic", M_tilde=Mt,
        extras=_multiplier_extras(spec, cert_l1, Mt),
    )


def _multiplier_extras(spec: ProblemSpec, cert, Mt: float) -> dict:
    extras = {}
    if spec.preset is Preset.NONCONVEX_GRAD:
        tau_max = 1.0
        if cert is not None and cert.tau:
            tau_max = max(1e-2, max(cert.tau.values()))
        extras["M_tau"] = 5 * Mt * tau_max
        extras["M_eta"] = 1.0
    return extras
