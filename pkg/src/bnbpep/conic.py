"""Small dense conic solves plus PSD utilities.

Models carry free scalars, nonnegative scalars, and symmetric PSD matrix
variables (stored in scaled-triangular "svec" form), linear equalities, and
optional linear inequalities.  Every SDP and LP in the toolkit flows through
:func:`solve_conic`; problems without PSD blocks take a fast LP path
(HiGHS via scipy), the rest go to the Clarabel interior-point solver.

The PSD helpers implement the rank-revealing semidefinite Cholesky
factorization (lower triangular, nonnegative diagonal, all-zero columns for
the rank deficiency) and extreme eigenpair extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

import clarabel

__all__ = [
    "ConicModel",
    "ConicBuilder",
    "ConicSolution",
    "NotPsdError",
    "solve_conic",
    "psd_cholesky",
    "min_eigpair",
    "svec",
    "smat",
    "svec_dim",
    "svec_entry_index",
]

_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# scaled triangular vectorization (upper triangle, column-major), chosen so
# that tr(M X) = svec(M) @ svec(X)
# ---------------------------------------------------------------------------

def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def svec_entry_index(n: int, r: int, c: int) -> int:
    """Position of entry (r, c), r <= c, in the svec of an n x n matrix."""
    if r > c:
        r, c = c, r
    return c * (c + 1) // 2 + r


def svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    out = np.empty(svec_dim(n))
    k = 0
    for c in range(n):
        for r in range(c + 1):
            out[k] = M[r, c] if r == c else _SQRT2 * 0.5 * (M[r, c] + M[c, r])
            k += 1
    return out

def smat(v: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    k = 0
    for c in range(n):
        for r in range(c + 1):
            if r == c:
                M[r, c] = v[k]
            else:
                M[r, c] = M[c, r] = v[k] / _SQRT2
            k += 1
    return M


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class ConicModel:
    """minimize c @ x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x in K.

    K is a product of a free block, a nonnegative block, and PSD blocks
    (in svec coordinates), laid out in that order within x.
    """

    free_dim: int
    nonneg_dim: int
    psd_dims: list[int]
    c: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    A_ub: sparse.csr_matrix | None = None
    b_ub: np.ndarray | None = None
    var_info: dict = field(default_factory=dict)  # name -> (offset, size, kind)

    @property
    def dim(self) -> int:
        return self.free_dim + self.nonneg_dim + sum(svec_dim(n) for n in self.psd_dims)

    def offset(self, name: str) -> int:
        return self.var_info[name][0]

    def value(self, name: str, x: np.ndarray):
        off, size, kind = self.var_info[name]
        if kind == "psd":
            return smat(x[off:off + svec_dim(size)], size)
        if size == 1:
            return float(x[off])
        return x[off:off + size]


class ConicBuilder:
    """Incremental construction of a :class:`ConicModel`.

    Variables must be declared before rows reference them; PSD blocks are
    addressed entrywise through :meth:`psd_entry`.
    """

    def __init__(self):
        self._free: list[tuple[str, int]] = []
        self._nonneg: list[tuple[str, int]] = []
        self._psd: list[tuple[str, int]] = []
        self._rows_eq: list[dict[str, dict[int, float] | float]] = []
        self._rows_ub: list[dict] = []
        self._obj: dict[tuple[str, int], float] = {}

    # -- variables ---------------------------------------------------------

    def add_free(self, name: str, size: int = 1) -> str:
        self._free.append((name, size))
        return name

    def add_nonneg(self, name: str, size: int = 1) -> str:
        self._nonneg.append((name, size))
        return name

    def add_psd(self, name: str, n: int) -> str:
        self._psd.append((name, n))
        return name

    # -- rows ---------------------------------------------------------------

    def add_eq(self, terms: dict, rhs: float) -> None:
        """terms maps (name, local_index) -> coefficient."""
        self._rows_eq.append({"terms": dict(terms), "rhs": float(rhs)})

    def add_ub(self, terms: dict, rhs: float) -> None:
        self._rows_ub.append({"terms": dict(terms), "rhs": float(rhs)})

    def add_trace_eq(self, mat_name: str, coef_matrix: np.ndarray,
                     extra: dict | None = None, rhs: float = 0.0) -> None:
        """tr(coef_matrix @ X_{mat_name}) + extra = rhs."""
        terms = {} if extra is None else dict(extra)
        self._accumulate_trace(terms, mat_name, coef_matrix)
        self.add_eq(terms, rhs)

    def add_trace_ub(self, mat_name: str, coef_matrix: np.ndarray,
                     extra: dict | None = None, rhs: float = 0.0) -> None:
        terms = {} if extra is None else dict(extra)
        self._accumulate_trace(terms, mat_name, coef_matrix)
        self.add_ub(terms, rhs)

    def trace_terms(self, mat_name: str, coef_matrix: np.ndarray) -> dict:
        terms: dict = {}
        self._accumulate_trace(terms, mat_name, coef_matrix)
        return terms

    def _accumulate_trace(self, terms: dict, mat_name: str, M: np.ndarray) -> None:
        v = svec(np.asarray(M, dtype=float))
        for k, val in enumerate(v):
            if val != 0.0:
                key = (mat_name, k)
                terms[key] = terms.get(key, 0.0) + val

    def set_objective(self, terms: dict) -> None:
        self._obj = dict(terms)

    def objective_trace(self, mat_name: str, coef_matrix: np.ndarray,
                        extra: dict | None = None) -> None:
        terms = {} if extra is None else dict(extra)
        self._accumulate_trace(terms, mat_name, coef_matrix)
        self.set_objective(terms)

    # -- assembly ------------------------------------------------------------

    def build(self) -> ConicModel:
        var_info = {}
        off = 0
        for name, size in self._free:
            var_info[name] = (off, size, "free")
            off += size
        free_dim = off
        for name, size in self._nonneg:
            var_info[name] = (off, size, "nonneg")
            off += size
        nonneg_dim = off - free_dim
        psd_dims = []
        for name, n in self._psd:
            var_info[name] = (off, n, "psd")
            off += svec_dim(n)
            psd_dims.append(n)
        dim = off

        def to_sparse(rows):
            data, ri, ci, rhs = [], [], [], []
            for r, row in enumerate(rows):
                rhs.append(row["rhs"])
                for (name, k), val in row["terms"].items():
                    if val == 0.0:
                        continue
                    data.append(val)
                    ri.append(r)
                    ci.append(var_info[name][0] + k)
            A = sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), dim))
            return A, np.array(rhs, dtype=float)

        A_eq, b_eq = to_sparse(self._rows_eq)
        A_ub, b_ub = (None, None)
        if self._rows_ub:
            A_ub, b_ub = to_sparse(self._rows_ub)
        c = np.zeros(dim)
        for (name, k), val in self._obj.items():
            c[var_info[name][0] + k] += val
        return ConicModel(free_dim, nonneg_dim, psd_dims, c, A_eq, b_eq,
                          A_ub, b_ub, var_info)


# ---------------------------------------------------------------------------
# solution + solve
# ---------------------------------------------------------------------------

@dataclass
class ConicSolution:
    status: str  # optimal | infeasible | unbounded | numerical-failure
    x: np.ndarray | None
    y_eq: np.ndarray | None
    objective: float | None
    primal_residual: float = np.nan
    gap: float = np.nan

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _validate(model: ConicModel, feas_tol: float, gap_tol: float) -> None:
    if not (feas_tol > 0 and gap_tol > 0):
        raise ValueError("tolerances must be positive")
    for arr in (model.c, model.b_eq):
        if not np.all(np.isfinite(arr)):
            raise ValueError("model has non-finite coefficients")


def solve_conic(model: ConicModel, feas_tol: float = 1e-8,
                gap_tol: float = 1e-8) -> ConicSolution:
    """Solve the model; LP instances route to HiGHS, the rest to Clarabel."""
    _validate(model, feas_tol, gap_tol)
    if not model.psd_dims:
        return _solve_lp(model, feas_tol)
    return _solve_clarabel(model, feas_tol, gap_tol)


def solve_conic_robust(model: ConicModel, feas_tol: float = 1e-8,
                       gap_tol: float = 1e-8, escalations: int = 2) -> ConicSolution:
    """solve_conic with backend fallback and tolerance escalation.

    A numerical failure first retries on the interior-point backend of
    cvxopt (an independent implementation), then relaxes both tolerances by
    10x per round.  The attained tolerances are whatever the successful
    attempt used, so a degraded solve is visible to the caller rather than
    silent.
    """
    ft, gt = feas_tol, gap_tol
    sol = solve_conic(model, ft, gt)
    for _ in range(escalations + 1):
        if sol.status != "numerical-failure":
            return sol
        if model.psd_dims:
            sol = _solve_cvxopt(model, ft, gt)
            if sol.status != "numerical-failure":
                return sol
        ft, gt = ft * 10, gt * 10
        sol = solve_conic(model, ft, gt)
    return sol


def _solve_cvxopt(model: ConicModel, feas_tol: float,
                  gap_tol: float) -> ConicSolution:
    """Fallback conic backend (cvxopt conelp) behind the same contract."""
    try:
        from cvxopt import matrix, solvers, spmatrix
    except ImportError:
        return ConicSolution("numerical-failure", None, None, None)
    dim = model.dim
    G_rows, G_cols, G_vals, h_vals = [], [], [], []
    row = 0
    dims = {"l": 0, "q": [], "s": []}
    if model.A_ub is not None and model.A_ub.shape[0]:
        A = model.A_ub.tocoo()
        for r, c, v in zip(A.row, A.col, A.data):
            G_rows.append(int(row + r))
            G_cols.append(int(c))
            G_vals.append(float(v))
        h_vals.extend(float(v) for v in model.b_ub)
        row += model.A_ub.shape[0]
        dims["l"] += model.A_ub.shape[0]
    for k in range(model.nonneg_dim):
        G_rows.append(row)
        G_cols.append(model.free_dim + k)
        G_vals.append(-1.0)
        h_vals.append(0.0)
        row += 1
        dims["l"] += 1
    off = model.free_dim + model.nonneg_dim
    for n in model.psd_dims:
        k = 0
        for c in range(n):
            for r in range(c + 1):
                scale = 1.0 if r == c else 1.0 / _SQRT2
                G_rows.append(row + r * n + c)
                G_cols.append(off + k)
                G_vals.append(-scale)
                if r != c:
                    G_rows.append(row + c * n + r)
                    G_cols.append(off + k)
                    G_vals.append(-scale)
                k += 1
        h_vals.extend([0.0] * (n * n))
        row += n * n
        dims["s"].append(n)
        off += svec_dim(n)
    G = spmatrix(G_vals, G_rows, G_cols, (row, dim))
    h = matrix(h_vals)
    Amat = model.A_eq.tocoo()
    A = spmatrix([float(v) for v in Amat.data], Amat.row.tolist(),
                 Amat.col.tolist(), model.A_eq.shape)
    b = matrix(model.b_eq.tolist())
    c = matrix(model.c.tolist())
    opts = {"show_progress": False, "abstol": gap_tol, "reltol": gap_tol,
            "feastol": max(feas_tol, 1e-10), "maxiters": 200}
    try:
        res = solvers.conelp(c, G, h, dims, A, b, options=opts)
    except (ValueError, ZeroDivisionError, ArithmeticError):
        return ConicSolution("numerical-failure", None, None, None)
    status = res.get("status")
    if status == "optimal":
        x = np.array(res["x"]).ravel()
        y = -np.array(res["y"]).ravel() if res.get("y") is not None else None
        pres = (float(np.max(np.abs(model.A_eq @ x - model.b_eq)))
                if model.A_eq.shape[0] else 0.0)
        return ConicSolution("optimal", x, y, float(model.c @ x), pres,
                             float(res.get("gap", np.nan)))
    if status == "primal infeasible":
        return ConicSolution("infeasible", None, None, None)
    if status == "dual infeasible":
        return ConicSolution("unbounded", None, None, None)
    return ConicSolution("numerical-failure", None, None, None)


def _solve_lp(model: ConicModel, feas_tol: float) -> ConicSolution:
    bounds = [(None, None)] * model.free_dim + [(0, None)] * model.nonneg_dim
    res = linprog(
        c=model.c,
        A_eq=model.A_eq if model.A_eq.shape[0] else None,
        b_eq=model.b_eq if model.A_eq.shape[0] else None,
        A_ub=model.A_ub,
        b_ub=model.b_ub,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        return ConicSolution("infeasible", None, None, None)
    if res.status == 3:
        return ConicSolution("unbounded", None, None, None)
    if res.status != 0:
        return ConicSolution("numerical-failure", None, None, None)
    x = np.asarray(res.x)
    y = np.asarray(res.eqlin.marginals) if model.A_eq.shape[0] else np.empty(0)
    pres = (
        float(np.max(np.abs(model.A_eq @ x - model.b_eq)))
        if model.A_eq.shape[0] else 0.0
    )
    return ConicSolution("optimal", x, y, float(res.fun), pres, 0.0)


def _solve_clarabel(model: ConicModel, feas_tol: float,
                    gap_tol: float) -> ConicSolution:
    dim = model.dim
    blocks = [model.A_eq]
    rhs = [model.b_eq]
    cones = [clarabel.ZeroConeT(model.A_eq.shape[0])]
    if model.A_ub is not None and model.A_ub.shape[0]:
        blocks.append(model.A_ub)
        rhs.append(model.b_ub)
        cones.append(clarabel.NonnegativeConeT(model.A_ub.shape[0]))
    if model.nonneg_dim:
        sel = sparse.identity(dim, format="csr")[
            model.free_dim:model.free_dim + model.nonneg_dim
        ]
        blocks.append(-sel)
        rhs.append(np.zeros(model.nonneg_dim))
        cones.append(clarabel.NonnegativeConeT(model.nonneg_dim))
    off = model.free_dim + model.nonneg_dim
    eye = sparse.identity(dim, format="csr")
    for n in model.psd_dims:
        d = svec_dim(n)
        blocks.append(-eye[off:off + d])
        rhs.append(np.zeros(d))
        cones.append(clarabel.PSDTriangleConeT(n))
        off += d

    A = sparse.vstack(blocks).tocsc()
    b = np.concatenate(rhs)
    P = sparse.csc_matrix((dim, dim))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = gap_tol
    settings.tol_gap_rel = gap_tol
    settings.tol_feas = feas_tol
    solver = clarabel.DefaultSolver(P, model.c, A, b, cones, settings)
    try:
        sol = solver.solve()
    except BaseException as exc:  # pyo3 panics do not subclass Exception
        if type(exc).__name__ == "PanicException":
            return ConicSolution("numerical-failure", None, None, None)
        raise
    status = str(sol.status)

    if status in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x)
        y = -np.asarray(sol.z[: model.A_eq.shape[0]])
        pres = (
            float(np.max(np.abs(model.A_eq @ x - model.b_eq)))
            if model.A_eq.shape[0] else 0.0
        )
        scale = 1.0 + float(np.max(np.abs(model.b_eq))) if model.b_eq.size else 1.0
        out_status = "optimal"
        if status == "AlmostSolved" and pres > 10 * feas_tol * scale:
            out_status = "numerical-failure"
        return ConicSolution(out_status, x, y, float(sol.obj_val), pres, np.nan)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return ConicSolution("infeasible", np.asarray(sol.x), None, None)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return ConicSolution("unbounded", np.asarray(sol.x), None, None)
    return ConicSolution("numerical-failure", None, None, None)


# ---------------------------------------------------------------------------
# PSD utilities
# ---------------------------------------------------------------------------

class NotPsdError(ValueError):
    """Raised when a matrix fails the PSD test; carries a witness vector."""

    def __init__(self, eig: float, witness: np.ndarray):
        super().__init__(f"matrix is not PSD: min eigenvalue {eig:.3e}")
        self.eig = eig
        self.witness = witness


def psd_cholesky(Z: np.ndarray, tol: float = 1e-9):
    """Semidefinite Cholesky: Z = P P^T with P lower triangular.

    P has nonnegative diagonal and, for rank-deficient Z, all-zero columns
    in the deficient positions.  Returns (P, rank, zero_columns).
    Raises :class:`NotPsdError` when Z has an eigenvalue below -tol (scaled).
    """
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    if Z.shape != (n, n) or not np.allclose(Z, Z.T, atol=1e-8 * (1 + np.abs(Z).max(initial=0.0))):
        raise ValueError("psd_cholesky needs a symmetric matrix")
    scale = 1.0 + np.abs(Z).max(initial=0.0)
    P = np.zeros((n, n))
    zero_cols = []
    for j in range(n):
        d = Z[j, j] - P[j, :j] @ P[j, :j]
        if d > tol * scale:
            P[j, j] = np.sqrt(d)
            for i in range(j + 1, n):
                P[i, j] = (Z[i, j] - P[i, :j] @ P[j, :j]) / P[j, j]
        elif d < -tol * scale:
            w, V = np.linalg.eigh(Z)
            raise NotPsdError(float(w[0]), V[:, 0])
        else:
            zero_cols.append(j)
    resid = np.abs(P @ P.T - Z).max(initial=0.0)
    if resid > max(tol, 1e-12) * scale:
        w, V = np.linalg.eigh(Z)
        if w[0] < -tol * scale:
            raise NotPsdError(float(w[0]), V[:, 0])
        # nearly-PSD but badly conditioned: rebuild from the spectral factor
        w = np.clip(w, 0.0, None)
        F = V * np.sqrt(w)
        # LQ of F gives a lower-triangular factor with the same product
        q, r = np.linalg.qr(F.T)
        P = r.T
        sgn = np.sign(np.diag(P))
        sgn[sgn == 0] = 1.0
        P = P * sgn
        zero_cols = [j for j in range(n) if np.abs(P[:, j]).max(initial=0.0) <= tol * scale]
    rank = n - len(zero_cols)
    return P, rank, zero_cols


def min_eigpair(Z: np.ndarray):
    """Minimum eigenvalue and a unit eigenvector of a symmetric matrix."""
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite entries")
    w, V = np.linalg.eigh(0.5 * (Z + Z.T))
    return float(w[0]), V[:, 0]


def project_psd(Z: np.ndarray, floor: float = -1e-8) -> np.ndarray:
    """Clip negligible negative spectrum (solver round-off) to zero.

    Raises :class:`NotPsdError` when an eigenvalue lies below ``floor``
    relative to the matrix scale; within tolerance, returns the nearest
    PSD matrix.
    """
    Z = 0.5 * (Z + Z.T)
    w, V = np.linalg.eigh(Z)
    scale = 1.0 + np.abs(Z).max(initial=0.0)
    if w[0] < floor * scale:
        raise NotPsdError(float(w[0]), V[:, 0])
    if w[0] >= 0:
        return Z
    return (V * np.clip(w, 0.0, None)) @ V.T
