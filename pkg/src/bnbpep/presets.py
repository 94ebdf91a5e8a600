"""The four application problems and their analytical companions.

Besides problem construction this module owns everything specific to the
weakly convex potential setup (the per-step verification SDP chain, the
closed-form certificate and rates, and two independent mechanized checks of
the telescoping argument) plus the conjectured constant stepsize for
momentum-free gradient descent and the momentum-form change of coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicBuilder, min_eigpair, solve_conic_robust, svec
from .gram import (
    STAR,
    Basis,
    Preset,
    StepsizeSchedule,
    constraint_matrices,
    selector_basis,
    stepsize_convert,
)
from .inner import ProblemSpec, ordered_pairs

__all__ = [
    "make_problem",
    "thg_stepsize",
    "MomentumForm",
    "momentum_form",
    "momentum_to_stepsizes",
    "NotRepresentableError",
    "PotentialCertificate",
    "potential_certificate",
    "PotentialRates",
    "potential_rates",
    "ChainSolution",
    "solve_potential_chain",
    "classical_proof_residual",
    "initial_schedule",
]

_PRESET_IDS = {
    "sc-grad": Preset.SC_GRAD,
    "gd-nomomentum": Preset.GD_NOMOMENTUM,
    "nonconvex-grad": Preset.NONCONVEX_GRAD,
    "wc-potential": Preset.WC_POTENTIAL,
}


def make_problem(preset_id, N: int, **params) -> ProblemSpec:
    """Problem spec for a preset id (string or Preset).

    Parameters: mu/L for sc-grad, L for the smooth presets, rho/L (or
    L_tilde) for wc-potential, R everywhere.  The Moreau smoothing level of
    the potential setup is fixed at the simplest admissible value; other
    levels are unsupported.
    """
    preset = _PRESET_IDS[preset_id] if isinstance(preset_id, str) else preset_id
    if "rho_hat" in params and params.pop("rho_hat") != 2:
        raise ValueError("the potential preset fixes the smoothing level rho_hat=2")
    R = float(params.pop("R", 1.0))
    if preset is Preset.SC_GRAD:
        return ProblemSpec(preset, N, mu=float(params.pop("mu", 0.1)),
                           L=float(params.pop("L", 1.0)), R=R)
    if preset in (Preset.GD_NOMOMENTUM, Preset.NONCONVEX_GRAD):
        return ProblemSpec(preset, N, L=float(params.pop("L", 1.0)), R=R)
    rho = float(params.pop("rho", 1.0))
    L = float(params.pop("L", params.pop("L_tilde", 1.0) * rho))
    # normalize to unit weak-convexity: f in W_{rho,L}  <=>  f/rho in W_{1,L/rho}
    return ProblemSpec(preset, N, rho=rho, L_tilde=L / rho, R=R)


def initial_schedule(spec: ProblemSpec) -> StepsizeSchedule:
    """The warm-start schedule: unit normalized steps for smooth classes,
    R*rho/(L*sqrt(N+1)) for the weakly convex potential setup."""
    if spec.preset is Preset.WC_POTENTIAL:
        h0 = spec.R / (spec.L_tilde * np.sqrt(spec.N + 1))
        return StepsizeSchedule.diagonal([h0] * spec.N, Basis.H)
    return StepsizeSchedule.gradient_descent(spec.N, Basis.H, (spec.mu, spec.L))


# ---------------------------------------------------------------------------
# conjectured optimal constant stepsize (momentum-free smooth convex)
# ---------------------------------------------------------------------------

def thg_stepsize(N: int, tol: float = 1e-14) -> float:
    """Unique root in (0, 2) of 1/(2Nh+1) = (1-h)^{2N}.

    The constant-stepsize schedule h_i = h with this value is the
    conjectured optimal constant choice for minimizing the final function
    gap; bisection on (1, 2) where the residual changes sign.
    """
    if N < 1:
        raise ValueError("need N >= 1")

    def resid(h):
        return 1.0 / (2 * N * h + 1.0) - (1.0 - h) ** (2 * N)

    lo, hi = 1.0, 2.0
    flo = resid(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = resid(mid)
        if abs(fm) <= tol and hi - lo <= 1e-12:
            return mid
        if (flo > 0) == (fm > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# momentum form
# ---------------------------------------------------------------------------

class NotRepresentableError(ValueError):
    """The stepsize table lies outside the two-coefficient momentum family."""

    def __init__(self, residual: np.ndarray):
        super().__init__(
            f"no momentum-form coefficients match; residual {np.abs(residual).max():.3e}"
        )
        self.residual = residual


@dataclass(frozen=True)
class MomentumForm:
    """Coefficients (zeta_i, eta_i) of the two-sequence recursion
    y_{i+1} = x_i - (1/L) g(x_i),
    x_{i+1} = y_{i+1} + zeta_{i+1} (y_{i+1} - y_i) + eta_{i+1} (y_{i+1} - x_i).

    With y_0 = x_0 the first correction directions coincide, so only
    zeta_1 + eta_1 is identifiable; the normalized representative fixes
    zeta_1 = 0.
    """

    zeta: tuple
    eta: tuple

    @property
    def N(self) -> int:
        return len(self.zeta)


def _momentum_coefficients(zeta, eta, N):
    """Coefficient rows of x_i over (x_0; g_0..g_{N-1}) for the momentum
    recursion, with y_0 = x_0."""
    dim = N + 1
    X = np.zeros((N + 1, dim))
    Y = np.zeros((N + 1, dim))
    X[0, 0] = 1.0
    Y[0, 0] = 1.0  # y_0 = x_0
    for i in range(N):
        ynext = X[i].copy()
        ynext[1 + i] -= 1.0
        X[i + 1] = (ynext + zeta[i] * (ynext - Y[i]) + eta[i] * (ynext - X[i]))
        Y[i + 1] = ynext
    return X, Y


def momentum_to_stepsizes(form: MomentumForm, L: float = 1.0) -> StepsizeSchedule:
    """Anchored stepsize table of a momentum-form method (always exists)."""
    N = form.N
    X, _ = _momentum_coefficients(form.zeta, form.eta, N)
    rows = []
    for i in range(1, N + 1):
        # x_i = x_0 - (1/L) sum_j hbar_{i,j} g_j  ->  hbar_{i,j} = -L * coef
        rows.append(tuple(float(-X[i, 1 + j]) for j in range(i)))
    return StepsizeSchedule(N, Basis.HBAR, tuple(rows), (0.0, L))


def momentum_form(schedule: StepsizeSchedule, tol: float = 1e-9) -> MomentumForm:
    """Momentum coefficients of an anchored schedule by per-step coefficient
    matching over the gradient basis; raises when the table is outside the
    (strictly smaller) momentum family."""
    sched = stepsize_convert(schedule, Basis.HBAR)
    N = sched.N
    dim = N + 1
    X = np.zeros((N + 1, dim))
    Y = np.zeros((N + 1, dim))
    X[0, 0] = 1.0
    Y[0, 0] = 1.0
    zeta, eta = [], []
    scale = 1.0 + abs(sched.as_matrix()).max()
    for i in range(N):
        ynext = X[i].copy()
        ynext[1 + i] -= 1.0
        target = np.zeros(dim)
        target[0] = 1.0
        for j in range(i + 1):
            target[1 + j] = -sched.get(i + 1, j)
        rhs = target - ynext
        if i == 0:
            # y_1 - y_0 and y_1 - x_0 coincide: normalize with zeta_1 = 0
            Acols = (ynext - X[i]).reshape(-1, 1)
            coef, *_ = np.linalg.lstsq(Acols, rhs, rcond=None)
            coef = np.array([0.0, float(coef[0])])
            resid = Acols @ coef[1:] - rhs
        else:
            Acols = np.stack([ynext - Y[i], ynext - X[i]], axis=1)
            coef, *_ = np.linalg.lstsq(Acols, rhs, rcond=None)
            resid = Acols @ coef - rhs
        if np.abs(resid).max() > tol * scale:
            raise NotRepresentableError(resid)
        zeta.append(float(coef[0]))
        eta.append(float(coef[1]))
        X[i + 1] = ynext + coef[0] * (ynext - Y[i]) + coef[1] * (ynext - X[i])
        Y[i + 1] = ynext
    form = MomentumForm(tuple(zeta), tuple(eta))
    worst = _momentum_residual(form, sched)
    if worst <= 1e-12 * scale:
        return form
    # finitely-printed tables carry rounding that the step-by-step matching
    # amplifies forward; a joint fit spreads it evenly
    from scipy.optimize import least_squares

    target = sched.as_matrix()

    def resid_vec(params):
        z = tuple([0.0] + list(params[:N - 1]))
        e = tuple(params[N - 1:])
        back = momentum_to_stepsizes(MomentumForm(z, e)).as_matrix()
        return (back - target)[np.tril_indices(N)]

    x0 = np.array(list(form.zeta[1:]) + list(form.eta))
    fit = least_squares(resid_vec, x0, method="lm", xtol=1e-15, ftol=1e-15)
    refined = MomentumForm(tuple([0.0] + list(fit.x[:N - 1])),
                           tuple(fit.x[N - 1:]))
    if _momentum_residual(refined, sched) > tol * scale:
        raise NotRepresentableError(fit.fun)
    return refined


def _momentum_residual(form: MomentumForm, sched: StepsizeSchedule) -> float:
    back = momentum_to_stepsizes(form).as_matrix()
    return float(np.abs(back - sched.as_matrix()).max())


# ---------------------------------------------------------------------------
# weakly convex potential certificates
# ---------------------------------------------------------------------------

@dataclass
class PotentialCertificate:
    """Per-iteration telescoping certificate for constant-step subgradient
    descent on the unit-weakly-convex bounded-subgradient class."""

    N: int
    h: float
    kappa: float
    L_tilde: float
    b: np.ndarray            # b_0 .. b_{N+1}, terminal entry zero
    c: np.ndarray            # c_0 .. c_N
    lam: list                # per step: {(2,3): ., (2,0): ., (0,2): .}
    tau: list                # per step: {2: .}
    Z: list                  # per step: 5x5 matrix
    objective: float

    def validate(self, tol_resid: float = 1e-10, tol_eig: float = -1e-9):
        """Recompute both stationarity residuals and the block spectra.

        Returns (max residual, min eigenvalue over steps); raises nothing.
        """
        basis = selector_basis(0, "potential_block")
        blocks = constraint_matrices(basis, None, Preset.WC_POTENTIAL)
        point = np.array([self.h])
        worst_resid = 0.0
        min_eig = np.inf
        for k in range(self.N + 1):
            bk, bk1, ck = self.b[k], self.b[k + 1], self.c[k]
            # value equation: -q + tau a_{2,star} + sum lam a = 0
            vres = -(bk1 * basis.a(STAR, 3) - bk * basis.a(STAR, 2))
            vres = vres + self.tau[k][2] * basis.a(2, STAR)
            for (i, j), lv in self.lam[k].items():
                vres = vres + lv * basis.a(i, j)
            worst_resid = max(worst_resid, float(np.abs(vres).max()))
            # Gram equation: -Q + sum lam (A - B/2) = Z
            Q = (blocks[(2, STAR)].C
                 + bk1 * blocks[(1, 3)].B.eval(point)
                 - bk * blocks[(0, 2)].B.eval(point)
                 - ck * blocks[(0, STAR)].C)
            lhs = -Q
            for (i, j), lv in self.lam[k].items():
                blk = blocks[(i, j)]
                lhs = lhs + lv * (blk.A.eval(point) - 0.5 * blk.B.eval(point))
            worst_resid = max(worst_resid, float(np.abs(lhs - self.Z[k]).max()))
            min_eig = min(min_eig, min_eigpair(self.Z[k])[0])
        ok = worst_resid <= tol_resid and min_eig >= tol_eig
        return ok, worst_resid, float(min_eig)


def potential_certificate(h: float, N: int, kappa: float = 0.1,
                          L_tilde: float = 1.0) -> PotentialCertificate:
    """Closed-form certificate for stepsize h in (0, 1/2].

    Weights follow the backward recursion 4 + (1-2h) b_{k+1} = b_k with
    terminal weight zero, slopes c_k = h^2 b_{k+1}, multipliers
    (b_{k+1}, 2h b_{k+1}, 2h b_{k+1}, b_k - b_{k+1}), and an explicit
    rank-one slack block whose nonzero eigenvalue is (1+2h^2) b_{k+1}/4.
    """
    if not 0 < h <= 0.5:
        raise ValueError(f"stepsize must lie in (0, 1/2], got {h}")
    if N < 0:
        raise ValueError("need N >= 0")
    ks = np.arange(N + 2)
    b = (2.0 / h) * (1.0 - (1.0 - 2.0 * h) ** (N + 1 - ks))
    c = (h * h) * b[1:]
    lam, tau, Zs = [], [], []
    for k in range(N + 1):
        bk1 = b[k + 1]
        lam.append({(2, 3): bk1, (2, 0): 2 * h * bk1, (0, 2): 2 * h * bk1})
        tau.append({2: b[k] - bk1})
        Z = np.zeros((5, 5))
        Z[1, 1] = 0.5 * h * h * bk1
        Z[1, 3] = Z[3, 1] = -0.25 * h * bk1
        Z[1, 4] = Z[4, 1] = 0.25 * h * bk1
        Z[3, 3] = Z[4, 4] = 0.125 * bk1
        Z[3, 4] = Z[4, 3] = -0.125 * bk1
        Zs.append(Z)
    obj = exact_potential_objective(h, N, kappa, L_tilde)
    return PotentialCertificate(N, h, kappa, L_tilde, b, c, lam, tau, Zs, obj)


def exact_potential_objective(h: float, N: int, kappa: float,
                              L_tilde: float = 1.0) -> float:
    """Certified rate of the constant-step method as a function of h."""
    q = (1.0 - 2.0 * h) ** (N + 1)
    return (L_tilde ** 2 / (N + 1)) * (
        -1.0 + q + 2 * h * (N + 1) + kappa ** 2 * (2.0 / h) * (1.0 - q)
    )


@dataclass
class PotentialRates:
    exact_objective: object          # callable h -> certified rate
    h_ub: float
    corollary_rate: float
    dd_rate: float
    improvement_threshold: float


def potential_rates(N: int, kappa: float, L_tilde: float = 1.0) -> PotentialRates:
    """Closed-form stepsize, its rate, and the prior benchmark rate."""
    if kappa <= 0 or N < 0:
        raise ValueError("need kappa > 0 and N >= 0")
    root = np.sqrt(4 * kappa ** 2 * (N + 1) + 1.0)
    h_ub = root / (2 * (N + 1))
    corollary = L_tilde ** 2 * (2 * root - 1.0) / (N + 1)
    dd = 4 * kappa * L_tilde ** 2 / np.sqrt(N + 1)
    threshold = (9.0 - 64 * kappa ** 2) / (64 * kappa ** 2)
    return PotentialRates(
        exact_objective=lambda h: exact_potential_objective(h, N, kappa, L_tilde),
        h_ub=float(h_ub),
        corollary_rate=float(corollary),
        dd_rate=float(dd),
        improvement_threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# per-step SDP chain: optimal potential weights for a fixed stepsize
# ---------------------------------------------------------------------------

@dataclass
class ChainSolution:
    objective: float
    h: float
    b: np.ndarray
    c: np.ndarray
    steps: list  # per step: {"lam": {(i,j): v}, "tau": {i: v}, "Z": 5x5}


def solve_potential_chain(spec: ProblemSpec, h: float, feas_tol: float = 1e-9,
                          gap_tol: float = 1e-9) -> ChainSolution:
    """Minimize the certified rate over (b, c, multipliers) at fixed h.

    The verification system is linear in everything once h is fixed: one
    5x5 PSD block per step plus the backward coupling through b.
    """
    N = spec.N
    basis = selector_basis(0, "potential_block")
    blocks = constraint_matrices(basis, None, Preset.WC_POTENTIAL)
    idxs = [0, 1, 2, 3, STAR]
    pairs = ordered_pairs(idxs)
    pts = [0, 1, 2, 3]
    point = np.array([float(h)])

    cb = ConicBuilder()
    cb.add_nonneg("b", N + 1)   # terminal weight eliminated at zero
    cb.add_nonneg("c", N + 1)
    for k in range(N + 1):
        cb.add_nonneg(f"lam{k}", len(pairs))
        cb.add_nonneg(f"tau{k}", len(pts))
        cb.add_psd(f"Z{k}", basis.n)

    C2s = blocks[(2, STAR)].C
    C0s = blocks[(0, STAR)].C
    B13 = blocks[(1, 3)].B.eval(point)
    B02 = blocks[(0, 2)].B.eval(point)
    lamM = {p: (blocks[p].A.eval(point) - 0.5 * blocks[p].B.eval(point))
            for p in pairs}
    sv = {p: svec(lamM[p]) for p in pairs}
    sv_B13, sv_B02 = svec(B13), svec(B02)
    sv_C2s, sv_C0s = svec(C2s), svec(C0s)
    svdim = basis.n * (basis.n + 1) // 2

    for k in range(N + 1):
        for r in range(basis.m):
            terms = {}
            if k + 1 <= N:
                coef = float(basis.a(STAR, 3)[r])
                if coef:
                    terms[("b", k + 1)] = -coef
            coef = float(basis.a(STAR, 2)[r])
            if coef:
                terms[("b", k)] = terms.get(("b", k), 0.0) + coef
            for i in pts:
                ca = float(basis.a(i, STAR)[r])
                if ca:
                    terms[(f"tau{k}", i)] = ca
            for kk, p in enumerate(pairs):
                ca = float(basis.a(*p)[r])
                if ca:
                    terms[(f"lam{k}", kk)] = ca
            cb.add_eq(terms, 0.0)
        for r in range(svdim):
            terms = {(f"Z{k}", r): -1.0}
            if k + 1 <= N and sv_B13[r]:
                terms[("b", k + 1)] = -float(sv_B13[r])
            if sv_B02[r]:
                terms[("b", k)] = terms.get(("b", k), 0.0) + float(sv_B02[r])
            if sv_C0s[r]:
                terms[("c", k)] = float(sv_C0s[r])
            for kk, p in enumerate(pairs):
                if sv[p][r]:
                    terms[(f"lam{k}", kk)] = float(sv[p][r])
            cb.add_eq(terms, float(sv_C2s[r]))

    scale = 1.0 / (N + 1)
    obj = {("c", k): spec.L_tilde ** 2 * scale for k in range(N + 1)}
    obj[("b", 0)] = obj.get(("b", 0), 0.0) + spec.R ** 2 * scale
    cb.set_objective(obj)
    model = cb.build()
    sol = solve_conic_robust(model, feas_tol, gap_tol)
    if not sol.ok:
        raise RuntimeError(f"potential chain solve failed: {sol.status}")

    b_arr = np.zeros(N + 2)
    b_arr[:N + 1] = np.atleast_1d(model.value("b", sol.x))
    c_arr = np.atleast_1d(np.asarray(model.value("c", sol.x), dtype=float))
    steps = []
    for k in range(N + 1):
        lamv = np.atleast_1d(model.value(f"lam{k}", sol.x))
        tauv = np.atleast_1d(model.value(f"tau{k}", sol.x))
        steps.append({
            "lam": {p: float(v) for p, v in zip(pairs, lamv)},
            "tau": {i: float(v) for i, v in zip(pts, tauv)},
            "Z": model.value(f"Z{k}", sol.x),
        })
    return ChainSolution(float(sol.objective), float(h), b_arr, c_arr, steps)


# ---------------------------------------------------------------------------
# classical proof check (independent of the SDP machinery)
# ---------------------------------------------------------------------------

def classical_proof_residual(h: float, b_next: float):
    """Residuals of the weighted-inequality telescoping identity.

    Forms the nonnegative combination of the three weak-convexity
    inequalities at (y_{k+1}, y_k), (x_k, y_k), (y_k, x_k) and the
    minimality bound at y_k with weights (b_{k+1}, 2h b_{k+1}, 2h b_{k+1},
    b_k - b_{k+1}), expands everything over the symbols
    (f'(x_k), f'(y_k), f'(y_{k+1})) and the four value symbols, and checks
    it equals the potential decrement plus an explicit square.  Returns the
    (quadratic, linear) residual magnitudes of the identity.
    """
    bk = 4.0 + (1.0 - 2.0 * h) * b_next
    ck = h * h * b_next

    # coordinates over gradient symbols u = (f'(x_k), f'(y_k), f'(y_{k+1}))
    gx = np.array([1.0, 0.0, 0.0])
    gyk = np.array([0.0, 1.0, 0.0])
    gyk1 = np.array([0.0, 0.0, 1.0])
    # displacement identities of the method and the proximal points
    d_yk_yk1 = h * gx - 0.5 * gyk + 0.5 * gyk1   # y_k - y_{k+1}
    d_xk_yk = 0.5 * gyk                          # x_k - y_k

    def outer(u, v):
        return 0.5 * (np.outer(u, v) + np.outer(v, u))

    # value symbols: (f(x_k), f(y_k), f(y_{k+1}), f(x_star))
    fx = np.array([1.0, 0.0, 0.0, 0.0])
    fyk = np.array([0.0, 1.0, 0.0, 0.0])
    fyk1 = np.array([0.0, 0.0, 1.0, 0.0])
    fst = np.array([0.0, 0.0, 0.0, 1.0])

    Q = np.zeros((3, 3))
    v = np.zeros(4)
    # f(y_{k+1}) - f(y_k) + <f'(y_{k+1}), y_k - y_{k+1}> - |y_k - y_{k+1}|^2/2
    v += b_next * (fyk1 - fyk)
    Q += b_next * (outer(gyk1, d_yk_yk1) - 0.5 * outer(d_yk_yk1, d_yk_yk1))
    # f(x_k) - f(y_k) + <f'(x_k), y_k - x_k> - |y_k - x_k|^2 / 2
    v += 2 * h * b_next * (fx - fyk)
    Q += 2 * h * b_next * (outer(gx, -d_xk_yk) - 0.5 * outer(d_xk_yk, d_xk_yk))
    # f(y_k) - f(x_k) + <f'(y_k), x_k - y_k> - |x_k - y_k|^2 / 2
    v += 2 * h * b_next * (fyk - fx)
    Q += 2 * h * b_next * (outer(gyk, d_xk_yk) - 0.5 * outer(d_xk_yk, d_xk_yk))
    # f(x_star) - f(y_k)
    v += (bk - b_next) * (fst - fyk)

    # claimed reorganization: potential decrement plus an explicit square.
    # With |x_k - y_k|^2 = |f'(y_k)|^2 / 4, the potential difference
    # psi_{k+1} - psi_k contributes the 0.25 b |g|^2 terms below, and the
    # decrement target contributes |f'(y_k)|^2 - c_k |f'(x_k)|^2.
    v_claim = b_next * (fyk1 - fst) - bk * (fyk - fst)
    sq = 2 * h * gx - gyk + gyk1
    Q_claim = (0.25 * b_next * outer(gyk1, gyk1)
               - 0.25 * bk * outer(gyk, gyk)
               - ck * outer(gx, gx)
               + outer(gyk, gyk)
               + 0.125 * b_next * outer(sq, sq))
    quad_res = float(np.abs(Q - Q_claim).max())
    lin_res = float(np.abs(v - v_claim).max())
    return quad_res, lin_res
