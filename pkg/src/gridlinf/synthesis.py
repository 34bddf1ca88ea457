"""Centralized peak-gain (L-infinity) state-feedback synthesis.

The certificate is a quadratic-Lyapunov S-procedure: four matrix inequalities
in (S, Z, alpha, mu0, mu1, mu2) whose feasibility bounds the performance
output by mu * rho with mu = sqrt(mu0*mu1 + mu2) for every disturbance of
peak norm rho, while keeping the input inside its budget. The bilinear terms
are handled by a successive convex approximation: each iteration solves an
SDP built from the first-order overestimators in ``convexify`` and is an
inner approximation of the nonconvex problem, so certified iterates stay
certified and the objective sequence is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import convexify as cx
from .lmi import (
    BlockMatrix,
    MatExpr,
    SdpProgram,
    SolveOptions,
    max_eig,
    min_eig,
    solve_sdp,
)
from .linearization import LinearModel

EPS_PD = 1e-6
EPS_SCALAR = 1e-9
FEAS_TOL = 1e-7
HURWITZ_TOL = -1e-8

ALPHA_GRID = (0.1, 0.5, 1.0, 2.0, 5.0)
MU1_GRID = (0.1, 1.0, 10.0)

STATE_WEIGHTS = {"delta": 0.2, "omega": 0.2, "e": 0.2, "m": 0.1}
INPUT_WEIGHTS = {"r": 0.1, "f": 0.2}


class SynthesisError(RuntimeError):
    pass


class InitInfeasibleError(SynthesisError):
    """No strictly feasible starting point found on the (alpha, mu1) grid."""


@dataclass(frozen=True)
class SynthesisProblem:
    A: np.ndarray
    B_u: np.ndarray
    B_w: np.ndarray
    C: np.ndarray
    D: np.ndarray
    rho: float
    u_max: float | None = None     # None disables the input-budget inequality
    x0: np.ndarray | None = None   # initial deviation; default zero

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("disturbance amplitude rho must be positive")
        if self.u_max is not None and self.u_max <= 0:
            raise ValueError("input budget must be positive")
        if self.C.shape[0] != self.D.shape[0]:
            raise ValueError("C and D must have matching output rows")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B_u.shape[1]

    @property
    def n_w(self):
        return self.B_w.shape[1]

    @property
    def n_z(self):
        return self.C.shape[0]

    @property
    def x0_vec(self):
        return np.zeros(self.n_x) if self.x0 is None else self.x0

    @staticmethod
    def from_linear_model(model: LinearModel, rho: float, u_max=None, x0=None,
                          state_weights=None, input_weights=None) -> "SynthesisProblem":
        """Performance output stacks weighted state deviations over weighted
        input deviations (diagonal weights, one per physical signal kind)."""
        sw = dict(STATE_WEIGHTS, **(state_weights or {}))
        iw = dict(INPUT_WEIGHTS, **(input_weights or {}))
        n_x, n_u = model.n_x, model.n_u
        wx = np.tile([sw["delta"], sw["omega"], sw["e"], sw["m"]], n_x // 4)
        wu = np.tile([iw["r"], iw["f"]], n_u // 2)
        C = np.vstack([np.diag(wx), np.zeros((n_u, n_x))])
        D = np.vstack([np.zeros((n_x, n_u)), np.diag(wu)])
        return SynthesisProblem(A=model.A, B_u=model.B_u, B_w=model.B_w,
                                C=C, D=D, rho=rho, u_max=u_max, x0=x0)


@dataclass(frozen=True)
class ScaPoint:
    """Expansion point of one SCA iteration."""

    alpha: float
    mu0: float
    mu1: float
    S: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        if min(self.alpha, self.mu0, self.mu1) <= 0:
            raise ValueError("scalars of an expansion point must be positive")
        if min_eig(self.S, sym_tol=1e-9) <= 0:
            raise ValueError("S of an expansion point must be positive definite")


@dataclass
class Controller:
    """Feedback gain with its full certificate and iteration history."""

    K: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    alpha: float
    mu0: float
    mu1: float
    mu2: float
    mode: str = "centralized"
    history: list = field(default_factory=list)   # dicts: k, fbar, mu
    flagged: str = ""                             # nonempty if SCA ended abnormally
    P: np.ndarray | None = None                   # structured runs certify in P form

    @property
    def mu(self):
        return float(np.sqrt(self.mu0 * self.mu1 + self.mu2))

    def to_dict(self):
        return {
            "mode": self.mode,
            "K": self.K.tolist(),
            "S": self.S.tolist(),
            "Z": self.Z.tolist(),
            "alpha": self.alpha, "mu0": self.mu0, "mu1": self.mu1, "mu2": self.mu2,
            "mu": self.mu,
            "history": self.history,
            "flagged": self.flagged,
            "P": None if self.P is None else self.P.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        P = doc.get("P")
        return cls(K=np.array(doc["K"]), S=np.array(doc["S"]), Z=np.array(doc["Z"]),
                   alpha=doc["alpha"], mu0=doc["mu0"], mu1=doc["mu1"], mu2=doc["mu2"],
                   mode=doc.get("mode", "centralized"), history=doc.get("history", []),
                   flagged=doc.get("flagged", ""),
                   P=None if P is None else np.array(P))


@dataclass
class ScaSettings:
    gamma: float = 1e-3
    tol: float = 1e-6
    max_iter: int = 50
    alpha_init: float = 1.0
    mu1_init: float = 1.0
    eps_pd: float = EPS_PD
    balance: bool = True    # solve in diagonally balanced state coordinates
    # per-iterate solves may be looser than the final certificate check: the
    # eps_pd margins absorb any violation strictly below them
    solver: SolveOptions = field(default_factory=lambda: SolveOptions(feas_tol=5e-7))


def balance_problem(p: SynthesisProblem):
    """Solver-side reparameterization: diagonal state balancing plus
    normalizing the disturbance to unit peak (B_w absorbs rho).

    Both are exact congruences of the four certificate inequalities; the
    gain and the performance level are invariant. Certificates map back via
    S = T S' T, Z = Z' T, mu0 = mu0'/rho^2, mu2 = mu2'/rho^2.
    """
    _, T = scipy.linalg.matrix_balance(p.A, permute=False)
    t = np.diag(T)
    Ti = np.diag(1.0 / t)
    pb = SynthesisProblem(
        A=Ti @ p.A @ T, B_u=Ti @ p.B_u, B_w=Ti @ p.B_w * p.rho,
        C=p.C @ T, D=p.D, rho=1.0, u_max=p.u_max,
        x0=None if p.x0 is None else Ti @ p.x0)
    return pb, T


def _unbalance_point(point: ScaPoint, T: np.ndarray, rho: float) -> ScaPoint:
    return ScaPoint(alpha=point.alpha, mu0=point.mu0 / rho ** 2, mu1=point.mu1,
                    S=T @ point.S @ T.T, Z=point.Z @ T.T)


# ---------------------------------------------------------------------------
# certificate blocks (numeric)

def lyap_block(p: SynthesisProblem, S, Z, alpha, mu0):
    top = S @ p.A.T + p.A @ S + Z.T @ p.B_u.T + p.B_u @ Z + alpha * S
    return np.block([[top, p.B_w],
                     [p.B_w.T, -alpha * mu0 * np.eye(p.n_w)]])


def perf_block(p: SynthesisProblem, S, Z, mu1, mu2):
    CSDZ = p.C @ S + p.D @ Z
    nz, nw, nx = p.n_z, p.n_w, p.n_x
    return np.block([
        [-mu1 * S, np.zeros((nx, nw)), CSDZ.T],
        [np.zeros((nw, nx)), -mu2 * np.eye(nw), np.zeros((nw, nz))],
        [CSDZ, np.zeros((nz, nw)), -np.eye(nz)],
    ])


def init_ellipsoid_block(p: SynthesisProblem, S, mu0):
    x0 = p.x0_vec
    return np.block([[np.array([[-mu0 * p.rho ** 2]]), x0[None, :]],
                     [x0[:, None], -S]])


def input_budget_block(p: SynthesisProblem, S, Z, mu0):
    c = p.u_max ** 2 / p.rho ** 2
    return np.block([[-c * S, mu0 * Z.T],
                     [mu0 * Z, -mu0 * np.eye(p.n_u)]])


def certificate_residuals(p: SynthesisProblem, S, Z, alpha, mu0, mu1, mu2) -> dict:
    """Largest eigenvalue of every certificate block; all <= feas_tol means
    the candidate is certified. The input block is None when no budget is set."""
    if min(alpha, mu0, mu1) <= 0 or mu2 < 0:
        raise ValueError("certificate scalars must be positive (mu2 nonnegative)")
    if min_eig(S, sym_tol=1e-8) <= 0:
        raise ValueError("certificate S must be positive definite")
    res = {
        "lyapunov": max_eig(lyap_block(p, S, Z, alpha, mu0), sym_tol=1e-6),
        "performance": max_eig(perf_block(p, S, Z, mu1, mu2), sym_tol=1e-6),
        "initial_set": max_eig(init_ellipsoid_block(p, S, mu0), sym_tol=1e-6),
        "input_budget": (max_eig(input_budget_block(p, S, Z, mu0), sym_tol=1e-6)
                         if p.u_max is not None else None),
    }
    return res


def is_certified(res: dict, feas_tol: float = FEAS_TOL) -> bool:
    return all(v is None or v <= feas_tol for v in res.values())


# ---------------------------------------------------------------------------
# initialization (alpha, mu1 frozen -> LMI system)

def feasible_init(p: SynthesisProblem, alpha: float, mu1: float,
                  settings: ScaSettings | None = None) -> ScaPoint:
    """Strictly feasible starting point with alpha and mu1 frozen.

    With the two scalars fixed, the Lyapunov, performance and initial-set
    inequalities are LMIs in (S, Z, mu0, mu2). The input-budget inequality
    still couples mu0 and Z, so when a budget is present it is enforced in a
    second LMI pass with mu0 frozen to (a small inflation of) the first-pass
    value.
    """
    settings = settings or ScaSettings()
    eps = settings.eps_pd
    rho_orig = p.rho
    if settings.balance:
        p, T = balance_problem(p)
    else:
        T = np.eye(p.n_x)
        rho_orig = 1.0  # certificate already in problem parameterization

    def build(mu0_fixed=None, with_input=False):
        prog = SdpProgram()
        S = prog.add_sym("S", p.n_x)
        Z = prog.add_rect("Z", p.n_u, p.n_x)
        mu2 = prog.add_scalar("mu2", lb=0.0)
        if mu0_fixed is None:
            mu0 = prog.add_scalar("mu0", lb=EPS_SCALAR)
        else:
            mu0 = float(mu0_fixed)
        Se, Ze = MatExpr.of(S), MatExpr.of(Z)

        blk = BlockMatrix([p.n_x, p.n_w])
        blk.set(0, 0, Se.rmul(p.A.T) + Se.lmul(p.A) + Ze.T.rmul(p.B_u.T)
                + Ze.lmul(p.B_u) + alpha * Se + eps * np.eye(p.n_x))
        blk.set(1, 0, MatExpr.constant(p.B_w.T))
        if mu0_fixed is None:
            blk.set(1, 1, MatExpr.scaled(mu0, -alpha * np.eye(p.n_w))
                    + eps * np.eye(p.n_w))
        else:
            blk.set(1, 1, MatExpr.constant((-alpha * mu0 + eps) * np.eye(p.n_w)))
        prog.add_lmi(blk.to_expr(), "lyapunov")

        blk = BlockMatrix([p.n_x, p.n_w, p.n_z])
        blk.set(0, 0, -mu1 * Se + eps * np.eye(p.n_x))
        blk.set(1, 1, MatExpr.scaled(mu2, -np.eye(p.n_w)) + eps * np.eye(p.n_w))
        blk.set(2, 0, Se.lmul(p.C) + Ze.lmul(p.D))
        blk.set(2, 2, MatExpr.constant((eps - 1.0) * np.eye(p.n_z)))
        prog.add_lmi(blk.to_expr(), "performance")

        x0 = p.x0_vec
        blk = BlockMatrix([1, p.n_x])
        if mu0_fixed is None:
            blk.set(0, 0, MatExpr.scaled(mu0, -p.rho ** 2 * np.eye(1)) + eps * np.eye(1))
        else:
            blk.set(0, 0, MatExpr.constant((eps - mu0 * p.rho ** 2) * np.eye(1)))
        blk.set(1, 0, MatExpr.constant(x0[:, None]))
        blk.set(1, 1, -Se + eps * np.eye(p.n_x))
        prog.add_lmi(blk.to_expr(), "initial_set")

        if with_input:
            c = p.u_max ** 2 / p.rho ** 2
            blk = BlockMatrix([p.n_x, p.n_u])
            blk.set(0, 0, -c * Se + eps * np.eye(p.n_x))
            blk.set(1, 0, Ze * mu0)
            blk.set(1, 1, MatExpr.constant((-mu0 + eps) * np.eye(p.n_u)))
            prog.add_lmi(blk.to_expr(), "input_budget")

        prog.add_lmi(eps * np.eye(p.n_x) - Se, "S_pd")
        if mu0_fixed is None:
            prog.add_objective(mu0, mu1)
        prog.add_objective(mu2, 1.0)
        return prog

    sol = solve_sdp(build(), settings.solver)
    if not sol.ok:
        raise InitInfeasibleError(
            f"initialization infeasible at alpha={alpha}, mu1={mu1} ({sol.status}); "
            f"retry over the (alpha, mu1) grid")
    if p.u_max is None:
        pt = ScaPoint(alpha=alpha, mu0=sol.values["mu0"], mu1=mu1,
                      S=sol.values["S"], Z=sol.values["Z"])
        return _unbalance_point(pt, T, rho_orig)

    # the budget inequality is often inactive at the first-pass point
    pre = input_budget_block(p, sol.values["S"], sol.values["Z"], sol.values["mu0"])
    if max_eig(pre, sym_tol=1e-6) <= -eps:
        pt = ScaPoint(alpha=alpha, mu0=sol.values["mu0"], mu1=mu1,
                      S=sol.values["S"], Z=sol.values["Z"])
        return _unbalance_point(pt, T, rho_orig)

    for inflate in (1.0, 3.0, 10.0):
        mu0_fix = sol.values["mu0"] * inflate
        sol2 = solve_sdp(build(mu0_fixed=mu0_fix, with_input=True), settings.solver)
        if sol2.ok:
            pt = ScaPoint(alpha=alpha, mu0=mu0_fix, mu1=mu1,
                          S=sol2.values["S"], Z=sol2.values["Z"])
            return _unbalance_point(pt, T, rho_orig)
    raise InitInfeasibleError(
        f"input-budget pass infeasible at alpha={alpha}, mu1={mu1}; "
        f"retry over the (alpha, mu1) grid")


def _init_objective(pt: ScaPoint) -> float:
    return pt.mu0 * pt.mu1


def feasible_init_grid(p: SynthesisProblem, settings: ScaSettings) -> ScaPoint:
    """Pick the best feasible start over a decay-rate grid.

    The starting objective is dominated by alpha (the S-procedure decay),
    so the scan walks the alpha axis at the configured mu1, refines
    geometrically around the best candidate, and only falls back to the
    full (alpha, mu1) product grid when the axis yields nothing.
    """
    best = None

    def attempt(a, m):
        nonlocal best
        try:
            pt = feasible_init(p, a, m, settings)
        except InitInfeasibleError:
            return None
        if best is None or _init_objective(pt) < _init_objective(best):
            best = pt
        return pt

    axis = sorted({settings.alpha_init, *ALPHA_GRID, 10.0, 20.0, 50.0})
    for a in axis:
        attempt(a, settings.mu1_init)

    if best is not None:
        for _ in range(2):
            a0 = best.alpha
            for a in (a0 / 1.6, a0 * 1.6):
                if not any(abs(a - b) / b < 1e-9 for b in axis):
                    axis.append(a)
                    attempt(a, best.mu1)
        return best

    tried = []
    for a in ALPHA_GRID:
        for m in MU1_GRID:
            if attempt(a, m) is not None:
                return best
            tried.append((a, m))
    raise InitInfeasibleError(f"no feasible start on the grid; tried {tried}")


# ---------------------------------------------------------------------------
# SCA subproblem

def build_subproblem(p: SynthesisProblem, point: ScaPoint, gamma: float,
                     eps_pd: float = EPS_PD):
    """One convexified synthesis SDP around ``point``.

    Returns (program, handles) where handles maps variable names to handles.
    """
    n_x, n_u, n_w, n_z = p.n_x, p.n_u, p.n_w, p.n_z
    prog = SdpProgram()
    S = prog.add_sym("S", n_x)
    Z = prog.add_rect("Z", n_u, n_x)
    alpha = prog.add_scalar("alpha", lb=EPS_SCALAR)
    mu0 = prog.add_scalar("mu0", lb=EPS_SCALAR)
    mu1 = prog.add_scalar("mu1", lb=EPS_SCALAR)
    mu2 = prog.add_scalar("mu2", lb=0.0)
    hbar = prog.add_scalar("hbar", lb=0.0)
    Se, Ze = MatExpr.of(S), MatExpr.of(Z)

    forms = cx.centralized_forms(alpha, mu0, mu1, S, Z, point, n_w)

    eps = eps_pd  # margin keeping the implied original inequalities strictly inside

    # Lyapunov/S-procedure inequality, Schur-expanded convexification
    blk = BlockMatrix([n_x, n_w, n_x, n_w])
    blk.set(0, 0, Se.rmul(p.A.T) + Se.lmul(p.A) + Ze.T.rmul(p.B_u.T) + Ze.lmul(p.B_u)
            + 0.25 * forms["lyap_alpha_S"] + eps * np.eye(n_x))
    blk.set(1, 0, MatExpr.constant(p.B_w.T))
    blk.set(1, 1, 0.25 * forms["lyap_alpha_mu0"] + eps * np.eye(n_w))
    blk.set(2, 0, MatExpr.scaled(alpha, 0.5 * np.eye(n_x)) + 0.5 * Se)
    blk.set(2, 2, MatExpr.constant(-np.eye(n_x)))
    blk.set(3, 1, MatExpr.scaled(alpha, 0.5 * np.eye(n_w))
            + MatExpr.scaled(mu0, -0.5 * np.eye(n_w)))
    blk.set(3, 3, MatExpr.constant(-np.eye(n_w)))
    prog.add_lmi(blk.to_expr(), "lyapunov")

    # performance inequality
    blk = BlockMatrix([n_x, n_w, n_z, n_x])
    blk.set(0, 0, 0.25 * forms["perf_mu1_S"] + eps * np.eye(n_x))
    blk.set(1, 1, MatExpr.scaled(mu2, -np.eye(n_w)) + eps * np.eye(n_w))
    blk.set(2, 0, Se.lmul(p.C) + Ze.lmul(p.D))
    blk.set(2, 2, MatExpr.constant((eps - 1.0) * np.eye(n_z)))
    blk.set(3, 0, MatExpr.scaled(mu1, 0.5 * np.eye(n_x)) - 0.5 * Se)
    blk.set(3, 3, MatExpr.constant(-np.eye(n_x)))
    prog.add_lmi(blk.to_expr(), "performance")

    # initial-condition ellipsoid (linear already)
    blk = BlockMatrix([1, n_x])
    blk.set(0, 0, MatExpr.scaled(mu0, -p.rho ** 2 * np.eye(1)) + eps * np.eye(1))
    blk.set(1, 0, MatExpr.constant(p.x0_vec[:, None]))
    blk.set(1, 1, -Se + eps * np.eye(n_x))
    prog.add_lmi(blk.to_expr(), "initial_set")

    # input budget, Schur-expanded convexification
    if p.u_max is not None:
        c = p.u_max ** 2 / p.rho ** 2
        blk = BlockMatrix([n_x, n_u, n_x, n_u])
        blk.set(0, 0, -c * Se + 0.5 * forms["input_gram"] + eps * np.eye(n_x))
        blk.set(1, 0, 0.5 * forms["input_cross"])
        blk.set(1, 1, MatExpr.scaled(mu0, -np.eye(n_u)) + 0.5 * forms["input_sq_mu0"]
                + eps * np.eye(n_u))
        blk.set(2, 0, MatExpr.scaled(mu0, np.eye(n_x) / np.sqrt(2.0)))
        blk.set(2, 2, MatExpr.constant(-np.eye(n_x)))
        blk.set(3, 0, Ze * (1.0 / np.sqrt(2.0)))
        blk.set(3, 1, MatExpr.scaled(mu0, np.eye(n_u) / np.sqrt(2.0)))
        blk.set(3, 3, MatExpr.constant(-np.eye(n_u)))
        prog.add_lmi(blk.to_expr(), "input_budget")

    # epigraph of the bilinear objective mu0*mu1 + mu2 <= hbar
    blk = BlockMatrix([1, 1])
    blk.set(0, 0, 0.25 * forms["objective_mu0_mu1"] + MatExpr.of(mu2)
            - MatExpr.of(hbar))
    blk.set(1, 0, MatExpr.scaled(mu0, 0.5 * np.eye(1)) + MatExpr.scaled(mu1, 0.5 * np.eye(1)))
    blk.set(1, 1, MatExpr.constant(-np.eye(1)))
    prog.add_lmi(blk.to_expr(), "objective_epigraph")

    prog.add_lmi(eps_pd * np.eye(n_x) - Se, "S_pd")
    prog.add_objective(hbar, 1.0)

    if gamma > 0:
        # proximal term ||alpha-at||^2+||mu0-m0t||^2+||mu1-m1t||^2+||S-St||_F^2,
        # packed with sqrt(2)-scaled off-diagonals to keep the epigraph block small
        ntri = n_x * (n_x + 1) // 2
        dim = 3 + ntri
        col = MatExpr((dim, 1))
        for row, (var, base) in enumerate([(alpha, point.alpha), (mu0, point.mu0),
                                           (mu1, point.mu1)]):
            e = np.zeros((dim, 1))
            e[row, 0] = 1.0
            col = col + MatExpr.scaled(var, e) + MatExpr.constant(-base * e)
        T = np.zeros((dim, n_x * n_x))
        r = 3
        for i in range(n_x):
            for j in range(i, n_x):
                T[r, i * n_x + j] = 1.0 if i == j else np.sqrt(2.0)
                r += 1
        col = col + (Se - point.S).vec().lmul(T)
        t = prog.add_scalar("prox_t", lb=0.0)
        blk = BlockMatrix([1, dim])
        blk.set(0, 0, MatExpr.scaled(t, -np.eye(1)))
        blk.set(1, 0, col)
        blk.set(1, 1, MatExpr.constant(-np.eye(dim)))
        prog.add_lmi(blk.to_expr(), "proximal_epigraph")
        prog.add_objective(t, gamma)

    return prog


# ---------------------------------------------------------------------------
# the SCA loop

def solve_sca(p: SynthesisProblem, settings: ScaSettings | None = None,
              start: ScaPoint | None = None) -> Controller:
    """Run the successive convex approximation to a stopping tolerance.

    Every iterate is feasible for the original nonconvex problem, so the
    final iterate carries its own certificate; the objective sequence is
    non-increasing by construction (the previous point stays feasible for
    the next subproblem with zero proximal cost).
    """
    settings = settings or ScaSettings()
    if start is None and p.u_max is not None:
        # the budget inequality is often inactive at the unconstrained
        # optimum; starting there avoids a long repair phase
        relaxed = solve_sca(replace(p, u_max=None), settings)
        blk = input_budget_block(p, relaxed.S, relaxed.Z, relaxed.mu0)
        if max_eig(blk, sym_tol=1e-6) <= -settings.eps_pd:
            start = ScaPoint(alpha=relaxed.alpha, mu0=relaxed.mu0,
                             mu1=relaxed.mu1, S=relaxed.S, Z=relaxed.Z)
    point = start or feasible_init_grid(p, settings)
    if settings.balance:
        pb, T = balance_problem(p)
        Ti = np.diag(1.0 / np.diag(T))
        rho = p.rho
        point = ScaPoint(alpha=point.alpha, mu0=point.mu0 * rho ** 2, mu1=point.mu1,
                         S=Ti @ point.S @ Ti.T, Z=point.Z @ Ti.T)
    else:
        pb, T, rho = p, np.eye(p.n_x), 1.0

    history = []
    fbar_prev = np.inf
    best = None
    flagged = ""

    for k in range(1, settings.max_iter + 1):
        prog = build_subproblem(pb, point, settings.gamma, settings.eps_pd)
        sol = solve_sdp(prog, settings.solver)
        if not sol.ok:
            retry = SolveOptions(backend="scs", feas_tol=settings.solver.feas_tol)
            sol = solve_sdp(prog, retry)
        if not sol.ok:
            if best is None:
                raise SynthesisError(f"SCA subproblem failed at iteration {k}: {sol.status}")
            flagged = f"solver_{sol.status}_at_iter_{k}"
            break
        fbar = sol.objective
        improved = fbar <= fbar_prev
        if improved:
            vals = sol.values
            point = ScaPoint(alpha=vals["alpha"], mu0=vals["mu0"], mu1=vals["mu1"],
                             S=vals["S"], Z=vals["Z"])
            mu2 = max(float(vals["mu2"]), 0.0)
            orig = _unbalance_point(point, T, rho)
            mu2_orig = mu2 / rho ** 2
            mu_k = float(np.sqrt(orig.mu0 * orig.mu1 + mu2_orig))
            history.append({"k": k, "fbar": float(fbar), "mu": mu_k})
            best = Controller(
                K=np.linalg.solve(orig.S.T, orig.Z.T).T,
                S=orig.S, Z=orig.Z, alpha=orig.alpha, mu0=orig.mu0,
                mu1=orig.mu1, mu2=mu2_orig, history=history,
            )
        if abs(fbar - fbar_prev) < settings.tol:
            break                       # stopping rule
        if not improved:
            break                       # numerical floor; keep last iterate
        fbar_prev = fbar

    if best is None:
        raise SynthesisError("SCA made no progress")
    best.flagged = flagged
    return best


# ---------------------------------------------------------------------------
# verification

def closed_loop_eigs(p: SynthesisProblem, K: np.ndarray) -> np.ndarray:
    return np.linalg.eigvals(p.A + p.B_u @ K)


def verify_controller(p: SynthesisProblem, ctrl: Controller,
                      feas_tol: float = FEAS_TOL, simulate: bool = True,
                      t_span: float = 10.0, dt: float = 1e-3) -> dict:
    """Re-check the certificate from scratch and optionally drive the linear
    closed loop with a worst-direction constant disturbance of norm rho.

    Failures land in the report rather than raising.
    """
    report = {}
    eigs = closed_loop_eigs(p, ctrl.K)
    report["max_re_eig"] = float(eigs.real.max())
    report["hurwitz"] = bool(eigs.real.max() < HURWITZ_TOL)
    report["gain_consistency"] = float(np.abs(ctrl.K @ ctrl.S - ctrl.Z).max())

    res = certificate_residuals(p, ctrl.S, ctrl.Z, ctrl.alpha, ctrl.mu0,
                                ctrl.mu1, ctrl.mu2)
    report["residuals"] = res
    report["certified"] = is_certified(res, feas_tol)
    report["mu"] = ctrl.mu

    if simulate and report["hurwitz"]:
        A_cl = p.A + p.B_u @ ctrl.K
        C_cl = p.C + p.D @ ctrl.K
        # constant disturbance along the largest static-gain direction
        M_static = -C_cl @ np.linalg.solve(A_cl, p.B_w)
        _u, _s, vt = np.linalg.svd(M_static)
        w = p.rho * vt[0]
        P = np.linalg.inv(ctrl.S)
        n_steps = int(round(t_span / dt))
        x = p.x0_vec.copy()
        ellips_max = x @ P @ x
        z_max = 0.0
        u_max_seen = 0.0
        f = lambda xv: A_cl @ xv + p.B_w @ w
        for _ in range(n_steps):
            k1 = f(x); k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2); k4 = f(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            ellips_max = max(ellips_max, x @ P @ x)
            z_max = max(z_max, float(np.linalg.norm(C_cl @ x)))
            u_max_seen = max(u_max_seen, float(np.linalg.norm(ctrl.K @ x)))
        report["sim_ellipsoid_peak"] = float(ellips_max)
        report["sim_ellipsoid_bound"] = float(ctrl.mu0 * p.rho ** 2)
        report["sim_ellipsoid_ok"] = bool(ellips_max <= ctrl.mu0 * p.rho ** 2 * (1 + 1e-6) + 1e-12)
        report["sim_z_peak"] = z_max
        report["sim_z_bound"] = float(ctrl.mu * p.rho)
        report["sim_z_ok"] = bool(z_max <= ctrl.mu * p.rho * (1 + 1e-6) + 1e-12)
        report["sim_u_peak"] = u_max_seen
        report["sim_u_ok"] = (bool(u_max_seen <= p.u_max * (1 + 1e-6))
                              if p.u_max is not None else True)
    return report
