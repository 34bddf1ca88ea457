"""Structured (decentralized / distributed) peak-gain synthesis.

The gain keeps its sparsity by staying a primal variable next to the
Lyapunov matrix P, at the price of one extra bilinear product P*B_u*K that
the convexification splits like the others. Initialization is a two-phase
scheme: project the centralized gain onto the admissible pattern, then
drive a slack variable negative by alternating convexified solves over
(P, scalars) and gain-only LMI solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

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
from .synthesis import (
    EPS_PD,
    EPS_SCALAR,
    FEAS_TOL,
    Controller,
    ScaSettings,
    SynthesisError,
    SynthesisProblem,
    balance_problem,
    solve_sca,
)


class DecInitError(SynthesisError):
    """Slack phase failed to reach a strictly feasible structured point."""


@dataclass(frozen=True)
class SparsityPattern:
    mask: np.ndarray              # n_u x n_x boolean, True = admissible
    description: str = "custom"

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", m)
        if not m.any(axis=1).all():
            raise ValueError("every controller row needs at least one admissible entry")

    @staticmethod
    def block_diagonal(n_gen: int) -> "SparsityPattern":
        """Each generator's two inputs feed back only its own four states."""
        mask = np.zeros((2 * n_gen, 4 * n_gen), dtype=bool)
        for g in range(n_gen):
            mask[2 * g:2 * g + 2, 4 * g:4 * g + 4] = True
        return SparsityPattern(mask=mask, description="block_diagonal")

    @staticmethod
    def dense(n_u: int, n_x: int) -> "SparsityPattern":
        return SparsityPattern(mask=np.ones((n_u, n_x), dtype=bool), description="dense")

    def project(self, K: np.ndarray) -> np.ndarray:
        return np.where(self.mask, K, 0.0)

    def check(self, K: np.ndarray):
        bad = np.abs(np.where(self.mask, 0.0, K)).max() if K.size else 0.0
        if bad != 0.0:
            raise ValueError(f"gain violates the sparsity pattern (|K_ij| up to {bad:.2e})")


@dataclass(frozen=True)
class DecScaPoint:
    alpha: float
    mu0: float
    mu1: float
    P: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        if min(self.alpha, self.mu0, self.mu1) <= 0:
            raise ValueError("scalars of an expansion point must be positive")
        if min_eig(self.P, sym_tol=1e-9) <= 0:
            raise ValueError("P of an expansion point must be positive definite")


# ---------------------------------------------------------------------------
# numeric certificate blocks (P-parameterized)

def dec_lyap_block(p: SynthesisProblem, P, K, alpha, mu0):
    Acl = p.A + p.B_u @ K
    top = Acl.T @ P + P @ Acl + alpha * P
    return np.block([[top, P @ p.B_w],
                     [p.B_w.T @ P, -alpha * mu0 * np.eye(p.n_w)]])


def dec_perf_block(p: SynthesisProblem, P, K, mu1, mu2):
    Ccl = p.C + p.D @ K
    nx, nw, nz = p.n_x, p.n_w, p.n_z
    return np.block([
        [-mu1 * P, np.zeros((nx, nw)), Ccl.T],
        [np.zeros((nw, nx)), -mu2 * np.eye(nw), np.zeros((nw, nz))],
        [Ccl, np.zeros((nz, nw)), -np.eye(nz)],
    ])


def dec_init_ellipsoid_block(p: SynthesisProblem, P, mu0):
    x0 = p.x0_vec
    Px0 = P @ x0
    return np.block([[np.array([[-mu0 * p.rho ** 2]]), Px0[None, :]],
                     [Px0[:, None], -P]])


def dec_input_budget_block(p: SynthesisProblem, P, K, mu0):
    c = p.u_max ** 2 / p.rho ** 2
    return np.block([[-c * P, mu0 * K.T],
                     [mu0 * K, -mu0 * np.eye(p.n_u)]])


def decentralized_residuals(p: SynthesisProblem, pattern: SparsityPattern,
                            P, K, alpha, mu0, mu1, mu2) -> dict:
    """Largest eigenvalue of each structured-certificate block.

    The input-budget block is evaluated for reporting but is not part of the
    synthesis constraints.
    """
    pattern.check(K)
    if min(alpha, mu0, mu1) <= 0 or mu2 < 0:
        raise ValueError("certificate scalars must be positive (mu2 nonnegative)")
    if min_eig(P, sym_tol=1e-8) <= 0:
        raise ValueError("certificate P must be positive definite")
    return {
        "lyapunov": max_eig(dec_lyap_block(p, P, K, alpha, mu0), sym_tol=1e-6),
        "performance": max_eig(dec_perf_block(p, P, K, mu1, mu2), sym_tol=1e-6),
        "initial_set": max_eig(dec_init_ellipsoid_block(p, P, mu0), sym_tol=1e-6),
        "input_budget": (max_eig(dec_input_budget_block(p, P, K, mu0), sym_tol=1e-6)
                         if p.u_max is not None else None),
    }


# ---------------------------------------------------------------------------
# convexified subproblems

def build_dec_subproblem(p: SynthesisProblem, pattern: SparsityPattern,
                         point: DecScaPoint, gamma: float,
                         fixed_K: np.ndarray | None = None,
                         with_slack: bool = False,
                         eps_pd: float = EPS_PD):
    """Convexified structured subproblem around ``point``.

    ``fixed_K`` freezes the gain (the P*B_u*K product turns linear and no
    gain convexification is needed); ``with_slack`` relaxes the two
    stability/performance inequalities by s*I and minimizes s.
    """
    n_x, n_u, n_w, n_z = p.n_x, p.n_u, p.n_w, p.n_z
    prog = SdpProgram()
    P = prog.add_sym("P", n_x)
    alpha = prog.add_scalar("alpha", lb=EPS_SCALAR)
    mu0 = prog.add_scalar("mu0", lb=EPS_SCALAR)
    mu1 = prog.add_scalar("mu1", lb=EPS_SCALAR)
    mu2 = prog.add_scalar("mu2", lb=0.0)
    hbar = prog.add_scalar("hbar", lb=0.0)
    Pe = MatExpr.of(P)
    eps = eps_pd

    slack = prog.add_scalar("slack") if with_slack else None

    if fixed_K is None:
        K = prog.add_rect("K", n_u, n_x, mask=pattern.mask.tolist())
        Ke = MatExpr.of(K)
        Ccl = MatExpr.constant(p.C) + Ke.lmul(p.D)
        gain_quad = cx.taylor_neg_sq_p_minus_bk(P, K, p.B_u, point.P, point.K)
        pbk_row = (Pe + Ke.lmul(p.B_u)) * (1.0 / np.sqrt(2.0))
    else:
        K = None
        Ccl = MatExpr.constant(p.C + p.D @ fixed_K)

    f_aP = cx.taylor_neg_sq_diff(alpha, P, point.alpha, point.P)
    f_am0 = cx.taylor_neg_scalar_sum_sq(alpha, mu0, point.alpha, point.mu0, n_w)
    f_m1P = cx.taylor_neg_sq_sum(mu1, P, point.mu1, point.P)
    f_obj = cx.taylor_neg_scalar_diff_sq(mu0, mu1, point.mu0, point.mu1)

    # stability inequality
    if fixed_K is None:
        blk = BlockMatrix([n_x, n_w, n_x, n_w, n_x])
        xi = Pe.lmul(p.A.T) + Pe.rmul(p.A) + 0.5 * gain_quad + 0.25 * f_aP \
            + eps * np.eye(n_x)
        blk.set(4, 0, pbk_row)
        blk.set(4, 4, MatExpr.constant(-np.eye(n_x)))
    else:
        blk = BlockMatrix([n_x, n_w, n_x, n_w])
        Acl = p.A + p.B_u @ fixed_K
        xi = Pe.lmul(Acl.T) + Pe.rmul(Acl) + 0.25 * f_aP + eps * np.eye(n_x)
    if slack is not None:
        xi = xi - MatExpr.scaled(slack, np.eye(n_x))
    blk.set(0, 0, xi)
    blk.set(1, 0, Pe.lmul(p.B_w.T))
    f22 = 0.25 * f_am0 + eps * np.eye(n_w)
    if slack is not None:
        f22 = f22 - MatExpr.scaled(slack, np.eye(n_w))
    blk.set(1, 1, f22)
    blk.set(2, 0, MatExpr.scaled(alpha, 0.5 * np.eye(n_x)) + 0.5 * Pe)
    blk.set(2, 2, MatExpr.constant(-np.eye(n_x)))
    blk.set(3, 1, MatExpr.scaled(alpha, 0.5 * np.eye(n_w))
            + MatExpr.scaled(mu0, -0.5 * np.eye(n_w)))
    blk.set(3, 3, MatExpr.constant(-np.eye(n_w)))
    prog.add_lmi(blk.to_expr(), "lyapunov")

    # performance inequality
    blk = BlockMatrix([n_x, n_w, n_z, n_x])
    b00 = 0.25 * f_m1P + eps * np.eye(n_x)
    b11 = MatExpr.scaled(mu2, -np.eye(n_w)) + eps * np.eye(n_w)
    b22 = MatExpr.constant((eps - 1.0) * np.eye(n_z))
    if slack is not None:
        b00 = b00 - MatExpr.scaled(slack, np.eye(n_x))
        b11 = b11 - MatExpr.scaled(slack, np.eye(n_w))
        b22 = b22 - MatExpr.scaled(slack, np.eye(n_z))
    blk.set(0, 0, b00)
    blk.set(1, 1, b11)
    blk.set(2, 0, Ccl)
    blk.set(2, 2, b22)
    blk.set(3, 0, MatExpr.scaled(mu1, 0.5 * np.eye(n_x)) - 0.5 * Pe)
    blk.set(3, 3, MatExpr.constant(-np.eye(n_x)))
    prog.add_lmi(blk.to_expr(), "performance")

    # initial-condition ellipsoid (linear in P, mu0)
    blk = BlockMatrix([1, n_x])
    blk.set(0, 0, MatExpr.scaled(mu0, -p.rho ** 2 * np.eye(1)) + eps * np.eye(1))
    blk.set(1, 0, Pe.rmul(p.x0_vec[:, None]))
    blk.set(1, 1, -Pe + eps * np.eye(n_x))
    prog.add_lmi(blk.to_expr(), "initial_set")

    # epigraph of mu0*mu1 + mu2
    blk = BlockMatrix([1, 1])
    blk.set(0, 0, 0.25 * f_obj + MatExpr.of(mu2) - MatExpr.of(hbar))
    blk.set(1, 0, MatExpr.scaled(mu0, 0.5 * np.eye(1)) + MatExpr.scaled(mu1, 0.5 * np.eye(1)))
    blk.set(1, 1, MatExpr.constant(-np.eye(1)))
    prog.add_lmi(blk.to_expr(), "objective_epigraph")

    prog.add_lmi(eps_pd * np.eye(n_x) - Pe, "P_pd")

    if with_slack:
        prog.add_objective(slack, 1.0)
        prog.add_objective(hbar, 1e-6)   # tie-break, keeps scalars bounded
    else:
        prog.add_objective(hbar, 1.0)

    if gamma > 0 and not with_slack:
        ntri = n_x * (n_x + 1) // 2
        nk = int(pattern.mask.sum()) if fixed_K is None else 0
        dim = 3 + ntri + nk
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
        col = col + (Pe - point.P).vec().lmul(T)
        if fixed_K is None:
            Tk = np.zeros((dim, n_u * n_x))
            for (i, j) in np.argwhere(pattern.mask):
                Tk[r, i * n_x + j] = 1.0
                r += 1
            col = col + (Ke - pattern.project(point.K)).vec().lmul(Tk)
        t = prog.add_scalar("prox_t", lb=0.0)
        blk = BlockMatrix([1, dim])
        blk.set(0, 0, MatExpr.scaled(t, -np.eye(1)))
        blk.set(1, 0, col)
        blk.set(1, 1, MatExpr.constant(-np.eye(dim)))
        prog.add_lmi(blk.to_expr(), "proximal_epigraph")
        prog.add_objective(t, gamma)

    return prog


# ---------------------------------------------------------------------------
# gain-only slack step (everything else frozen -> plain LMI)

def _gain_step(p: SynthesisProblem, pattern: SparsityPattern, point: DecScaPoint,
               solver: SolveOptions):
    n_x, n_u, n_w, n_z = p.n_x, p.n_u, p.n_w, p.n_z
    prog = SdpProgram()
    K = prog.add_rect("K", n_u, n_x, mask=pattern.mask.tolist())
    s = prog.add_scalar("slack")
    Ke = MatExpr.of(K)
    P, alpha, mu0, mu1 = point.P, point.alpha, point.mu0, point.mu1

    blk = BlockMatrix([n_x, n_w])
    pbk = Ke.lmul(P @ p.B_u)
    blk.set(0, 0, MatExpr.constant(p.A.T @ P + P @ p.A + alpha * P) + pbk + pbk.T
            - MatExpr.scaled(s, np.eye(n_x)))
    blk.set(1, 0, MatExpr.constant(p.B_w.T @ P))
    blk.set(1, 1, MatExpr.constant(-alpha * mu0 * np.eye(n_w))
            - MatExpr.scaled(s, np.eye(n_w)))
    prog.add_lmi(blk.to_expr(), "lyapunov")

    mu2 = prog.add_scalar("mu2", lb=0.0)
    blk = BlockMatrix([n_x, n_w, n_z])
    blk.set(0, 0, MatExpr.constant(-mu1 * P) - MatExpr.scaled(s, np.eye(n_x)))
    blk.set(1, 1, MatExpr.scaled(mu2, -np.eye(n_w)) - MatExpr.scaled(s, np.eye(n_w)))
    blk.set(2, 0, MatExpr.constant(p.C) + Ke.lmul(p.D))
    blk.set(2, 2, MatExpr.constant(-np.eye(n_z)) - MatExpr.scaled(s, np.eye(n_z)))
    prog.add_lmi(blk.to_expr(), "performance")

    prog.add_objective(s, 1.0)
    sol = solve_sdp(prog, solver)
    if not sol.ok:
        return None, np.inf
    return sol.values["K"], float(sol.values["slack"])


def _dec_init_raw(pb: SynthesisProblem, pattern: SparsityPattern,
                  settings: ScaSettings, start: DecScaPoint,
                  max_rounds: int = 20) -> DecScaPoint:
    """Slack phase in the solver frame: drive s below zero by alternating a
    convexified (P, scalars) step with a gain-only LMI step."""
    point = start
    for round_ in range(max_rounds):
        prog = build_dec_subproblem(pb, pattern, point, gamma=0.0,
                                    fixed_K=point.K, with_slack=True,
                                    eps_pd=settings.eps_pd)
        sol = solve_sdp(prog, settings.solver)
        if not sol.ok:
            raise DecInitError(f"slack subproblem failed in round {round_}: {sol.status}")
        v = sol.values
        point = DecScaPoint(alpha=v["alpha"], mu0=v["mu0"], mu1=v["mu1"],
                            P=v["P"], K=point.K)
        if v["slack"] <= 0.0:
            return point

        K_new, s_gain = _gain_step(pb, pattern, point, settings.solver)
        if K_new is not None:
            point = DecScaPoint(alpha=point.alpha, mu0=point.mu0, mu1=point.mu1,
                                P=point.P, K=pattern.project(K_new))
            if s_gain <= 0.0:
                return point
    raise DecInitError(f"slack did not reach zero within {max_rounds} rounds "
                       f"(pattern {pattern.description!r}); no structured "
                       f"stabilizer found from this start")


def _solver_frame(p: SynthesisProblem, settings: ScaSettings):
    if settings.balance:
        pb, T = balance_problem(p)
        return pb, T, np.diag(1.0 / np.diag(T)), p.rho
    return p, np.eye(p.n_x), np.eye(p.n_x), 1.0


def _start_from_centralized(pattern, ctrl: Controller, Ti, T, rho) -> DecScaPoint:
    """Centralized certificate mapped into the solver frame.

    The certificate S rides the positive-definiteness floor, so inverting it
    raw would hand the slack phase a terribly conditioned P; a small ridge
    fixes that (the slack variable absorbs the resulting infeasibility).
    The structured inequalities are homogeneous under (P, mu0, mu1) ->
    (cP, c*mu0, mu1/c), so P is also rescaled to unit norm for free.
    """
    S_b = Ti @ ctrl.S @ Ti.T
    S_b = (S_b + S_b.T) / 2.0
    S_b += 1e-4 * float(np.linalg.eigvalsh(S_b)[-1]) * np.eye(S_b.shape[0])
    P0 = np.linalg.inv(S_b)
    P0 = (P0 + P0.T) / 2.0
    c = 1.0 / float(np.linalg.eigvalsh(P0)[-1])
    return DecScaPoint(alpha=ctrl.alpha, mu0=ctrl.mu0 * rho ** 2 * c,
                       mu1=ctrl.mu1 / c,
                       P=c * P0, K=pattern.project(ctrl.K @ T))


def dec_feasible_init(p: SynthesisProblem, pattern: SparsityPattern,
                      settings: ScaSettings | None = None,
                      centralized: Controller | None = None,
                      max_rounds: int = 20) -> DecScaPoint:
    """Two-phase structured initialization.

    Phase 1 projects a centralized gain onto the pattern; phase 2 minimizes a
    slack added to the stability and performance inequalities until it turns
    negative (the margins inside the subproblems then make the point strictly
    feasible). Returned in the problem's own coordinates.
    """
    settings = settings or ScaSettings()
    if centralized is None:
        centralized = solve_sca(p, settings)
    pb, T, Ti, rho = _solver_frame(p, settings)
    point = _dec_init_raw(pb, pattern, settings,
                          _start_from_centralized(pattern, centralized, Ti, T, rho),
                          max_rounds=max_rounds)
    return DecScaPoint(alpha=point.alpha, mu0=point.mu0 / rho ** 2, mu1=point.mu1,
                       P=Ti.T @ point.P @ Ti, K=point.K @ Ti)


def solve_sca_dec(p: SynthesisProblem, pattern: SparsityPattern,
                  settings: ScaSettings | None = None,
                  centralized: Controller | None = None) -> Controller:
    """Structured SCA: monotone objective, mask kept exactly, certificate in
    the (P, K) parameterization."""
    settings = settings or ScaSettings()
    if pattern.mask.shape != (p.n_u, p.n_x):
        raise ValueError("pattern shape does not match the problem dimensions")

    if centralized is None:
        centralized = solve_sca(p, settings)
    pb, T, Ti, rho = _solver_frame(p, settings)
    point = _dec_init_raw(pb, pattern, settings,
                          _start_from_centralized(pattern, centralized, Ti, T, rho))

    history = []
    fbar_prev = np.inf
    best = None
    flagged = ""
    for k in range(1, settings.max_iter + 1):
        prog = build_dec_subproblem(pb, pattern, point, settings.gamma,
                                    eps_pd=settings.eps_pd)
        sol = solve_sdp(prog, settings.solver)
        if not sol.ok:
            retry = SolveOptions(backend="scs", feas_tol=settings.solver.feas_tol)
            sol = solve_sdp(prog, retry)
        if not sol.ok:
            if best is None:
                raise SynthesisError(f"structured SCA failed at iteration {k}: {sol.status}")
            flagged = f"solver_{sol.status}_at_iter_{k}"
            break
        fbar = sol.objective
        improved = fbar <= fbar_prev
        if improved:
            v = sol.values
            point = DecScaPoint(alpha=v["alpha"], mu0=v["mu0"], mu1=v["mu1"],
                                P=v["P"], K=v["K"])
            mu2 = max(float(v["mu2"]), 0.0)
            P_orig = Ti.T @ point.P @ Ti
            K_orig = point.K @ Ti
            mu0_orig = point.mu0 / rho ** 2
            mu2_orig = mu2 / rho ** 2
            mu_k = float(np.sqrt(mu0_orig * point.mu1 + mu2_orig))
            history.append({"k": k, "fbar": float(fbar), "mu": mu_k})
            S_orig = np.linalg.inv(P_orig)
            S_orig = (S_orig + S_orig.T) / 2.0
            best = Controller(K=K_orig, S=S_orig, Z=K_orig @ S_orig,
                              alpha=point.alpha, mu0=mu0_orig, mu1=point.mu1,
                              mu2=mu2_orig, mode="decentralized", history=history,
                              P=P_orig)
        if abs(fbar - fbar_prev) < settings.tol:
            break
        if not improved:
            break
        fbar_prev = fbar

    if best is None:
        raise SynthesisError("structured SCA made no progress")
    best.flagged = flagged
    return best


def verify_decentralized(p: SynthesisProblem, pattern: SparsityPattern,
                         ctrl: Controller, feas_tol: float = FEAS_TOL) -> dict:
    P = getattr(ctrl, "P", None)
    if P is None:
        P = np.linalg.inv(ctrl.S)
        P = (P + P.T) / 2.0
    res = decentralized_residuals(p, pattern, P, ctrl.K, ctrl.alpha,
                                  ctrl.mu0, ctrl.mu1, ctrl.mu2)
    eigs = np.linalg.eigvals(p.A + p.B_u @ ctrl.K)
    synth_keys = ("lyapunov", "performance", "initial_set")
    return {
        "residuals": res,
        "certified": all(res[k] <= feas_tol for k in synth_keys),
        "input_budget_ok": (res["input_budget"] is None
                            or res["input_budget"] <= feas_tol),
        "max_re_eig": float(eigs.real.max()),
        "hurwitz": bool(eigs.real.max() < -1e-8),
        "masked_max_abs": float(np.abs(np.where(pattern.mask, 0.0, ctrl.K)).max()),
        "mu": ctrl.mu,
    }
