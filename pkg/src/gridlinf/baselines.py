"""Comparison controllers: single-area AGC and a state-feedback H-infinity
gain via the standard bounded-real LMI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lmi import BlockMatrix, MatExpr, SdpProgram, SolveOptions, max_eig, solve_sdp
from .synthesis import (
    EPS_PD,
    SynthesisError,
    SynthesisProblem,
    balance_problem,
)


@dataclass(frozen=True)
class AgcConfig:
    """Single-area automatic generation control.

    One integrator state y tracks the area control error plus the total
    generation deviation; each governor reference moves by its participation
    share of y. Participation factors must sum to one.
    """

    K_G: float = 1000.0
    participation: np.ndarray = None
    exciter_gain_source: str = "linf_controller"   # or "none"

    def __post_init__(self):
        if self.K_G <= 0:
            raise ValueError("integrator gain must be positive")
        part = np.asarray(self.participation, dtype=float)
        object.__setattr__(self, "participation", part)
        if abs(part.sum() - 1.0) > 1e-9:
            raise ValueError(f"participation factors sum to {part.sum()}, expected 1")

    @staticmethod
    def from_dispatch(p_g0: np.ndarray, K_G: float = 1000.0,
                      exciter_gain_source: str = "linf_controller") -> "AgcConfig":
        w = np.asarray(p_g0, dtype=float)
        return AgcConfig(K_G=K_G, participation=w / w.sum(),
                         exciter_gain_source=exciter_gain_source)


def area_control_error(case, omega: np.ndarray) -> float:
    """Frequency-weighted single-area error (1/G) sum (1/R_i + D_i) dω_i."""
    terms = [(1.0 / g.R_droop + g.D) * (omega[k] - g.omega_s)
             for k, g in enumerate(case.generators)]
    return float(np.mean(terms))


def agc_rhs(config: AgcConfig, case, y: float, omega: np.ndarray,
            p_g: np.ndarray, p_g0: np.ndarray, r0: np.ndarray):
    """Integrator derivative and the absolute governor references.

    ``p_g`` and ``p_g0`` are the generator-bus electrical powers (length G);
    each reference moves by its participation share of the integrator state.
    """
    ace = area_control_error(case, omega)
    ydot = config.K_G * (-y - ace + float(np.sum(p_g - p_g0)))
    r = r0 + config.participation * y
    return ydot, r


# ---------------------------------------------------------------------------
# H-infinity baseline

def hinf_synthesize(p: SynthesisProblem, options: SolveOptions | None = None,
                    eps_pd: float = EPS_PD, gamma_margin: float = 1e-3):
    """Minimize the closed-loop energy gain via the bounded-real LMI.

    Returns (K, gamma, info). ``info`` carries the certificate residual and
    the frequency-sweep check of the achieved norm.
    """
    options = options or SolveOptions(feas_tol=5e-7)
    pb, T = balance_problem(p)   # also normalizes the disturbance to rho = 1
    n_x, n_u, n_w, n_z = pb.n_x, pb.n_u, pb.n_w, pb.n_z

    prog = SdpProgram()
    S = prog.add_sym("S", n_x)
    Z = prog.add_rect("Z", n_u, n_x)
    gam = prog.add_scalar("gamma", lb=1e-9)
    Se, Ze = MatExpr.of(S), MatExpr.of(Z)

    blk = BlockMatrix([n_x, n_w, n_z])
    blk.set(0, 0, Se.rmul(pb.A.T) + Se.lmul(pb.A) + Ze.T.rmul(pb.B_u.T)
            + Ze.lmul(pb.B_u) + eps_pd * np.eye(n_x))
    blk.set(1, 0, MatExpr.constant(pb.B_w.T))
    blk.set(1, 1, MatExpr.scaled(gam, -np.eye(n_w)))
    blk.set(2, 0, Se.lmul(pb.C) + Ze.lmul(pb.D))
    blk.set(2, 2, MatExpr.scaled(gam, -np.eye(n_z)))
    prog.add_lmi(blk.to_expr(), "bounded_real")
    prog.add_lmi(eps_pd * np.eye(n_x) - Se, "S_pd")
    prog.add_objective(gam, 1.0)

    sol = solve_sdp(prog, options)
    if not sol.ok:
        raise SynthesisError(f"bounded-real synthesis failed: {sol.status} "
                             f"(pair (A, B_u) may not be stabilizable)")
    Sv, Zv, gv = sol.values["S"], sol.values["Z"], float(sol.values["gamma"])
    K = np.linalg.solve(Sv.T, Zv.T).T @ np.diag(1.0 / np.diag(T))
    # gamma was computed for the rho-normalized disturbance; undo for the gain
    gamma = gv / p.rho

    info = {
        "lmi_residual": max_eig(_bounded_real_block(pb, Sv, Zv, gv), sym_tol=1e-6),
        "gamma": gamma,
    }
    eigs = np.linalg.eigvals(p.A + p.B_u @ K)
    info["max_re_eig"] = float(eigs.real.max())
    info["hurwitz"] = bool(eigs.real.max() < 0)
    info["hinf_sweep"] = closed_loop_hinf_norm(p, K)
    info["sweep_ok"] = bool(info["hinf_sweep"] <= gamma * (1 + 1e-3))
    return K, gamma, info


def _bounded_real_block(p: SynthesisProblem, S, Z, gamma):
    CSDZ = p.C @ S + p.D @ Z
    n_x, n_w, n_z = p.n_x, p.n_w, p.n_z
    top = S @ p.A.T + p.A @ S + p.B_u @ Z + Z.T @ p.B_u.T
    return np.block([
        [top, p.B_w, CSDZ.T],
        [p.B_w.T, -gamma * np.eye(n_w), np.zeros((n_w, n_z))],
        [CSDZ, np.zeros((n_z, n_w)), -gamma * np.eye(n_z)],
    ])


def closed_loop_hinf_norm(p: SynthesisProblem, K: np.ndarray,
                          n_grid: int = 400) -> float:
    """Largest singular value of the closed-loop transfer matrix on a log
    frequency grid (no bisection)."""
    A_cl = p.A + p.B_u @ K
    C_cl = p.C + p.D @ K
    n = p.n_x
    freqs = np.concatenate([[0.0], np.logspace(-3, 4, n_grid - 1)])
    worst = 0.0
    for w in freqs:
        G = C_cl @ np.linalg.solve(1j * w * np.eye(n) - A_cl, p.B_w)
        worst = max(worst, float(np.linalg.svd(G, compute_uv=False)[0]))
    return worst
