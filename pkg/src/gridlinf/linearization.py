"""Small-signal state-space model built by analytic differentiation of the
machine and network equations, cross-validated with finite differences.

State ordering is generator-major [delta_i, omega_i, e_i, m_i]; inputs
[r_i, f_i]. The algebraic vector is type-major [p_g (G); q_g (G); v (N);
theta (N)], matching the power-flow Jacobian columns. The physical
disturbance is the 2N vector of net-injection deviations [p (N); q (N)];
it enters the algebraic rows through a zero-padding selector because the
stator equations carry no disturbance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import (
    GeneratorParams,
    GridCase,
    OperatingPoint,
    generator_rhs,
    network_injection_jacobian,
    power_flow_residual,
    stator_power,
)

COND_LIMIT = 1e12


class LinearizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearModel:
    """Reduced state-space triple plus every intermediate Jacobian block."""

    A: np.ndarray
    B_u: np.ndarray
    B_w: np.ndarray
    A_s: np.ndarray
    B_s: np.ndarray
    B_a: np.ndarray
    H_sx: np.ndarray
    H_sa: np.ndarray
    Psi: np.ndarray
    H_x: np.ndarray
    H_u: np.ndarray
    H_a: np.ndarray
    Pi: np.ndarray
    cond_H_a: float

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B_u.shape[1]

    @property
    def n_w(self):
        return self.B_w.shape[1]

    def to_dict(self) -> dict:
        out = {}
        for name in ("A", "B_u", "B_w", "A_s", "B_s", "B_a", "H_sx", "H_sa",
                     "Psi", "H_x", "H_u", "H_a", "Pi"):
            out[name] = getattr(self, name).tolist()
        out["cond_H_a"] = self.cond_H_a
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearModel":
        kw = {k: np.array(v, dtype=float) for k, v in doc.items() if k != "cond_H_a"}
        return cls(cond_H_a=float(doc["cond_H_a"]), **kw)


# ---------------------------------------------------------------------------
# per-generator blocks

def linearize_generator(params: GeneratorParams, x_i, u_i, a_i):
    """Jacobians of one machine's dynamics and stator equations.

    Returns (A_si 4x4, B_si 4x2, D_si 4x4, H_sx_i 2x4, H_sa_i 2x4) where the
    algebraic ordering is [p_g, q_g, v, theta].
    """
    delta, _omega, e, _m = x_i
    _p_g, _q_g, v, theta = a_i
    xd, xdp, xq = params.x_d, params.x_d_prime, params.x_q
    tau, M, D, Tch, R = params.tau_d, params.M, params.D, params.T_ch, params.R_droop
    d = delta - theta
    ke = (xd - xdp) / (tau * xdp)

    A_si = np.zeros((4, 4))
    A_si[0, 1] = 1.0
    A_si[1, 1] = -D / M
    A_si[1, 3] = 1.0 / M
    A_si[2, 0] = -ke * v * np.sin(d)
    A_si[2, 2] = -xd / (tau * xdp)
    A_si[3, 1] = -1.0 / (Tch * R)
    A_si[3, 3] = -1.0 / Tch

    B_si = np.zeros((4, 2))
    B_si[2, 1] = 1.0 / tau
    B_si[3, 0] = 1.0 / Tch

    D_si = np.zeros((4, 4))
    D_si[1, 0] = -1.0 / M
    D_si[2, 2] = ke * np.cos(d)
    D_si[2, 3] = ke * v * np.sin(d)

    # stator residual [p_hat - p_g; q_hat - q_g]
    c2 = (xdp - xq) / (2.0 * xdp * xq)
    c1 = (xdp + xq) / (2.0 * xdp * xq)
    dp_dd = e * v / xdp * np.cos(d) + 2.0 * c2 * v ** 2 * np.cos(2.0 * d)
    dp_de = v / xdp * np.sin(d)
    dp_dv = e / xdp * np.sin(d) + 2.0 * c2 * v * np.sin(2.0 * d)
    dq_dd = -e * v / xdp * np.sin(d) - 2.0 * c2 * v ** 2 * np.sin(2.0 * d)
    dq_de = v / xdp * np.cos(d)
    dq_dv = e / xdp * np.cos(d) - 2.0 * c1 * v + 2.0 * c2 * v * np.cos(2.0 * d)

    H_sx_i = np.array([[dp_dd, 0.0, dp_de, 0.0],
                       [dq_dd, 0.0, dq_de, 0.0]])
    H_sa_i = np.array([[-1.0, 0.0, dp_dv, -dp_dd],
                       [0.0, -1.0, dq_dv, -dq_dd]])
    return A_si, B_si, D_si, H_sx_i, H_sa_i


def power_flow_jacobian(case: GridCase, v, theta) -> np.ndarray:
    """Jacobian of the nodal-balance residuals w.r.t. [p_g; q_g; v; theta].

    Rows follow the residual ordering [P gen; Q gen; P load; Q load]; the
    generator-power blocks are -I by construction.
    """
    n, ng = case.n_bus, case.n_gen
    gb, lb = list(case.gen_buses), list(case.load_buses)
    dp_dv, dp_dth, dq_dv, dq_dth = network_injection_jacobian(case, v, theta)

    psi = np.zeros((2 * n, 2 * ng + 2 * n))
    rows_pg, rows_qg = slice(0, ng), slice(ng, 2 * ng)
    rows_pl = slice(2 * ng, 2 * ng + len(lb))
    rows_ql = slice(2 * ng + len(lb), 2 * n)

    psi[rows_pg, :ng] = -np.eye(ng)
    psi[rows_qg, ng:2 * ng] = -np.eye(ng)
    cols_v, cols_th = slice(2 * ng, 2 * ng + n), slice(2 * ng + n, 2 * ng + 2 * n)
    psi[rows_pg, cols_v] = dp_dv[gb]
    psi[rows_pg, cols_th] = dp_dth[gb]
    psi[rows_qg, cols_v] = dq_dv[gb]
    psi[rows_qg, cols_th] = dq_dth[gb]
    psi[rows_pl, cols_v] = dp_dv[lb]
    psi[rows_pl, cols_th] = dp_dth[lb]
    psi[rows_ql, cols_v] = dq_dv[lb]
    psi[rows_ql, cols_th] = dq_dth[lb]
    return psi


def disturbance_selector(case: GridCase) -> np.ndarray:
    """Selector placing the 2N physical disturbance into the algebraic rows.

    The stator rows (first 2G) receive nothing; a P (or Q) deviation at a bus
    lands on that bus's nodal-balance row.
    """
    n, ng, nl = case.n_bus, case.n_gen, case.n_load
    gpos = {b: k for k, b in enumerate(case.gen_buses)}
    lpos = {b: k for k, b in enumerate(case.load_buses)}
    pi = np.zeros((2 * ng + 2 * n, 2 * n))
    for bus in range(n):
        if bus in gpos:
            prow, qrow = gpos[bus], ng + gpos[bus]
        else:
            prow, qrow = 2 * ng + lpos[bus], 2 * ng + nl + lpos[bus]
        pi[2 * ng + prow, bus] = 1.0
        pi[2 * ng + qrow, n + bus] = 1.0
    return pi


def assemble_dae(case: GridCase, x, a):
    """Stack per-generator blocks and the network Jacobian at a given point.

    Returns (A_s, B_s, B_a, H_x, H_u, H_a, Psi, H_sx, H_sa, Pi); the algebraic
    rows are ordered [stator (2G); nodal balance (2N)].
    """
    n, ng = case.n_bus, case.n_gen
    na = 2 * ng + 2 * n
    v = a[2 * ng:2 * ng + n]
    theta = a[2 * ng + n:]

    A_s = np.zeros((4 * ng, 4 * ng))
    B_s = np.zeros((4 * ng, 2 * ng))
    B_a = np.zeros((4 * ng, na))
    H_sx = np.zeros((2 * ng, 4 * ng))
    H_sa = np.zeros((2 * ng, na))
    for k, g in enumerate(case.generators):
        a_i = np.array([a[k], a[ng + k], v[g.bus], theta[g.bus]])
        cols = [k, ng + k, 2 * ng + g.bus, 2 * ng + n + g.bus]
        A_si, B_si, D_si, H_sx_i, H_sa_i = linearize_generator(
            g, x[4 * k:4 * k + 4], None, a_i)
        A_s[4 * k:4 * k + 4, 4 * k:4 * k + 4] = A_si
        B_s[4 * k:4 * k + 4, 2 * k:2 * k + 2] = B_si
        B_a[np.ix_(range(4 * k, 4 * k + 4), cols)] = D_si
        H_sx[2 * k:2 * k + 2, 4 * k:4 * k + 4] = H_sx_i
        H_sa[np.ix_(range(2 * k, 2 * k + 2), cols)] = H_sa_i

    psi = power_flow_jacobian(case, v, theta)
    if psi.shape[1] != na:
        raise LinearizationError("network Jacobian columns do not match the algebraic vector")
    H_x = np.vstack([H_sx, np.zeros((2 * n, 4 * ng))])
    H_u = np.zeros((na, 2 * ng))
    H_a = np.vstack([H_sa, psi])
    return A_s, B_s, B_a, H_x, H_u, H_a, psi, H_sx, H_sa, disturbance_selector(case)


def reduce_to_state_space(case: GridCase, op: OperatingPoint,
                          cond_limit: float = COND_LIMIT) -> LinearModel:
    """Eliminate the algebraic variables to get (A, B_u, B_w)."""
    A_s, B_s, B_a, H_x, H_u, H_a, psi, H_sx, H_sa, pi = assemble_dae(case, op.x0, op.a0)
    cond = float(np.linalg.cond(H_a))
    if not np.isfinite(cond) or cond > cond_limit:
        raise LinearizationError(f"algebraic block is numerically singular (cond {cond:.3e})")
    Hinv_Hx = np.linalg.solve(H_a, H_x)
    Hinv_Hu = np.linalg.solve(H_a, H_u)
    Hinv_Pi = np.linalg.solve(H_a, pi)
    return LinearModel(
        A=A_s - B_a @ Hinv_Hx,
        B_u=B_s - B_a @ Hinv_Hu,
        B_w=B_a @ Hinv_Pi,
        A_s=A_s, B_s=B_s, B_a=B_a, H_sx=H_sx, H_sa=H_sa, Psi=psi,
        H_x=H_x, H_u=H_u, H_a=H_a, Pi=pi, cond_H_a=cond,
    )


def build_linear_model(case: GridCase, op: OperatingPoint, cross_check: bool = True,
                       cond_limit: float = COND_LIMIT) -> LinearModel:
    """Linearize around the operating point; optionally finite-difference check.

    The cross-check is on by default because sign errors in the stator
    partials are silent otherwise.
    """
    model = reduce_to_state_space(case, op, cond_limit=cond_limit)
    if cross_check:
        report = cross_check_jacobians(case, op)
        worst = max(report.values())
        if worst > 1e-5:
            raise LinearizationError(
                f"analytic Jacobians disagree with finite differences (rel err {worst:.2e})")
    return model


# ---------------------------------------------------------------------------
# finite-difference validation

def _rel_err(analytic, numeric, atol=1e-8):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    mask = scale > atol
    out = np.zeros_like(err)
    out[mask] = err[mask] / scale[mask]
    out[~mask] = np.where(err[~mask] > atol, err[~mask], 0.0)
    return np.max(out) if out.size else 0.0


def cross_check_jacobians(case: GridCase, op: OperatingPoint, step: float = 1e-6) -> dict:
    """Central-difference check of every analytic block; returns max relative
    error per block family."""
    n, ng = case.n_bus, case.n_gen
    report = {}

    worst_gen, worst_stator = 0.0, 0.0
    for k, g in enumerate(case.generators):
        x_i = op.x0[4 * k:4 * k + 4]
        u_i = op.u0[2 * k:2 * k + 2]
        a_i = np.array([op.a0[k], op.a0[ng + k],
                        op.a0[2 * ng + g.bus], op.a0[2 * ng + n + g.bus]])
        A_si, B_si, D_si, H_sx_i, H_sa_i = linearize_generator(g, x_i, u_i, a_i)

        def fd(fun, vec, j):
            e = np.zeros_like(vec)
            e[j] = step
            return (fun(vec + e) - fun(vec - e)) / (2 * step)

        num = np.column_stack([fd(lambda z: generator_rhs(g, z, u_i, a_i), x_i, j)
                               for j in range(4)])
        worst_gen = max(worst_gen, _rel_err(A_si, num))
        num = np.column_stack([fd(lambda z: generator_rhs(g, x_i, z, a_i), u_i, j)
                               for j in range(2)])
        worst_gen = max(worst_gen, _rel_err(B_si, num))
        num = np.column_stack([fd(lambda z: generator_rhs(g, x_i, u_i, z), a_i, j)
                               for j in range(4)])
        worst_gen = max(worst_gen, _rel_err(D_si, num))

        def stator_res(xv, av):
            p, q = stator_power(g, xv[0], xv[2], av[2], av[3])
            return np.array([p - av[0], q - av[1]])

        num = np.column_stack([fd(lambda z: stator_res(z, a_i), x_i, j) for j in range(4)])
        worst_stator = max(worst_stator, _rel_err(H_sx_i, num))
        num = np.column_stack([fd(lambda z: stator_res(x_i, z), a_i, j) for j in range(4)])
        worst_stator = max(worst_stator, _rel_err(H_sa_i, num))

    report["generator"] = worst_gen
    report["stator"] = worst_stator

    p_g_full = np.zeros(n)
    q_g_full = np.zeros(n)
    p_g_full[list(case.gen_buses)] = op.a0[:ng]
    q_g_full[list(case.gen_buses)] = op.a0[ng:2 * ng]
    v0 = op.a0[2 * ng:2 * ng + n].copy()
    th0 = op.a0[2 * ng + n:].copy()

    def pf_res(avec):
        pg, qg = p_g_full.copy(), q_g_full.copy()
        pg[list(case.gen_buses)] = avec[:ng]
        qg[list(case.gen_buses)] = avec[ng:2 * ng]
        return power_flow_residual(
            case, avec[2 * ng:2 * ng + n], avec[2 * ng + n:], pg, qg,
            case.base_load[:, 0], case.base_load[:, 1],
            case.base_renewable[:, 0], case.base_renewable[:, 1])

    a0 = np.concatenate([op.a0[:2 * ng], v0, th0])
    psi = power_flow_jacobian(case, v0, th0)
    num = np.zeros_like(psi)
    for j in range(a0.size):
        e = np.zeros_like(a0)
        e[j] = step
        num[:, j] = (pf_res(a0 + e) - pf_res(a0 - e)) / (2 * step)
    report["power_flow"] = _rel_err(psi, num)
    return report
