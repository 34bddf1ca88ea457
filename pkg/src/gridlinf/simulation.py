"""Closed-loop simulation of the nonlinear network DAEs under load and
renewable disturbances.

Semi-explicit index-1 integration: each Runge-Kutta stage first solves the
algebraic system (stator + nodal balance) by warm-started Newton, then
evaluates the machine derivatives. Disturbance noise is sample-and-hold so
every realization has a well-defined peak norm and is reproducible from its
seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import AgcConfig, agc_rhs
from .grid_model import GridCase, OperatingPoint, generator_rhs, stator_power
from .linearization import power_flow_jacobian
from .synthesis import Controller

ALG_TOL = 1e-10
ALG_MAX_ITER = 25
OMEGA_DIVERGENCE = 0.1  # pu


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DisturbanceModel:
    """Piecewise-constant disturbance w(t) = [net P deviations; net Q] (2N).

    kinds: ``load_step`` (deterministic step on every load),
    ``load_step_plus_noise`` (step plus held Gaussian load and wind noise),
    ``wind_loss_plus_noise`` (additionally a random loss of wind generation,
    per-bus uniform on [0, p_r0]).
    """

    kind: str = "load_step"
    step_fraction: float = 0.03
    load_noise_std_fraction: float = 0.33   # of the per-bus load step
    wind_noise_std_fraction: float = 0.05   # of the per-bus wind baseline
    hold_interval: float = 0.010
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("load_step", "load_step_plus_noise", "wind_loss_plus_noise"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if min(self.step_fraction, self.load_noise_std_fraction,
               self.wind_noise_std_fraction) < 0:
            raise ValueError("disturbance fractions must be nonnegative")
        if self.hold_interval <= 0:
            raise ValueError("hold interval must be positive")


def _held_normals(seed: int, interval: int, n: int) -> np.ndarray:
    bg = np.random.Philox(key=np.uint64(seed),
                          counter=np.array([0, 0, 0, interval], dtype=np.uint64))
    return np.random.Generator(bg).standard_normal(n)


def _wind_loss_fractions(seed: int, n: int) -> np.ndarray:
    bg = np.random.Philox(key=np.uint64(seed),
                          counter=np.array([0, 0, 1, 0], dtype=np.uint64))
    return np.random.Generator(bg).uniform(0.0, 1.0, n)


def make_disturbance(model: DisturbanceModel, case: GridCase, t: float) -> np.ndarray:
    """Deviation w(t) from the baseline net injections, deterministic in
    (seed, t)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    n = case.n_bus
    w = np.zeros(2 * n)
    if t <= 0.0:
        return w
    step = model.step_fraction * case.base_load[:, 0]
    w[:n] -= step
    if model.kind == "load_step":
        return w

    interval = int(np.floor(t / model.hold_interval))
    normals = _held_normals(model.seed, interval, 2 * n)
    sigma_l = model.load_noise_std_fraction * step
    sigma_w = model.wind_noise_std_fraction * case.base_renewable[:, 0]
    w[:n] -= normals[:n] * sigma_l
    w[:n] += normals[n:] * sigma_w
    if model.kind == "wind_loss_plus_noise":
        loss = _wind_loss_fractions(model.seed, n) * case.base_renewable[:, 0]
        w[:n] -= loss
    return w


def disturbance_peak_bound(model: DisturbanceModel, case: GridCase,
                           n_sigma: float = 3.0) -> float:
    """Analytic bound on ||w||_peak: per-bus step plus n_sigma noise (plus a
    full wind loss for the loss model), combined in the 2-norm."""
    step = model.step_fraction * case.base_load[:, 0]
    worst = step.copy()
    if model.kind != "load_step":
        worst = worst + n_sigma * model.load_noise_std_fraction * step
        worst = worst + n_sigma * model.wind_noise_std_fraction * case.base_renewable[:, 0]
    if model.kind == "wind_loss_plus_noise":
        worst = worst + case.base_renewable[:, 0]
    return float(np.linalg.norm(worst))


# ---------------------------------------------------------------------------
# control policies

@dataclass(frozen=True)
class Policy:
    """Maps (x, algebraic, agc state) to absolute machine inputs [r_i, f_i]."""

    kind: str = "none"                    # none | gain | agc
    K: np.ndarray | None = None           # gain feedback on state deviations
    agc: AgcConfig | None = None
    K_exciter: np.ndarray | None = None   # f-rows feedback when AGC drives r

    @staticmethod
    def from_controller(ctrl: Controller) -> "Policy":
        return Policy(kind="gain", K=ctrl.K)

    @staticmethod
    def from_gain(K: np.ndarray) -> "Policy":
        return Policy(kind="gain", K=K)

    @staticmethod
    def from_agc(config: AgcConfig, linf_gain: np.ndarray | None = None) -> "Policy":
        K_exc = None
        if config.exciter_gain_source == "linf_controller":
            if linf_gain is None:
                raise ValueError("AGC exciter channel needs the peak-gain feedback")
            K_exc = linf_gain[1::2, :]    # f rows
        return Policy(kind="agc", agc=config, K_exciter=K_exc)

    @property
    def has_agc_state(self):
        return self.kind == "agc"


@dataclass
class SimResult:
    t: np.ndarray
    x: np.ndarray           # (n_t, 4G)
    a: np.ndarray           # (n_t, 2G + 2N)
    u: np.ndarray           # (n_t, 2G)
    w: np.ndarray           # (n_t, 2N)
    z: np.ndarray | None    # (n_t, n_z) when C, D given
    metrics: dict = field(default_factory=dict)
    diverged: bool = False
    divergence_time: float | None = None
    divergence_reason: str = ""


# ---------------------------------------------------------------------------
# algebraic solve

def _algebraic_residual(case: GridCase, x, a, s_p, s_q):
    n, ng = case.n_bus, case.n_gen
    gb, lb = list(case.gen_buses), list(case.load_buses)
    p_g_s, q_g_s = a[:ng], a[ng:2 * ng]
    v, theta = a[2 * ng:2 * ng + n], a[2 * ng + n:]

    res = np.empty(2 * ng + 2 * n)
    for k, g in enumerate(case.generators):
        ph, qh = stator_power(g, x[4 * k], x[4 * k + 2], v[g.bus], theta[g.bus])
        res[2 * k] = ph - p_g_s[k]
        res[2 * k + 1] = qh - q_g_s[k]

    G, B = case.admittance.real, case.admittance.imag
    dth = theta[:, None] - theta[None, :]
    vv = v[:, None] * v[None, :]
    p_net = np.sum(vv * (G * np.cos(dth) + B * np.sin(dth)), axis=1)
    q_net = np.sum(vv * (G * np.sin(dth) - B * np.cos(dth)), axis=1)
    p_full = np.zeros(n)
    q_full = np.zeros(n)
    p_full[gb] = p_g_s
    q_full[gb] = q_g_s
    rp = p_net - p_full - s_p
    rq = q_net - q_full - s_q
    res[2 * ng:] = np.concatenate([rp[gb], rq[gb], rp[lb], rq[lb]])
    return res


def _algebraic_jacobian(case: GridCase, x, a):
    n, ng = case.n_bus, case.n_gen
    na = 2 * ng + 2 * n
    v, theta = a[2 * ng:2 * ng + n], a[2 * ng + n:]
    jac = np.zeros((na, na))
    for k, g in enumerate(case.generators):
        delta, e = x[4 * k], x[4 * k + 2]
        vb, tb = v[g.bus], theta[g.bus]
        xdp, xq = g.x_d_prime, g.x_q
        d = delta - tb
        c2 = (xdp - xq) / (2.0 * xdp * xq)
        c1 = (xdp + xq) / (2.0 * xdp * xq)
        dp_dv = e / xdp * np.sin(d) + 2.0 * c2 * vb * np.sin(2.0 * d)
        dp_dth = -(e * vb / xdp * np.cos(d) + 2.0 * c2 * vb ** 2 * np.cos(2.0 * d))
        dq_dv = e / xdp * np.cos(d) - 2.0 * c1 * vb + 2.0 * c2 * vb * np.cos(2.0 * d)
        dq_dth = e * vb / xdp * np.sin(d) + 2.0 * c2 * vb ** 2 * np.sin(2.0 * d)
        jac[2 * k, k] = -1.0
        jac[2 * k, 2 * ng + g.bus] = dp_dv
        jac[2 * k, 2 * ng + n + g.bus] = dp_dth
        jac[2 * k + 1, ng + k] = -1.0
        jac[2 * k + 1, 2 * ng + g.bus] = dq_dv
        jac[2 * k + 1, 2 * ng + n + g.bus] = dq_dth
    jac[2 * ng:, :] = power_flow_jacobian(case, v, theta)
    return jac


def solve_algebraic(case: GridCase, x, a_guess, s_p, s_q,
                    tol: float = ALG_TOL, max_iter: int = ALG_MAX_ITER):
    """Warm-started Newton on the stator + nodal-balance system."""
    a = a_guess.copy()
    for _ in range(max_iter):
        res = _algebraic_residual(case, x, a, s_p, s_q)
        nrm = np.max(np.abs(res))
        if nrm < tol:
            return a, nrm
        jac = _algebraic_jacobian(case, x, a)
        try:
            a = a - np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise SimulationError(f"singular algebraic Jacobian ({exc})") from exc
    raise SimulationError(f"algebraic Newton stalled at residual {nrm:.2e}")


# ---------------------------------------------------------------------------
# closed-loop integration

def simulate_closed_loop(case: GridCase, op: OperatingPoint, policy: Policy,
                         disturbance: DisturbanceModel, t_span: float = 10.0,
                         dt: float = 1e-3, C: np.ndarray | None = None,
                         D: np.ndarray | None = None, mu: float | None = None,
                         rho: float | None = None,
                         x_init: np.ndarray | None = None,
                         alg_tol: float = ALG_TOL) -> SimResult:
    """Fixed-step RK4 with a per-stage algebraic Newton solve.

    Gains act on state deviations: u = u0 + K (x - x0). Inputs are not
    clipped; the input norm is recorded and checked downstream instead.
    """
    n, ng = case.n_bus, case.n_gen
    n_steps = int(round(t_span / dt))
    x0, u0, a0, w0 = op.x0, op.u0, op.a0, op.w0
    p_g0 = a0[:ng]
    r0 = u0[0::2]

    gb = list(case.gen_buses)
    omega_idx = [4 * k + 1 for k in range(ng)]

    nx = 4 * ng + (1 if policy.has_agc_state else 0)
    state = np.zeros(nx)
    state[:4 * ng] = x0 if x_init is None else x_init

    a_warm = a0.copy()

    def controls(xv, a, y_agc):
        dx = xv - x0
        if policy.kind == "none":
            return u0.copy()
        if policy.kind == "gain":
            return u0 + policy.K @ dx
        # AGC: governor references from the integrator, exciter optional
        u = u0.copy()
        _, r = agc_rhs(policy.agc, case, y_agc, xv[omega_idx], a[:ng], p_g0, r0)
        u[0::2] = r
        if policy.K_exciter is not None:
            u[1::2] = u0[1::2] + policy.K_exciter @ dx
        return u

    def stage_derivative(t, st):
        xv = st[:4 * ng]
        y_agc = st[4 * ng] if policy.has_agc_state else 0.0
        dw = make_disturbance(disturbance, case, t)
        s_p = w0[:n] + dw[:n]
        s_q = w0[n:] + dw[n:]
        a, res_norm = solve_algebraic(case, xv, a_warm, s_p, s_q, tol=alg_tol)
        u = controls(xv, a, y_agc)
        dst = np.empty_like(st)
        v, theta = a[2 * ng:2 * ng + n], a[2 * ng + n:]
        for k, g in enumerate(case.generators):
            alg_k = np.array([a[k], a[ng + k], v[g.bus], theta[g.bus]])
            dst[4 * k:4 * k + 4] = generator_rhs(
                g, xv[4 * k:4 * k + 4], u[2 * k:2 * k + 2], alg_k)
        if policy.has_agc_state:
            ydot, _ = agc_rhs(policy.agc, case, y_agc, xv[omega_idx], a[:ng], p_g0, r0)
            dst[4 * ng] = ydot
        return dst, a, u, dw, res_norm

    n_z = C.shape[0] if C is not None else 0
    t_grid = np.linspace(0.0, n_steps * dt, n_steps + 1)
    X = np.zeros((n_steps + 1, 4 * ng))
    Aout = np.zeros((n_steps + 1, 2 * ng + 2 * n))
    U = np.zeros((n_steps + 1, 2 * ng))
    W = np.zeros((n_steps + 1, 2 * n))
    Z = np.zeros((n_steps + 1, n_z)) if n_z else None

    def record(i, st, a, u, dw):
        X[i] = st[:4 * ng]
        Aout[i] = a
        U[i] = u
        W[i] = dw
        if Z is not None:
            Z[i] = C @ (st[:4 * ng] - x0) + D @ (u - u0)

    result = SimResult(t=t_grid, x=X, a=Aout, u=U, w=W, z=Z)
    worst_alg = 0.0
    steps_done = 0
    try:
        # the first stage of each step doubles as the sample record
        k1, a1, u1, dw1, r1 = stage_derivative(0.0, state)
        record(0, state, a1, u1, dw1)
        for i in range(n_steps):
            t = i * dt
            a_warm = a1
            k2, _, _, _, r2 = stage_derivative(t + dt / 2, state + dt / 2 * k1)
            k3, _, _, _, r3 = stage_derivative(t + dt / 2, state + dt / 2 * k2)
            k4, a4, _, _, r4 = stage_derivative(t + dt, state + dt * k3)
            state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            a_warm = a4
            worst_alg = max(worst_alg, r1, r2, r3, r4)
            if not np.all(np.isfinite(state)):
                raise SimulationError("non-finite state")
            omegas = state[omega_idx]
            if np.max(np.abs(omegas - 1.0)) > OMEGA_DIVERGENCE:
                raise SimulationError(
                    f"speed deviation beyond {OMEGA_DIVERGENCE} pu")
            k1, a1, u1, dw1, r1 = stage_derivative(t + dt, state)
            record(i + 1, state, a1, u1, dw1)
            steps_done = i + 1
    except SimulationError as exc:
        result.diverged = True
        result.divergence_time = float(min((steps_done + 1) * dt, t_span))
        result.divergence_reason = str(exc)
        for arr in (X, Aout, U, W) + ((Z,) if Z is not None else ()):
            arr[steps_done + 1:] = arr[steps_done]

    result.metrics = _metrics(case, op, result, mu=mu, rho=rho, worst_alg=worst_alg)
    return result


def _metrics(case: GridCase, op: OperatingPoint, res: SimResult,
             mu=None, rho=None, worst_alg=0.0) -> dict:
    n, ng = case.n_bus, case.n_gen
    omega_cols = [4 * k + 1 for k in range(ng)]
    freq_dev = np.abs(res.x[:, omega_cols] - 1.0) * case.base_freq_hz
    v_cols = slice(2 * ng, 2 * ng + n)
    volt_dev = np.abs(res.a[:, v_cols] - op.a0[None, v_cols])
    du = res.u - op.u0[None, :]
    m = {
        "max_freq_dev_hz": float(freq_dev.max()),
        "max_volt_dev_pu": float(volt_dev.max()),
        "w_peak": float(np.linalg.norm(res.w, axis=1).max()),
        "u_peak": float(np.linalg.norm(du, axis=1).max()),
        "alg_residual": float(worst_alg),
        "diverged": res.diverged,
    }
    if res.z is not None:
        znorm = np.linalg.norm(res.z, axis=1)
        m["z_peak"] = float(znorm.max())
        m["ratio"] = float(m["z_peak"] / m["w_peak"]) if m["w_peak"] > 0 else 0.0
        if mu is not None and rho is not None:
            m["mu_rho"] = float(mu * rho)
            m["bound_ok"] = bool(m["z_peak"] <= mu * rho * (1 + 1e-9))
            m["w_within_rho"] = bool(m["w_peak"] <= rho * (1 + 1e-9))
    return m


def monte_carlo_sweep(case: GridCase, op: OperatingPoint, policy: Policy,
                      model: DisturbanceModel, n_realizations: int = 50,
                      t_span: float = 10.0, dt: float = 1e-3,
                      C=None, D=None, mu=None, rho=None,
                      master_seed: int = 0) -> dict:
    """Independent-seed realizations of the disturbance model; per-run
    metrics plus min/mean/max envelopes. Divergences are recorded, not fatal."""
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    children = np.random.SeedSequence(master_seed).spawn(n_realizations)
    seeds = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
    runs = []
    for seed in seeds:
        dist = replace(model, seed=seed)
        out = simulate_closed_loop(case, op, policy, dist, t_span=t_span, dt=dt,
                                   C=C, D=D, mu=mu, rho=rho)
        entry = dict(out.metrics)
        entry["seed"] = seed
        runs.append(entry)

    ok = [r for r in runs if not r["diverged"]]
    report = {
        "n_realizations": n_realizations,
        "n_diverged": sum(r["diverged"] for r in runs),
        "runs": runs,
    }
    for key in ("max_freq_dev_hz", "max_volt_dev_pu", "z_peak", "w_peak", "u_peak"):
        vals = [r[key] for r in ok if key in r]
        if vals:
            report[key] = {"min": float(np.min(vals)), "mean": float(np.mean(vals)),
                           "max": float(np.max(vals))}
    return report
