"""Static network description, nonlinear machine/network equations, and the
steady-state operating point.

All quantities are per unit on the case's MVA base. Rotor speeds are per unit
with synchronous speed 1.0; governor droop constants are stored already
converted to pu-speed / pu-power (case files quote them in Hz/pu and the
loader divides by the base frequency once).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PF_TOL = 1e-10
PF_MAX_ITER = 50
RESIDUAL_TOL = 1e-8


class CaseError(ValueError):
    """Raised for malformed or inconsistent case files."""


class PowerFlowError(RuntimeError):
    """Raised when the Newton power flow fails to converge."""

    def __init__(self, msg, residual_norm=None):
        super().__init__(msg)
        self.residual_norm = residual_norm


@dataclass(frozen=True)
class GeneratorParams:
    """Fourth-order machine constants plus governor/exciter time constants."""

    bus: int            # internal bus index, 0-based
    M: float            # inertia, pu s^2
    D: float            # damping, pu s
    tau_d: float        # d-axis open-circuit time constant, s
    x_d: float          # d-axis synchronous reactance, pu
    x_d_prime: float    # d-axis transient reactance, pu
    x_q: float          # q-axis reactance, pu
    T_ch: float         # chest-valve time constant, s
    R_droop: float      # governor regulation, pu-speed / pu-power (converted)
    omega_s: float = 1.0
    dispatch_p: float = 0.0   # scheduled real power, pu
    setpoint_v: float = 1.0   # scheduled terminal voltage, pu

    def __post_init__(self):
        if not (self.M > 0 and self.tau_d > 0 and self.T_ch > 0):
            raise CaseError(f"generator at bus {self.bus}: time constants must be positive")
        if not (self.x_d >= self.x_d_prime > 0 and self.x_q > 0):
            raise CaseError(f"generator at bus {self.bus}: need x_d >= x_d' > 0 and x_q > 0")
        if not self.R_droop > 0:
            raise CaseError(f"generator at bus {self.bus}: droop must be positive")


@dataclass(frozen=True)
class GridCase:
    """Immutable network description.

    Buses are indexed 0..N-1 internally; ``gen_buses`` and ``load_buses``
    partition them. Renewable injections enter as negative loads.
    """

    name: str
    n_bus: int
    gen_buses: tuple[int, ...]
    load_buses: tuple[int, ...]
    renewable_buses: tuple[int, ...]
    admittance: np.ndarray            # N x N complex, G + jB
    generators: tuple[GeneratorParams, ...]
    base_load: np.ndarray             # N x 2, (p, q) in pu
    base_renewable: np.ndarray        # N x 2, (p, q) in pu
    slack: int                        # index into gen_buses
    base_mva: float = 100.0
    base_freq_hz: float = 60.0
    bus_ids: tuple[int, ...] = ()     # external bus numbers, for reports

    def __post_init__(self):
        g, l = set(self.gen_buses), set(self.load_buses)
        if g & l:
            raise CaseError(f"buses {sorted(g & l)} appear as both generator and load buses")
        if g | l != set(range(self.n_bus)):
            raise CaseError("gen/load buses do not partition the bus set")
        if not np.allclose(self.admittance, self.admittance.T, atol=1e-12):
            raise CaseError("admittance matrix is not symmetric (phase shifters unsupported)")
        if np.any(self.base_load[:, 0] < 0):
            raise CaseError("negative real loads not allowed; model them as renewables")
        if len(self.generators) != len(self.gen_buses):
            raise CaseError("one GeneratorParams entry required per generator bus")

    @property
    def n_gen(self):
        return len(self.gen_buses)

    @property
    def n_load(self):
        return len(self.load_buses)

    def with_wind(self, fraction: float) -> "GridCase":
        """Return a copy with renewable injection ``fraction * p_load`` at every bus."""
        base_renewable = np.zeros_like(self.base_load)
        base_renewable[:, 0] = fraction * self.base_load[:, 0]
        return GridCase(
            name=f"{self.name}+wind{fraction:g}",
            n_bus=self.n_bus,
            gen_buses=self.gen_buses,
            load_buses=self.load_buses,
            renewable_buses=tuple(range(self.n_bus)),
            admittance=self.admittance,
            generators=self.generators,
            base_load=self.base_load,
            base_renewable=base_renewable,
            slack=self.slack,
            base_mva=self.base_mva,
            base_freq_hz=self.base_freq_hz,
            bus_ids=self.bus_ids,
        )


@dataclass(frozen=True)
class OperatingPoint:
    """Consistent steady state of the full DAE model.

    x0 stacks [delta, omega, e, m] per generator; u0 stacks [r, f];
    a0 stacks [p_g (G); q_g (G); v (N); theta (N)]; w0 stacks the baseline
    net injections [p_r - p_l (N); q_r - q_l (N)].
    """

    x0: np.ndarray
    u0: np.ndarray
    a0: np.ndarray
    w0: np.ndarray
    newton_iters: int = 0
    residual_norm: float = 0.0

    def split_algebraic(self, n_gen: int, n_bus: int):
        a = self.a0
        return (a[:n_gen], a[n_gen:2 * n_gen],
                a[2 * n_gen:2 * n_gen + n_bus], a[2 * n_gen + n_bus:])


# ---------------------------------------------------------------------------
# machine equations

def stator_power(params: GeneratorParams, delta, e, v, theta):
    """Electrical (p_g, q_g) delivered by the one-axis machine model."""
    if np.any(np.asarray(v) <= 0):
        raise ValueError("terminal voltage must be positive")
    xdp, xq = params.x_d_prime, params.x_q
    d = delta - theta
    c2 = (xdp - xq) / (2.0 * xdp * xq)
    c1 = (xdp + xq) / (2.0 * xdp * xq)
    p = e * v / xdp * np.sin(d) + c2 * v ** 2 * np.sin(2.0 * d)
    q = e * v / xdp * np.cos(d) - c1 * v ** 2 + c2 * v ** 2 * np.cos(2.0 * d)
    return p, q


def generator_rhs(params: GeneratorParams, state, inputs, algebraic):
    """Time derivative [ddelta, domega, de, dm] of the fourth-order machine."""
    delta, omega, e, m = state
    r, f = inputs
    p_g, _q_g, v, theta = algebraic
    dw = omega - params.omega_s
    ddelta = dw
    domega = (m - params.D * dw - p_g) / params.M
    de = (-params.x_d / params.x_d_prime * e
          + (params.x_d - params.x_d_prime) / params.x_d_prime * v * np.cos(delta - theta)
          + f) / params.tau_d
    dm = (r - m - dw / params.R_droop) / params.T_ch
    return np.array([ddelta, domega, de, dm])


# ---------------------------------------------------------------------------
# network equations

def _net_injections(case: GridCase, v, theta):
    """Network P, Q injections v_i sum_j v_j (G_ij cos + B_ij sin), length N each."""
    G, B = case.admittance.real, case.admittance.imag
    dth = theta[:, None] - theta[None, :]
    vv = v[:, None] * v[None, :]
    p = np.sum(vv * (G * np.cos(dth) + B * np.sin(dth)), axis=1)
    q = np.sum(vv * (G * np.sin(dth) - B * np.cos(dth)), axis=1)
    return p, q


def power_flow_residual(case: GridCase, v, theta, p_g, q_g, p_l, q_l, p_r, q_r):
    """Nodal balance residuals, rows ordered [P gen; Q gen; P load; Q load].

    Generator vectors are length N with zeros on load buses. Zero iff the
    network flow equations hold at the given point.
    """
    p_net, q_net = _net_injections(case, np.asarray(v, float), np.asarray(theta, float))
    rp = p_net - p_g - (p_r - p_l)
    rq = q_net - q_g - (q_r - q_l)
    gb, lb = list(case.gen_buses), list(case.load_buses)
    return np.concatenate([rp[gb], rq[gb], rp[lb], rq[lb]])


def _solve_machine_internals(params: GeneratorParams, p_g, q_g, v, theta):
    """Back-solve (delta, e) from the stator equations at a terminal condition."""
    # q-axis phasor gives the rotor angle for the classical two-reaction machine;
    # polish with Newton since the saliency terms make it only approximate.
    d0 = theta + np.arctan2(params.x_q * p_g, v ** 2 + params.x_q * q_g)
    e0 = max(v, 0.5)
    x = np.array([d0, e0])
    for _ in range(60):
        p, q = stator_power(params, x[0], x[1], v, theta)
        res = np.array([p - p_g, q - q_g])
        if np.max(np.abs(res)) < 1e-13:
            break
        jac = _stator_jacobian_de(params, x[0], x[1], v, theta)
        x = x - np.linalg.solve(jac, res)
    else:
        raise PowerFlowError(
            f"machine internal solve did not converge at bus {params.bus}",
            residual_norm=float(np.max(np.abs(res))),
        )
    return x[0], x[1]


def _stator_jacobian_de(params: GeneratorParams, delta, e, v, theta):
    """d(stator residual)/d(delta, e), used by the internal back-solve."""
    xdp, xq = params.x_d_prime, params.x_q
    d = delta - theta
    c2 = (xdp - xq) / (2.0 * xdp * xq)
    dp_dd = e * v / xdp * np.cos(d) + 2.0 * c2 * v ** 2 * np.cos(2.0 * d)
    dp_de = v / xdp * np.sin(d)
    dq_dd = -e * v / xdp * np.sin(d) - 2.0 * c2 * v ** 2 * np.sin(2.0 * d)
    dq_de = v / xdp * np.cos(d)
    return np.array([[dp_dd, dp_de], [dq_dd, dq_de]])


def solve_operating_point(case: GridCase, tol: float = PF_TOL,
                          max_iter: int = PF_MAX_ITER) -> OperatingPoint:
    """Dispatch-driven Newton power flow plus machine internal back-solve.

    PV buses hold (dispatch_p, setpoint_v); the slack generator holds
    (setpoint_v, angle 0). Flat start, full Newton steps.
    """
    n, gb = case.n_bus, list(case.gen_buses)
    slack_bus = case.gen_buses[case.slack]
    v = np.ones(n)
    theta = np.zeros(n)
    for g in case.generators:
        v[g.bus] = g.setpoint_v

    p_sched = case.base_renewable[:, 0] - case.base_load[:, 0]
    q_sched = case.base_renewable[:, 1] - case.base_load[:, 1]
    for g in case.generators:
        p_sched[g.bus] += g.dispatch_p

    # unknowns: theta at all buses but slack, v at load buses
    th_idx = [i for i in range(n) if i != slack_bus]
    v_idx = list(case.load_buses)

    def mismatch(v, theta):
        p_net, q_net = _net_injections(case, v, theta)
        return np.concatenate([(p_net - p_sched)[th_idx], (q_net - q_sched)[v_idx]])

    it = 0
    for it in range(1, max_iter + 1):
        mis = mismatch(v, theta)
        nrm = np.max(np.abs(mis))
        if nrm < tol:
            break
        jac = _pf_jacobian(case, v, theta, th_idx, v_idx)
        try:
            step = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power-flow Jacobian", residual_norm=float(nrm)) from exc
        theta[th_idx] -= step[:len(th_idx)]
        v[v_idx] -= step[len(th_idx):]
    else:
        raise PowerFlowError(
            f"Newton power flow did not converge in {max_iter} iterations",
            residual_norm=float(np.max(np.abs(mismatch(v, theta)))),
        )

    p_net, q_net = _net_injections(case, v, theta)
    p_g = np.zeros(n)
    q_g = np.zeros(n)
    p_g[gb] = p_net[gb] - (case.base_renewable[:, 0] - case.base_load[:, 0])[gb]
    q_g[gb] = q_net[gb] - (case.base_renewable[:, 1] - case.base_load[:, 1])[gb]

    x0 = np.zeros(4 * case.n_gen)
    u0 = np.zeros(2 * case.n_gen)
    for k, g in enumerate(case.generators):
        delta, e = _solve_machine_internals(g, p_g[g.bus], q_g[g.bus], v[g.bus], theta[g.bus])
        m = p_g[g.bus]
        r = m
        f = (g.x_d / g.x_d_prime) * e \
            - (g.x_d - g.x_d_prime) / g.x_d_prime * v[g.bus] * np.cos(delta - theta[g.bus])
        x0[4 * k:4 * k + 4] = [delta, g.omega_s, e, m]
        u0[2 * k:2 * k + 2] = [r, f]

    a0 = np.concatenate([p_g[gb], q_g[gb], v, theta])
    w0 = np.concatenate([case.base_renewable[:, 0] - case.base_load[:, 0],
                         case.base_renewable[:, 1] - case.base_load[:, 1]])
    op = OperatingPoint(x0=x0, u0=u0, a0=a0, w0=w0, newton_iters=it,
                        residual_norm=float(np.max(np.abs(mismatch(v, theta)))))
    _check_operating_point(case, op)
    return op


def _pf_jacobian(case: GridCase, v, theta, th_idx, v_idx):
    """Jacobian of the power-flow mismatch w.r.t. [theta(th_idx); v(v_idx)]."""
    dp_dv, dp_dth, dq_dv, dq_dth = network_injection_jacobian(case, v, theta)
    top = np.hstack([dp_dth[np.ix_(th_idx, th_idx)], dp_dv[np.ix_(th_idx, v_idx)]])
    bot = np.hstack([dq_dth[np.ix_(v_idx, th_idx)], dq_dv[np.ix_(v_idx, v_idx)]])
    return np.vstack([top, bot])


def network_injection_jacobian(case: GridCase, v, theta):
    """Partials of the nodal P, Q injections w.r.t. v and theta (each N x N)."""
    G, B = case.admittance.real, case.admittance.imag
    dth = theta[:, None] - theta[None, :]
    cos, sin = np.cos(dth), np.sin(dth)
    p_net, q_net = _net_injections(case, v, theta)

    dp_dv = v[:, None] * (G * cos + B * sin)
    np.fill_diagonal(dp_dv, p_net / v + v * np.diag(G))
    dq_dv = v[:, None] * (G * sin - B * cos)
    np.fill_diagonal(dq_dv, q_net / v - v * np.diag(B))

    vv = v[:, None] * v[None, :]
    dp_dth = vv * (G * sin - B * cos)
    np.fill_diagonal(dp_dth, -q_net - v ** 2 * np.diag(B))
    dq_dth = -vv * (G * cos + B * sin)
    np.fill_diagonal(dq_dth, p_net - v ** 2 * np.diag(G))
    return dp_dv, dp_dth, dq_dv, dq_dth


def _check_operating_point(case: GridCase, op: OperatingPoint):
    res = operating_point_residuals(case, op)
    worst = max(np.max(np.abs(r)) for r in res.values())
    if worst > RESIDUAL_TOL:
        raise PowerFlowError(f"operating point residual {worst:.2e} exceeds {RESIDUAL_TOL}",
                             residual_norm=worst)


def operating_point_residuals(case: GridCase, op: OperatingPoint) -> dict:
    """Re-evaluate every model equation at the operating point."""
    n, ng = case.n_bus, case.n_gen
    p_g_s, q_g_s, v, theta = op.split_algebraic(ng, n)
    p_g, q_g = np.zeros(n), np.zeros(n)
    p_g[list(case.gen_buses)] = p_g_s
    q_g[list(case.gen_buses)] = q_g_s

    deriv = np.zeros(4 * ng)
    stator = np.zeros(2 * ng)
    for k, g in enumerate(case.generators):
        st = op.x0[4 * k:4 * k + 4]
        alg = np.array([p_g[g.bus], q_g[g.bus], v[g.bus], theta[g.bus]])
        deriv[4 * k:4 * k + 4] = generator_rhs(g, st, op.u0[2 * k:2 * k + 2], alg)
        p, q = stator_power(g, st[0], st[2], v[g.bus], theta[g.bus])
        stator[2 * k:2 * k + 2] = [p - p_g[g.bus], q - q_g[g.bus]]

    pf = power_flow_residual(case, v, theta, p_g, q_g,
                             case.base_load[:, 0], case.base_load[:, 1],
                             case.base_renewable[:, 0], case.base_renewable[:, 1])
    return {"generator": deriv, "stator": stator, "power_flow": pf}


# ---------------------------------------------------------------------------
# case loading

_GEN_KEYS = ("M", "D", "tau_d", "x_d", "x_d_prime", "x_q", "T_ch", "R_droop")


def load_case(path) -> GridCase:
    """Load a case from the native JSON schema or a MATPOWER-format .m file.

    MATPOWER files need a sidecar ``<stem>_dyn.json`` carrying the machine
    dynamics (MATPOWER tables have none).
    """
    path = Path(path)
    if path.suffix == ".m":
        return _load_matpower(path)
    with open(path) as fh:
        doc = json.load(fh)
    return case_from_dict(doc, name=path.stem)


def case_from_dict(doc: dict, name: str = "case") -> GridCase:
    base_mva = float(doc.get("base_mva", 100.0))
    base_freq = float(doc.get("base_freq_hz", 60.0))
    buses = doc["buses"]
    n = len(buses)
    ids = [int(b["id"]) for b in buses]
    if len(set(ids)) != n:
        raise CaseError("duplicate bus ids")
    index = {bid: i for i, bid in enumerate(ids)}

    Y = np.zeros((n, n), dtype=complex)
    for b in buses:
        i = index[int(b["id"])]
        Y[i, i] += complex(float(b.get("shunt_g", 0.0)), float(b.get("shunt_b", 0.0)))
    for br in doc["branches"]:
        i, j = index[int(br["from"])], index[int(br["to"])]
        if i == j:
            raise CaseError(f"branch from bus {br['from']} to itself")
        y = 1.0 / complex(float(br["r"]), float(br["x"]))
        bsh = 1j * float(br.get("b", 0.0)) / 2.0
        tap = float(br.get("tap", 1.0)) or 1.0
        Y[i, i] += (y + bsh) / tap ** 2
        Y[j, j] += y + bsh
        Y[i, j] -= y / tap
        Y[j, i] -= y / tap

    load = np.zeros((n, 2))
    for ld in doc.get("loads", []):
        load[index[int(ld["bus"])]] += [float(ld["p"]), float(ld["q"])]
    renew = np.zeros((n, 2))
    ren_buses = []
    for rn in doc.get("renewables", []):
        i = index[int(rn["bus"])]
        renew[i] += [float(rn["p"]), float(rn.get("q", 0.0))]
        ren_buses.append(i)

    gens = []
    gen_buses = []
    for g in doc["generators"]:
        bus_id = int(g["bus"])
        if bus_id not in index:
            raise CaseError(f"generator references unknown bus {bus_id}")
        i = index[bus_id]
        if i in gen_buses:
            raise CaseError(f"two generators on bus {bus_id}")
        gen_buses.append(i)
        kwargs = {k: float(g[k]) for k in _GEN_KEYS}
        kwargs["R_droop"] = kwargs["R_droop"] / base_freq  # Hz/pu -> pu/pu
        gens.append(GeneratorParams(bus=i, dispatch_p=float(g.get("dispatch_p", 0.0)),
                                    setpoint_v=float(g.get("setpoint_v", 1.0)), **kwargs))

    order = np.argsort(gen_buses)
    gen_buses = [gen_buses[k] for k in order]
    gens = [gens[k] for k in order]

    slack_id = doc.get("slack_bus")
    if slack_id is None:
        slack = 0
    else:
        if index.get(int(slack_id)) not in gen_buses:
            raise CaseError(f"slack bus {slack_id} carries no generator")
        slack = gen_buses.index(index[int(slack_id)])

    load_buses = [i for i in range(n) if i not in gen_buses]
    return GridCase(
        name=doc.get("name", name),
        n_bus=n,
        gen_buses=tuple(gen_buses),
        load_buses=tuple(load_buses),
        renewable_buses=tuple(sorted(set(ren_buses))),
        admittance=Y,
        generators=tuple(gens),
        base_load=load,
        base_renewable=renew,
        slack=slack,
        base_mva=base_mva,
        base_freq_hz=base_freq,
        bus_ids=tuple(ids),
    )


def _matpower_table(text: str, name: str) -> np.ndarray:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.S)
    if m is None:
        raise CaseError(f"MATPOWER file lacks table mpc.{name}")
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if not line:
            continue
        rows.append([float(tok) for tok in line.split()])
    return np.array(rows)


def _load_matpower(path: Path) -> GridCase:
    text = path.read_text()
    bus = _matpower_table(text, "bus")
    gen = _matpower_table(text, "gen")
    branch = _matpower_table(text, "branch")
    m = re.search(r"mpc\.baseMVA\s*=\s*([\d.]+)", text)
    base_mva = float(m.group(1)) if m else 100.0

    sidecar = path.with_name(path.stem + "_dyn.json")
    if not sidecar.exists():
        raise CaseError(f"MATPOWER import needs machine dynamics sidecar {sidecar.name}")
    with open(sidecar) as fh:
        dyn = json.load(fh)

    doc = {
        "name": path.stem,
        "base_mva": base_mva,
        "base_freq_hz": float(dyn.get("base_freq_hz", 60.0)),
        "buses": [],
        "branches": [],
        "generators": [],
        "loads": [],
        "renewables": dyn.get("renewables", []),
    }
    for row in bus:
        b = {"id": int(row[0])}
        if row[4] != 0.0 or row[5] != 0.0:
            b["shunt_g"] = row[4] / base_mva
            b["shunt_b"] = row[5] / base_mva
        doc["buses"].append(b)
        if row[2] != 0.0 or row[3] != 0.0:
            doc["loads"].append({"bus": int(row[0]), "p": row[2] / base_mva,
                                 "q": row[3] / base_mva})
        if int(row[1]) == 3:
            doc["slack_bus"] = int(row[0])
    for row in branch:
        if len(row) > 10 and row[10] == 0.0:
            continue  # out of service
        if len(row) > 9 and row[9] != 0.0:
            raise CaseError("phase-shifting branches are unsupported")
        br = {"from": int(row[0]), "to": int(row[1]), "r": row[2], "x": row[3], "b": row[4]}
        if len(row) > 8 and row[8] not in (0.0, 1.0):
            br["tap"] = row[8]
        doc["branches"].append(br)
    defaults = dyn.get("default", {})
    per_bus = {int(k): v for k, v in dyn.get("by_bus", {}).items()}
    for row in gen:
        if len(row) > 7 and row[7] <= 0:
            continue  # offline unit
        bus_id = int(row[0])
        entry = dict(defaults)
        entry.update(per_bus.get(bus_id, {}))
        missing = [k for k in _GEN_KEYS if k not in entry]
        if missing:
            raise CaseError(f"sidecar lacks {missing} for generator bus {bus_id}")
        entry.update({"bus": bus_id, "dispatch_p": row[1] / base_mva, "setpoint_v": row[5]})
        doc["generators"].append(entry)
    return case_from_dict(doc, name=path.stem)
