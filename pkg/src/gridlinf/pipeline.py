"""Batch pipeline: linearize -> synthesize -> verify -> simulate/sweep,
with file artifacts for every stage and deterministic summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import AgcConfig, hinf_synthesize
from .decentralized import (
    SparsityPattern,
    solve_sca_dec,
    verify_decentralized,
)
from .grid_model import GridCase, OperatingPoint, load_case, solve_operating_point
from .linearization import LinearModel, build_linear_model
from .simulation import (
    DisturbanceModel,
    Policy,
    disturbance_peak_bound,
    monte_carlo_sweep,
    simulate_closed_loop,
)
from .synthesis import (
    Controller,
    ScaSettings,
    SynthesisProblem,
    certificate_residuals,
    is_certified,
    solve_sca,
    verify_controller,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGENCE = 4
EXIT_SOLVER = 5

MODES = ("centralized", "input_constrained", "decentralized", "hinf")
DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    case: str
    wind_fraction: float = 0.0
    mode: str = "centralized"
    rho: float | None = None           # None -> derived from the disturbance model
    u_max: float | None = None
    state_weights: dict = field(default_factory=dict)
    input_weights: dict = field(default_factory=dict)
    gamma: float = 1e-3
    tol: float = 1e-6
    max_iter: int = 50
    pattern: str = "block_diagonal"
    disturbance: dict = field(default_factory=dict)
    t_span: float = 10.0
    dt: float = 1e-3
    n_realizations: int = 1
    master_seed: int = 0
    output_dir: str = "out"
    agc: dict = field(default_factory=dict)

    @staticmethod
    def from_file(path) -> "RunConfig":
        with open(path) as fh:
            doc = json.load(fh)
        return RunConfig.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        flat = {}
        synth = doc.get("synthesis", {})
        sim = doc.get("simulation", {})
        flat["case"] = doc.get("case", "")
        flat["wind_fraction"] = float(doc.get("wind_fraction", 0.0))
        flat["mode"] = synth.get("mode", "centralized")
        flat["rho"] = synth.get("rho")
        flat["u_max"] = synth.get("u_max")
        flat["state_weights"] = synth.get("state_weights", {})
        flat["input_weights"] = synth.get("input_weights", {})
        flat["gamma"] = float(synth.get("gamma", 1e-3))
        flat["tol"] = float(synth.get("tol", 1e-6))
        flat["max_iter"] = int(synth.get("max_iter", 50))
        flat["pattern"] = synth.get("pattern", "block_diagonal")
        flat["disturbance"] = doc.get("disturbance", {})
        flat["t_span"] = float(sim.get("t_span", 10.0))
        flat["dt"] = float(sim.get("dt", 1e-3))
        flat["n_realizations"] = int(sim.get("n_realizations", 1))
        flat["master_seed"] = int(sim.get("master_seed", 0))
        flat["output_dir"] = doc.get("output_dir", "out")
        flat["agc"] = doc.get("agc", {})
        cfg = RunConfig(**flat)
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rho is not None and self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.u_max is not None and self.u_max <= 0:
            raise ConfigError("u_max must be positive")
        if self.case_path() is None:
            raise ConfigError(f"case {self.case!r} not found (bundled: "
                              f"{sorted(p.stem for p in DATA_DIR.glob('*.json'))})")
        if self.pattern != "block_diagonal" and not Path(self.pattern).exists():
            raise ConfigError(f"pattern file {self.pattern!r} not found")
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be at least 1")
        DisturbanceModel(**self.disturbance)   # raises on bad fields

    def case_path(self) -> Path | None:
        p = Path(self.case)
        if p.exists():
            return p
        bundled = DATA_DIR / f"{self.case}.json"
        return bundled if bundled.exists() else None

    def disturbance_model(self, seed=None) -> DisturbanceModel:
        kw = dict(self.disturbance)
        if seed is not None:
            kw["seed"] = seed
        return DisturbanceModel(**kw)

    def sca_settings(self) -> ScaSettings:
        return ScaSettings(gamma=self.gamma, tol=self.tol, max_iter=self.max_iter)


# ---------------------------------------------------------------------------
# stages

def stage_linearize(cfg: RunConfig):
    case = load_case(cfg.case_path())
    if cfg.wind_fraction > 0:
        case = case.with_wind(cfg.wind_fraction)
    op = solve_operating_point(case)
    model = build_linear_model(case, op)
    return case, op, model


def resolve_rho(cfg: RunConfig, case: GridCase) -> float:
    if cfg.rho is not None:
        return float(cfg.rho)
    return disturbance_peak_bound(cfg.disturbance_model(), case)


def build_problem(cfg: RunConfig, case: GridCase, model: LinearModel,
                  with_input_budget: bool | None = None) -> SynthesisProblem:
    rho = resolve_rho(cfg, case)
    use_budget = (cfg.mode == "input_constrained" if with_input_budget is None
                  else with_input_budget)
    return SynthesisProblem.from_linear_model(
        model, rho=rho, u_max=cfg.u_max if use_budget else None,
        state_weights=cfg.state_weights, input_weights=cfg.input_weights)


def load_pattern(cfg: RunConfig, case: GridCase) -> SparsityPattern:
    if cfg.pattern == "block_diagonal":
        return SparsityPattern.block_diagonal(case.n_gen)
    with open(cfg.pattern) as fh:
        mask = np.array(json.load(fh), dtype=bool)
    return SparsityPattern(mask=mask, description=Path(cfg.pattern).stem)


def stage_synthesize(cfg: RunConfig, case: GridCase, model: LinearModel):
    """Returns (controller, problem, report). H-infinity gains are wrapped in
    a Controller record with the bound stored in place of mu."""
    settings = cfg.sca_settings()
    if cfg.mode == "hinf":
        prob = build_problem(cfg, case, model, with_input_budget=False)
        K, gamma, info = hinf_synthesize(prob)
        n_x = prob.n_x
        ctrl = Controller(K=K, S=np.eye(n_x), Z=K.copy(), alpha=1.0,
                          mu0=gamma ** 2, mu1=1.0, mu2=0.0, mode="hinf")
        return ctrl, prob, info
    if cfg.mode == "decentralized":
        prob = build_problem(cfg, case, model, with_input_budget=False)
        pattern = load_pattern(cfg, case)
        ctrl = solve_sca_dec(prob, pattern, settings)
        report = verify_decentralized(prob, pattern, ctrl)
        return ctrl, prob, report
    prob = build_problem(cfg, case, model)
    ctrl = solve_sca(prob, settings)
    report = verify_controller(prob, ctrl, simulate=False)
    return ctrl, prob, report


def make_policy(cfg: RunConfig, case: GridCase, op: OperatingPoint,
                ctrl: Controller | None, linf_gain: np.ndarray | None = None) -> Policy:
    if ctrl is None:
        agc = AgcConfig.from_dispatch(
            op.a0[:case.n_gen], K_G=float(cfg.agc.get("K_G", 1000.0)),
            exciter_gain_source=cfg.agc.get("exciter_gain_source", "linf_controller"))
        return Policy.from_agc(agc, linf_gain=linf_gain)
    return Policy.from_controller(ctrl)


# ---------------------------------------------------------------------------
# artifact writers

def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_model_artifacts(outdir: Path, case: GridCase, op: OperatingPoint,
                          model: LinearModel):
    _write_json(outdir / "model.json", {
        "case": case.name,
        "n_bus": case.n_bus,
        "n_gen": case.n_gen,
        **model.to_dict(),
    })
    eigs = np.linalg.eigvals(model.A)
    order = np.argsort(eigs.real)[::-1]
    lines = [
        f"case {case.name}: N={case.n_bus} G={case.n_gen} L={case.n_load}",
        f"state dim {model.n_x}, inputs {model.n_u}, disturbances {model.n_w}",
        f"algebraic block {model.H_a.shape[0]}x{model.H_a.shape[1]}, "
        f"condition number {model.cond_H_a:.3e}",
        "droop constants converted from Hz/pu to pu-speed/pu-power "
        f"(divided by {case.base_freq_hz:g} Hz at load time)",
        "open-loop eigenvalues (5 rightmost):",
    ]
    for idx in order[:5]:
        lines.append(f"  {eigs[idx].real:+.6f} {eigs[idx].imag:+.6f}j")
    (outdir / "model_report.txt").write_text("\n".join(lines) + "\n")


def write_controller_artifacts(outdir: Path, mode: str, ctrl: Controller,
                               prob: SynthesisProblem, report: dict):
    doc = ctrl.to_dict()
    doc["rho"] = prob.rho
    doc["u_max"] = prob.u_max
    doc["verify"] = _jsonable(report)
    _write_json(outdir / f"controller_{mode}.json", doc)
    with open(outdir / f"convergence_{mode}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "fbar", "mu"])
        for h in ctrl.history:
            wr.writerow([h["k"], repr(h["fbar"]), repr(h["mu"])])


def load_controller(path, prob: SynthesisProblem | None = None,
                    feas_tol: float = 1e-7) -> Controller:
    """Read a controller file and re-verify its certificate from scratch."""
    with open(path) as fh:
        doc = json.load(fh)
    ctrl = Controller.from_dict(doc)
    if prob is not None and ctrl.mode in ("centralized", "input_constrained"):
        res = certificate_residuals(prob, ctrl.S, ctrl.Z, ctrl.alpha,
                                    ctrl.mu0, ctrl.mu1, ctrl.mu2)
        if not is_certified(res, feas_tol):
            raise ValueError(f"controller file {path} failed re-verification: {res}")
    return ctrl


def write_trajectory_csv(path: Path, case: GridCase, op, result, mu_rho=None):
    ng, n = case.n_gen, case.n_bus
    header = ["time_s"]
    header += [f"freq_hz_bus{case.bus_ids[b] if case.bus_ids else b}"
               for b in case.gen_buses]
    header += [f"v_pu_bus{case.bus_ids[b] if case.bus_ids else b}"
               for b in range(n)]
    for k in range(ng):
        gid = case.bus_ids[case.generators[k].bus] if case.bus_ids else k
        header += [f"r_pu_gen{gid}", f"f_pu_gen{gid}"]
    header += ["z_norm", "mu_rho"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        znorm = (np.linalg.norm(result.z, axis=1) if result.z is not None
                 else np.zeros(result.t.size))
        for i, t in enumerate(result.t):
            row = [f"{t:.6f}"]
            row += [f"{(result.x[i, 4 * k + 1] - 1.0) * case.base_freq_hz:.9f}"
                    for k in range(ng)]
            row += [f"{v:.9f}" for v in result.a[i, 2 * ng:2 * ng + n]]
            row += [f"{v:.9f}" for v in result.u[i]]
            row += [f"{znorm[i]:.9f}", "" if mu_rho is None else f"{mu_rho:.9f}"]
            wr.writerow(row)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# pipelines

def run_pipeline(cfg: RunConfig) -> dict:
    """linearize -> synth -> verify -> simulate or sweep; returns the summary
    document (also written to the output directory)."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    case, op, model = stage_linearize(cfg)
    write_model_artifacts(outdir, case, op, model)

    ctrl, prob, report = stage_synthesize(cfg, case, model)
    write_controller_artifacts(outdir, cfg.mode, ctrl, prob, report)

    mu = ctrl.mu if cfg.mode != "hinf" else None
    rho = prob.rho
    summary = {
        "case": case.name,
        "mode": cfg.mode,
        "rho": rho,
        "mu": mu,
        "certified": bool(report.get("certified", cfg.mode == "hinf")),
        "seed": cfg.master_seed,
    }

    dist = cfg.disturbance_model(seed=cfg.master_seed)
    if cfg.n_realizations == 1:
        result = simulate_closed_loop(case, op, Policy.from_controller(ctrl), dist,
                                      t_span=cfg.t_span, dt=cfg.dt,
                                      C=prob.C, D=prob.D, mu=mu, rho=rho)
        write_trajectory_csv(outdir / f"trajectory_{cfg.mode}.csv", case, op, result,
                             mu_rho=None if mu is None else mu * rho)
        summary["metrics"] = _jsonable(result.metrics)
        summary["diverged"] = result.diverged
    else:
        sweep = monte_carlo_sweep(case, op, Policy.from_controller(ctrl), dist,
                                  n_realizations=cfg.n_realizations,
                                  t_span=cfg.t_span, dt=cfg.dt,
                                  C=prob.C, D=prob.D, mu=mu, rho=rho,
                                  master_seed=cfg.master_seed)
        _write_json(outdir / f"sweep_{cfg.mode}.json", _jsonable(sweep))
        summary["sweep"] = {k: v for k, v in sweep.items() if k != "runs"}

    _write_json(outdir / "summary.json", _jsonable(summary))
    return summary


def run_compare(cfg: RunConfig) -> dict:
    """Three-way comparison on one case and disturbance: peak-gain feedback,
    AGC, and the energy-gain baseline."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    case, op, model = stage_linearize(cfg)
    write_model_artifacts(outdir, case, op, model)
    settings = cfg.sca_settings()

    prob = build_problem(cfg, case, model, with_input_budget=False)
    ctrl_linf = solve_sca(prob, settings)
    rep_linf = verify_controller(prob, ctrl_linf, simulate=False)
    write_controller_artifacts(outdir, "centralized", ctrl_linf, prob, rep_linf)

    K_hinf, gamma_hinf, info_hinf = hinf_synthesize(prob)

    dist = cfg.disturbance_model(seed=cfg.master_seed)
    rows = []
    policies = [
        ("linf", Policy.from_controller(ctrl_linf), ctrl_linf.mu),
        ("agc", make_policy(cfg, case, op, None, linf_gain=ctrl_linf.K), None),
        ("hinf", Policy.from_gain(K_hinf), None),
    ]
    for name, policy, mu in policies:
        if cfg.n_realizations == 1:
            result = simulate_closed_loop(case, op, policy, dist,
                                          t_span=cfg.t_span, dt=cfg.dt,
                                          C=prob.C, D=prob.D, mu=mu, rho=prob.rho)
            row = dict(result.metrics)
            row["controller"] = name
        else:
            sweep = monte_carlo_sweep(case, op, policy, dist,
                                      n_realizations=cfg.n_realizations,
                                      t_span=cfg.t_span, dt=cfg.dt,
                                      C=prob.C, D=prob.D, mu=mu, rho=prob.rho,
                                      master_seed=cfg.master_seed)
            row = {
                "controller": name,
                "n_diverged": sweep["n_diverged"],
                "max_freq_dev_hz": sweep.get("max_freq_dev_hz", {}).get("max"),
                "max_volt_dev_pu": sweep.get("max_volt_dev_pu", {}).get("max"),
                "u_peak": sweep.get("u_peak", {}).get("max"),
            }
            _write_json(outdir / f"sweep_compare_{name}.json", _jsonable(sweep))
        if name == "linf":
            row["mu"] = ctrl_linf.mu
        if name == "hinf":
            row["gamma"] = gamma_hinf
        rows.append(row)

    doc = {"case": case.name, "rho": prob.rho, "rows": _jsonable(rows),
           "seed": cfg.master_seed}
    _write_json(outdir / "compare.json", doc)
    with open(outdir / "compare.csv", "w", newline="") as fh:
        keys = ["controller", "max_freq_dev_hz", "max_volt_dev_pu", "u_peak",
                "n_diverged", "diverged", "mu", "gamma"]
        wr = csv.writer(fh)
        wr.writerow(keys)
        for row in rows:
            wr.writerow([row.get(k, "") for k in keys])
    return doc


def report_summary(outdir) -> str:
    """Human-readable digest of the artifacts in an output directory."""
    outdir = Path(outdir)
    lines = []
    for path in sorted(outdir.glob("summary.json")) + sorted(outdir.glob("compare.json")):
        with open(path) as fh:
            doc = json.load(fh)
        lines.append(f"== {path.name}")
        lines.append(json.dumps(doc, indent=1, sort_keys=True))
    if not lines:
        lines.append(f"no artifacts under {outdir}")
    return "\n".join(lines)
