"""Configuration and orchestration of experiments behind the ``fbsde-ns`` command line.

Configuration files are INI text with three sections::

    [grid]
    d = 2
    n = 32

    [solver]
    viscosity = 0.1
    T = 0.25
    M = 10000

    [experiment]
    experiment = taylor_green
    output_dir = out

Unknown keys and invalid values are reported with the line number they came
from.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import difflib
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import spectral_ops
from .besov import BesovIndex, SeminormQuadrature, besov_norm, smoothness_norm
from .grid import GridSpec, TimeGrid, VectorField, div_array, fft, ifft
from .solver import (
    PicardState,
    SolverConfig,
    TimeIndexedField,
    picard_solve,
    reference_ns_solve,
    taylor_green,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("solve", "taylor_green", "visc_sweep", "invariants")
INITIAL_DATA = ("taylor_green", "random", "zero", "constant")

EXIT_OK, EXIT_INVARIANT, EXIT_CONVERGENCE, EXIT_CONFIG = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _norms(text: str) -> tuple[BesovIndex, ...]:
    out = []
    for item in text.replace(",", " ").split():
        r, p, q = (float(x) for x in item.split(":"))
        out.append(BesovIndex.from_smoothness(r, p, q))
    return tuple(out)


def _names(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help); defaults double as the reference page
SCHEMA = {
    "grid": {
        "d": (int, 2, "spatial dimension, 2 or 3"),
        "n": (int, 32, "points per axis, a power of two >= 8"),
        "box_length": (float, 2 * math.pi, "period of the box"),
    },
    "solver": {
        "viscosity": (float, 0.1, "viscosity nu"),
        "T": (float, 0.25, "horizon"),
        "steps": (int, 10, "time steps on [0, T]"),
        "M": (int, 10_000, "Monte-Carlo paths per grid point"),
        "r": (float, 2.5, "smoothness of the reported norm"),
        "p": (float, 4.0, "integrability of both norms"),
        "tol": (float, 1e-4, "stopping threshold on the monitoring residual"),
        "max_iters": (int, 12, "Picard iteration cap"),
        "scheme": (str, "mc_drifted", "mc_drifted or mild"),
        "seed": (int, 2024, "master seed"),
        "common_random_numbers": (_bool, True, "reuse one noise ensemble across iterations"),
        "refine": (int, 4, "upsampling of interpolation tables"),
        "substeps": (int, 4, "substeps per interval in deterministic integrators"),
        "max_halvings": (int, 4, "horizon halvings before giving up"),
        "radial_nodes": (int, 16, "radial nodes of the seminorm quadrature"),
    },
    "experiment": {
        "experiment": (str, "invariants", "solve, taylor_green, visc_sweep or invariants"),
        "output_dir": (str, "out", "directory for all outputs"),
        "visc_list": (_floats, (0.1, 0.03, 0.01, 0.003), "viscosities of the sweep"),
        "norms": (_norms, (), "extra reported norms as r:p:q items"),
        "initial": (str, "taylor_green", "taylor_green, random, zero or constant"),
        "amplitude": (float, 1.0, "scale of the initial datum"),
        "initial_seed": (int, 7, "seed of the random initial datum"),
        "invariants": (_names, None, "subset of invariant names; empty selects none"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "invariants"
    grid: GridSpec = field(default_factory=lambda: GridSpec(2, 32))
    solver: SolverConfig = field(default_factory=SolverConfig)
    visc_list: tuple = (0.1, 0.03, 0.01, 0.003)
    output_dir: str = "out"
    norms: tuple = ()
    initial: str = "taylor_green"
    amplitude: float = 1.0
    initial_seed: int = 7
    invariants: tuple | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, solver=dataclasses.replace(self.solver, seed=seed))

    def initial_field(self) -> VectorField:
        return initial_datum(self.grid, self.initial, self.amplitude, self.initial_seed)


def _line_numbers(text: str) -> dict:
    """``(section, key) -> line`` for every assignment in ``text``."""
    where, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            where[(section, None)] = no
        elif "=" in line and section is not None:
            where[(section, line.split("=", 1)[0].strip())] = no
    return where


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _line_numbers(text)
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            near = difflib.get_close_matches(section, SCHEMA, n=1)
            hint = f"; did you mean [{near[0]}]?" if near else ""
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section "
                              f"[{section}]{hint}")
        for key, raw in cp.items(section):
            line = lines.get((section, key), "?")
            if key not in SCHEMA[section]:
                near = difflib.get_close_matches(key, SCHEMA[section], n=1)
                hint = f"; nearest valid key is {near[0]!r}" if near else ""
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]{hint}")
            conv = SCHEMA[section][key][0]
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {key!r}: {exc}") from exc
    return _build(values, source, lines)


def _build(values: dict, source: str, lines: dict) -> ExperimentConfig:
    def pick(section):
        return {k: values.get(k, spec[1]) for k, spec in SCHEMA[section].items()}

    def fail(section, key, msg):
        raise ConfigError(f"{source}:{lines.get((section, key), '?')}: {msg}")

    g = pick("grid")
    try:
        grid = GridSpec(g["d"], g["n"], g["box_length"])
    except ValueError as exc:
        fail("grid", "n" if "n" in str(exc) else "d", str(exc))
    s = pick("solver")
    quad = SeminormQuadrature(radial_nodes=s.pop("radial_nodes"))
    s["nu"] = s.pop("viscosity")
    try:
        solver = SolverConfig(quadrature=quad, **s)
    except ValueError as exc:
        fail("solver", "scheme" if "scheme" in str(exc) else "viscosity", str(exc))
    e = pick("experiment")
    if e["experiment"] not in EXPERIMENTS:
        fail("experiment", "experiment", f"experiment must be one of {EXPERIMENTS}")
    if e["initial"] not in INITIAL_DATA:
        fail("experiment", "initial", f"initial must be one of {INITIAL_DATA}")
    visc = tuple(e["visc_list"])
    if e["experiment"] == "visc_sweep":
        if len(visc) < 3 or min(visc) <= 0 or max(visc) / min(visc) < 10**1.5 - 1e-9:
            fail("experiment", "visc_list",
                 "visc_sweep needs at least 3 positive viscosities spanning 1.5 decades")
    if e["invariants"] is not None:
        unknown = [n for n in e["invariants"] if n not in INVARIANTS]
        if unknown:
            near = difflib.get_close_matches(unknown[0], INVARIANTS, n=1)
            hint = f"; nearest is {near[0]!r}" if near else ""
            fail("experiment", "invariants", f"unknown invariant {unknown[0]!r}{hint}")
    return ExperimentConfig(e["experiment"], grid, solver, visc, e["output_dir"], tuple(e["norms"]),
                            e["initial"], e["amplitude"], e["initial_seed"], e["invariants"])


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse_config_text(path.read_text(), str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], BesovIndex):
            return ", ".join(f"{b.r!r}:{b.p!r}:{b.q!r}" for b in v)
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical INI text listing every key."""
    s = cfg.solver
    sections = {
        "grid": {"d": cfg.grid.d, "n": cfg.grid.n, "box_length": cfg.grid.box_length},
        "solver": {k: getattr(s, k) for k in SCHEMA["solver"]
                   if k not in ("radial_nodes", "viscosity")}
        | {"radial_nodes": s.quadrature.radial_nodes, "viscosity": s.nu},
        "experiment": {k: getattr(cfg, k) for k in SCHEMA["experiment"]},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        for k in SCHEMA[name]:
            v = items[k]
            if v is None:
                continue
            out.append(f"{k} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)


def normalize(text: str) -> str:
    return serialize(parse_config_text(text))


def reference_page() -> str:
    """Markdown table of every key with its default."""
    rows = ["| section | key | default | meaning |", "|---|---|---|---|"]
    for sec, keys in SCHEMA.items():
        for k, (_, default, help_) in keys.items():
            shown = "all" if default is None else _fmt(default)
            rows.append(f"| {sec} | {k} | {shown} | {help_} |")
    return "\n".join(rows)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


# -- initial data ----------------------------------------------------------------------

def initial_datum(spec: GridSpec, kind: str, amplitude: float = 1.0, seed: int = 7) -> VectorField:
    if kind == "taylor_green":
        return taylor_green(spec, amplitude)
    if kind == "zero":
        return VectorField.zeros(spec)
    if kind == "constant":
        return VectorField.constant(spec, [amplitude] * spec.d)
    if kind == "random":
        return random_solenoidal(spec, seed, amplitude)
    raise ValueError(f"unknown initial datum {kind!r}")


def random_solenoidal(spec: GridSpec, seed: int, amplitude: float = 1.0, kmax: int = 3) -> VectorField:
    """Divergence-free field with random modes ``|m|_inf <= kmax``, unit L^2 RMS times
    ``amplitude``."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((spec.d,) + spec.shape)
    keep = np.ones(spec.shape, dtype=bool)
    for k in spec.wavenumbers:
        keep &= np.abs(k * spec.box_length / (2 * np.pi)) <= kmax
    a = spectral_ops.leray_array(ifft(fft(raw, spec.d) * keep, spec.d), spec)
    a -= a.mean(axis=tuple(range(1, spec.d + 1)), keepdims=True)
    rms = np.sqrt((a**2).sum(0).mean())
    return VectorField(spec, amplitude * a / rms)


# -- manifest and outputs -----------------------------------------------------------

def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, cfg: ExperimentConfig, wall: float, extra: dict | None = None):
    man = {
        "config_hash": config_hash(cfg),
        "seed": cfg.solver.seed,
        "git_describe": git_describe(),
        "wall_seconds": wall,
        "experiment": cfg.experiment,
    }
    man.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(serialize(cfg))


def _write_rows(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})


# -- experiments --------------------------------------------------------------------

class ConvergenceFailure(RuntimeError):
    def __init__(self, what: str, state: PicardState, partial=None):
        hist = "; ".join(f"T={T:.4g} {st} ratios={[round(r, 4) for r in rs]}"
                         for T, st, rs in state.attempts)
        super().__init__(f"{what}: Picard status {state.status} ({hist})")
        self.state = state
        self.partial = partial


def _reject_failure(state: PicardState, what: str):
    if state.status not in ("converged",):
        raise ConvergenceFailure(what, state)


def run_solve(cfg: ExperimentConfig, out: Path | None = None) -> PicardState:
    state = picard_solve(cfg.initial_field(), cfg.solver)
    if out is not None:
        state.write_csv(out / "picard.csv")
        fields = out / "fields"
        fields.mkdir(exist_ok=True)
        state.write_fields(fields)
    _reject_failure(state, "solve")
    return state


def _rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    num = np.sqrt(((a - b) ** 2).reshape(a.shape[0], -1).sum(1)).max()
    den = np.sqrt((b**2).reshape(b.shape[0], -1).sum(1)).max()
    return float(num / den) if den > 0 else float(num)


def run_taylor_green(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    """Picard fixed point and reference solver against the exact decay ``u0 e^{-2 nu t}``."""
    t0 = time.perf_counter()
    spec = cfg.grid
    u0 = taylor_green(spec, cfg.amplitude)
    state = picard_solve(u0, cfg.solver)
    tg = state.solution.time_grid
    decay = np.exp(-2 * cfg.solver.nu * tg.times).reshape((-1,) + (1,) * (spec.d + 1))
    exact = decay * u0.data[None]
    ref = reference_ns_solve(u0, cfg.solver.nu, tg, cfg.solver.substeps)
    ref_norm = np.sqrt((exact**2).reshape(len(tg.times), -1).sum(1) * spec.cell_volume).max()
    report = {
        "nu": cfg.solver.nu,
        "horizon": tg.T,
        "status": state.status,
        "iterations": len(state.residuals),
        "fixed_point_rel_error": _rel_l2(state.solution.data, exact) if ref_norm > 0 else 0.0,
        "fixed_point_vs_reference": _rel_l2(state.solution.data, ref.data) if ref_norm > 0 else 0.0,
        "reference_rel_error": _rel_l2(ref.data, exact) if ref_norm > 0 else 0.0,
        "mc_rel_stderr": float(state.stderr.max() / ref_norm) if ref_norm > 0 else 0.0,
        "max_contraction_ratio": max(state.contraction_ratios, default=0.0),
        "divergence_sup": state.divergence_history[-1],
        "divergence_stderr": state.divergence_stderr[-1],
    }
    if out is not None:
        _write_rows(out / "taylor_green.csv", [report | {"status": state.status}])
        state.write_csv(out / "picard.csv")
    _reject_failure(state, "taylor_green")
    report["wall_seconds"] = time.perf_counter() - t0
    report["state"] = state
    return report


@dataclass
class SweepReport:
    rows: list
    slope: float
    slope_ci: tuple
    horizon: float
    baseline_status: str

    @property
    def all_ratios_within_error(self) -> bool:
        return all(r["ratio"] <= 1 + 4 * r["combined_error"] / r["bound"] for r in self.rows)

    def write_csv(self, path):
        _write_rows(Path(path), self.rows)
        _write_rows(Path(path).with_name("sweep_slope.csv"), [{
            "slope": self.slope, "ci_low": self.slope_ci[0], "ci_high": self.slope_ci[1],
            "horizon": self.horizon}])


def mc_norm_error(stderr_field: np.ndarray, spec: GridSpec, norm, seed: int = 0) -> float:
    """Size of the MC error in ``norm``: the norm of a white-noise field whose
    pointwise standard deviation is the estimated standard error (sup over time)."""
    if not np.any(stderr_field):
        return 0.0
    z = np.random.default_rng(seed).standard_normal(stderr_field.shape[1:])
    return max(norm(VectorField(spec, s * z)) for s in stderr_field)


def _sweep_member(args):
    cfg, nu, seed = args
    s = dataclasses.replace(cfg.solver, nu=nu, seed=seed)
    state = picard_solve(cfg.initial_field(), s)
    err = state.last_raw.stderr_field if state.last_raw is not None else None
    return nu, state.status, state.horizon, state.solution.data, err, list(state.attempts)


def run_visc_sweep(cfg: ExperimentConfig, jobs: int = 1, out: Path | None = None) -> SweepReport:
    """``D(nu) = sup_t ||u_nu - u_0||`` in the monitoring norm against the ``nu = 0`` fixed point.

    Every member starts from the same datum on the same grid and horizon. Member seeds
    are derived from the master seed and the member index, so results do not
    depend on ``jobs``.
    """
    spec = cfg.grid
    s = cfg.solver
    members = [(cfg, 0.0, s.seed)] + [(cfg, nu, s.seed + 1000 * (i + 1))
                                       for i, nu in enumerate(cfg.visc_list)]
    jobs = _cap_jobs(jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_member, members))
    else:
        results = [_sweep_member(m) for m in members]
    base = results[0]
    failed = [(nu, st) for nu, st, *_ in results if st != "converged"]
    horizons = {round(h, 12) for _, _, h, *_ in results}
    rows = []
    if not failed and len(horizons) == 1:
        T1 = base[2]
        fine = dataclasses.replace(s.quadrature, radial_nodes=2 * s.quadrature.radial_nodes
                                   ).refined(2)
        norm = s.monitor_norm
        norm_fine = lambda v: smoothness_norm(v, s.monitor_r, s.p, quad=fine)
        for nu, _, _, data, se, _ in results[1:]:
            diff = data - base[3]
            per_t = [norm(VectorField(spec, x)) for x in diff]
            m = int(np.argmax(per_t))
            D = per_t[m]
            quad_err = abs(norm_fine(VectorField(spec, diff[m])) - D)
            mc_err = mc_norm_error(se, spec, norm)
            bound = math.sqrt(2 * nu * T1)
            rows.append({"nu": nu, "D": D, "bound": bound, "ratio": D / bound,
                         "mc_error": mc_err, "quadrature_error": quad_err,
                         "combined_error": math.hypot(mc_err, quad_err)})
    if failed or len(horizons) != 1:
        partial = SweepReport(rows, float("nan"), (float("nan"), float("nan")),
                              float("nan"), base[1])
        state = PicardState(status="failed")
        state.attempts = [a for r in results for a in r[5]]
        raise ConvergenceFailure(f"visc_sweep members failed or horizons differ: {failed}",
                                 state, partial)
    slope, ci = _loglog_slope([r["nu"] for r in rows], [r["D"] for r in rows])
    report = SweepReport(rows, slope, ci, T1, base[1])
    if out is not None:
        report.write_csv(out / "sweep.csv")
    return report


def _loglog_slope(x, y, level: float = 0.95):
    x, y = np.log(np.asarray(x)), np.log(np.maximum(np.asarray(y), 1e-300))
    fit = stats.linregress(x, y)
    dof = len(x) - 2
    half = stats.t.ppf(0.5 + level / 2, dof) * fit.stderr if dof > 0 else float("inf")
    return float(fit.slope), (float(fit.slope - half), float(fit.slope + half))


def _cap_jobs(jobs: int) -> int:
    cap = os.environ.get("FBSDE_NS_THREADS")
    if cap:
        jobs = min(jobs, max(int(cap), 1))
    return max(jobs, 1)


# -- invariant suite ------------------------------------------------------------------

def _inv_corpus(spec: GridSpec, count: int = 4):
    return [random_solenoidal(spec, 100 + i) + VectorField(
        spec, np.random.default_rng(200 + i).standard_normal((spec.d,) + spec.shape) * 0.1)
        for i in range(count)]


def _l2(a: np.ndarray, spec: GridSpec) -> float:
    return float(np.sqrt(spec.cell_volume * (a**2).sum()))


def _inv_leray_divergence(spec):
    return max(_l2(div_array(spectral_ops.leray_array(v.data, spec), spec), spec)
               for v in _inv_corpus(spec)), 1e-10


def _inv_leray_idempotence(spec):
    worst = 0.0
    for v in _inv_corpus(spec):
        p1 = spectral_ops.leray_array(v.data, spec)
        worst = max(worst, _l2(spectral_ops.leray_array(p1, spec) - p1, spec))
    return worst, 1e-12


def _inv_newton_inverse(spec):
    worst = 0.0
    for v in _inv_corpus(spec):
        f = v.data[0]
        nf = spectral_ops.newton_potential_array(f, spec)
        lap_nf = ifft(-spec.k_squared * fft(nf, spec.d), spec.d)
        worst = max(worst, _l2(lap_nf - (f - f.mean()), spec))
    return worst, 1e-10


def _inv_pressure_divergence(spec):
    worst = 0.0
    for v in _inv_corpus(spec):
        F = spectral_ops.pressure_gradient_array(v.data, spec)
        G = spectral_ops.nonlinear_source_array(v.data, spec)
        worst = max(worst, _l2(div_array(F, spec) - (G - G.mean()), spec))
    return worst, 1e-9


def _inv_heat_semigroup(spec):
    v = _inv_corpus(spec, 1)[0]
    a = spectral_ops.heat_array(spectral_ops.heat_array(v.data, spec, 0.01), spec, 0.02)
    b = spectral_ops.heat_array(v.data, spec, 0.03)
    return _l2(a - b, spec), 1e-12


def _inv_reference_taylor_green(spec):
    u0 = taylor_green(spec)
    tg = TimeGrid(0.0, 0.25, 10)
    ref = reference_ns_solve(u0, 0.1, tg)
    exact = np.exp(-0.2 * tg.times).reshape((-1,) + (1,) * (spec.d + 1)) * u0.data[None]
    return float(np.abs(ref.data - exact).max()), 1e-6


def _inv_mild_matches_oracle(spec):
    from .solver import evaluate_g_mild, pde_oracle_g
    u0 = taylor_green(spec)
    tg = TimeGrid(0.0, 0.25, 10)
    v = TimeIndexedField.constant(u0, tg)
    a = evaluate_g_mild(v, u0, 0.1).g.data
    b = pde_oracle_g(v, u0, 0.1, substeps=16).g.data
    return float(np.abs(a - b).max()), 1e-5


def _inv_constant_flow(spec):
    from .flow import simulate
    tg = TimeGrid(0.0, 0.5, 8)
    c = np.arange(1, spec.d + 1) * 0.3
    v = VectorField.constant(spec, c)
    x0 = np.full((1, spec.d), 1.0)
    ens = simulate(v, "deterministic", 0.0, x0, tg, 1, 0)
    want = np.mod(x0[0] - c * 0.5, spec.box_length)
    return float(np.abs(ens.positions[0, 0, -1] - want).max()), 1e-12


def _inv_besov_homogeneity(spec):
    v = _inv_corpus(spec, 1)[0]
    idx = BesovIndex.from_smoothness(1.5, 2.0)
    a = besov_norm(v * 3.0, idx)
    b = 3.0 * besov_norm(v, idx)
    return abs(a - b) / b, 1e-10


INVARIANTS = {
    "leray_divergence": _inv_leray_divergence,
    "leray_idempotence": _inv_leray_idempotence,
    "newton_inverse": _inv_newton_inverse,
    "pressure_divergence": _inv_pressure_divergence,
    "heat_semigroup": _inv_heat_semigroup,
    "reference_taylor_green": _inv_reference_taylor_green,
    "mild_matches_oracle": _inv_mild_matches_oracle,
    "constant_flow": _inv_constant_flow,
    "besov_homogeneity": _inv_besov_homogeneity,
}


def run_invariants(cfg: ExperimentConfig, out: Path | None = None) -> list[dict]:
    """Evaluate the selected invariants; each row has name, value, threshold, passed."""
    names = list(INVARIANTS) if cfg.invariants is None else list(cfg.invariants)
    rows = []
    for name in names:
        value, thresh = INVARIANTS[name](cfg.grid)
        rows.append({"name": name, "value": float(value), "threshold": thresh,
                     "passed": bool(value <= thresh)})
    if out is not None:
        _write_rows(out / "invariants.csv", rows)
    return rows


# -- command line -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbsde-ns", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=["solve", "taylor-green", "visc-sweep", "invariants"])
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--jobs", type=int, default=1, help="parallel sweep members")
    ap.add_argument("--seed", type=int, default=None, help="override the master seed")
    ap.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    experiment = args.command.replace("-", "_")
    cfg = dataclasses.replace(cfg, experiment=experiment)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"config error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    code, extra = EXIT_OK, {}
    try:
        if experiment == "solve":
            st = run_solve(cfg, out)
            extra = {"status": st.status, "iterations": len(st.residuals)}
        elif experiment == "taylor_green":
            rep = run_taylor_green(cfg, out)
            extra = {k: v for k, v in rep.items() if k not in ("state", "wall_seconds")}
        elif experiment == "visc_sweep":
            rep = run_visc_sweep(cfg, args.jobs, out)
            extra = {"slope": rep.slope, "slope_ci": list(rep.slope_ci),
                     "ratios_within_error": rep.all_ratios_within_error}
        else:
            rows = run_invariants(cfg, out)
            failed = [r["name"] for r in rows if not r["passed"]]
            extra = {"failed": failed}
            code = EXIT_INVARIANT if failed else EXIT_OK
            for r in rows:
                print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['value']:.3e} "
                      f"(threshold {r['threshold']:.1e})")
    except ConvergenceFailure as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        if exc.partial is not None and exc.partial.rows:
            _write_rows(out / "sweep_partial.csv", exc.partial.rows)
        code = EXIT_CONVERGENCE
        extra = {"status": exc.state.status}
    write_manifest(out, cfg, time.perf_counter() - t0, extra | {"exit_code": code})
    return code


if __name__ == "__main__":
    raise SystemExit(main())
