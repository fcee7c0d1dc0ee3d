"""Fixed-point maps for Navier-Stokes and their Picard driver.

Forward time ``tau`` runs over a uniform grid ``tau_m = m dt``, ``m = 0..K``.
For a given velocity history ``v`` and initial datum ``u0``:

* :func:`evaluate_g_mc` averages ``u0(X_T) + int F_v(T - s, X_s) ds`` over
  backward stochastic characteristics started at every grid node;
* :func:`pde_oracle_g` solves the dual transport-diffusion equation
  ``g_t + v.grad g = nu Lap g + F_v`` pseudo-spectrally;
* :func:`evaluate_g_mild` marches the Duhamel form of the same equation.

``apply_I_nu`` / ``apply_I_prime_nu`` Leray-project these, and
:func:`picard_solve` iterates them from ``u_1(t) = u0``. Their fixed points are
compared against :func:`reference_ns_solve`, a dealiased pseudo-spectral
Navier-Stokes integrator.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .besov import SeminormQuadrature, lp_norm, smoothness_norm
from .flow import DriftTable, check_stability, expectation_kernel, upsample
from .grid import GridSpec, ScalarField, TimeGrid, VectorField, div_array, fft, ifft, write_nsf1
from .spectral_ops import (
    advection_array,
    heat_array,
    leray_array,
    pressure_gradient_array,
)

log = logging.getLogger(__name__)

__all__ = [
    "TimeIndexedField",
    "SolverConfig",
    "GEstimate",
    "PicardState",
    "MildSweepDivergence",
    "evaluate_g_mc",
    "pde_oracle_g",
    "evaluate_g_mild",
    "apply_I_nu",
    "apply_I_prime_nu",
    "picard_solve",
    "divergence_diagnostic",
    "reference_ns_solve",
    "taylor_green",
]


class MildSweepDivergence(RuntimeError):
    """Inner fixed-point sweeps of the mild scheme failed to settle."""


@dataclass(frozen=True)
class TimeIndexedField:
    """Velocity snapshots on a uniform forward time grid.

    ``data`` has shape ``(K+1, d, n, ..., n)``.
    """

    spec: GridSpec
    time_grid: TimeGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        want = (self.time_grid.steps + 1, self.spec.d) + self.spec.shape
        if data.shape != want:
            raise ValueError(f"expected shape {want}, got {data.shape}")
        object.__setattr__(self, "data", data)

    @classmethod
    def constant(cls, v: VectorField, time_grid: TimeGrid) -> "TimeIndexedField":
        data = np.broadcast_to(v.data, (time_grid.steps + 1,) + v.data.shape).copy()
        return cls(v.spec, time_grid, data)

    def __getitem__(self, m: int) -> VectorField:
        return VectorField(self.spec, self.data[m], float(self.time_grid.times[m]))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def snapshots(self) -> list[VectorField]:
        return [self[m] for m in range(len(self))]

    def max_divergence(self) -> float:
        return float(np.abs(div_array(self.data, self.spec)).max())

    def is_divergence_free(self, tol: float = 1e-8) -> bool:
        return self.max_divergence() <= tol

    def at_time(self, t: float) -> np.ndarray:
        """Linear interpolation in time between stored slices."""
        tg = self.time_grid
        s = (t - tg.t0) / tg.dt
        i = int(np.clip(np.floor(s), 0, tg.steps - 1))
        w = s - i
        if abs(w) < 1e-12:
            return self.data[i]
        if abs(w - 1) < 1e-12:
            return self.data[i + 1]
        return (1 - w) * self.data[i] + w * self.data[i + 1]


@dataclass(frozen=True)
class SolverConfig:
    """Settings for the fixed-point maps and the Picard loop.

    ``r`` and ``p`` set the reported norm ``B^r_{p,p}``; stopping uses the
    lower norm ``B^{max(r-1,1)}_{p,p}``. ``refine`` upsamples the tables used
    for off-grid interpolation; ``substeps`` subdivides each output interval
    in the deterministic integrators.
    """

    nu: float = 0.1
    T: float = 0.25
    steps: int = 10
    M: int = 10_000
    r: float = 2.5
    p: float = 4.0
    tol: float = 1e-4
    max_iters: int = 12
    scheme: str = "mc_drifted"
    seed: int = 2024
    common_random_numbers: bool = True
    refine: int = 4
    substeps: int = 4
    max_halvings: int = 4
    quadrature: SeminormQuadrature = field(default_factory=SeminormQuadrature)

    def __post_init__(self):
        if self.scheme not in ("mc_drifted", "mild"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.nu < 0:
            raise ValueError(f"viscosity must be >= 0, got {self.nu}")
        if self.scheme == "mild" and self.nu <= 0:
            raise ValueError("the mild scheme needs nu > 0")
        if not self.T > 0 or self.steps < 1:
            raise ValueError("need T > 0 and steps >= 1")

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.T, self.steps)

    @property
    def monitor_r(self) -> float:
        return max(self.r - 1, 1.0)

    def monitor_norm(self, v) -> float:
        return smoothness_norm(v, self.monitor_r, self.p, quad=self.quadrature)

    def full_norm(self, v) -> float:
        return smoothness_norm(v, self.r, self.p, quad=self.quadrature)


@dataclass(frozen=True)
class GEstimate:
    """Output of an evaluator: the field, its MC standard-error field (zeros
    for deterministic evaluators) and per-time L^2 norms of that error."""

    g: TimeIndexedField
    stderr_field: np.ndarray

    @property
    def stderr(self) -> np.ndarray:
        spec = self.g.spec
        return np.sqrt(spec.cell_volume * (self.stderr_field**2).reshape(len(self.g), -1).sum(1))

    def projected(self) -> "GEstimate":
        """Leray projection of ``g``; the error field is carried along unchanged
        (the projector is an orthogonal L^2 contraction)."""
        return GEstimate(
            TimeIndexedField(self.g.spec, self.g.time_grid, leray_array(self.g.data, self.g.spec)),
            self.stderr_field,
        )


def _check_u0(u0: VectorField, tol: float = 1e-8) -> VectorField:
    div = np.abs(div_array(u0.data, u0.spec)).max()
    if div > tol:
        warnings.warn(f"u0 has divergence {div:.3g}; projecting it", stacklevel=3)
        return VectorField(u0.spec, leray_array(u0.data, u0.spec), u0.time_tag)
    return u0


def _pressure_slices(v: TimeIndexedField) -> np.ndarray:
    return pressure_gradient_array(v.data, v.spec)


def evaluate_g_mc(v: TimeIndexedField, u0: VectorField, cfg: SolverConfig, seed: int | None = None
                  ) -> GEstimate:
    """Monte-Carlo estimate of ``g(tau_m, x)`` at every grid node and output time.

    With ``nu = 0`` the characteristics are deterministic (RK4, one path).
    """
    if not u0.spec == v.spec:
        raise ValueError("u0 and v live on different grids")
    if cfg.nu > 0 and cfg.M < 100:
        raise ValueError(f"M={cfg.M} paths is too few for a meaningful standard error")
    div = np.abs(div_array(u0.data, u0.spec)).max()
    if div > 1e-6:
        raise ValueError(f"u0 is not divergence free (max |div| = {div:.3g})")
    spec, tg = v.spec, v.time_grid
    seed = cfg.seed if seed is None else seed
    vt = DriftTable.from_array(v.data, spec, tg, cfg.refine)
    check_stability(vt, tg.dt)
    ft = DriftTable.from_array(_pressure_slices(v), spec, tg, cfg.refine)
    u0tab = _single_slice_table(u0.data, spec, cfg.refine)
    nodes = spec.nodes()
    ids = np.arange(nodes.shape[0], dtype=np.int64)
    K = tg.steps
    scheme, M = (0, cfg.M) if cfg.nu > 0 else (2, 1)
    g = np.empty((K + 1, spec.d) + spec.shape)
    se = np.zeros_like(g)
    g[0] = u0.data
    for m in range(1, K + 1):
        mean, var = expectation_kernel(
            nodes, ids, m, tg.dt, math.sqrt(2 * cfg.nu), vt.data, ft.data, u0tab,
            vt.n_fine, vt.h_fine, spec.box_length, M, seed, K - m, scheme,
        )
        g[m] = mean.T.reshape((spec.d,) + spec.shape)
        se[m] = np.sqrt(var / M).T.reshape((spec.d,) + spec.shape)
    return GEstimate(TimeIndexedField(spec, tg, g), se)


def _single_slice_table(a: np.ndarray, spec: GridSpec, refine: int) -> np.ndarray:
    """``(1, ncomp, (n*refine)^d)`` interpolation table for a time-independent field."""
    fine = upsample(a[None], spec, refine) if refine > 1 else a[None]
    return np.ascontiguousarray(fine.reshape(1, a.shape[0], -1))


def pde_oracle_g(v: TimeIndexedField, u0: VectorField, nu: float, time_grid: TimeGrid | None = None,
                 substeps: int = 4, cfl: float = 1.0) -> GEstimate:
    """Integrating-factor RK4 for ``g_t = nu Lap g - v.grad g + F_v``, ``g(0) = u0``.

    ``v`` is linear in time between its slices; outputs are on ``v``'s grid.
    """
    spec = v.spec
    tg = v.time_grid if time_grid is None else time_grid
    if tg.steps != v.time_grid.steps or not np.isclose(tg.T, v.time_grid.T):
        raise ValueError("time grid must match the drift's grid")
    if nu < 0:
        raise ValueError("viscosity must be >= 0")
    h = tg.dt / substeps
    vmax = float(np.sqrt((v.data**2).sum(axis=1)).max())
    if vmax * h / spec.h > cfl:
        raise ValueError(f"CFL number {vmax * h / spec.h:.3g} exceeds {cfl}; raise substeps")
    F = _pressure_slices(v)
    vt = TimeIndexedField(spec, tg, v.data)
    Ft = TimeIndexedField(spec, tg, F)
    E_half = np.exp(-nu * spec.k_squared * h / 2)
    d = spec.d

    def rhs_hat(t, g):
        return fft(-advection_array(vt.at_time(t), g, spec) + Ft.at_time(t), d)

    out = np.empty((tg.steps + 1, d) + spec.shape)
    out[0] = u0.data
    gh = fft(u0.data, d)
    t = tg.t0
    for m in range(tg.steps):
        for _ in range(substeps):
            gh = _if_rk4(gh, t, h, E_half, rhs_hat, d)
            t += h
        out[m + 1] = ifft(gh, d)
    return GEstimate(TimeIndexedField(spec, tg, out), np.zeros_like(out))


def _if_rk4(gh, t, h, E_half, rhs_hat, d):
    """One integrating-factor RK4 step for ``y' = Lin y + N(t, y)`` in spectral space."""
    g = lambda yh: ifft(yh, d)
    k1 = rhs_hat(t, g(gh))
    a = E_half * (gh + 0.5 * h * k1)
    k2 = rhs_hat(t + h / 2, g(a))
    b = E_half * gh + 0.5 * h * k2
    k3 = rhs_hat(t + h / 2, g(b))
    c = E_half**2 * gh + h * E_half * k3
    k4 = rhs_hat(t + h, g(c))
    return E_half**2 * gh + h / 6 * (E_half**2 * k1 + 2 * E_half * (k2 + k3) + k4)


def evaluate_g_mild(v: TimeIndexedField, u0: VectorField, nu: float, time_grid: TimeGrid | None = None,
                    substeps: int = 4, sweep_tol: float = 1e-10, max_sweeps: int = 50) -> GEstimate:
    """March ``g(t) = e^{t nu Lap} u0 - int_0^t e^{(t-s) nu Lap} (v.grad g - F_v)(s) ds``.

    Each substep uses the trapezoid rule on the Duhamel integral; the implicit
    end-point term is resolved by fixed-point sweeps.
    """
    if nu <= 0:
        raise ValueError("the mild evaluator needs nu > 0")
    spec = v.spec
    tg = v.time_grid if time_grid is None else time_grid
    h = tg.dt / substeps
    F = TimeIndexedField(spec, tg, _pressure_slices(v))
    nu_h = nu * h

    def N(t, g):
        return advection_array(v.at_time(t), g, spec) - F.at_time(t)

    out = np.empty((tg.steps + 1, spec.d) + spec.shape)
    out[0] = u0.data
    g = np.array(u0.data, dtype=float)
    t = tg.t0
    for m in range(tg.steps):
        for _ in range(substeps):
            n0 = N(t, g)
            base = heat_array(g - 0.5 * h * n0, spec, nu_h)
            new = heat_array(g - h * n0, spec, nu_h)
            for sweep in range(max_sweeps):
                nxt = base - 0.5 * h * N(t + h, new)
                delta = float(np.abs(nxt - new).max())
                new = nxt
                if delta <= sweep_tol:
                    break
            else:
                raise MildSweepDivergence(
                    f"inner sweeps did not settle in {max_sweeps} iterations "
                    f"(last change {delta:.3g}); horizon too long for nu={nu}"
                )
            g = new
            t += h
        out[m + 1] = g
    return GEstimate(TimeIndexedField(spec, tg, out), np.zeros_like(out))


def apply_I_nu(v: TimeIndexedField, cfg: SolverConfig, seed: int | None = None) -> tuple[GEstimate, GEstimate]:
    """Leray-projected Monte-Carlo map; returns ``(projected, raw)`` estimates."""
    raw = evaluate_g_mc(v, v[0], cfg, seed)
    return raw.projected(), raw


def apply_I_prime_nu(v: TimeIndexedField, cfg: SolverConfig) -> tuple[GEstimate, GEstimate]:
    """Leray-projected mild (heat-semigroup) map; returns ``(projected, raw)``."""
    raw = evaluate_g_mild(v, v[0], cfg.nu, substeps=cfg.substeps)
    return raw.projected(), raw


# -- divergence diagnostic --------------------------------------------------------

def divergence_stderr(est: GEstimate) -> np.ndarray:
    """Standard-error field of ``div g`` (independent estimates across nodes).

    ``Var(D_i g_i)(x) = sum_y K_i(x - y)^2 Var(g_i(y))`` where ``K_i`` is the
    real-space kernel of the spectral derivative along axis ``i``.
    """
    spec = est.g.spec
    d = spec.d
    var = est.stderr_field**2
    out = np.zeros((var.shape[0],) + spec.shape)
    for i, k in enumerate(spec.odd_wavenumbers):
        kern = np.fft.ifftn(np.broadcast_to(1j * k, spec.shape)).real
        kh = fft(kern**2, d)
        out += ifft(fft(var[:, i], d) * kh, d)
    return np.sqrt(np.maximum(out, 0.0))


def divergence_diagnostic(est, p: float = 2.0) -> dict:
    """Per-time ``||div g(t)||_{L^p}`` of a pre-projection estimate, its sup,
    and the matching L^p norm of the divergence's MC standard error."""
    g = est.g if isinstance(est, GEstimate) else est
    spec = g.spec
    div = div_array(g.data, spec)
    per_t = np.array([lp_norm(ScalarField(spec, dv), p) for dv in div])
    if isinstance(est, GEstimate):
        se = divergence_stderr(est)
        se_t = np.array([lp_norm(ScalarField(spec, s), p) for s in se])
    else:
        se_t = np.zeros_like(per_t)
    return {"per_time": per_t, "sup": float(per_t.max()), "stderr": se_t,
            "stderr_sup": float(se_t.max())}


# -- Picard driver -------------------------------------------------------------------

@dataclass
class PicardState:
    iterates: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    residuals_full: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    divergence_history: list = field(default_factory=list)
    divergence_stderr: list = field(default_factory=list)
    stderr_history: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    status: str = "running"
    horizon: float = 0.0
    halvings: int = 0
    attempts: list = field(default_factory=list)
    last_raw: GEstimate | None = None
    last_projected: GEstimate | None = None

    @property
    def solution(self) -> TimeIndexedField:
        return self.iterates[-1]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def stderr(self) -> np.ndarray:
        """Per-time L^2 standard error of the final iterate."""
        return self.stderr_history[-1]

    def report_rows(self) -> list[dict]:
        rows = []
        for n, res in enumerate(self.residuals):
            rows.append({
                "iter": n + 1,
                "residual_r'": res,
                "residual_r": self.residuals_full[n],
                "contraction_ratio": self.contraction_ratios[n - 1] if n >= 1 else float("nan"),
                "divergence_sup": self.divergence_history[n],
                "wall_seconds": self.wall_seconds[n],
            })
        return rows

    def write_csv(self, path, with_wall: bool = True):
        cols = ["iter", "residual_r'", "residual_r", "contraction_ratio", "divergence_sup",
                "wall_seconds"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.report_rows():
                if not with_wall:
                    row["wall_seconds"] = 0.0
                w.writerow([row["iter"]] + [repr(float(row[c])) for c in cols[1:]])

    def write_fields(self, directory, prefix: str = "u"):
        sol = self.solution
        for m in range(len(sol)):
            write_nsf1(f"{directory}/{prefix}_{m:04d}.nsf", sol[m])


def _sup_norm(diff: np.ndarray, spec: GridSpec, norm) -> float:
    return max(norm(VectorField(spec, s)) for s in diff)


def _diverging(ratios: list[float]) -> bool:
    return len(ratios) >= 3 and all(r > 1 for r in ratios[-3:])


def _run_picard(u0: VectorField, cfg: SolverConfig) -> PicardState:
    spec = u0.spec
    tg = cfg.time_grid
    state = PicardState(horizon=cfg.T)
    u = TimeIndexedField.constant(u0, tg)
    state.iterates.append(u)
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        seed = cfg.seed if cfg.common_random_numbers else cfg.seed + 7919 * (it + 1)
        if cfg.scheme == "mc_drifted":
            proj, raw = apply_I_nu(u, cfg, seed)
        else:
            proj, raw = apply_I_prime_nu(u, cfg)
        new = proj.g
        diff = new.data - u.data
        res = _sup_norm(diff, spec, cfg.monitor_norm)
        res_full = _sup_norm(diff, spec, cfg.full_norm)
        dd = divergence_diagnostic(raw, cfg.p)
        state.iterates.append(new)
        state.residuals.append(res)
        state.residuals_full.append(res_full)
        if len(state.residuals) >= 2:
            prev = state.residuals[-2]
            state.contraction_ratios.append(res / prev if prev > 0 else 0.0)
        state.divergence_history.append(dd["sup"])
        state.divergence_stderr.append(dd["stderr_sup"])
        state.stderr_history.append(raw.stderr)
        state.wall_seconds.append(time.perf_counter() - t0)
        state.last_raw, state.last_projected = raw, proj
        log.info("picard iter %d: residual %.3e ratio %s div %.3e", it + 1, res,
                 f"{state.contraction_ratios[-1]:.3f}" if state.contraction_ratios else "-",
                 dd["sup"])
        u = new
        if res <= cfg.tol:
            state.status = "converged"
            return state
        if _diverging(state.contraction_ratios):
            state.status = "diverging"
            return state
    state.status = "max_iters"
    return state


def picard_solve(u0: VectorField, cfg: SolverConfig) -> PicardState:
    """Iterate the configured map from ``u_1(t) = u0``.

    A diverging run (three consecutive contraction ratios above 1, or the mild
    scheme's inner sweeps failing) is restarted on half the horizon, at most
    ``cfg.max_halvings`` times. If every attempt diverges the last state is
    returned with status ``failed``; ``attempts`` keeps every ratio history.
    """
    u0 = _check_u0(u0)
    attempts = []
    for k in range(cfg.max_halvings + 1):
        try:
            state = _run_picard(u0, cfg)
        except MildSweepDivergence as exc:
            log.warning("horizon %.4g: %s", cfg.T, exc)
            state = PicardState(status="diverging", horizon=cfg.T)
        attempts.append((cfg.T, state.status, list(state.contraction_ratios)))
        if state.status != "diverging":
            state.halvings = k
            state.attempts = attempts
            return state
        cfg = replace(cfg, T=cfg.T / 2)
    state.status = "failed"
    state.halvings = cfg.max_halvings
    state.attempts = attempts
    return state


# -- reference Navier-Stokes ----------------------------------------------------------

def reference_ns_solve(u0: VectorField, nu: float, time_grid: TimeGrid, substeps: int = 4,
                       cfl: float = 1.0) -> TimeIndexedField:
    """Dealiased pseudo-spectral Navier-Stokes (integrating-factor RK4).

    ``u_t = nu Lap u - P(u.grad u)``; ``nu = 0`` integrates Euler.
    """
    if nu < 0:
        raise ValueError("viscosity must be >= 0")
    spec = u0.spec
    d = spec.d
    h = time_grid.dt / substeps
    u = leray_array(u0.data, spec)
    umax = float(np.sqrt((u**2).sum(axis=0)).max())
    if umax * h / spec.h > cfl:
        raise ValueError(f"CFL number {umax * h / spec.h:.3g} exceeds {cfl}; raise substeps")
    E_half = np.exp(-nu * spec.k_squared * h / 2)

    def rhs_hat(t, w):
        return fft(-leray_array(advection_array(w, w, spec), spec), d)

    out = np.empty((time_grid.steps + 1, d) + spec.shape)
    out[0] = u
    uh = fft(u, d)
    t = time_grid.t0
    for m in range(time_grid.steps):
        for _ in range(substeps):
            uh = _if_rk4(uh, t, h, E_half, rhs_hat, d)
            t += h
        out[m + 1] = ifft(uh, d)
    return TimeIndexedField(spec, time_grid, out)


def taylor_green(spec: GridSpec, amplitude: float = 1.0) -> VectorField:
    """``(sin x1 cos x2, -cos x1 sin x2[, 0])`` scaled to the box."""
    c = spec.coordinates()
    k = 2 * np.pi / spec.box_length
    u = amplitude * np.sin(k * c[0]) * np.cos(k * c[1])
    v = -amplitude * np.cos(k * c[0]) * np.sin(k * c[1])
    comps = [u, v] + [np.zeros(spec.shape)] * (spec.d - 2)
    return VectorField(spec, np.stack(comps))


def relative_l2_error(a: TimeIndexedField, b: TimeIndexedField) -> float:
    """``sup_t ||a - b||_{L^2} / sup_t ||b||_{L^2}``."""
    diff = np.sqrt(((a.data - b.data) ** 2).reshape(len(a), -1).sum(1))
    ref = np.sqrt((b.data**2).reshape(len(b), -1).sum(1))
    return float(diff.max() / ref.max()) if ref.max() > 0 else float(diff.max())


def l2_per_time(a: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.sqrt(spec.cell_volume * (a**2).reshape(a.shape[0], -1).sum(1))
