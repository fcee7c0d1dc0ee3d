"""Backward Lagrangian characteristics on the torus.

Three schemes share one time grid ``s_j = t + j dt``:

* ``drifted``: ``dX = sqrt(2 nu) dB - v(T - s, X) ds`` by Euler-Maruyama;
* ``brownian``: ``X_s = x + sqrt(2 nu) (B_s - B_t)``, drift ignored;
* ``deterministic``: ``dX = -v(T - s, X) ds`` by classical RK4 (``nu = 0``).

The drift is supplied on the forward grid ``tau_m = m dt`` (``m = 0..K``);
a path started at absolute step ``K - m`` reads slice ``m - j`` at its
``j``-th node. Grid times are therefore hit exactly; RK4 half steps average
two neighbouring slices. Brownian increments are drawn from the counter-based
generator keyed by (seed, point id, path, absolute step, component).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from . import rng
from ._interp import corner_weights
from .grid import GridSpec, ScalarField, TimeGrid, VectorField, fft, ifft, interpolate
from .spectral_ops import heat_array

__all__ = [
    "FlowScheme",
    "DriftTable",
    "PathEnsemble",
    "FlowGradient",
    "simulate",
    "flow_gradient",
    "jacobian_determinant",
    "bel_gradient",
    "write_pth1",
    "read_pth1",
]

SCHEMES = ("drifted", "brownian", "deterministic")
_SCHEME_CODE = {name: i for i, name in enumerate(SCHEMES)}


@dataclass(frozen=True)
class FlowScheme:
    kind: str

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown flow scheme {self.kind!r}")

    def check(self, nu: float):
        if self.kind == "deterministic" and nu != 0:
            raise ValueError("deterministic characteristics require nu = 0")
        if nu < 0:
            raise ValueError(f"viscosity must be >= 0, got {nu}")


def upsample(a: np.ndarray, spec: GridSpec, factor: int) -> np.ndarray:
    """Trigonometric resampling of ``a`` onto an ``n*factor`` grid, axis by axis.

    The Nyquist coefficient is split evenly between ``+n/2`` and ``-n/2`` so
    the result is the real trigonometric interpolant.
    """
    out = np.array(a, dtype=float)
    if factor == 1:
        return out
    n, nf, half = spec.n, spec.n * factor, spec.n // 2
    for ax in range(a.ndim - spec.d, a.ndim):
        c = np.fft.fft(out, axis=ax, norm="forward")
        shape = list(c.shape)
        shape[ax] = nf
        big = np.zeros(shape, dtype=complex)
        take = lambda sl: tuple(sl if i == ax else slice(None) for i in range(c.ndim))
        big[take(slice(0, half))] = c[take(slice(0, half))]
        big[take(slice(nf - half + 1, nf))] = c[take(slice(half + 1, n))]
        big[take(slice(half, half + 1))] = 0.5 * c[take(slice(half, half + 1))]
        big[take(slice(nf - half, nf - half + 1))] = 0.5 * c[take(slice(half, half + 1))]
        out = np.fft.ifft(big, axis=ax, norm="forward").real
    return out


@dataclass(frozen=True)
class DriftTable:
    """Time slices of a field prepared for fast interpolation.

    ``data`` has shape ``(K+1, ncomp, (n*refine)^d)``; slice ``m`` is the
    field at forward time ``m * dt``.
    """

    spec: GridSpec
    time_grid: TimeGrid
    data: np.ndarray
    refine: int = 1

    @classmethod
    def from_array(cls, arr: np.ndarray, spec: GridSpec, time_grid: TimeGrid, refine: int = 1):
        """``arr`` is ``(K+1, ncomp, n, ..., n)``."""
        arr = np.asarray(arr, dtype=float)
        if arr.shape[0] != time_grid.steps + 1:
            raise ValueError(
                f"field has {arr.shape[0]} time slices, time grid needs {time_grid.steps + 1}"
            )
        if not np.isfinite(arr).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite drift sample at index {bad}")
        fine = upsample(arr, spec, refine) if refine > 1 else arr
        flat = np.ascontiguousarray(fine.reshape(arr.shape[0], arr.shape[1], -1))
        return cls(spec, time_grid, flat, refine)

    @classmethod
    def constant_in_time(cls, v: VectorField, time_grid: TimeGrid, refine: int = 1):
        arr = np.broadcast_to(v.data, (time_grid.steps + 1,) + v.data.shape)
        return cls.from_array(arr, v.spec, time_grid, refine)

    @property
    def n_fine(self) -> int:
        return self.spec.n * self.refine

    @property
    def h_fine(self) -> float:
        return self.spec.box_length / self.n_fine

    @property
    def max_speed(self) -> float:
        return float(np.sqrt((self.data**2).sum(axis=1)).max())


def check_stability(table: DriftTable, dt: float):
    vmax = table.max_speed
    if vmax == 0:
        return
    bound = table.spec.h / (2 * vmax)
    if dt > bound * (1 + 1e-12):
        raise ValueError(f"time step {dt:.4g} exceeds the stability bound h/(2 max|v|) = {bound:.4g}")


# -- numba kernels ---------------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _eval(tab, sl, x, n, h, idx, wts, out):
    corner_weights(x, n, h, idx, wts)
    for c in range(out.shape[0]):
        acc = 0.0
        for k in range(idx.shape[0]):
            acc += wts[k] * tab[sl, c, idx[k]]
        out[c] = acc


@nb.njit(cache=True, inline="always")
def _eval_mid(tab, sl, x, n, h, idx, wts, out):
    """Average of slices ``sl`` and ``sl - 1`` (half-step time)."""
    corner_weights(x, n, h, idx, wts)
    for c in range(out.shape[0]):
        acc = 0.0
        for k in range(idx.shape[0]):
            acc += wts[k] * (tab[sl, c, idx[k]] + tab[sl - 1, c, idx[k]])
        out[c] = 0.5 * acc


@nb.njit(cache=True, inline="always")
def _wrap(x, L):
    for a in range(x.shape[0]):
        y = x[a]
        if y < 0.0 or y >= L:
            y = y % L
            x[a] = 0.0 if y >= L else y


@nb.njit(cache=True)
def _rk4_step(x, sl, dt, vtab, n, h, L, idx, wts, k1, k2, k3, k4, xt):
    """Classical RK4 for ``dX/ds = -v``, from slice ``sl`` to ``sl - 1``."""
    d = x.shape[0]
    _eval(vtab, sl, x, n, h, idx, wts, k1)
    for a in range(d):
        xt[a] = x[a] - 0.5 * dt * k1[a]
    _wrap(xt, L)
    _eval_mid(vtab, sl, xt, n, h, idx, wts, k2)
    for a in range(d):
        xt[a] = x[a] - 0.5 * dt * k2[a]
    _wrap(xt, L)
    _eval_mid(vtab, sl, xt, n, h, idx, wts, k3)
    for a in range(d):
        xt[a] = x[a] - dt * k3[a]
    _wrap(xt, L)
    _eval(vtab, sl - 1, xt, n, h, idx, wts, k4)
    for a in range(d):
        x[a] = x[a] - dt * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]) / 6.0
    _wrap(x, L)


# Stochastic steps are written out inside each kernel: numba does not inline
# a shared step function reliably and the call costs more than the step.

@nb.njit(cache=True)
def _simulate_kernel(pts, point_ids, m, dt, sigma, vtab, n, h, L, M, seed, step_offset, scheme):
    P, d = pts.shape
    pos = np.empty((P, M, m + 1, d))
    inc = np.zeros((P, M, m, d))
    sqdt = math.sqrt(dt)
    idx = np.empty(1 << d, dtype=np.int64)
    wts = np.empty(1 << d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    xt = np.empty(d)
    x = np.empty(d)
    for p in range(P):
        for path in range(M):
            pk = rng.path_key(seed, point_ids[p], path)
            for a in range(d):
                x[a] = pts[p, a]
            _wrap(x, L)
            pos[p, path, 0] = x
            for j in range(m):
                if scheme == 2:
                    _rk4_step(x, m - j, dt, vtab, n, h, L, idx, wts, k1, k2, k3, k4, xt)
                else:
                    skey = rng.step_key(pk, step_offset + j)
                    if scheme == 0:
                        _eval(vtab, m - j, x, n, h, idx, wts, k1)
                    else:
                        k1[:] = 0.0
                    for a in range(d):
                        db = sqdt * rng.normal(skey, a)
                        inc[p, path, j, a] = db
                        if scheme == 0:
                            x[a] = x[a] - k1[a] * dt + sigma * db
                        else:
                            x[a] = x[a] + sigma * db
                    _wrap(x, L)
                pos[p, path, j + 1] = x
    return pos, inc


@nb.njit(cache=True)
def expectation_kernel(pts, point_ids, m, dt, sigma, vtab, ftab, u0tab, n, h, L, M, seed,
                       step_offset, scheme):
    """Per point: mean and variance over paths of
    ``u0(X_T) + int_t^T F(T - s, X_s) ds`` (trapezoid on the path grid).

    ``vtab`` and ``ftab`` must share their grid; ``u0tab`` is a one-slice table.
    """
    P, d = pts.shape
    nc = u0tab.shape[1]
    mean = np.zeros((P, nc))
    var = np.zeros((P, nc))
    sqdt = math.sqrt(dt)
    idx = np.empty(1 << d, dtype=np.int64)
    wts = np.empty(1 << d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    xt = np.empty(d)
    x = np.empty(d)
    acc = np.empty(nc)
    shift = np.empty(nc)
    s1 = np.empty(nc)
    s2 = np.empty(nc)
    ncorner = 1 << d
    for p in range(P):
        for c in range(nc):
            s1[c] = 0.0
            s2[c] = 0.0
        for path in range(M):
            pk = rng.path_key(seed, point_ids[p], path)
            for a in range(d):
                x[a] = pts[p, a]
            _wrap(x, L)
            for c in range(nc):
                acc[c] = 0.0
            for j in range(m):
                sl = m - j
                w = 0.5 * dt if j == 0 else dt
                corner_weights(x, n, h, idx, wts)
                for c in range(nc):
                    f = 0.0
                    for k in range(ncorner):
                        f += wts[k] * ftab[sl, c, idx[k]]
                    acc[c] += w * f
                if scheme == 2:
                    _rk4_step(x, sl, dt, vtab, n, h, L, idx, wts, k1, k2, k3, k4, xt)
                    continue
                skey = rng.step_key(pk, step_offset + j)
                for a in range(d):
                    drift = 0.0
                    if scheme == 0:
                        for k in range(ncorner):
                            drift += wts[k] * vtab[sl, a, idx[k]]
                    y = x[a] - drift * dt + sigma * sqdt * rng.normal(skey, a)
                    if y < 0.0 or y >= L:
                        y = y % L
                        if y >= L:
                            y = 0.0
                    x[a] = y
            corner_weights(x, n, h, idx, wts)
            for c in range(nc):
                f = 0.0
                u = 0.0
                for k in range(ncorner):
                    f += wts[k] * ftab[0, c, idx[k]]
                    u += wts[k] * u0tab[0, c, idx[k]]
                y = u + (acc[c] + 0.5 * dt * f if m > 0 else 0.0)
                if path == 0:
                    shift[c] = y
                y -= shift[c]
                s1[c] += y
                s2[c] += y * y
        for c in range(nc):
            mu = s1[c] / M
            mean[p, c] = shift[c] + mu
            var[p, c] = max(s2[c] / M - mu * mu, 0.0) * M / max(M - 1, 1)
    return mean, var


@nb.njit(cache=True)
def _gradient_kernel(pos, m, dt, gtab, n, h, L):
    """RK4 for ``dJ/ds = -Dv(T - s, X_s) J`` along frozen paths, ``J_t = I``."""
    P, M, _, d = pos.shape
    out = np.empty((P, M, m + 1, d, d))
    idx = np.empty(1 << d, dtype=np.int64)
    wts = np.empty(1 << d)
    a0 = np.empty(d * d)
    am = np.empty(d * d)
    a1 = np.empty(d * d)
    xm = np.empty(d)
    J = np.empty((d, d))
    K1 = np.empty((d, d))
    K2 = np.empty((d, d))
    K3 = np.empty((d, d))
    K4 = np.empty((d, d))
    T = np.empty((d, d))
    for p in range(P):
        for path in range(M):
            J[:, :] = 0.0
            for a in range(d):
                J[a, a] = 1.0
            out[p, path, 0] = J
            for j in range(m):
                x0 = pos[p, path, j]
                x1 = pos[p, path, j + 1]
                for a in range(d):
                    dx = x1[a] - x0[a]
                    dx -= L * np.round(dx / L)
                    xm[a] = x0[a] + 0.5 * dx
                _wrap(xm, L)
                _eval(gtab, m - j, x0, n, h, idx, wts, a0)
                _eval_mid(gtab, m - j, xm, n, h, idx, wts, am)
                _eval(gtab, m - j - 1, x1, n, h, idx, wts, a1)
                _matmul_neg(a0, J, K1, d)
                for a in range(d):
                    for b in range(d):
                        T[a, b] = J[a, b] + 0.5 * dt * K1[a, b]
                _matmul_neg(am, T, K2, d)
                for a in range(d):
                    for b in range(d):
                        T[a, b] = J[a, b] + 0.5 * dt * K2[a, b]
                _matmul_neg(am, T, K3, d)
                for a in range(d):
                    for b in range(d):
                        T[a, b] = J[a, b] + dt * K3[a, b]
                _matmul_neg(a1, T, K4, d)
                for a in range(d):
                    for b in range(d):
                        J[a, b] += dt * (K1[a, b] + 2 * K2[a, b] + 2 * K3[a, b] + K4[a, b]) / 6
                out[p, path, j + 1] = J
    return out


@nb.njit(cache=True, inline="always")
def _matmul_neg(A, B, out, d):
    for a in range(d):
        for b in range(d):
            s = 0.0
            for c in range(d):
                s += A[a * d + c] * B[c, b]
            out[a, b] = -s


# -- public API -------------------------------------------------------------------

@dataclass(frozen=True)
class PathEnsemble:
    """Stored characteristics.

    ``positions`` has shape ``(P, M, steps+1, d)`` (wrapped into the box),
    ``increments`` the Brownian increments ``(P, M, steps, d)`` (zero for the
    deterministic scheme). ``start_step`` is the absolute index of ``t`` on
    ``time_grid``.
    """

    scheme: str
    nu: float
    time_grid: TimeGrid
    start_step: int
    positions: np.ndarray
    increments: np.ndarray
    seed: int
    spec: GridSpec

    @property
    def M(self) -> int:
        return self.positions.shape[1]

    @property
    def steps(self) -> int:
        return self.positions.shape[2] - 1

    @property
    def s_times(self) -> np.ndarray:
        return self.time_grid.times[self.start_step :]


@dataclass(frozen=True)
class FlowGradient:
    """``D X_s^t`` per (point, path, step); shape ``(P, M, steps+1, d, d)``."""

    matrices: np.ndarray


def _as_table(v, spec_tg: TimeGrid, refine=1) -> DriftTable:
    if isinstance(v, DriftTable):
        return v
    if isinstance(v, VectorField):
        return DriftTable.constant_in_time(v, spec_tg, refine)
    if hasattr(v, "data") and hasattr(v, "time_grid"):
        return DriftTable.from_array(v.data, v.spec, v.time_grid, refine)
    raise TypeError(f"cannot use {type(v).__name__} as a drift")


def _point_ids(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.arange(points.shape[0], dtype=np.int64)


def simulate(v, scheme: str, nu: float, start_points, time_grid: TimeGrid, M: int, seed: int,
             start_step: int = 0, point_ids=None) -> PathEnsemble:
    """Simulate ``M`` characteristics per start point from ``t = times[start_step]`` to ``T``.

    ``v`` is a :class:`~fbsde_ns.solver.TimeIndexedField`, a
    :class:`DriftTable` or a time-independent :class:`VectorField`.
    """
    sch = FlowScheme(scheme)
    sch.check(nu)
    table = _as_table(v, time_grid)
    if table.time_grid.steps != time_grid.steps or not np.isclose(table.time_grid.dt, time_grid.dt):
        raise ValueError("drift and path time grids differ")
    pts = np.atleast_2d(np.asarray(start_points, dtype=float))
    if pts.shape[1] != table.spec.d:
        raise ValueError(f"start points need {table.spec.d} coordinates")
    if np.isnan(pts).any():
        raise ValueError("NaN start point")
    if scheme != "brownian":
        check_stability(table, time_grid.dt)
    m = time_grid.steps - start_step
    if not 0 <= m <= time_grid.steps:
        raise ValueError(f"start_step {start_step} outside the time grid")
    ids = _point_ids(pts, table.spec) if point_ids is None else np.asarray(point_ids, np.int64)
    pos, inc = _simulate_kernel(
        pts, ids, m, time_grid.dt, math.sqrt(2 * nu), table.data, table.n_fine,
        table.h_fine, table.spec.box_length, M, seed, start_step, _SCHEME_CODE[scheme],
    )
    return PathEnsemble(scheme, nu, time_grid, start_step, pos, inc, seed, table.spec)


def gradient_table(v, time_grid: TimeGrid) -> DriftTable:
    """Slices of ``Dv`` flattened row-major (entry ``a*d + b`` is ``d_b v^a``)."""
    if isinstance(v, VectorField):
        arr = np.broadcast_to(v.data, (time_grid.steps + 1,) + v.data.shape)
        spec = v.spec
    else:
        arr, spec = v.data, v.spec
    d = spec.d
    vh = fft(arr, d)
    grads = np.stack(
        [ifft(vh[:, a] * 1j * spec.odd_wavenumbers[b], d) for a in range(d) for b in range(d)],
        axis=1,
    )
    return DriftTable.from_array(grads, spec, time_grid)


def flow_gradient(v, ensemble: PathEnsemble) -> FlowGradient:
    """Integrate ``d DX = -Dv(T - s, X) DX ds`` along the stored paths (RK4)."""
    tg = ensemble.time_grid
    if hasattr(v, "time_grid") and not isinstance(v, VectorField):
        if v.time_grid.steps != tg.steps or not np.isclose(v.time_grid.dt, tg.dt):
            raise ValueError("drift and ensemble time grids differ")
    if ensemble.scheme == "brownian":
        P, M, S, d = ensemble.positions.shape
        return FlowGradient(np.broadcast_to(np.eye(d), (P, M, S, d, d)).copy())
    gt = gradient_table(v, tg)
    mats = _gradient_kernel(ensemble.positions, ensemble.steps, tg.dt, gt.data,
                            gt.n_fine, gt.h_fine, gt.spec.box_length)
    return FlowGradient(mats)


def jacobian_determinant(g: FlowGradient) -> np.ndarray:
    return np.linalg.det(g.matrices)


def bel_gradient(f, x, t: float, s: float, nu: float, M: int, seed: int, steps: int = 1,
                 mode: str = "trig", point_id: int = 0):
    """Bismut-Elworthy-Li estimate of ``grad_x E[f(x + sqrt(2 nu)(B_s - B_t))]``.

    ``f`` is a :class:`ScalarField` (evaluated with ``interpolate``) or a
    callable on an ``(M, d)`` array of unwrapped positions. Returns the
    estimate and its per-component standard error.
    """
    if nu <= 0:
        raise ValueError("the BEL weight needs nu > 0")
    if not s > t:
        raise ValueError("the BEL weight is singular at s = t")
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    z = rng.normals(seed, np.array([point_id], dtype=np.int64), M, steps, 0, d)[0]
    dB = math.sqrt((s - t) / steps) * z.sum(axis=1)
    X = x + math.sqrt(2 * nu) * dB
    if isinstance(f, ScalarField):
        vals = interpolate(f, X, mode=mode)
    else:
        vals = np.asarray(f(X), dtype=float)
    w = vals[:, None] * dB / (math.sqrt(2 * nu) * (s - t))
    return w.mean(axis=0), w.std(axis=0, ddof=1) / math.sqrt(M)


def heat_gradient_oracle(f: ScalarField, x, nu: float, tau: float) -> np.ndarray:
    """Spectral gradient of ``exp(tau nu Laplacian) f`` at ``x`` (exact evaluation)."""
    spec = f.spec
    hf = heat_array(f.data, spec, nu * tau)
    grads = np.stack([ifft(fft(hf, spec.d) * 1j * k, spec.d) for k in spec.odd_wavenumbers])
    return interpolate(VectorField(spec, grads), x, mode="trig")


# -- ensemble dump ----------------------------------------------------------------

def write_pth1(path, ens: PathEnsemble):
    """Binary ``PTH1``: magic, u32 scheme code, u32 M, u32 steps, u64 seed,
    u32 P, u32 d, then positions as little-endian f64 in (P, M, steps+1, d) order."""
    P, M, S, d = ens.positions.shape
    with open(path, "wb") as fh:
        fh.write(b"PTH1")
        fh.write(np.array([_SCHEME_CODE[ens.scheme], M, S - 1], dtype="<u4").tobytes())
        fh.write(np.array([ens.seed], dtype="<u8").tobytes())
        fh.write(np.array([P, d], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(ens.positions, dtype="<f8").tobytes())


def read_pth1(path) -> dict:
    raw = open(path, "rb").read()
    if raw[:4] != b"PTH1":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    code, M, steps = np.frombuffer(raw, "<u4", 3, 4)
    seed = int(np.frombuffer(raw, "<u8", 1, 16)[0])
    P, d = np.frombuffer(raw, "<u4", 2, 24)
    pos = np.frombuffer(raw, "<f8", offset=32).reshape(P, M, steps + 1, d)
    return {"scheme": SCHEMES[code], "M": int(M), "steps": int(steps), "seed": seed,
            "positions": pos.copy()}
