"""Sobolev and Besov norms of grid fields on the periodic box (L^p included).

The Besov seminorm integrates ``||D^k v(. + y) - D^k v||_{L^p}`` against
``|y|^{-(d + alpha q)}`` over ``0 < |y| <= L/2``. Shifts beyond half a period
wrap around the torus, so the integral is truncated there. The radial
variable is handled in ``log |y|`` with Gauss-Legendre nodes; the innermost
piece ``|y| < y_min`` uses the first-order expansion
``D^k v(x + y) - D^k v(x) ~ (y . grad) D^k v(x)``, integrated exactly.
Shifted fields are produced by an exact Fourier phase shift, so ``y`` does not
have to be a grid vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.stats import qmc

from .grid import GridSpec, ScalarField, VectorField, fft, ifft

__all__ = [
    "BesovIndex",
    "SeminormQuadrature",
    "lp_norm",
    "sobolev_norm",
    "besov_seminorm",
    "besov_norm",
    "smoothness_norm",
    "embedding_exponent",
    "interpolation_diagnostic",
    "write_norm_csv",
]


@dataclass(frozen=True)
class BesovIndex:
    """Exponents of ``B^{k+alpha}_{p,q}``; ``q = inf`` selects the sup form."""

    p: float
    q: float
    k: int
    alpha: float

    def __post_init__(self):
        if not self.p > 1 or math.isinf(self.p):
            raise ValueError(f"p must lie in (1, inf), got {self.p}")
        if not self.q >= 1:
            raise ValueError(f"q must lie in [1, inf], got {self.q}")
        if self.k not in (0, 1, 2):
            raise ValueError(f"k must be 0, 1 or 2, got {self.k}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie strictly in (0, 1), got {self.alpha}")

    @property
    def r(self) -> float:
        return self.k + self.alpha

    @classmethod
    def from_smoothness(cls, r: float, p: float, q: float | None = None) -> "BesovIndex":
        k = int(math.floor(r))
        return cls(p, p if q is None else q, k, r - k)


@dataclass(frozen=True)
class SeminormQuadrature:
    """Shift set for the seminorm: log-radial shells times directions.

    ``directions=None`` selects the axis plus diagonal set (``2d + 2^d``
    directions) at ``direction_factor == 1`` and a uniform set that many
    times larger otherwise. ``y_min=None`` means one grid cell.

    Shifts longer than ``L/2`` repeat periodically; their contribution is
    taken as the torus average of the integrand (estimated on
    ``tail_shifts`` Halton shifts, exact when ``p = q = 2``) times the
    radial weight beyond ``L/2``. ``tail_shifts=0`` truncates at ``L/2``.
    """

    radial_nodes: int = 16
    directions: int | None = None
    y_min: float | None = None
    direction_factor: int = 1
    tail_shifts: int = 32

    def __post_init__(self):
        if self.radial_nodes < 4:
            raise ValueError(f"need at least 4 radial shells, got {self.radial_nodes}")

    def refined(self, factor: int = 4) -> "SeminormQuadrature":
        if self.directions is None:
            return replace(self, radial_nodes=self.radial_nodes * factor,
                           direction_factor=self.direction_factor * factor)
        return replace(self, radial_nodes=self.radial_nodes * factor,
                       directions=self.directions * factor)

    @property
    def label(self) -> str:
        dirs = "auto" if self.directions is None else str(self.directions)
        return f"r{self.radial_nodes}-d{dirs}x{self.direction_factor}"

    def direction_set(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions and averaging weights (weights sum to 1)."""
        if self.directions is None:
            count = (2 * d + 2**d) * self.direction_factor
            return _directions(d, count, self.direction_factor == 1)
        return _directions(d, self.directions, False)

    def shells(self, spec: GridSpec) -> tuple[np.ndarray, np.ndarray, float]:
        y_min = spec.h if self.y_min is None else self.y_min
        if y_min < spec.h * (1 - 1e-12):
            raise ValueError(f"y_min={y_min} is below the grid spacing {spec.h}")
        y_max = spec.box_length / 2
        x, w = np.polynomial.legendre.leggauss(self.radial_nodes)
        a, b = math.log(y_min), math.log(y_max)
        u = 0.5 * (b - a) * x + 0.5 * (b + a)
        return np.exp(u), 0.5 * (b - a) * w, y_min


@lru_cache(maxsize=None)
def _directions(d: int, count: int, axis_diag: bool):
    if axis_diag:
        axes = np.concatenate([np.eye(d), -np.eye(d)])
        corners = np.array(np.meshgrid(*([[-1.0, 1.0]] * d), indexing="ij")).reshape(d, -1).T
        corners /= math.sqrt(d)
        dirs = np.concatenate([axes, corners])
        if d == 2:
            w = np.full(len(dirs), 1.0 / len(dirs))
        else:
            # degree-5 spherical rule on octahedron + cube vertices
            w = np.concatenate([np.full(6, 1 / 15), np.full(8, 3 / 40)])
        return dirs, w
    if d == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(count, 1.0 / count)
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    th = np.pi * (1 + 5**0.5) * i
    dirs = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    return dirs, np.full(count, 1.0 / count)


def _sphere_area(d: int) -> float:
    return 2 * np.pi if d == 2 else 4 * np.pi


# -- helpers --------------------------------------------------------------------

def _as_array(f):
    if isinstance(f, (ScalarField, VectorField)):
        data = f.data[None] if isinstance(f, ScalarField) else f.data
        return data, f.spec
    raise TypeError(f"expected a grid field, got {type(f).__name__}")


def _lp_of_tensor(a: np.ndarray, spec: GridSpec, p: float) -> float:
    """L^p norm of the pointwise Frobenius magnitude of ``a`` (leading axes = tensor)."""
    lead = tuple(range(a.ndim - spec.d))
    mag2 = np.sum(a * a, axis=lead) if lead else a * a
    if p == 2:
        return float(math.sqrt(spec.cell_volume * mag2.sum()))
    return float((spec.cell_volume * np.sum(mag2 ** (p / 2))) ** (1 / p))


def derivative_tensor(a: np.ndarray, spec: GridSpec, order: int) -> np.ndarray:
    """Stack of ``D^order a``; derivative axes are prepended."""
    ah = fft(a, spec.d)
    for _ in range(order):
        ah = np.stack([ah * 1j * k for k in spec.odd_wavenumbers])
    return ifft(ah, spec.d) if order else a


def _derivative_hat(a: np.ndarray, spec: GridSpec, order: int) -> np.ndarray:
    ah = np.fft.fftn(a, axes=tuple(range(a.ndim - spec.d, a.ndim)), norm="forward")
    for _ in range(order):
        ah = np.stack([ah * 1j * k for k in spec.odd_wavenumbers])
    return ah


# -- norms ------------------------------------------------------------------------

def lp_norm(f, p: float) -> float:
    """``(h^d sum |f|^p)^(1/p)``; vector fields use the pointwise Euclidean length."""
    data, spec = _as_array(f)
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    return _lp_of_tensor(data, spec, p)


def sobolev_norm(v, k: int, p: float) -> float:
    """``sum_{i<=k} ||D^i v||_{L^p}`` with Frobenius magnitudes, spectral derivatives."""
    if k not in (0, 1, 2):
        raise ValueError(f"Sobolev order {k} unsupported (only 0, 1, 2)")
    data, spec = _as_array(v)
    return sum(_lp_of_tensor(derivative_tensor(data, spec, i), spec, p) for i in range(k + 1))


def _shift_norms(ah: np.ndarray, spec: GridSpec, shifts: np.ndarray, p: float) -> np.ndarray:
    """``||f(. + y) - f||_{L^p}`` for every row ``y`` of ``shifts``."""
    ks = spec.wavenumbers
    out = np.empty(len(shifts))
    if p == 2:
        power = np.sum(np.abs(ah) ** 2, axis=tuple(range(ah.ndim - spec.d)))
        for s, y in enumerate(shifts):
            phase = sum(k * yi for k, yi in zip(ks, y))
            out[s] = math.sqrt(spec.volume * np.sum(power * np.abs(np.exp(1j * phase) - 1) ** 2))
        return out
    axes = tuple(range(ah.ndim - spec.d, ah.ndim))
    for s, y in enumerate(shifts):
        phase = sum(k * yi for k, yi in zip(ks, y))
        diff = np.fft.ifftn(ah * (np.exp(1j * phase) - 1), axes=axes, norm="forward").real
        out[s] = _lp_of_tensor(diff, spec, p)
    return out


def besov_seminorm(v, idx: BesovIndex, quad: SeminormQuadrature | None = None) -> float:
    quad = SeminormQuadrature() if quad is None else quad
    data, spec = _as_array(v)
    d = spec.d
    ah = _derivative_hat(data, spec, idx.k)
    dirs, dw = quad.direction_set(d)
    radii, rw, y_min = quad.shells(spec)
    shifts = (radii[:, None, None] * dirs[None]).reshape(-1, d)
    norms = _shift_norms(ah, spec, shifts, idx.p).reshape(len(radii), len(dirs))
    if math.isinf(idx.q):
        return float(np.max(norms / radii[:, None] ** idx.alpha))
    q, a = idx.q, idx.alpha
    shell = (norms**q) @ dw
    outer = np.sum(rw * radii ** (-a * q) * shell)
    # directional derivatives for the |y| < y_min piece
    grads = np.stack([ah * 1j * k for k in spec.odd_wavenumbers])
    dd = np.tensordot(dirs, grads, axes=(1, 0))
    axes = tuple(range(dd.ndim - 1 - d, dd.ndim - 1))
    dnorm = np.array(
        [_lp_of_tensor(np.fft.ifftn(g, axes=axes, norm="forward").real, spec, idx.p) for g in dd]
        if idx.p != 2
        else [
            math.sqrt(spec.volume * np.sum(np.abs(g) ** 2)) for g in dd
        ]
    )
    inner = y_min ** (q * (1 - a)) / (q * (1 - a)) * ((dnorm**q) @ dw)
    tail = 0.0
    if quad.tail_shifts:
        R = spec.box_length / 2
        tail = R ** (-a * q) / (a * q) * _torus_mean(ah, spec, idx.p, q, quad.tail_shifts)
    return float((_sphere_area(d) * (outer + inner + tail)) ** (1 / q))


def _torus_mean(ah: np.ndarray, spec: GridSpec, p: float, q: float, count: int) -> float:
    """Average of ``||f(. + y) - f||_{L^p}^q`` over shifts ``y`` uniform on the torus."""
    if p == 2 and q == 2:
        c = ah.copy()
        c[(Ellipsis,) + (0,) * spec.d] = 0
        return 2 * spec.volume * float(np.sum(np.abs(c) ** 2))
    pts = _halton(spec.d, count) * spec.box_length
    return float(np.mean(_shift_norms(ah, spec, pts, p) ** q))


@lru_cache(maxsize=None)
def _halton(d: int, count: int) -> np.ndarray:
    return qmc.Halton(d, scramble=False).random(count + 1)[1:]


def besov_norm(v, idx: BesovIndex, quad: SeminormQuadrature | None = None) -> float:
    """``||v||_{W^{k,p}} + [v]_{B^{k+alpha}_{p,q}}``."""
    return sobolev_norm(v, idx.k, idx.p) + besov_seminorm(v, idx, quad)


def smoothness_norm(v, r: float, p: float, q: float | None = None, quad=None) -> float:
    """Besov norm of smoothness ``r``; integer ``r`` falls back to ``W^{r,p}``."""
    if abs(r - round(r)) < 1e-12:
        return sobolev_norm(v, int(round(r)), p)
    return besov_norm(v, BesovIndex.from_smoothness(r, p, q), quad)


def embedding_exponent(p: float, alpha: float, d: int) -> float:
    """Hoelder exponent ``r(p)`` of the embedding ``B^{2+alpha}_{p,q} -> C^{1,r(p)}``.

    In the borderline case ``1 + alpha - d/p == 1`` any value in ``(alpha, 1)``
    is admissible; we return the midpoint ``(alpha + 1) / 2``.
    """
    if p <= d:
        raise ValueError(f"need p > d, got p={p}, d={d}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    e = 1 + alpha - d / p
    if math.isclose(e, 1.0, rel_tol=0, abs_tol=1e-12):
        return (alpha + 1) / 2
    return min(e, 1.0)


def interpolation_diagnostic(v, idx_low: BesovIndex, idx_mid: BesovIndex, idx_high: BesovIndex,
                             quad=None) -> dict:
    """Ratio ``||v||_mid / (||v||_low^theta ||v||_high^(1-theta))``.

    ``theta = (r_high - r_mid) / (r_high - r_low)`` matches the exponents of
    the interpolation inequality; a zero field gives ratio 0.
    """
    if not (idx_low.p == idx_mid.p == idx_high.p and idx_low.q == idx_mid.q == idx_high.q):
        raise ValueError("interpolation indices must share p and q")
    if not idx_low.r < idx_mid.r < idx_high.r:
        raise ValueError("need r_low < r_mid < r_high")
    theta = (idx_high.r - idx_mid.r) / (idx_high.r - idx_low.r)
    lo, mid, hi = (besov_norm(v, i, quad) for i in (idx_low, idx_mid, idx_high))
    denom = lo**theta * hi ** (1 - theta)
    ratio = 0.0 if denom == 0 else mid / denom
    return {"theta": theta, "low": lo, "mid": mid, "high": hi, "ratio": ratio}


def write_norm_csv(path, rows):
    """Rows of ``(field_id, p, q, r, value, quadrature_id)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field_id", "p", "q", "r", "value", "quadrature_id"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:5]] + [row[5]])
