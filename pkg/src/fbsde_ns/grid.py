"""Periodic grids and their field containers, with FFT and interpolation helpers.

Wavenumber layout follows ``numpy.fft.fftfreq``: along each axis the index
``j`` maps to the integer frequency ``m = j`` for ``j < n/2`` and
``m = j - n`` otherwise (so index ``n/2`` is the Nyquist mode, stored as
``-n/2``). The physical wavenumber is ``k = 2*pi*m / L``.

Fields are stored component-major: a vector field on an ``n^d`` grid is an
array of shape ``(d, n, ..., n)`` with axis ``i + 1`` holding coordinate
``x_i``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ._interp import multilinear_eval

__all__ = [
    "GridSpec",
    "TimeGrid",
    "ScalarField",
    "VectorField",
    "SpectralField",
    "dft_forward",
    "dft_inverse",
    "derivative",
    "divergence",
    "interpolate",
    "write_nsf1",
    "read_nsf1",
    "write_csv",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on the torus ``[0, L)^d``."""

    d: int
    n: int
    box_length: float = 2 * np.pi

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not self.box_length > 0:
            raise ValueError(f"box_length must be positive, got {self.box_length}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def h(self) -> float:
        return self.box_length / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def volume(self) -> float:
        return self.box_length**self.d

    @cached_property
    def frequencies(self) -> np.ndarray:
        """Integer frequencies per axis index (fftfreq order)."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n)

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Broadcastable physical wavenumbers ``k_i``, one array per axis."""
        k = 2 * np.pi / self.box_length * self.frequencies
        out = []
        for ax in range(self.d):
            shp = [1] * self.d
            shp[ax] = self.n
            out.append(k.reshape(shp))
        return tuple(out)

    @cached_property
    def odd_wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Wavenumbers with the Nyquist entry zeroed (odd-order derivatives)."""
        out = []
        for k in self.wavenumbers:
            k = k.copy()
            k.flat[self.n // 2] = 0.0
            out.append(k)
        return tuple(out)

    @cached_property
    def k_squared(self) -> np.ndarray:
        return sum(k**2 for k in self.wavenumbers)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keep modes with every ``|m_i| < n/3``."""
        keep = np.abs(self.frequencies) < self.n / 3
        mask = np.ones(self.shape, dtype=bool)
        for ax in range(self.d):
            shp = [1] * self.d
            shp[ax] = self.n
            mask = mask & keep.reshape(shp)
        return mask

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Meshgrid of node coordinates, ``indexing='ij'``."""
        x = np.arange(self.n) * self.h
        return tuple(np.meshgrid(*([x] * self.d), indexing="ij"))

    def nodes(self) -> np.ndarray:
        """All node coordinates as an ``(n^d, d)`` array in C order."""
        return np.stack([c.ravel() for c in self.coordinates()], axis=1)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need T > t0, got t0={self.t0}, T={self.T}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    def scaled(self, factor: float) -> "TimeGrid":
        """Same step count on a horizon multiplied by ``factor``."""
        return TimeGrid(self.t0, self.t0 + factor * self.horizon, self.steps)


def _check_finite(data: np.ndarray, what: str):
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what} has a non-finite sample at index {idx}")


@dataclass(frozen=True)
class ScalarField:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.spec.shape:
            raise ValueError(f"expected shape {self.spec.shape}, got {data.shape}")
        _check_finite(data, "ScalarField")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def mean(self) -> float:
        return float(self.data.mean())


@dataclass(frozen=True)
class VectorField:
    spec: GridSpec
    data: np.ndarray
    time_tag: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.spec.d,) + self.spec.shape:
            raise ValueError(
                f"expected shape {(self.spec.d,) + self.spec.shape}, got {data.shape}"
            )
        _check_finite(data, "VectorField")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, spec: GridSpec, time_tag=None) -> "VectorField":
        return cls(spec, np.zeros((spec.d,) + spec.shape), time_tag)

    @classmethod
    def constant(cls, spec: GridSpec, value, time_tag=None) -> "VectorField":
        value = np.asarray(value, dtype=float).reshape((spec.d,) + (1,) * spec.d)
        return cls(spec, np.broadcast_to(value, (spec.d,) + spec.shape).copy(), time_tag)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.spec, self.data[i])

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.spec, self.data + other.data, self.time_tag)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.spec, self.data - other.data, self.time_tag)

    def __mul__(self, a: float) -> "VectorField":
        return VectorField(self.spec, a * self.data, self.time_tag)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SpectralField:
    """Fourier coefficients ``c_k`` with ``f(x) = sum_k c_k exp(i k.x)``.

    ``coeffs`` has shape ``(ncomp, n, ..., n)``; ``scalar`` records whether the
    physical-space counterpart is a :class:`ScalarField`.
    """

    spec: GridSpec
    coeffs: np.ndarray
    scalar: bool = False
    time_tag: float | None = None

    def hermitian_defect(self) -> float:
        """Relative size of the anti-Hermitian part (0 for real fields)."""
        c = self.coeffs
        axes = tuple(range(1, c.ndim))
        mirrored = np.roll(np.flip(c, axis=axes), 1, axis=axes)
        scale = max(np.abs(c).max(), np.finfo(float).tiny)
        return float(np.abs(c - mirrored.conj()).max() / scale)


def dft_forward(f) -> SpectralField:
    """Forward DFT of a scalar or vector field (coefficients normalised by n^d)."""
    if isinstance(f, ScalarField):
        data, scalar, tag = f.data[None], True, None
    else:
        data, scalar, tag = f.data, False, f.time_tag
    _check_finite(data, "dft_forward input")
    axes = tuple(range(1, data.ndim))
    return SpectralField(f.spec, np.fft.fftn(data, axes=axes, norm="forward"), scalar, tag)


def dft_inverse(F: SpectralField):
    axes = tuple(range(1, F.coeffs.ndim))
    data = np.fft.ifftn(F.coeffs, axes=axes, norm="forward").real
    if F.scalar:
        return ScalarField(F.spec, data[0])
    return VectorField(F.spec, data, F.time_tag)


# -- array-level helpers shared by the other modules ------------------------

def fft(a: np.ndarray, d: int) -> np.ndarray:
    """FFT over the trailing ``d`` axes."""
    return np.fft.fftn(a, axes=tuple(range(a.ndim - d, a.ndim)))


def ifft(a: np.ndarray, d: int) -> np.ndarray:
    return np.fft.ifftn(a, axes=tuple(range(a.ndim - d, a.ndim))).real


def deriv_multiplier(spec: GridSpec, axis: int, order: int) -> np.ndarray:
    if order == 1:
        return 1j * spec.odd_wavenumbers[axis]
    if order == 2:
        return -spec.wavenumbers[axis] ** 2
    raise ValueError(f"order must be 1 or 2, got {order}")


def grad_array(a: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Spectral gradient; output gains a new axis right before the spatial ones."""
    ah = fft(a, spec.d)
    return np.stack(
        [ifft(ah * 1j * k, spec.d) for k in spec.odd_wavenumbers], axis=a.ndim - spec.d
    )


def div_array(a: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Spectral divergence of a ``(..., d, n, ..., n)`` array."""
    ah = fft(a, spec.d)
    lead = a.ndim - spec.d - 1
    out = sum(
        ah[(slice(None),) * lead + (i,)] * 1j * k for i, k in enumerate(spec.odd_wavenumbers)
    )
    return ifft(out, spec.d)


# -- public differential operators ------------------------------------------

def derivative(f, axis: int, order: int = 1):
    """``(d/dx_axis)^order`` applied as a Fourier multiplier.

    Exact on band-limited data. The Nyquist mode is dropped for ``order=1``.
    """
    spec = f.spec
    if not 0 <= axis < spec.d:
        raise ValueError(f"axis {axis} out of range for d={spec.d}")
    mult = deriv_multiplier(spec, axis, order)
    F = dft_forward(f)
    return dft_inverse(SpectralField(spec, F.coeffs * mult, F.scalar, F.time_tag))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.spec, div_array(v.data, v.spec))


# -- interpolation -----------------------------------------------------------

def interpolate(v, points, mode: str = "linear") -> np.ndarray:
    """Evaluate a grid field at arbitrary points.

    Parameters
    ----------
    v : VectorField or ScalarField
    points : array_like, shape (d,) or (P, d)
        Positions; wrapped into the periodic box before evaluation.
    mode : {"linear", "trig"}
        Multilinear interpolation or exact trigonometric (band-limited)
        evaluation. Both reproduce nodal values exactly.

    Returns
    -------
    ndarray of shape (ncomp,) or (P, ncomp); scalar fields give ncomp == 1
    squeezed away.
    """
    spec = v.spec
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != spec.d:
        raise ValueError(f"points must have {spec.d} coordinates")
    if np.isnan(pts).any():
        raise ValueError("NaN interpolation point")
    pts = np.mod(pts, spec.box_length)
    data = v.data[None] if isinstance(v, ScalarField) else v.data
    if mode == "linear":
        table = np.ascontiguousarray(data.reshape(data.shape[0], -1))
        out = multilinear_eval(table, pts, spec.n, spec.h)
    elif mode == "trig":
        out = _trig_eval(data, pts, spec)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if isinstance(v, ScalarField):
        out = out[:, 0]
    return out[0] if single else out


def _trig_eval(data: np.ndarray, pts: np.ndarray, spec: GridSpec) -> np.ndarray:
    coeffs = np.fft.fftn(data, axes=tuple(range(1, data.ndim)), norm="forward")
    k = 2 * np.pi / spec.box_length * spec.frequencies
    out = np.empty((pts.shape[0], data.shape[0]))
    chunk = max(1, 2**22 // spec.n**spec.d)
    for s in range(0, pts.shape[0], chunk):
        p = pts[s : s + chunk]
        phases = [np.exp(1j * np.outer(p[:, ax], k)) for ax in range(spec.d)]
        if spec.d == 2:
            val = np.einsum("cab,pa,pb->pc", coeffs, *phases, optimize=True)
        else:
            val = np.einsum("cabe,pa,pb,pe->pc", coeffs, *phases, optimize=True)
        out[s : s + chunk] = val.real
    return out


# -- file formats -------------------------------------------------------------

_NSF1_HEADER = struct.Struct("<4sIIdd")


def write_nsf1(path, v: VectorField):
    """Write the binary ``NSF1`` field format (little endian, component-major)."""
    tag = np.nan if v.time_tag is None else float(v.time_tag)
    with open(path, "wb") as fh:
        fh.write(_NSF1_HEADER.pack(b"NSF1", v.spec.d, v.spec.n, v.spec.box_length, tag))
        fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def read_nsf1(path) -> VectorField:
    raw = Path(path).read_bytes()
    magic, d, n, L, tag = _NSF1_HEADER.unpack_from(raw)
    if magic != b"NSF1":
        raise ValueError(f"{path}: bad magic {magic!r}")
    spec = GridSpec(d, n, L)
    count = d * n**d
    body = np.frombuffer(raw, dtype="<f8", offset=_NSF1_HEADER.size)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} samples, found {body.size}")
    tag = None if np.isnan(tag) else tag
    return VectorField(spec, body.reshape((d,) + spec.shape).copy(), tag)


def write_csv(path, v: VectorField):
    """CSV export for small grids: index columns then components."""
    spec = v.spec
    idx = np.indices(spec.shape).reshape(spec.d, -1).T
    vals = v.data.reshape(spec.d, -1).T
    names = [f"i{a}" for a in range(spec.d)] + [f"u{a}" for a in range(spec.d)]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for ij, uv in zip(idx, vals):
            fh.write(",".join(map(str, ij)) + "," + ",".join(repr(float(x)) for x in uv) + "\n")
