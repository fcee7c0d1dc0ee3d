"""Pressure source, Newton potential, pressure gradient, Leray projection and
heat semigroup, all as exact Fourier multipliers on the periodic grid.

Zero-mode conventions: the Newton potential discards the mean of its input
(Poisson problem solvable only for mean-zero data); the Leray projection
passes the mean through unchanged (constants are divergence free).

Every function here has an ``*_array`` twin working on raw arrays of shape
``(..., d, n, ..., n)`` so the solvers can avoid wrapping time series in
field objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    GridSpec,
    ScalarField,
    VectorField,
    fft,
    grad_array,
    ifft,
)

__all__ = [
    "MultiplierOp",
    "nonlinear_source",
    "newton_potential",
    "pressure_gradient",
    "leray_project",
    "heat_semigroup",
    "advection",
]


@dataclass(frozen=True)
class MultiplierOp:
    """Symbol of a Fourier multiplier on a given grid.

    ``kind`` is one of ``inverse_laplacian``, ``leray``, ``heat`` (with
    ``nu_t`` the product of viscosity and duration) or
    ``gradient_of_inverse_laplacian``.
    """

    kind: str
    zero_mode_rule: str = "zero"
    nu_t: float = 0.0

    def symbol(self, spec: GridSpec) -> np.ndarray:
        k2 = spec.k_squared
        if self.kind == "inverse_laplacian":
            with np.errstate(divide="ignore"):
                m = np.where(k2 > 0, -1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
            if self.zero_mode_rule == "identity":
                m.flat[0] = 1.0
            return m
        if self.kind == "heat":
            if self.nu_t < 0:
                raise ValueError("heat multiplier needs nu*t >= 0")
            return np.exp(-self.nu_t * k2)
        if self.kind == "leray":
            return _leray_symbol(spec)
        if self.kind == "gradient_of_inverse_laplacian":
            inv = MultiplierOp("inverse_laplacian").symbol(spec)
            return np.stack([1j * k * inv for k in spec.odd_wavenumbers])
        raise ValueError(f"unknown multiplier kind {self.kind!r}")


# When a test needs a broken projector it swaps this hook.
_LERAY_FAULT = {"scale": 1.0}


def _leray_symbol(spec: GridSpec) -> np.ndarray:
    """``I - k k^T / |k|^2`` built from Nyquist-free wavenumbers.

    Using the same wavenumbers as the first-derivative multiplier makes the
    discrete projector exactly idempotent and exactly divergence free.
    """
    ks = spec.odd_wavenumbers
    d = spec.d
    ks = [np.broadcast_to(k, spec.shape) for k in ks]
    kt2 = sum(k**2 for k in ks)
    safe = np.where(kt2 > 0, kt2, 1.0)
    P = np.empty((d, d) + spec.shape)
    for i in range(d):
        for j in range(d):
            P[i, j] = (i == j) - np.where(kt2 > 0, ks[i] * ks[j] / safe, 0.0)
    return P * _LERAY_FAULT["scale"] + (1 - _LERAY_FAULT["scale"]) * np.eye(d).reshape(
        (d, d) + (1,) * d
    )


# -- array kernels -------------------------------------------------------------

def dealias_product(a: np.ndarray, b: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Pointwise ``a*b`` with both factors and the result 2/3-truncated."""
    mask = spec.dealias_mask
    a_t = ifft(fft(a, spec.d) * mask, spec.d)
    b_t = ifft(fft(b, spec.d) * mask, spec.d)
    return ifft(fft(a_t * b_t, spec.d) * mask, spec.d)


def nonlinear_source_array(v: np.ndarray, spec: GridSpec) -> np.ndarray:
    """``G_v = sum_ij d_i v^j d_j v^i`` for ``v`` of shape ``(..., d, n..)``."""
    d = spec.d
    mask = spec.dealias_mask
    vh = fft(v, d) * mask
    lead = v.ndim - d - 1
    grads = {}
    for i in range(d):
        for j in range(d):
            # grads[i, j] = d_i v^j
            grads[i, j] = ifft(vh[(slice(None),) * lead + (j,)] * 1j * spec.odd_wavenumbers[i], d)
    prod = sum(grads[i, j] * grads[j, i] for i in range(d) for j in range(d))
    return ifft(fft(prod, d) * mask, d)


def newton_potential_array(f: np.ndarray, spec: GridSpec) -> np.ndarray:
    return ifft(fft(f, spec.d) * MultiplierOp("inverse_laplacian").symbol(spec), spec.d)


def pressure_gradient_array(v: np.ndarray, spec: GridSpec) -> np.ndarray:
    """``F_v = grad N G_v``; output shape matches ``v``."""
    G = nonlinear_source_array(v, spec)
    return grad_array(newton_potential_array(G, spec), spec)


def leray_array(v: np.ndarray, spec: GridSpec) -> np.ndarray:
    d = spec.d
    P = _leray_symbol(spec)
    vh = fft(v, d)
    lead = v.ndim - d - 1
    out = np.empty_like(vh)
    for i in range(d):
        acc = 0
        for j in range(d):
            acc = acc + P[i, j] * vh[(slice(None),) * lead + (j,)]
        out[(slice(None),) * lead + (i,)] = acc
    return ifft(out, d)


def heat_array(v: np.ndarray, spec: GridSpec, nu_t: float) -> np.ndarray:
    if nu_t < 0:
        raise ValueError(f"heat semigroup needs nu*t >= 0, got {nu_t}")
    if nu_t == 0:
        return np.array(v, dtype=float, copy=True)
    return ifft(fft(v, spec.d) * np.exp(-nu_t * spec.k_squared), spec.d)


def advection_array(v: np.ndarray, g: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Dealiased ``(v . grad) g`` for vector fields ``v``, ``g``."""
    d = spec.d
    mask = spec.dealias_mask
    lead = v.ndim - d - 1
    sl = (slice(None),) * lead
    vt = ifft(fft(v, d) * mask, d)
    gh = fft(g, d) * mask
    out = np.zeros_like(g)
    for j in range(d):
        dg = ifft(gh * 1j * spec.odd_wavenumbers[j], d)
        out = out + vt[sl + (j,)][(slice(None),) * lead + (None,)] * dg
    return ifft(fft(out, d) * mask, d)


# -- field-level API -----------------------------------------------------------

def nonlinear_source(v: VectorField) -> ScalarField:
    return ScalarField(v.spec, nonlinear_source_array(v.data, v.spec))


def newton_potential(f: ScalarField) -> ScalarField:
    """Zero-mean inverse Laplacian: ``Laplacian(N f) = f - mean(f)``."""
    return ScalarField(f.spec, newton_potential_array(f.data, f.spec))


def pressure_gradient(v: VectorField) -> VectorField:
    return VectorField(v.spec, pressure_gradient_array(v.data, v.spec), v.time_tag)


def leray_project(v: VectorField) -> VectorField:
    return VectorField(v.spec, leray_array(v.data, v.spec), v.time_tag)


def heat_semigroup(v: VectorField, nu: float, t: float) -> VectorField:
    """``exp(t nu Laplacian) v``."""
    if nu < 0:
        raise ValueError(f"viscosity must be >= 0, got {nu}")
    if t < 0:
        raise ValueError(f"duration must be >= 0, got {t}")
    return VectorField(v.spec, heat_array(v.data, v.spec, nu * t), v.time_tag)


def advection(v: VectorField, g: VectorField) -> VectorField:
    return VectorField(v.spec, advection_array(v.data, g.data, v.spec), v.time_tag)
