"""Fourier multipliers on the periodic box.

We build a random velocity field, split it into its divergence-free part and a
gradient, and check that the pressure gradient F_v = grad N G_v carries exactly
the divergence of the advection term.
"""
import numpy as np

from fbsde_ns import spectral_ops as so
from fbsde_ns.grid import GridSpec, div_array
from fbsde_ns.harness import random_solenoidal
from fbsde_ns.solver import taylor_green

spec = GridSpec(3, 32)
rng = np.random.default_rng(0)


def l2(a):
    return float(np.sqrt(spec.cell_volume * (a**2).sum()))


# %% Leray projection of white noise
v = rng.standard_normal((3,) + spec.shape)
Pv = so.leray_array(v, spec)
print(f"||div Pv||        = {l2(div_array(Pv, spec)):.2e}")
print(f"||P(Pv) - Pv||    = {l2(so.leray_array(Pv, spec) - Pv):.2e}")
print(f"energy kept by P  = {l2(Pv)**2 / l2(v)**2:.3f}  (about (d-1)/d = 0.667)")

# %% the pressure gradient balances the divergence of u.grad u
u = random_solenoidal(spec, 1).data
F = so.pressure_gradient_array(u, spec)
G = so.nonlinear_source_array(u, spec)
print(f"||div F - (G - mean G)|| = {l2(div_array(F, spec) - (G - G.mean())):.2e}")

# %% for Taylor-Green the whole nonlinearity is a gradient
tg = taylor_green(spec).data
adv = so.advection_array(tg, tg, spec)
print(f"Taylor-Green: ||P(u.grad u)|| = {l2(so.leray_array(adv, spec)):.2e}")
