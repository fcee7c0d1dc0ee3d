"""Monte-Carlo expectations along backward characteristics versus the dual PDE.

For a frozen drift v the field g(t, x) = E[u0(X_t)] + int E[F_v(X_s)] ds solves
the linear parabolic problem g_t + v.grad g = nu Lap g + F_v. We estimate g by
simulation and compare with a spectral solve of that PDE, in units of the
Monte-Carlo standard error.
"""
import time

from fbsde_ns.grid import GridSpec
from fbsde_ns.solver import (
    SolverConfig,
    TimeIndexedField,
    evaluate_g_mc,
    l2_per_time,
    pde_oracle_g,
    taylor_green,
)

spec = GridSpec(2, 32)
u0 = taylor_green(spec)

for M in (250, 1000, 4000):
    cfg = SolverConfig(nu=0.05, T=0.25, steps=5, M=M, seed=1)
    v = TimeIndexedField.constant(u0, cfg.time_grid)
    t0 = time.perf_counter()
    mc = evaluate_g_mc(v, u0, cfg)
    wall = time.perf_counter() - t0
    pde = pde_oracle_g(v, u0, cfg.nu, substeps=8)
    diff = l2_per_time(mc.g.data - pde.g.data, spec)[-1]
    print(f"M={M:5d}: ||g_mc - g_pde|| = {diff:.4f}, stderr = {mc.stderr[-1]:.4f}, "
          f"ratio {diff / mc.stderr[-1]:.2f}, {wall:.1f}s")
# The error falls like M^{-1/2} and stays at about one standard error.
