"""Stochastic-Lagrangian fixed-point solvers for incompressible Navier-Stokes on the torus."""

__version__ = "0.1.0"
