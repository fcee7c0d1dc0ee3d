"""Besov seminorms from shifted differences.

For a single Fourier mode cos(m x1) the B^r_{2,2} seminorm scales like m^r.
The estimate below uses Gauss-Legendre shells in log|y|, a direction set on
each shell, and a closed-form term for shifts beyond half the box.
"""
import numpy as np

from fbsde_ns.besov import BesovIndex, SeminormQuadrature, besov_seminorm
from fbsde_ns.grid import GridSpec, VectorField

spec = GridSpec(2, 64)
x = spec.coordinates()
quad = SeminormQuadrature()

for r in (0.5, 1.5, 2.5):
    idx = BesovIndex.from_smoothness(r, 2.0)
    vals = [besov_seminorm(VectorField(spec, [np.cos(m * x[0]), np.zeros(spec.shape)]), idx, quad)
            for m in (1, 2, 4, 8)]
    rates = [vals[i + 1] / vals[i] for i in range(3)]
    print(f"r={r}: successive ratios {', '.join(f'{q:.3f}' for q in rates)} "
          f"(expected {2**r:.3f})")

# refinement of the quadrature barely moves the value
v = VectorField(spec, [np.sin(x[0] + 2 * x[1]), np.cos(3 * x[1])])
idx = BesovIndex.from_smoothness(1.5, 4.0)
a = besov_seminorm(v, idx, quad)
b = besov_seminorm(v, idx, quad.refined(4))
print(f"B^1.5_(4,4) seminorm {a:.5f}; refined quadrature {b:.5f}; change {abs(a - b) / b:.2%}")
