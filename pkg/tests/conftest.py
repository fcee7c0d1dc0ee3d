import math

import numpy as np
import pytest

from fbsde_ns.grid import GridSpec, VectorField
from fbsde_ns.spectral_ops import leray_array

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def record():
    """Append a one-line verdict for an acceptance criterion to the run summary."""

    def _record(number: int, passed: bool, detail: str):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


@pytest.fixture
def spec2():
    return GridSpec(2, 16)


@pytest.fixture
def spec3():
    return GridSpec(3, 16)


def band_limited(spec: GridSpec, seed: int, kmax: int = 4, solenoidal: bool = False,
                 ncomp: int | None = None) -> np.ndarray:
    """Random real field with modes ``|m|_inf <= kmax``."""
    rng = np.random.default_rng(seed)
    ncomp = spec.d if ncomp is None else ncomp
    raw = rng.standard_normal((ncomp,) + spec.shape)
    keep = np.ones(spec.shape, dtype=bool)
    for k in spec.wavenumbers:
        keep &= np.abs(k * spec.box_length / (2 * math.pi)) <= kmax
    axes = tuple(range(1, spec.d + 1))
    a = np.fft.ifftn(np.fft.fftn(raw, axes=axes) * keep, axes=axes).real
    if solenoidal:
        a = leray_array(a, spec)
    return a


def random_field(spec, seed, **kw) -> VectorField:
    return VectorField(spec, band_limited(spec, seed, **kw))
