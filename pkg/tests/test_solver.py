import csv

import numpy as np
import pytest

from fbsde_ns import solver as sv
from fbsde_ns.grid import GridSpec, TimeGrid, VectorField, div_array
from fbsde_ns.solver import (
    GEstimate,
    PicardState,
    SolverConfig,
    TimeIndexedField,
    apply_I_nu,
    apply_I_prime_nu,
    divergence_diagnostic,
    evaluate_g_mc,
    evaluate_g_mild,
    l2_per_time,
    pde_oracle_g,
    picard_solve,
    reference_ns_solve,
    relative_l2_error,
    taylor_green,
)
from fbsde_ns.spectral_ops import heat_array

from conftest import band_limited


def _cos_e2(spec):
    x = spec.coordinates()
    z = np.zeros(spec.shape)
    return VectorField(spec, [z, np.cos(x[0])])


def _heat_series(u0, nu, tg):
    return np.stack([heat_array(u0.data, u0.spec, nu * t) for t in tg.times])


def test_config_rules():
    with pytest.raises(ValueError):
        SolverConfig(scheme="mild", nu=0.0)
    with pytest.raises(ValueError):
        SolverConfig(scheme="other")
    with pytest.raises(ValueError):
        SolverConfig(nu=-1)
    cfg = SolverConfig(r=2.5)
    assert cfg.monitor_r == 1.5
    assert SolverConfig(r=1.5).monitor_r == 1.0


def test_time_indexed_field(spec2):
    tg = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeIndexedField(spec2, tg, np.zeros((4, 2) + spec2.shape))
    a = np.stack([np.full((2,) + spec2.shape, float(m)) for m in range(5)])
    f = TimeIndexedField(spec2, tg, a)
    assert np.allclose(f.at_time(0.375), 1.5)
    assert f[2].time_tag == 0.5 and len(f.snapshots) == 5
    assert f.is_divergence_free()


# -- evaluate_g_mc -----------------------------------------------------------------

def test_mc_heat_example():
    spec = GridSpec(2, 16)
    nu = 0.1
    cfg = SolverConfig(nu=nu, T=0.25, steps=5, M=2000, seed=3)
    u0 = _cos_e2(spec)
    tg = cfg.time_grid
    est = evaluate_g_mc(TimeIndexedField.constant(VectorField.zeros(spec), tg), u0, cfg)
    diff = l2_per_time(est.g.data - _heat_series(u0, nu, tg), spec)
    assert np.all(diff[1:] <= 4 * est.stderr[1:])
    assert np.all(est.stderr[1:] > 0)


def test_mc_constant_example():
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, T=0.25, steps=5, M=200)
    c = VectorField.constant(spec, [0.4, -0.2])
    est = evaluate_g_mc(TimeIndexedField.constant(c, cfg.time_grid), c, cfg)
    assert np.abs(est.g.data - c.data).max() < 1e-12


def test_mc_rejects_bad_input():
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, M=50)
    v = TimeIndexedField.constant(VectorField.zeros(spec), cfg.time_grid)
    with pytest.raises(ValueError, match="paths"):
        evaluate_g_mc(v, VectorField.zeros(spec), cfg)
    x = spec.coordinates()
    compressible = VectorField(spec, [np.sin(x[0]), np.zeros(spec.shape)])
    with pytest.raises(ValueError, match="divergence"):
        evaluate_g_mc(v, compressible, SolverConfig(nu=0.1, M=200))


def test_mc_inviscid_matches_oracle():
    spec = GridSpec(2, 32)
    cfg = SolverConfig(nu=0.0, T=0.25, steps=10, M=1)
    u0 = taylor_green(spec)
    v = TimeIndexedField.constant(u0, cfg.time_grid)
    mc = evaluate_g_mc(v, u0, cfg)
    ref = pde_oracle_g(v, u0, 0.0, substeps=8)
    assert np.all(mc.stderr == 0)
    assert relative_l2_error(mc.g, ref.g) < 1e-3


def test_amplitude_bilinearity():
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, T=0.2, steps=4, M=2000, seed=11)
    v0 = VectorField(spec, 0.3 * band_limited(spec, 4, kmax=2, solenoidal=True))
    zero = VectorField.zeros(spec)
    tg = cfg.time_grid
    a = evaluate_g_mc(TimeIndexedField.constant(v0, tg), zero, cfg)
    b = evaluate_g_mc(TimeIndexedField.constant(v0 * 2.0, tg), zero, cfg)
    diff = l2_per_time(b.g.data - 4 * a.g.data, spec)
    assert np.all(diff[1:] <= 4 * (b.stderr[1:] + 4 * a.stderr[1:]))
    assert l2_per_time(b.g.data, spec)[-1] > 10 * b.stderr[-1]


# -- pde_oracle_g --------------------------------------------------------------------

def test_oracle_heat():
    spec = GridSpec(2, 16)
    tg = TimeGrid(0.0, 0.5, 5)
    u0 = VectorField(spec, band_limited(spec, 1, kmax=4, solenoidal=True))
    g = pde_oracle_g(TimeIndexedField.constant(VectorField.zeros(spec), tg), u0, 0.2)
    assert np.abs(g.g.data - _heat_series(u0, 0.2, tg)).max() < 1e-8


def test_oracle_pure_advection():
    spec = GridSpec(2, 32)
    tg = TimeGrid(0.0, 0.5, 10)
    c = np.array([0.7, -0.4])
    u0 = VectorField(spec, band_limited(spec, 2, kmax=3, solenoidal=True))
    g = pde_oracle_g(TimeIndexedField.constant(VectorField.constant(spec, c), tg), u0, 0.0)
    coeff = np.fft.fftn(u0.data, axes=(1, 2))
    k = spec.wavenumbers
    for m, t in enumerate(tg.times):
        phase = np.exp(-1j * (k[0] * c[0] + k[1] * c[1]) * t)
        want = np.fft.ifftn(coeff * phase, axes=(1, 2)).real
        assert np.abs(g.g.data[m] - want).max() < 1e-6


def test_oracle_refinement_and_cfl():
    tg = TimeGrid(0.0, 0.25, 10)
    outs = []
    for n in (32, 64):
        spec = GridSpec(2, n)
        u0 = taylor_green(spec)
        outs.append(pde_oracle_g(TimeIndexedField.constant(u0, tg), u0, 0.05).g.data)
    assert np.abs(outs[0] - outs[1][:, :, ::2, ::2]).max() <= 1e-4
    spec = GridSpec(2, 32)
    fast = VectorField.constant(spec, [50.0, 0.0])
    with pytest.raises(ValueError, match="CFL"):
        pde_oracle_g(TimeIndexedField.constant(fast, tg), VectorField.zeros(spec), 0.1)


# -- evaluate_g_mild -----------------------------------------------------------------

def test_mild_examples():
    spec = GridSpec(2, 32)
    tg = TimeGrid(0.0, 0.25, 10)
    u0 = taylor_green(spec)
    g = evaluate_g_mild(TimeIndexedField.constant(VectorField.zeros(spec), tg), u0, 0.1)
    assert np.abs(g.g.data - _heat_series(u0, 0.1, tg)).max() < 1e-10
    c = VectorField.constant(spec, [1.0, 2.0])
    g = evaluate_g_mild(TimeIndexedField.constant(c, tg), c, 0.1)
    assert np.abs(g.g.data - c.data).max() < 1e-12
    v = TimeIndexedField.constant(u0, tg)
    mild = evaluate_g_mild(v, u0, 0.1)
    oracle = pde_oracle_g(v, u0, 0.1, substeps=8)
    assert np.abs(mild.g.data - oracle.g.data).max() <= 1e-5
    with pytest.raises(ValueError):
        evaluate_g_mild(v, u0, 0.0)


def test_mild_sweep_cap():
    spec = GridSpec(2, 16)
    tg = TimeGrid(0.0, 4.0, 1)
    u0 = VectorField(spec, 3 * band_limited(spec, 0, kmax=4, solenoidal=True))
    with pytest.raises(sv.MildSweepDivergence):
        evaluate_g_mild(TimeIndexedField.constant(u0, tg), u0, 0.01, substeps=1)


# -- the maps ------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", ["mc_drifted", "mild"])
def test_map_examples(scheme):
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, T=0.2, steps=4, M=200, scheme=scheme)
    apply = apply_I_nu if scheme == "mc_drifted" else apply_I_prime_nu
    tg = cfg.time_grid
    zero, _ = apply(TimeIndexedField.constant(VectorField.zeros(spec), tg), cfg)
    assert np.abs(zero.g.data).max() == 0
    c = VectorField.constant(spec, [0.3, 0.1])
    const, _ = apply(TimeIndexedField.constant(c, tg), cfg)
    assert np.abs(const.g.data - c.data).max() < 1e-12
    u0 = taylor_green(spec)
    proj, raw = apply(TimeIndexedField.constant(u0, tg), cfg)
    for m in range(len(proj.g)):
        assert np.sqrt(spec.cell_volume * (div_array(proj.g.data[m], spec) ** 2).sum()) <= 1e-10
    assert l2_per_time(proj.g.data[:1] - u0.data, spec)[0] <= 1e-8
    assert isinstance(raw, GEstimate)


# -- divergence diagnostic -----------------------------------------------------------

def test_divergence_diagnostic():
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, T=0.25, steps=5, M=1000, seed=5)
    u0 = VectorField(spec, band_limited(spec, 6, kmax=3, solenoidal=True))
    est = evaluate_g_mc(TimeIndexedField.constant(VectorField.zeros(spec), cfg.time_grid), u0, cfg)
    dd = divergence_diagnostic(est, 2.0)
    assert dd["sup"] <= 4 * dd["stderr_sup"] and dd["stderr_sup"] > 0
    c = TimeIndexedField.constant(VectorField.constant(spec, [1.0, 1.0]), cfg.time_grid)
    assert divergence_diagnostic(c, 4.0)["sup"] == 0


def test_divergence_stderr_matches_sampling():
    spec = GridSpec(2, 16)
    rng = np.random.default_rng(0)
    se = np.abs(rng.standard_normal((1, 2) + spec.shape)) + 0.1
    g = TimeIndexedField(spec, TimeGrid(0.0, 1.0, 1),
                         np.zeros((2, 2) + spec.shape))
    est = GEstimate(g, np.concatenate([se, se]))
    pred = sv.divergence_stderr(est)[0]
    noise = rng.standard_normal((4000, 2) + spec.shape) * se[0]
    emp = div_array(noise, spec).std(axis=0)
    assert np.abs(emp / pred - 1).max() < 0.1


# -- Picard --------------------------------------------------------------------------

def test_picard_trivial_fixed_points():
    spec = GridSpec(2, 16)
    cfg = SolverConfig(nu=0.1, T=0.2, steps=4, M=200, r=1.5, p=2)
    st = picard_solve(VectorField.zeros(spec), cfg)
    assert st.converged and len(st.residuals) == 1 and st.residuals[0] == 0
    c = VectorField.constant(spec, [0.5, -0.5])
    st = picard_solve(c, cfg)
    assert st.converged and len(st.residuals) == 1
    assert np.abs(st.solution.data - c.data).max() < 1e-12


def test_picard_mild_taylor_green(tmp_path):
    spec = GridSpec(2, 32)
    cfg = SolverConfig(nu=0.1, T=0.25, steps=10, scheme="mild", r=1.5, p=2, tol=1e-8)
    st = picard_solve(taylor_green(spec), cfg)
    assert st.converged
    assert all(r < 1 for r in st.contraction_ratios)
    ref = reference_ns_solve(taylor_green(spec), 0.1, cfg.time_grid)
    assert relative_l2_error(st.solution, ref) <= 1e-5
    st.write_csv(tmp_path / "p.csv")
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "residual_r'", "residual_r", "contraction_ratio",
                       "divergence_sup", "wall_seconds"]
    assert len(rows) == len(st.residuals) + 1 and rows[1][3] == "nan"
    st.write_fields(tmp_path)
    assert len(list(tmp_path.glob("u_*.nsf"))) == 11


def test_picard_projects_compressible_u0():
    spec = GridSpec(2, 16)
    x = spec.coordinates()
    u0 = VectorField(spec, [np.sin(x[0]), np.zeros(spec.shape)])
    cfg = SolverConfig(nu=0.1, T=0.1, steps=2, scheme="mild", r=1.5, p=2)
    with pytest.warns(UserWarning, match="projecting"):
        st = picard_solve(u0, cfg)
    assert st.converged


def test_picard_halving(monkeypatch):
    spec = GridSpec(2, 16)
    horizons = []

    def fake(u0, cfg):
        horizons.append(cfg.T)
        ok = cfg.T < 0.2
        return PicardState(status="converged" if ok else "diverging", horizon=cfg.T,
                           contraction_ratios=[0.5] if ok else [1.2, 1.3, 1.4])

    monkeypatch.setattr(sv, "_run_picard", fake)
    st = picard_solve(VectorField.zeros(spec), SolverConfig(T=1.0))
    assert horizons == [1.0, 0.5, 0.25, 0.125] and st.halvings == 3 and st.converged
    horizons.clear()
    monkeypatch.setattr(sv, "_run_picard",
                        lambda u0, cfg: PicardState(status="diverging", horizon=cfg.T,
                                                    contraction_ratios=[2.0, 2.0, 2.0]))
    st = picard_solve(VectorField.zeros(spec), SolverConfig(T=1.0))
    assert st.status == "failed" and len(st.attempts) == 5
    assert all(a[2] == [2.0, 2.0, 2.0] for a in st.attempts)


def test_diverging_rule():
    assert sv._diverging([0.5, 1.1, 1.2, 1.3])
    assert not sv._diverging([1.1, 1.2, 0.9])
    assert not sv._diverging([1.5, 1.5])


# -- reference solver ----------------------------------------------------------------

def test_reference_taylor_green_exact():
    spec = GridSpec(2, 32)
    tg = TimeGrid(0.0, 0.25, 10)
    u0 = taylor_green(spec)
    for nu in (0.0, 0.1):
        u = reference_ns_solve(u0, nu, tg)
        want = np.exp(-2 * nu * tg.times)[:, None, None, None] * u0.data
        assert np.abs(u.data - want).max() <= 1e-6
    c = VectorField.constant(spec, [1.0, 2.0])
    assert np.abs(reference_ns_solve(c, 0.1, tg).data - c.data).max() < 1e-12


def test_reference_taylor_green_3d():
    spec = GridSpec(3, 16)
    tg = TimeGrid(0.0, 0.25, 5)
    u0 = taylor_green(spec)
    u = reference_ns_solve(u0, 0.1, tg)
    want = np.exp(-0.2 * tg.times)[:, None, None, None, None] * u0.data
    assert np.abs(u.data - want).max() <= 1e-6


def test_reference_euler_energy():
    spec = GridSpec(2, 32)
    tg = TimeGrid(0.0, 0.25, 10)
    u0 = VectorField(spec, band_limited(spec, 7, kmax=4, solenoidal=True))
    u = reference_ns_solve(u0, 0.0, tg, substeps=8)
    e = l2_per_time(u.data, spec) ** 2
    assert np.abs(e / e[0] - 1).max() <= 1e-5
    assert u.max_divergence() <= 1e-10
