import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from conftest import homogeneous_anatomy
from gliomacal.anatomy import build_anatomy, diffusivity
from gliomacal.growth import (
    GrowthParams,
    SeedError,
    SolverConfig,
    evolve,
    seed_density,
    simulate,
    simulate_array,
    stable_dt,
    step,
    time_steps,
)
from gliomacal.volume_io import GridMeta, Volume


def isolated_voxel_anatomy():
    meta = GridMeta((3, 3, 3), (1, 1, 1))
    wm = np.zeros(meta.dims)
    wm[1, 1, 1] = 1.0
    z = np.zeros(meta.dims)
    return build_anatomy(Volume(meta, wm), Volume(meta, z), Volume(meta, z))


def logistic_reference(u0, rho, T):
    sol = solve_ivp(lambda t, y: rho * y * (1 - y), (0, T), [u0], method="DOP853", rtol=1e-12, atol=1e-15)
    return sol.y[0, -1]


def test_logistic_without_diffusion():
    anat = isolated_voxel_anatomy()
    cfg = SolverConfig(seed_radius_mm=0.2, seed_amplitude=0.1)
    u = simulate_array(anat, GrowthParams(1e-3, 0.1, 30.0, (1.0, 1.0, 1.0)), cfg)
    ref = logistic_reference(0.1, 0.1, 30.0)
    assert ref == pytest.approx(0.6906, abs=1e-4)
    assert abs(u[1, 1, 1] - ref) / ref < 1e-8
    assert u.sum() == u[1, 1, 1]


def test_stable_dt_formula():
    D = np.full((4, 4, 4), 0.13)
    assert stable_dt(D, (1, 1, 1)) == pytest.approx(1 / (2 * 0.13 * 3))
    assert stable_dt(2 * D, (1, 1, 1)) == pytest.approx(stable_dt(D, (1, 1, 1)) / 2)
    assert stable_dt(D, (2, 2, 2)) == pytest.approx(4 * stable_dt(D, (1, 1, 1)))
    assert stable_dt(np.zeros((2, 2, 2)), (1, 1, 1)) == math.inf
    with pytest.raises(ValueError):
        stable_dt(-D, (1, 1, 1))


def test_step_rejects_unstable_dt(small_phantom):
    D = diffusivity(small_phantom, 0.5)
    dt = stable_dt(D, small_phantom.meta.spacing_mm)
    u = np.zeros(small_phantom.meta.dims)
    step(u, small_phantom, D, 0.1, dt)
    with pytest.raises(ValueError, match="stability"):
        step(u, small_phantom, D, 0.1, 1.01 * dt)


def test_fixed_points(small_phantom):
    anat = small_phantom
    D = diffusivity(anat, 0.3)
    dt = 0.9 * stable_dt(D, anat.meta.spacing_mm)
    zero = np.zeros(anat.meta.dims)
    u, _ = evolve(zero, anat, D, 0.05, np.full(50, dt))
    assert not u.any()
    one = anat.in_domain.astype(float)
    u, _ = evolve(one, anat, D, 0.05, np.full(50, dt))
    np.testing.assert_array_equal(u, one)
    assert np.array_equal(step(one, anat, D, 0.05, dt), one)


def test_step_identity_without_dynamics(small_phantom, rng):
    u = np.where(small_phantom.in_domain, rng.random(small_phantom.meta.dims), 0.0)
    D = np.zeros(small_phantom.meta.dims)
    assert np.array_equal(step(u, small_phantom, D, 0.0, 1.0), u)


def test_conservation_notch(notch_phantom, rng):
    anat = notch_phantom
    D = diffusivity(anat, 0.7)
    u0 = np.where(anat.in_domain, rng.random(anat.meta.dims), 0.0)
    dt = 0.9 * stable_dt(D, anat.meta.spacing_mm)
    u, clamp = evolve(u0, anat, D, 0.0, np.full(1000, dt), np.zeros(1000))
    assert clamp == 0.0
    assert abs(u.sum() - u0.sum()) / u0.sum() < 1e-6
    assert not u[~anat.in_domain].any()


def test_kernel_matches_reference_stepper(small_phantom, rng):
    """The padded, box-restricted kernel agrees with the plain numpy step."""
    anat = small_phantom
    D = diffusivity(anat, 1.1)
    dt = 0.9 * stable_dt(D, anat.meta.spacing_mm)
    u0 = seed_density(anat, (30.0, 22.0, 24.0), SolverConfig())
    ref = u0.copy()
    for _ in range(40):
        ref = step(ref, anat, D, 0.03, dt)
    got, _ = evolve(u0, anat, D, 0.03, np.full(40, dt))
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-13)


def test_fisher_wave_speed():
    anat = homogeneous_anatomy((128, 16, 16), 1.0)
    params = lambda T: GrowthParams(0.13, 0.025, T, (4.0, 7.5, 7.5))
    times = np.array([500.0, 650.0, 800.0, 950.0])
    fronts = []
    for T in times:
        profile = simulate_array(anat, params(T)).mean(axis=(1, 2))
        i = int(np.nonzero(profile < 0.5)[0][0])
        fronts.append(i - 1 + (profile[i - 1] - 0.5) / (profile[i - 1] - profile[i]))
    speed = np.polyfit(times, fronts, 1)[0]
    expected = 2 * math.sqrt(0.13 * 0.025)
    assert expected == pytest.approx(0.114, abs=5e-4)
    assert abs(speed - expected) / expected < 0.10


def test_cube_symmetry():
    anat = homogeneous_anatomy((15, 15, 15), 1.0)
    u = simulate_array(anat, GrowthParams(0.4, 0.05, 60.0, (7.0, 7.0, 7.0)))
    assert u.max() > 0.1
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product((False, True), repeat=3):
            v = np.transpose(u, perm)
            for ax, f in enumerate(flips):
                if f:
                    v = np.flip(v, ax)
            assert np.max(np.abs(v - u)) <= 1e-6


def test_monotone_mass_growth_and_range(small_phantom):
    anat = small_phantom
    D = diffusivity(anat, 0.2)
    dt = 0.9 * stable_dt(D, anat.meta.spacing_mm)
    u = seed_density(anat, (30.0, 24.0, 24.0), SolverConfig())
    masses = [u.sum()]
    for _ in range(30):
        u = step(u, anat, D, 0.02, dt)
        masses.append(u.sum())
    assert np.all(np.diff(masses) > 0)
    assert u.min() >= 0 and u.max() <= 1


def test_simulate_outputs(small_phantom):
    p = GrowthParams(0.3, 0.05, 200.0, (30.0, 24.0, 24.0))
    vol = simulate(small_phantom, p)
    u = simulate_array(small_phantom, p)
    assert isinstance(vol, Volume)
    assert u.min() >= 0 and u.max() <= 1
    assert not u[~small_phantom.in_domain].any()
    assert np.array_equal(u, simulate_array(small_phantom, p))  # bitwise deterministic


def test_clamp_mass_negligible(small_phantom):
    anat = small_phantom
    p = GrowthParams(2.0, 0.15, 300.0, (30.0, 24.0, 24.0))
    D = diffusivity(anat, p.D_w)
    cfg = SolverConfig()
    dts, react = time_steps(p.T, p.rho, stable_dt(D, anat.meta.spacing_mm), cfg.cfl_safety)
    u, clamp = evolve(seed_density(anat, p.ic_mm, cfg), anat, D, p.rho, dts, react)
    assert clamp < 1e-6 * u.sum()


def test_seed_errors(small_phantom):
    with pytest.raises(SeedError, match="outside"):
        simulate_array(small_phantom, GrowthParams(0.1, 0.1, 10.0, (0.0, 0.0, 0.0)))
    anat = homogeneous_anatomy((4, 4, 4))
    with pytest.raises(SeedError, match="too small"):
        simulate_array(anat, GrowthParams(0.1, 0.1, 10.0, (1.5, 1.5, 1.5)))


@pytest.mark.parametrize("bad", [dict(D_w=0.0), dict(rho=-1.0), dict(T=float("nan"))])
def test_invalid_params(bad):
    kw = dict(D_w=0.1, rho=0.1, T=10.0, ic_mm=(1, 1, 1)) | bad
    with pytest.raises(ValueError):
        GrowthParams(**kw)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(1.0, 3000.0),
    st.floats(0.0027, 0.19),
    st.floats(0.01, 10.0),
    st.floats(0.1, 1.0),
)
def test_time_schedule(T, rho, dt_stable, cfl):
    dts, react = time_steps(T, rho, dt_stable, cfl)
    assert math.isclose(dts.sum(), T, rel_tol=1e-12)
    assert math.isclose(react.sum(), T, rel_tol=1e-12)
    assert dts.max() <= cfl * min(dt_stable, 0.1 / rho) * (1 + 1e-12)
    assert react.max() <= cfl * 0.1 / rho * (1 + 1e-9)
    assert react[-1] > 0
