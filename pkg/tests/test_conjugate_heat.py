import numpy as np
import pytest

from rdtlab.conjugate_heat import (
    NegativityError,
    check_conjugate_bounds,
    conjugate_rhs,
    laplacian,
    scalar_mass_series,
    solve_conjugate,
    solve_forward_heat,
    static_trajectory,
)
from rdtlab.curvature import random_bandlimited_phi
from rdtlab.initial_data import RoughMetricSpec, generate_rough_metric
from rdtlab.tensor_core import BackgroundMetric, MetricField, ScalarField, TorusGrid, integrate


def _grid(N=32):
    grid = TorusGrid(2, N, 1.0)
    return grid, BackgroundMetric.flat_torus(grid)


def test_laplacian_of_mode():
    grid, bg = _grid(64)
    x, y = grid.coords()
    w = 2 * np.pi
    f = ScalarField(grid, np.cos(w * x) * np.sin(2 * w * y))
    lap = laplacian(f, bg.h).values
    np.testing.assert_allclose(lap, -5 * w * w * f.values, atol=1e-3 * 5 * w * w)


def test_laplacian_integrates_to_zero():
    grid, bg = _grid(32)
    g = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=2), bg)
    f = random_bandlimited_phi(grid, np.random.default_rng(0), 4)
    lap = laplacian(f, g)
    vol = np.sqrt(g.determinant())
    # divergence form: int Lap f dg = 0 to roundoff
    assert abs(integrate(lap, vol)) < 1e-12 * integrate(ScalarField(grid, np.abs(lap.values)), vol)


def test_mass_conserved_on_static_flat():
    grid, bg = _grid(32)
    times = np.linspace(0.0, 5e-3, 6)
    tr = static_trajectory(bg.h, times)
    phi = random_bandlimited_phi(grid, np.random.default_rng(1), 4, floor=0.1)
    run = solve_conjugate(tr, phi, times[-1], times[0])
    m = [integrate(p) for p in run.phi_series]
    assert np.max(np.abs(np.array(m) / m[-1] - 1)) < 1e-12
    # backward heat smooths: sup decreases going back in t
    sups = [p.values.max() for p in run.phi_series]
    assert sups[0] <= sups[-1]


def test_conjugate_matches_exact_heat_decay():
    # with R = 0 the conjugate equation in tau = Y - t is the heat equation;
    # a single mode decays by exp(-|k|^2 tau)
    grid, bg = _grid(32)
    x, y = grid.coords()
    w = 2 * np.pi
    Y = 2e-3
    phi = ScalarField(grid, 1.0 + 0.5 * np.cos(w * x) * np.cos(w * y))
    run = solve_conjugate(static_trajectory(bg.h, [0.0, Y]), phi, Y, 0.0)
    exact = 1.0 + 0.5 * np.exp(-2 * w * w * Y) * np.cos(w * x) * np.cos(w * y)
    assert np.max(np.abs(run.phi_series[0].values - exact)) < 1e-5
    fwd = solve_forward_heat(bg.h, phi, [0.0, Y])
    assert np.max(np.abs(fwd[-1].values - exact)) < 1e-5


def test_rhs_adds_minus_R_phi():
    grid, bg = _grid(16)
    phi = ScalarField.constant(grid, 2.0)
    R = ScalarField.constant(grid, 3.0)
    np.testing.assert_allclose(conjugate_rhs(phi, bg.h, R).values, -6.0)


def test_input_validation():
    grid, bg = _grid(16)
    tr = static_trajectory(bg.h, [0.0, 1e-3, 2e-3])
    phi = ScalarField.constant(grid, 1.0)
    with pytest.raises(ValueError):
        solve_conjugate(tr, ScalarField.constant(grid, -1.0), 2e-3, 0.0)
    with pytest.raises(ValueError):
        solve_conjugate(tr, phi, 1.5e-3, 0.0)
    with pytest.raises(ValueError):
        solve_conjugate(tr, phi, 1e-3, 2e-3)


def test_negativity_error_on_rough_data():
    grid, bg = _grid(16)
    tr = static_trajectory(bg.h, [0.0, 1e-3])
    v = np.zeros(grid.shape)
    v[4, 4] = 1.0
    with pytest.raises(NegativityError):
        solve_conjugate(tr, ScalarField(grid, v), 1e-3, 0.0, c_cfl=4.0, neg_tol=1e-12)


def test_reports_on_static_flat():
    grid, bg = _grid(32)
    times = np.linspace(1e-3, 5e-3, 5)
    tr = static_trajectory(bg.h, times)
    phi = random_bandlimited_phi(grid, np.random.default_rng(1), 4, floor=0.1)
    run = solve_conjugate(tr, phi, times[-1], times[0], b=0.5)
    mass = scalar_mass_series(run)
    assert mass.verdicts["monotone"] and mass.verdicts["companion_nonneg"]
    b = check_conjugate_bounds(run, 0.0)
    assert b.verdicts["sup_bound"] is True
    assert b.scalars["max_ratio"] <= 1.0 + 1e-12
