import math

import numpy as np
import pytest

from rdtlab.tensor_core import (
    BackgroundMetric,
    GridMismatchError,
    MetricField,
    NotPositiveDefiniteError,
    ScalarField,
    TensorField,
    TorusGrid,
    check_spd,
    hcov_deriv,
    integrate,
    metric_inverse,
    pairwise_sum,
    partials,
    pinning_deviation,
    relative_eigenvalues,
    second_partials,
    spectral_partials,
    spectral_second_partials,
    tensor_norm_h,
)
from rdtlab.initial_data import perturbed_background


def test_grid_validation():
    with pytest.raises(ValueError):
        TorusGrid(4, 16)
    with pytest.raises(ValueError):
        TorusGrid(2, 48)
    with pytest.raises(ValueError):
        TorusGrid(2, 16, -1.0)
    g = TorusGrid(2, 16, 2.0)
    assert g.spacing == 0.125 and g.ncomp == 3 and g.volume == 4.0


def test_grid_mismatch():
    a, b = TorusGrid(2, 16, 1.0), TorusGrid(2, 32, 1.0)
    with pytest.raises(GridMismatchError):
        a.check_same(b)
    with pytest.raises(GridMismatchError):
        integrate(ScalarField(a, np.ones(a.shape)), ScalarField(b, np.ones(b.shape)))


def test_fields_reject_bad_shapes():
    g = TorusGrid(2, 16, 1.0)
    with pytest.raises(ValueError):
        ScalarField(g, np.ones((8, 8)))
    with pytest.raises(ValueError):
        ScalarField(g, np.full(g.shape, np.nan))
    with pytest.raises(ValueError):
        TensorField(g, np.ones((2,) + g.shape), "x")
    with pytest.raises(ValueError):
        MetricField(g, np.ones((2,) + g.shape))


def test_fourth_order_stencils_converge():
    errs1, errs2 = [], []
    for N in (32, 64, 128):
        grid = TorusGrid(2, N, 1.0)
        x, y = grid.coords()
        w = 2 * np.pi
        f = np.sin(w * x) * np.cos(2 * w * y)
        d = partials(f, grid)
        dd = second_partials(f, grid)
        errs1.append(np.max(np.abs(d[1] + 2 * w * np.sin(w * x) * np.sin(2 * w * y))))
        errs2.append(np.max(np.abs(dd[0, 1] + 2 * w * w * np.cos(w * x) * np.sin(2 * w * y))))
    for e in (errs1, errs2):
        orders = [math.log2(a / b) for a, b in zip(e, e[1:])]
        assert min(orders) > 3.8


def test_spectral_derivatives_exact_for_trig_polynomials():
    grid = TorusGrid(2, 32, 2.0)
    x, y = grid.coords()
    w = 2 * np.pi / 2.0
    f = np.sin(3 * w * x) + np.cos(w * x) * np.sin(5 * w * y)
    d = spectral_partials(f, grid)
    dd = spectral_second_partials(f, grid)
    np.testing.assert_allclose(d[0], 3 * w * np.cos(3 * w * x) - w * np.sin(w * x) * np.sin(5 * w * y), atol=1e-11)
    np.testing.assert_allclose(dd[1, 1], -25 * w * w * np.cos(w * x) * np.sin(5 * w * y), atol=1e-9)


def test_integrate_and_pairwise_sum():
    grid = TorusGrid(2, 64, 2.0)
    x, y = grid.coords()
    f = ScalarField(grid, 1.0 + np.sin(np.pi * x) ** 2)
    # the trapezoid rule is exact on trig polynomials: mean of sin^2 is 1/2
    assert integrate(f) == pytest.approx(4.0 * 1.5, rel=1e-14)
    a = np.random.default_rng(0).standard_normal(1000)
    assert pairwise_sum(a) == pytest.approx(math.fsum(a), abs=1e-12)
    assert pairwise_sum(np.zeros(0)) == 0.0


def test_pairwise_sum_is_order_fixed():
    a = np.random.default_rng(1).standard_normal(4096)
    assert pairwise_sum(a) == pairwise_sum(a.copy())


def test_check_spd_reports_node():
    grid = TorusGrid(2, 16, 1.0)
    p = MetricField.identity(grid).packed.copy()
    p[0, 3, 5] = -0.5
    with pytest.raises(NotPositiveDefiniteError) as e:
        check_spd(MetricField(grid, p))
    assert e.value.node == (3, 5)
    assert e.value.eigenvalue < 0


def test_metric_inverse_and_norm():
    grid = TorusGrid(3, 8, 1.0)
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3) + grid.shape) * 0.1
    full = np.einsum("ik...,jk...->ij...", A, A) + np.eye(3)[:, :, None, None, None]
    g = MetricField.from_full(grid, full)
    inv = metric_inverse(g).values
    prod = np.einsum("ij...,jk...->ik...", full, inv)
    np.testing.assert_allclose(prod, np.broadcast_to(np.eye(3)[:, :, None, None, None], prod.shape), atol=1e-13)
    bg = BackgroundMetric.flat_torus(grid)
    nrm = tensor_norm_h(g.as_tensor(), bg).values
    np.testing.assert_allclose(nrm, np.sqrt(np.sum(full ** 2, axis=(0, 1))), rtol=1e-14)


def test_pinning_deviation_of_scaled_identity():
    grid = TorusGrid(2, 16, 1.0)
    bg = BackgroundMetric.flat_torus(grid)
    g = MetricField.identity(grid, 1.03)
    np.testing.assert_allclose(pinning_deviation(g, bg), 0.03, atol=1e-15)
    lo, hi = relative_eigenvalues(g, bg)
    np.testing.assert_allclose(lo, 1.03)
    np.testing.assert_allclose(hi, 1.03)


def test_flat_background_flags():
    bg = BackgroundMetric.flat_torus(TorusGrid(2, 16, 1.0))
    assert bg.flat and bg.euclidean
    assert bg.K0 == 0.0 and bg.K1 == 0.0
    assert np.all(bg.scalar_curvature() == 0)


def test_curved_background_scalar_curvature():
    # h = e^{2f} delta in 2D has R_h = -2 e^{-2f} Lap f
    grid = TorusGrid(2, 128, 1.0)
    a = 0.05
    bg = perturbed_background(grid, a)
    assert not bg.flat and not bg.euclidean and bg.K0 > 0
    x, y = grid.coords()
    w = 2 * np.pi
    f = a * np.sin(w * x) * np.cos(w * y)
    lap = -2 * w * w * f
    np.testing.assert_allclose(bg.scalar_curvature(), -2 * np.exp(-2 * f) * lap, atol=1e-5)


def test_hcov_deriv_kills_background_metric():
    grid = TorusGrid(2, 64, 1.0)
    bg = perturbed_background(grid, 0.05)
    d = hcov_deriv(bg.h.as_tensor(), bg).values
    assert np.max(np.abs(d)) < 1e-5
