import numpy as np
import pytest

from rdtlab.curvature import scalar_curvature
from rdtlab.initial_data import (
    MollifierParams,
    RoughMetricSpec,
    generate_rough_metric,
    mollify,
    perturbed_background,
    pulled_back_flat_metric,
)
from rdtlab.tensor_core import BackgroundMetric, TorusGrid, check_spd, pinning_deviation


def _flat(dim=2, N=64):
    grid = TorusGrid(dim, N, 1.0)
    return grid, BackgroundMetric.flat_torus(grid)


@pytest.mark.parametrize("pattern", ["all", "diagonal", "conformal", [1]])
def test_rough_metric_is_pinned_at_cap(pattern):
    grid, bg = _flat()
    g = generate_rough_metric(RoughMetricSpec(2.5, 0.04, seed=3, component_pattern=pattern), bg)
    check_spd(g)
    dev = pinning_deviation(g, bg)
    assert np.max(dev) <= 0.04 + 1e-12
    assert g.pinned_eps == 0.04


def test_rough_metric_deterministic_and_seeded():
    grid, bg = _flat()
    a = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=1), bg)
    b = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=1), bg)
    c = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=2), bg)
    assert np.array_equal(a.packed, b.packed)
    assert not np.array_equal(a.packed, c.packed)


def test_low_modes_shared_across_resolutions():
    # same seed and cutoff: the field at N and 2N agrees on the coarse nodes
    spec = RoughMetricSpec(2.5, 0.05, seed=4, mode_cutoff=8)
    _, bg64 = _flat(2, 64)
    _, bg128 = _flat(2, 128)
    a = generate_rough_metric(spec, bg64).packed - bg64.h.packed
    b = generate_rough_metric(spec, bg128).packed[:, ::2, ::2] - bg64.h.packed
    # equal up to the peak rescale, which sees different nodes
    s = np.sum(a * b) / np.sum(a * a)
    assert abs(s - 1) < 1e-2
    np.testing.assert_allclose(b, s * a, atol=1e-14)


def test_decay_exponent_controls_spectrum():
    grid, bg = _flat(2, 128)
    def tail(alpha):
        g = generate_rough_metric(RoughMetricSpec(alpha, 0.05, seed=1), bg)
        s = np.abs(np.fft.fft2(g.packed[0] - 1.0))
        k = np.abs(np.fft.fftfreq(128, 1 / 128))
        K = np.maximum.outer(k, k)
        return s[K > 20].sum() / s.sum()
    assert tail(2.0) > tail(3.5)


def test_zero_cap_returns_background():
    grid, bg = _flat()
    g = generate_rough_metric(RoughMetricSpec(2.5, 0.0), bg)
    assert np.array_equal(g.packed, bg.h.packed)


@pytest.mark.parametrize("kw", [dict(amplitude_cap=0.2), dict(decay_exponent=0.0),
                                dict(mode_cutoff=32), dict(phases="odd"),
                                dict(component_pattern="weird")])
def test_spec_validation(kw):
    _, bg = _flat()
    base = dict(decay_exponent=2.5, amplitude_cap=0.05)
    base.update(kw)
    with pytest.raises(ValueError):
        generate_rough_metric(RoughMetricSpec(**base), bg)


def test_focused_phases_peak_at_center():
    grid, bg = _flat(2, 64)
    g = generate_rough_metric(RoughMetricSpec(2.5, 0.05, phases="focused",
                                              component_pattern="conformal"), bg)
    i = np.unravel_index(np.argmax(g.packed[0]), grid.shape)
    assert i == (32, 32)


def test_mollify_filters_and_keeps_mean():
    grid, bg = _flat(2, 64)
    g = generate_rough_metric(RoughMetricSpec(2.0, 0.05, seed=1), bg)
    m = mollify(g, MollifierParams(0.02))
    np.testing.assert_allclose(m.packed.mean(axis=(1, 2)), g.packed.mean(axis=(1, 2)), atol=1e-15)
    assert np.std(np.diff(m.packed[0], axis=0)) < np.std(np.diff(g.packed[0], axis=0))
    assert np.array_equal(mollify(g, MollifierParams(0.0)).packed, g.packed)
    with pytest.raises(ValueError):
        MollifierParams(-1.0)


def test_pulled_back_metric_is_flat_and_pinned():
    Rmax = []
    for N in (128, 256):
        grid, bg = _flat(2, N)
        g, u = pulled_back_flat_metric(grid, 1e-3, 2.5, seed=3, mode_cutoff=8)
        assert abs(np.max(pinning_deviation(g, bg)) - 1e-3) < 1e-10
        assert u.shape == (2,) + grid.shape
        Rmax.append(np.max(np.abs(scalar_curvature(g).values)))
    # R vanishes up to the fourth-order discretization error
    assert Rmax[0] / Rmax[1] > 12


def test_perturbed_background_is_curved():
    grid = TorusGrid(2, 64, 1.0)
    bg = perturbed_background(grid, 0.05, modes=(1, 2))
    assert not bg.flat
    assert np.max(np.abs(bg.scalar_curvature())) > 0.1
