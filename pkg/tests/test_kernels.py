"""Compiled and numpy backends must agree; the fused kernel must match the
staged assembly."""
import numpy as np
import pytest

from rdtlab import kernels, use_backend
from rdtlab._accel import HAVE_NUMBA, get_backend, set_backend
from rdtlab.flow import rdtf_rhs
from rdtlab.initial_data import RoughMetricSpec, generate_rough_metric, perturbed_background
from rdtlab.tensor_core import BackgroundMetric, TorusGrid

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not importable")


def _rough(dim, N, seed=2, bg=None):
    grid = TorusGrid(dim, N, 1.0)
    bg = bg or BackgroundMetric.flat_torus(grid)
    return generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=seed), bg), bg


def test_backend_switch():
    prev = get_backend()
    with use_backend("numpy"):
        assert get_backend() == "numpy"
    assert get_backend() == prev
    with pytest.raises(ValueError):
        set_backend("fortran")


@needs_numba
@pytest.mark.parametrize("dim,N", [(1, 64), (2, 32), (3, 16)])
def test_stencils_agree(dim, N):
    f = np.random.default_rng(0).standard_normal((3,) + (N,) * dim)
    for axis in range(1, dim + 1):
        with use_backend("numpy"):
            a1, a2 = kernels.d1(f, axis, 0.1), kernels.d2(f, axis, 0.1)
        with use_backend("numba"):
            b1, b2 = kernels.d1(f, axis, 0.1), kernels.d2(f, axis, 0.1)
        np.testing.assert_allclose(a1, b1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a2, b2, rtol=0, atol=1e-10)


@needs_numba
@pytest.mark.parametrize("dim,N", [(2, 32), (3, 16)])
def test_rhs_agrees_across_backends(dim, N):
    g, bg = _rough(dim, N)
    with use_backend("numpy"):
        a = rdtf_rhs(g, bg).values
    with use_backend("numba"):
        b = rdtf_rhs(g, bg).values
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


@needs_numba
def test_rhs_agrees_on_curved_background():
    grid = TorusGrid(2, 32, 1.0)
    g, bg = _rough(2, 32, bg=perturbed_background(grid, 0.05))
    with use_backend("numpy"):
        a = rdtf_rhs(g, bg).values
    with use_backend("numba"):
        b = rdtf_rhs(g, bg).values
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


@needs_numba
def test_fused_matches_staged():
    g, bg = _rough(2, 64)
    fused = kernels.rdtf_flat_fused(g.packed, 2, g.grid.spacing)
    with use_backend("numpy"):
        staged = rdtf_rhs(g, bg).values
    for c, (i, j) in enumerate(kernels.packed_pairs(2)):
        s = staged[i, j]
        assert np.max(np.abs(fused[c] - s)) <= 1e-12 * np.max(np.abs(s))


@needs_numba
def test_interp_agrees_and_reproduces_nodes():
    N = 32
    vals = np.random.default_rng(5).standard_normal((2, N, N))
    pts = np.random.default_rng(6).uniform(-3, N + 3, (2, 500))
    with use_backend("numpy"):
        a = kernels.interp_cubic(vals, pts)
    with use_backend("numba"):
        b = kernels.interp_cubic(vals, pts)
    np.testing.assert_allclose(a, b, atol=1e-13)
    nodes = np.indices((N, N), dtype=float).reshape(2, -1)
    np.testing.assert_allclose(kernels.interp_cubic(vals, nodes), vals.reshape(2, -1), atol=1e-14)


def test_interp_exact_on_cubics_periodically_shifted():
    # cubic Lagrange interpolation is exact on polynomials of degree <= 3
    N = 64
    x = np.arange(N, dtype=float)
    v = (0.01 * x) ** 3 - 0.2 * x
    vals = v[None, :]
    pts = np.array([[10.3, 20.71, 40.5]])
    got = kernels.interp_cubic(vals, pts)[0]
    want = (0.01 * pts[0]) ** 3 - 0.2 * pts[0]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_sym_inverse_matches_numpy():
    rng = np.random.default_rng(8)
    for n in (1, 2, 3):
        A = rng.standard_normal((n, n, 50)) * 0.3
        full = np.einsum("ik...,jk...->ij...", A, A) + np.eye(n)[:, :, None]
        packed = np.stack([full[i, j] for i, j in kernels.packed_pairs(n)])
        inv_p, det = kernels.sym_inverse(packed, n)
        M = np.moveaxis(full, 2, 0)
        np.testing.assert_allclose(det, np.linalg.det(M), rtol=1e-12)
        inv = inv_p[kernels.packed_index(n)]
        np.testing.assert_allclose(np.moveaxis(inv, 2, 0), np.linalg.inv(M), rtol=1e-10, atol=1e-12)
