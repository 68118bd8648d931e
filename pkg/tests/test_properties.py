"""Invariants as property tests."""
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from rdtlab import io as rio
from rdtlab.curvature import distributional_pairing, random_bandlimited_phi, volume_ratio
from rdtlab.flow import FlowState, FlowTrajectory, rdtf_rhs
from rdtlab.harness import holder_exponent, interpolation_inequality_check, p_sigma
from rdtlab.initial_data import RoughMetricSpec, generate_rough_metric
from rdtlab.report import NormReport
from rdtlab.tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    TorusGrid,
    integrate,
    pairwise_sum,
    pinning_deviation,
)

FAST = settings(max_examples=15, deadline=None)
G16 = TorusGrid(2, 16, 1.0)
BG16 = BackgroundMetric.flat_torus(G16)
seeds = st.integers(0, 2 ** 31 - 1)


def _rough(seed, alpha=2.5, cap=0.05, grid=G16, bg=BG16):
    return generate_rough_metric(RoughMetricSpec(alpha, cap, seed=seed), bg)


@FAST
@given(seed=seeds, alpha=st.floats(1.5, 4.0), cap=st.floats(1e-4, 0.1))
def test_generated_metrics_are_pinned(seed, alpha, cap):
    g = _rough(seed, alpha, cap)
    assert np.max(pinning_deviation(g, BG16)) <= cap * (1 + 1e-9)


@FAST
@given(c=st.floats(0.2, 5.0))
def test_pinning_of_scaled_background(c):
    g = MetricField.identity(G16, c)
    np.testing.assert_allclose(pinning_deviation(g, BG16), abs(c - 1), atol=1e-15)


@FAST
@given(seed=seeds, c=st.floats(0.5, 2.0), shift=st.integers(0, 15))
def test_rhs_symmetries(seed, c, shift):
    g = _rough(seed)
    a = rdtf_rhs(g, BG16).values
    scale = np.max(np.abs(a))
    # constant rescaling leaves the velocity unchanged on a flat background
    b = rdtf_rhs(g.with_packed(c * g.packed), BG16).values
    assert np.max(np.abs(a - b)) <= 1e-11 * scale
    # periodic translations commute with the flow
    r = rdtf_rhs(g.with_packed(np.roll(g.packed, shift, axis=2)), BG16).values
    assert np.max(np.abs(np.roll(a, shift, axis=3) - r)) <= 1e-12 * scale


@FAST
@given(seed=seeds)
def test_rhs_axis_swap_equivariance(seed):
    # swapping x0 <-> x1 maps g_00 <-> g_11 and transposes the grid
    g = _rough(seed)
    p = g.packed
    swapped = np.stack([p[2].T, p[1].T, p[0].T])
    a = rdtf_rhs(g, BG16).values
    b = rdtf_rhs(g.with_packed(swapped), BG16).values
    assert np.max(np.abs(b[0, 0] - a[1, 1].T)) <= 1e-12 * np.max(np.abs(a))
    assert np.max(np.abs(b[0, 1] - a[0, 1].T)) <= 1e-12 * np.max(np.abs(a))


@FAST
@given(seed=seeds, b=st.floats(-2.0, 2.0))
def test_pairing_affine_in_b(seed, b):
    g = _rough(seed)
    phi = random_bandlimited_phi(G16, np.random.default_rng(seed), 4)
    p0 = distributional_pairing(g, BG16, phi, 0.0)
    pb = distributional_pairing(g, BG16, phi, b)
    vol = volume_ratio(g, BG16).values
    mass = integrate(ScalarField(G16, phi.values * vol))
    assert math.isclose(pb - p0, b * mass, rel_tol=1e-9, abs_tol=1e-12)


@FAST
@given(seed=seeds, lam=st.floats(1e-3, 1e3))
def test_interpolation_scale_invariant(seed, lam):
    f = random_bandlimited_phi(G16, np.random.default_rng(seed), 2, floor=0.05)
    g = _rough(seed, 3.0, 0.02)
    a = interpolation_inequality_check(f, g).scalars["ratio"]
    b = interpolation_inequality_check(ScalarField(G16, lam * f.values), g).scalars["ratio"]
    assert abs(a - b) <= 1e-12 * a


@FAST
@given(s=st.floats(1e-3, 0.25))
def test_exponent_relations(s):
    # v(s) and p(s) are reciprocal
    assert math.isclose(holder_exponent(s) * p_sigma(s), 1.0, rel_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300))
def test_pairwise_sum_close_to_exact(xs):
    a = np.array(xs)
    assert abs(pairwise_sum(a) - math.fsum(xs)) <= 1e-9 * (np.sum(np.abs(a)) + 1)


@FAST
@given(seed=seeds, n=st.integers(1, 4))
def test_trajectory_encoding_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    states = [FlowState(float(k) * 1e-3, MetricField(G16, 1.0 + 0.01 * rng.standard_normal((3, 16, 16))), k)
              for k in range(n)]
    tr = FlowTrajectory(states, rng.uniform(0, 1, n), BG16, {})
    data = rio.encode_trajectory(tr)
    back = rio.decode_trajectory(data)
    assert rio.encode_trajectory(back) == data


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@FAST
@given(vals=st.lists(finite, min_size=1, max_size=10), x=finite, ok=st.sampled_from([True, False, None]))
def test_report_dict_round_trip(vals, x, ok):
    r = NormReport("p")
    r.add_scalar("x", x)
    r.add_series("s", np.arange(len(vals), dtype=float), vals)
    r.set_verdict("v", ok)
    back = NormReport.from_dict(r.to_dict())
    assert back.to_json() == r.to_json()
    assert back.passed == (ok is not False)
