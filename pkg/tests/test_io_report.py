import json

import numpy as np
import pytest

from rdtlab import io as rio
from rdtlab.flow import evolve
from rdtlab.initial_data import RoughMetricSpec, generate_rough_metric, perturbed_background
from rdtlab.report import NormReport
from rdtlab.tensor_core import BackgroundMetric, TorusGrid


@pytest.fixture(scope="module")
def traj():
    grid = TorusGrid(2, 16, 1.0)
    bg = BackgroundMetric.flat_torus(grid)
    g0 = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=1), bg)
    return evolve(g0, 1e-3, bg, snapshot_times=[5e-4])


def test_trajectory_round_trip_is_byte_identical(traj, tmp_path):
    p = tmp_path / "t.rdtl"
    rio.write_trajectory(p, traj)
    back = rio.read_trajectory(p)
    assert np.array_equal(back.times, traj.times)
    for a, b in zip(back.states, traj.states):
        assert np.array_equal(a.g.packed, b.g.packed) and a.step_count == b.step_count
    assert np.array_equal(back.dt_schedule, traj.dt_schedule)
    assert rio.encode_trajectory(back) == p.read_bytes()


def test_header_layout(traj):
    data = rio.encode_trajectory(traj)
    assert data[:4] == b"RDTL"
    magic, ver, dim, res, period, nsnap, nsteps = rio._HEAD.unpack_from(data, 0)
    assert (ver, dim, res, period, nsnap, nsteps) == (1, 2, 16, 1.0, len(traj.states), len(traj.dt_schedule))


def test_curved_background_is_stored(tmp_path):
    grid = TorusGrid(2, 16, 1.0)
    bg = perturbed_background(grid, 0.05)
    p = tmp_path / "m.rdtl"
    rio.write_metric(p, bg.h, bg)
    back = rio.read_trajectory(p)
    assert np.array_equal(back.bg.h.packed, bg.h.packed)
    assert not back.bg.flat


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:-8], "size"),
    (lambda d: d[:10], "short"),
    (lambda d: d[:4] + (9).to_bytes(4, "little") + d[8:], "version"),
])
def test_corrupt_files_rejected(traj, mutate, msg):
    with pytest.raises(rio.FormatError, match=msg):
        rio.decode_trajectory(mutate(rio.encode_trajectory(traj)))


def _report():
    r = NormReport("demo", meta={"res": 16})
    r.add_scalar("x", 1.5)
    r.add_series("s", [0.0, 0.1], [1.0, 2.0])
    r.add_fit("f", q=1.0, C=2.0, residual=0.0)
    r.set_verdict("ok", True)
    r.set_verdict("na", None)
    return r


def test_report_rejects_nonfinite():
    r = NormReport("x")
    with pytest.raises(ValueError):
        r.add_scalar("a", float("nan"))
    with pytest.raises(ValueError):
        r.add_series("b", [0.0], [np.inf])
    with pytest.raises(ValueError):
        r.add_series("c", [0.0, 1.0], [1.0])


def test_report_passed_ignores_not_applicable():
    r = _report()
    assert r.passed
    r.set_verdict("bad", False)
    assert not r.passed


def test_reports_json_and_csv_round_trip(tmp_path):
    r = _report()
    p = tmp_path / "r.json"
    rio.write_reports_json(p, [r])
    first = p.read_bytes()
    back = rio.read_reports_json(p)
    rio.write_reports_json(p, back)
    assert p.read_bytes() == first
    assert json.loads(first)["reports"][0]["verdicts"] == {"na": None, "ok": True}
    c = tmp_path / "s.csv"
    rio.write_series_csv(c, [r])
    assert c.read_text().splitlines() == ["report,series,t,value", "demo,s,0.0,1.0", "demo,s,0.1,2.0"]
    assert r.to_csv() == c.read_text()
