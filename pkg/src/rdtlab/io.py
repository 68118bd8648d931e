"""On-disk formats: binary trajectories, JSON reports, CSV series.

Trajectory file layout (all little-endian):

    b"RDTL"
    u32 version, u32 dim, u32 res, f64 period, u32 n_snapshots, u32 n_steps
    u32 has_background
    [f64 * ncomp * res^dim]   background h, only if has_background
    per snapshot: f64 t, u64 step_count, f64 * ncomp * res^dim
    f64 * n_steps             the dt schedule

Field data is row-major, symmetric-packed in upper-triangular order.  A
metric alone is written as a one-snapshot trajectory at t = 0.
"""
import csv
import io
import json
import os
import struct

import numpy as np

from .flow import FlowState, FlowTrajectory
from .report import NormReport
from .tensor_core import BackgroundMetric, MetricField, TorusGrid, background_curvature

MAGIC = b"RDTL"
VERSION = 1
_HEAD = struct.Struct("<4sIIIdII")
_U32 = struct.Struct("<I")
_SNAP = struct.Struct("<dQ")
_F8 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _field_bytes(packed):
    return np.ascontiguousarray(packed, dtype=_F8).tobytes(order="C")


def encode_trajectory(traj: FlowTrajectory, include_background=None) -> bytes:
    grid = traj.grid
    if include_background is None:
        include_background = not traj.bg.euclidean
    parts = [_HEAD.pack(MAGIC, VERSION, grid.dim, grid.res, float(grid.period),
                        len(traj.states), len(traj.dt_schedule)),
             _U32.pack(1 if include_background else 0)]
    if include_background:
        parts.append(_field_bytes(traj.bg.h.packed))
    for s in traj.states:
        parts.append(_SNAP.pack(float(s.t), int(s.step_count)))
        parts.append(_field_bytes(s.g.packed))
    parts.append(np.ascontiguousarray(traj.dt_schedule, dtype=_F8).tobytes())
    return b"".join(parts)


def decode_trajectory(data: bytes, bg: BackgroundMetric | None = None) -> FlowTrajectory:
    if len(data) < _HEAD.size + _U32.size:
        raise FormatError("file too short for an RDTL header")
    magic, version, dim, res, period, nsnap, nsteps = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    grid = TorusGrid(dim, res, period)
    pos = _HEAD.size
    (has_bg,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    shape = (grid.ncomp,) + grid.shape
    nbytes = int(np.prod(shape)) * 8
    need = pos + (nbytes if has_bg else 0) + nsnap * (_SNAP.size + nbytes) + 8 * nsteps
    if len(data) != need:
        raise FormatError(f"size mismatch: {len(data)} bytes, header implies {need}")

    def field(at):
        return np.frombuffer(data, dtype=_F8, count=nbytes // 8, offset=at).reshape(shape).astype(np.float64)

    if has_bg:
        stored = background_curvature(MetricField(grid, field(pos)))
        pos += nbytes
        if bg is None:
            bg = stored
    elif bg is None:
        bg = BackgroundMetric.flat_torus(grid)
    states = []
    for _ in range(nsnap):
        t, k = _SNAP.unpack_from(data, pos)
        pos += _SNAP.size
        states.append(FlowState(t, MetricField(grid, field(pos)), int(k)))
        pos += nbytes
    dts = np.frombuffer(data, dtype=_F8, count=nsteps, offset=pos).astype(np.float64)
    return FlowTrajectory(states, dts, bg, {})


def write_trajectory(path, traj: FlowTrajectory, include_background=None):
    data = encode_trajectory(traj, include_background)
    _atomic_write(path, data)
    return path


def read_trajectory(path, bg=None) -> FlowTrajectory:
    with open(path, "rb") as fh:
        return decode_trajectory(fh.read(), bg)


def write_metric(path, g: MetricField, bg: BackgroundMetric | None = None):
    if bg is None:
        bg = BackgroundMetric.flat_torus(g.grid)
    traj = FlowTrajectory([FlowState(0.0, g, 0)], np.zeros(0), bg, {})
    return write_trajectory(path, traj)


def read_metric(path, bg=None) -> MetricField:
    return read_trajectory(path, bg).states[0].g


def _atomic_write(path, data: bytes | str):
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    kw = {} if isinstance(data, bytes) else {"newline": ""}
    with open(tmp, mode, **kw) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_reports_json(path, reports):
    doc = {"reports": [r.to_dict() for r in reports]}
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n")
    return path


def read_reports_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [NormReport.from_dict(d) for d in doc["reports"]]


def write_series_csv(path, reports):
    rows = [row for r in reports for row in r.csv_rows()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["report", "series", "t", "value"])
    w.writerows(rows)
    _atomic_write(path, buf.getvalue())
    return path
