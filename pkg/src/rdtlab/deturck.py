"""The DeTurck gauge: vector field, generated diffeomorphisms, and the
related Ricci flow l(t) = Phi(t)^* g(t).

Diffeomorphisms are stored as periodic displacements u with
Phi(x) = x + u(x).  Off-grid values are read with periodic 4-point cubic
interpolation, time in between snapshots is linear.
"""
from dataclasses import dataclass
import warnings

import numpy as np

from . import kernels
from .curvature import ricci
from .flow import FlowState, FlowTrajectory
from .report import NormReport
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    TensorField,
    check_spd,
    christoffel,
    packed_index,
    partials,
)


class DiffeomorphismLost(RuntimeError):
    pass


class VectorFieldT(TensorField):
    """Contravariant vector field V^a on the grid."""

    def __init__(self, grid, values):
        super().__init__(grid, values, "u")


def _contracted_christoffel(full, inv, dfull):
    gam, _ = christoffel(full, inv, dfull)
    return np.einsum("bc...,abc...->a...", inv, gam)


def deturck_vector(g: MetricField, bg: BackgroundMetric) -> VectorFieldT:
    """V^a = -g^{bc} (Gamma(g) - Gamma(h))^a_{bc}."""
    check_spd(g)
    bg.grid.check_same(g.grid)
    n = g.grid.dim
    idx = packed_index(n)
    full = g.packed[idx]
    inv = kernels.sym_inverse(g.packed, n)[0][idx]
    cg = _contracted_christoffel(full, inv, partials(g.packed, g.grid)[:, idx])
    if bg.flat:
        return VectorFieldT(g.grid, -cg)
    ch = np.einsum("bc...,abc...->a...", inv, bg.christoffel_h.values)
    return VectorFieldT(g.grid, -(cg - ch))


@dataclass(frozen=True, eq=False)
class DiffeoField:
    grid: object
    displacement: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.displacement, dtype=np.float64)
        want = (self.grid.dim,) + self.grid.shape
        if u.shape != want:
            raise ValueError(f"displacement shape {u.shape} != {want}")
        object.__setattr__(self, "displacement", u)

    @classmethod
    def identity(cls, grid, t=0.0):
        return cls(grid, np.zeros((grid.dim,) + grid.shape), t)

    def index_points(self):
        """Phi(x) for every node, in grid-index units, shape (n, P)."""
        nodes = np.indices(self.grid.shape, dtype=np.float64).reshape(self.grid.dim, -1)
        return nodes + self.displacement.reshape(self.grid.dim, -1) / self.grid.spacing

    def jacobian(self):
        """D Phi [a, i] = delta + d_i u^a by the 4th-order stencil."""
        n = self.grid.dim
        du = partials(self.displacement, self.grid)  # [i, a]
        J = np.swapaxes(du, 0, 1).copy()
        for a in range(n):
            J[a, a] += 1.0
        return J

    def det_jacobian(self):
        J = self.jacobian()
        n = self.grid.dim
        if n == 1:
            return J[0, 0]
        if n == 2:
            return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


def _check_orientation(phi: DiffeoField):
    det = phi.det_jacobian()
    if not np.all(det > 0):
        node = np.unravel_index(int(np.argmin(det)), phi.grid.shape)
        raise DiffeomorphismLost(
            f"det(D Phi) = {float(np.min(det)):.3e} <= 0 at node {tuple(int(i) for i in node)}, "
            f"t = {phi.t:.4e}")


@dataclass(eq=False)
class DiffeoFamily:
    """Phi at a set of times; ``S`` is where Phi is the identity."""

    times: np.ndarray
    maps: list
    S: float
    substeps: int

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if self.times[k] != t:
            raise KeyError(f"no diffeomorphism stored at t={t}")
        return self.maps[k]


def _vfield_series(traj: FlowTrajectory, bg, t_min):
    keep = [k for k, s in enumerate(traj.states) if s.t >= t_min]
    ts = np.array([traj.states[k].t for k in keep])
    vs = [deturck_vector(traj.states[k].g, bg).values for k in keep]
    return ts, vs


def integrate_diffeo(traj: FlowTrajectory, S=None, t_min=None, substeps=4,
                     check=True) -> DiffeoFamily:
    """Solve d/dt Phi(x, t) = V(Phi(x, t), t), Phi(x, S) = x, at every node.

    Integration runs over the snapshot times in [t_min, T] (t_min defaults to
    10 dx^2), forward and backward from S, with ``substeps`` classical RK4
    steps per snapshot interval.  Snapshot times are step boundaries, so the
    piecewise-linear time interpolation of V never splits an RK stage.
    """
    grid = traj.grid
    bg = traj.bg
    if t_min is None:
        t_min = 10.0 * grid.spacing ** 2
    ts, vs = _vfield_series(traj, bg, t_min)
    if len(ts) < 2:
        raise ValueError("need at least two snapshots in [t_min, T]")
    if S is None:
        S = float(ts[-1])
    kS = np.flatnonzero(ts == S)
    if len(kS) != 1:
        raise ValueError(f"S={S} must be one of the snapshot times in [t_min, T]")
    kS = int(kS[0])
    n = grid.dim
    dx = grid.spacing
    nodes = np.indices(grid.shape, dtype=np.float64).reshape(n, -1)

    def V_at(y, t, k):
        # y in grid units; t inside [ts[k], ts[k+1]]
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        a = kernels.interp_cubic(vs[k], y)
        if w == 0.0:
            return a / dx
        b = kernels.interp_cubic(vs[k + 1], y)
        return ((1.0 - w) * a + w * b) / dx

    maps = [None] * len(ts)
    maps[kS] = DiffeoField.identity(grid, float(ts[kS]))

    def sweep(order):
        y = nodes.copy()
        for k_from, k_to in order:
            k = min(k_from, k_to)
            t0, t1 = ts[k_from], ts[k_to]
            h = (t1 - t0) / substeps
            t = t0
            for _ in range(substeps):
                k1 = V_at(y, t, k)
                k2 = V_at(y + 0.5 * h * k1, t + 0.5 * h, k)
                k3 = V_at(y + 0.5 * h * k2, t + 0.5 * h, k)
                k4 = V_at(y + h * k3, t + h, k)
                y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                t = t + h
            u = ((y - nodes) * dx).reshape((n,) + grid.shape)
            phi = DiffeoField(grid, u, float(t1))
            if check:
                _check_orientation(phi)
            maps[k_to] = phi

    sweep([(k, k - 1) for k in range(kS, 0, -1)])
    sweep([(k, k + 1) for k in range(kS, len(ts) - 1)])
    return DiffeoFamily(ts, maps, float(S), substeps)


def pullback_metric(g: MetricField, phi: DiffeoField) -> MetricField:
    """l_ij(x) = d_i Phi^a d_j Phi^b g_ab(Phi(x))."""
    grid = g.grid
    n = grid.dim
    if not np.any(phi.displacement):
        return g.with_packed(g.packed.copy())
    _warn_nyquist(g)
    gphi = kernels.interp_cubic(g.packed, phi.index_points()).reshape(g.packed.shape)
    full = gphi[packed_index(n)]
    J = phi.jacobian()
    ell = np.einsum("ai...,bj...,ab...->ij...", J, J, full, optimize=True)
    return MetricField.from_full(grid, ell)


def _warn_nyquist(g, rel=1e-6):
    N = g.grid.res
    ax = tuple(range(1, g.grid.dim + 1))
    spec = np.abs(np.fft.fftn(g.packed - g.packed.mean(axis=ax, keepdims=True), axes=ax))
    total = spec.sum()
    if total == 0:
        return
    nyq = np.zeros(g.grid.shape, dtype=bool)
    for a in range(g.grid.dim):
        sl = [slice(None)] * g.grid.dim
        sl[a] = N // 2
        nyq[tuple(sl)] = True
    if spec[:, nyq].sum() > rel * total:
        warnings.warn("metric has energy at the Nyquist mode; interpolation is out of band",
                      RuntimeWarning, stacklevel=3)


def invert_diffeo(phi: DiffeoField, iters=60, tol=1e-13) -> DiffeoField:
    """Psi with Phi(Psi(y)) = y by fixed-point iteration v = -u(y + v)."""
    grid = phi.grid
    n = grid.dim
    dx = grid.spacing
    nodes = np.indices(grid.shape, dtype=np.float64).reshape(n, -1)
    u = phi.displacement / dx
    v = -u.reshape(n, -1)
    for _ in range(iters):
        v_new = -kernels.interp_cubic(u, nodes + v)
        done = np.max(np.abs(v_new - v)) < tol
        v = v_new
        if done:
            break
    return DiffeoField(grid, (v * dx).reshape((n,) + grid.shape), phi.t)


def related_ricci_flow(traj: FlowTrajectory, family: DiffeoFamily) -> FlowTrajectory:
    """Trajectory of l(t) = Phi(t)^* g(t) at the family's times."""
    byt = {s.t: s for s in traj.states}
    states = []
    for t, phi in zip(family.times, family.maps):
        s = byt[t]
        states.append(FlowState(float(t), pullback_metric(s.g, phi), s.step_count))
    return FlowTrajectory(states, traj.dt_schedule, traj.bg,
                          {"S": family.S, "substeps": family.substeps})


def ricci_flow_residual(ell_traj: FlowTrajectory) -> NormReport:
    """d_t l + 2 Ric(l) at interior snapshots (3-point nonuniform central
    difference in time), as max-node and L^2 norms."""
    st = ell_traj.states
    if len(st) < 3:
        raise ValueError("need at least 3 snapshots")
    grid = ell_traj.grid
    n = grid.dim
    idx = packed_index(n)
    rep = NormReport("ricci_flow_residual",
                     meta={"dim": n, "res": grid.res, "period": grid.period})
    ts, mx, l2 = [], [], []
    vol = grid.spacing ** n
    for k in range(1, len(st) - 1):
        t0, t1, t2 = st[k - 1].t, st[k].t, st[k + 1].t
        h1, h2 = t1 - t0, t2 - t1
        dl = (-h2 / (h1 * (h1 + h2)) * st[k - 1].g.packed
              + (h2 - h1) / (h1 * h2) * st[k].g.packed
              + h1 / (h2 * (h1 + h2)) * st[k + 1].g.packed)[idx]
        res = dl + 2.0 * ricci(st[k].g).values
        sq = np.sum(res.reshape(n * n, -1) ** 2, axis=0)
        ts.append(t1)
        mx.append(float(np.sqrt(sq.max())))
        l2.append(float(np.sqrt(sq.sum() * vol)))
    rep.add_series("max", ts, mx)
    rep.add_series("l2", ts, l2)
    rep.add_scalar("max_l2", max(l2))
    rep.add_scalar("max_max", max(mx))
    return rep
