"""Conjugate heat equation along a Ricci flow, solved backward from t = Y.

In tau = Y - t the equation reads d psi / d tau = Lap_l psi - R_l psi, which
is forward parabolic.  The Laplacian is taken in divergence form
(1/sqrt(det l)) d_i (sqrt(det l) l^ij d_j psi) so that its discrete version is
symmetric in the weighted inner product, which the duality and mass checks
rely on.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .curvature import ricci, scalar_curvature
from .flow import FlowState, FlowTrajectory
from .report import NormReport
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    check_spd,
    integrate,
    packed_index,
    partials,
    relative_eigenvalues,
)

NEG_TOL = 1e-10


class NegativityError(RuntimeError):
    pass


def _coefficients(ell: MetricField, R=None):
    """(A^ij = sqrt(det l) l^ij, 1/sqrt(det l), R_l) as arrays."""
    n = ell.grid.dim
    inv_p, det = kernels.sym_inverse(ell.packed, n)
    sq = np.sqrt(det)
    A = (inv_p * sq)[packed_index(n)]
    if R is None:
        R = scalar_curvature(ell).values
    return A, 1.0 / sq, np.asarray(R)


def _div_laplacian(psi, A, isq, grid):
    d = partials(psi, grid)
    flux = np.einsum("ij...,j...->i...", A, d)
    n = grid.dim
    div = sum(kernels.d1(flux[i], i, grid.spacing) for i in range(n))
    return isq * div


def laplacian(psi: ScalarField, ell: MetricField) -> ScalarField:
    check_spd(ell)
    A, isq, _ = _coefficients(ell, R=0.0)
    return ScalarField(psi.grid, _div_laplacian(psi.values, A, isq, psi.grid))


def conjugate_rhs(psi: ScalarField, ell: MetricField, R: ScalarField | None = None) -> ScalarField:
    """Lap_l psi - R_l psi."""
    check_spd(ell)
    psi.grid.check_same(ell.grid)
    A, isq, Rv = _coefficients(ell, None if R is None else R.values)
    return ScalarField(psi.grid, _div_laplacian(psi.values, A, isq, psi.grid) - Rv * psi.values)


def static_trajectory(g: MetricField, times, bg=None) -> FlowTrajectory:
    """A time-independent trajectory (for checks against exact solutions)."""
    if bg is None:
        bg = BackgroundMetric.flat_torus(g.grid)
    states = [FlowState(float(t), g, k) for k, t in enumerate(times)]
    return FlowTrajectory(states, np.diff(np.asarray(times, float)), bg, {"static": True})


@dataclass(eq=False)
class ConjugateRun:
    Y: float
    phi_Y: ScalarField
    times: np.ndarray
    phi_series: list
    ell_traj: FlowTrajectory
    b: float = 0.0
    clamped: int = 0
    substeps: list = field(default_factory=list)

    def phi_at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        return self.phi_series[k]


def _snapshot_coeffs(traj, keep):
    out = []
    for k in keep:
        out.append(_coefficients(traj.states[k].g))
    return out


def _cfl_dt(traj, keep, c_cfl):
    grid = traj.grid
    lam = 0.0
    for k in keep:
        lo, _ = relative_eigenvalues(traj.states[k].g, traj.bg)
        lam = max(lam, 1.0 / float(np.min(lo)))
    return c_cfl * grid.spacing ** 2 / (2 * grid.dim * lam)


def solve_conjugate(ell_traj: FlowTrajectory, phi_Y: ScalarField, Y, t_min, b=0.0,
                    c_cfl=0.2, neg_tol=NEG_TOL) -> ConjugateRun:
    """Backward solve from phi(Y) = phi_Y, storing phi at every snapshot time
    of the trajectory in [t_min, Y].

    Heun's method (RK2) in tau with a uniform number of substeps per snapshot
    interval, sized by the CFL rule; coefficients derived from l are taken at
    the snapshots and interpolated linearly in time.
    """
    grid = ell_traj.grid
    grid.check_same(phi_Y.grid)
    if np.any(phi_Y.values < 0):
        raise ValueError("phi_Y must be nonnegative")
    ts = ell_traj.times
    if not t_min < Y:
        raise ValueError("need t_min < Y")
    if Y > ts[-1] * (1 + 1e-12) or t_min < ts[0] * (1 - 1e-12):
        raise ValueError("Y and t_min must lie in the trajectory's time range")
    keep = [k for k in range(len(ts)) if t_min * (1 - 1e-12) <= ts[k] <= Y * (1 + 1e-12)]
    if ts[keep[-1]] != Y or ts[keep[0]] != t_min:
        raise ValueError("Y and t_min must be snapshot times")
    coeffs = _snapshot_coeffs(ell_traj, keep)
    dt_max = _cfl_dt(ell_traj, keep, c_cfl)
    phimax = float(phi_Y.values.max())
    floor = -neg_tol * phimax
    psi = phi_Y.values.copy()
    series = [ScalarField(grid, psi.copy())]
    out_t = [float(Y)]
    clamped = 0
    nsubs = []

    def rhs(p, w, ca, cb):
        A = (1 - w) * ca[0] + w * cb[0]
        isq = (1 - w) * ca[1] + w * cb[1]
        R = (1 - w) * ca[2] + w * cb[2]
        return _div_laplacian(p, A, isq, grid) - R * p

    for j in range(len(keep) - 1, 0, -1):
        t_hi, t_lo = ts[keep[j]], ts[keep[j - 1]]
        span = t_hi - t_lo
        m = max(1, math.ceil(span / dt_max - 1e-9))
        nsubs.append(m)
        h = span / m
        c_hi, c_lo = coeffs[j], coeffs[j - 1]
        for i in range(m):
            # w = weight of the lower snapshot; tau increases as t decreases
            w0 = i / m
            w1 = (i + 1) / m
            k1 = rhs(psi, w0, c_hi, c_lo)
            k2 = rhs(psi + h * k1, w1, c_hi, c_lo)
            psi = psi + 0.5 * h * (k1 + k2)
            neg = psi < 0
            if np.any(neg):
                if np.min(psi) < floor:
                    raise NegativityError(
                        f"phi reached {np.min(psi):.3e} < -{neg_tol:g} max phi_Y "
                        f"at t = {t_hi - (i + 1) * h:.4e}")
                clamped += int(np.count_nonzero(neg))
                psi = np.where(neg, 0.0, psi)
        series.append(ScalarField(grid, psi.copy()))
        out_t.append(float(t_lo))
    order = np.argsort(out_t)
    return ConjugateRun(
        Y=float(Y), phi_Y=phi_Y, times=np.asarray(out_t)[order],
        phi_series=[series[k] for k in order], ell_traj=ell_traj, b=float(b),
        clamped=clamped, substeps=nsubs[::-1])


def _metric_at(run, t):
    ts = run.ell_traj.times
    k = int(np.argmin(np.abs(ts - t)))
    return run.ell_traj.states[k].g


def scalar_mass_series(run: ConjugateRun, rel_tol=1e-4) -> NormReport:
    """M(t) = int (R_l + b) phi dl and the companion int 2 phi |Ric_l|^2 dl."""
    rep = NormReport("scalar_mass")
    grid = run.phi_Y.grid
    n = grid.dim
    M, Cser = [], []
    for t, phi in zip(run.times, run.phi_series):
        ell = _metric_at(run, t)
        R = scalar_curvature(ell)
        vol = np.sqrt(ell.determinant())
        M.append(integrate(ScalarField(grid, (R.values + run.b) * phi.values), vol))
        ric = ricci(ell).values
        inv = kernels.sym_inverse(ell.packed, n)[0][packed_index(n)]
        ric2 = np.einsum("ia...,jb...,ij...,ab...->...", inv, inv, ric, ric)
        Cser.append(integrate(ScalarField(grid, 2.0 * phi.values * ric2), vol))
    M = np.array(M)
    Cser = np.array(Cser)
    # largest drop M(t) - M(t') over t < t'
    run_min = np.minimum.accumulate(M[::-1])[::-1]
    viol = float(np.max(np.maximum(M - run_min, 0.0)))
    rep.add_series("M", run.times, M)
    rep.add_series("companion", run.times, Cser)
    rep.add_scalar("max_violation", viol)
    tol = rel_tol * (1.0 + abs(M[-1]))
    rep.add_scalar("tolerance", tol)
    rep.add_scalar("clamped", run.clamped)
    rep.set_verdict("monotone", viol <= tol)
    rep.set_verdict("companion_nonneg", bool(np.all(Cser >= 0)))
    return rep


def check_conjugate_bounds(run: ConjugateRun, eps, p_list=(2.0,), tol=1e-2) -> NormReport:
    """sup phi(t) t^eps / (Y^eps sup phi_Y) and the p-norm series of phi.

    The bound is only claimed when min R_l(t) >= -eps / t at every stored
    time; otherwise the verdict is None (not applicable).
    """
    rep = NormReport("conjugate_bounds")
    grid = run.phi_Y.grid
    supY = float(run.phi_Y.values.max())
    ratios, minR_t = [], []
    pser = {p: [] for p in p_list}
    vols = []
    for t, phi in zip(run.times, run.phi_series):
        ell = _metric_at(run, t)
        R = scalar_curvature(ell).values
        minR_t.append(float(R.min()) * t)
        ratios.append(float(phi.values.max()) * t ** eps / (run.Y ** eps * supY))
        vol = np.sqrt(ell.determinant())
        vols.append(float(np.sum(vol)) * grid.spacing ** grid.dim)
        for p in p_list:
            pser[p].append(integrate(ScalarField(grid, phi.values ** p), vol))
    rep.add_series("sup_ratio", run.times, ratios)
    rep.add_series("minR_times_t", run.times, minR_t)
    for p in p_list:
        rep.add_series(f"lp_{p:g}", run.times, pser[p])
    applies = all(m >= -eps for m in minR_t)
    rep.add_scalar("max_ratio", max(ratios))
    rep.add_scalar("measured_eps", max(0.0, -min(minR_t)))
    rep.add_scalar("max_volume", max(vols))
    rep.set_verdict("sup_bound", (max(ratios) <= 1.0 + tol) if applies else None)
    return rep


def solve_forward_heat(ell: MetricField, u0: ScalarField, times, c_cfl=0.2):
    """d_t u = Lap_l u on a static metric; returns u at each of ``times``
    (starting from times[0])."""
    grid = ell.grid
    A, isq, _ = _coefficients(ell, R=0.0)
    lo, _ = relative_eigenvalues(ell, BackgroundMetric.flat_torus(grid))
    dt_max = c_cfl * grid.spacing ** 2 * float(np.min(lo)) / (2 * grid.dim)
    u = u0.values.copy()
    out = [ScalarField(grid, u.copy())]
    for a, b in zip(times[:-1], times[1:]):
        m = max(1, math.ceil((b - a) / dt_max - 1e-9))
        h = (b - a) / m
        for _ in range(m):
            k1 = _div_laplacian(u, A, isq, grid)
            k2 = _div_laplacian(u + h * k1, A, isq, grid)
            u = u + 0.5 * h * (k1 + k2)
        out.append(ScalarField(grid, u.copy()))
    return out
