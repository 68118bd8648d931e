"""Ricci-DeTurck flow relative to a fixed background metric h.

The right-hand side is evaluated term by term in background-covariant form:

    dg_ij/dt = g^ab nab_a nab_b g_ij
               - g^kl g_ip h^pq Rm_jkql(h) - g^kl g_jp h^pq Rm_ikql(h)
               + 1/2 g^ab g^pq ( nab_i g_pa nab_j g_qb + 2 nab_a g_jp nab_q g_ib
                                 - 2 nab_a g_jp nab_b g_iq - 2 nab_j g_pa nab_b g_iq
                                 - 2 nab_i g_pa nab_b g_jq )

Time stepping is explicit with a parabolic CFL limit dt ~ dx^2.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from ._accel import using_numba
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    NotPositiveDefiniteError,
    ScalarField,
    TensorField,
    check_spd,
    metric_derivatives,
    pinning_deviation,
    relative_eigenvalues,
    second_partials,
    partials,
)

DEFAULT_C_CFL = 0.2
SCHEMES = ("euler", "rk2", "rk4")


class CFLViolation(ValueError):
    def __init__(self, dt, limit):
        self.dt = float(dt)
        self.suggested_dt = float(limit)
        super().__init__(f"dt={dt:.3e} exceeds the CFL limit; use dt <= {limit:.3e}")


class BlowUpError(RuntimeError):
    def __init__(self, message, t=None, node=None):
        self.t = t
        self.node = node
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    g: MetricField
    step_count: int = 0


@dataclass(eq=False)
class FlowTrajectory:
    """Time-ordered snapshots of one run.

    ``diagnostics`` holds per-snapshot arrays (``grad_sup``, ``hess_sup``,
    ``pin``) and ``failure`` is None unless the run was cut short.
    """

    states: list
    dt_schedule: np.ndarray
    bg: BackgroundMetric
    diagnostics: dict = field(default_factory=dict)
    failure: str | None = None

    def __post_init__(self):
        ts = [s.t for s in self.states]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        for s in self.states:
            self.bg.grid.check_same(s.g.grid)
        self.dt_schedule = np.asarray(self.dt_schedule, dtype=np.float64)

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def grid(self):
        return self.bg.grid

    def __len__(self):
        return len(self.states)

    def metric_at(self, t):
        """Metric at time t by linear interpolation between snapshots."""
        ts = self.times
        if t <= ts[0]:
            return self.states[0].g
        if t >= ts[-1]:
            return self.states[-1].g
        k = int(np.searchsorted(ts, t, side="right")) - 1
        if ts[k] == t:
            return self.states[k].g
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        a, b = self.states[k].g, self.states[k + 1].g
        return a.with_packed((1.0 - w) * a.packed + w * b.packed)


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------

def _rhs_packed(g: MetricField, bg: BackgroundMetric):
    grid = g.grid
    n = grid.dim
    if bg.flat and using_numba():
        return kernels.rdtf_flat_fused(g.packed, n, grid.spacing)
    gfull, ginv, nab, nn = metric_derivatives(g, bg)
    P = grid.size
    args = [gfull.reshape(n, n, P), ginv.reshape(n, n, P),
            nab.reshape(n, n, n, P), nn.reshape(n, n, n, n, P)]
    if not bg.flat:
        args += [bg.hinv.reshape(n, n, P), bg.riemann_h.values.reshape(n, n, n, n, P)]
    out = kernels.rdtf_assemble(*args)
    return out.reshape((grid.ncomp,) + grid.shape)


def rdtf_rhs(g: MetricField, bg: BackgroundMetric) -> TensorField:
    """Ricci-DeTurck velocity dg/dt as a symmetric (dd) tensor field."""
    bg.grid.check_same(g.grid)
    check_spd(g)
    rhs = _rhs_packed(g, bg)
    return TensorField(g.grid, rhs[kernels.packed_index(g.grid.dim)], "dd")


def cfl_limit(g: MetricField, bg: BackgroundMetric, c_cfl=DEFAULT_C_CFL):
    """c_cfl dx^2 / (2 n max lambda_max(g^{-1} h))."""
    lo, _ = relative_eigenvalues(g, bg)
    lam = 1.0 / float(np.min(lo))
    grid = g.grid
    return c_cfl * grid.spacing ** 2 / (2 * grid.dim * lam)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def _advance(p, dt, bg, scheme, grid):
    f = lambda q: _rhs_packed(MetricField(grid, q), bg)
    if scheme == "euler":
        return p + dt * f(p)
    if scheme == "rk2":
        k1 = f(p)
        k2 = f(p + dt * k1)
        return p + 0.5 * dt * (k1 + k2)
    if scheme == "rk4":
        k1 = f(p)
        k2 = f(p + 0.5 * dt * k1)
        k3 = f(p + 0.5 * dt * k2)
        k4 = f(p + dt * k3)
        return p + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def step(state: FlowState, dt, bg: BackgroundMetric, scheme="rk2",
         c_cfl=DEFAULT_C_CFL, eps0=None) -> FlowState:
    """One explicit step.  Raises CFLViolation before stepping and
    BlowUpError if the result is not SPD (or drifts past 3 eps0 from h)."""
    g = state.g
    limit = cfl_limit(g, bg, c_cfl)
    if dt > limit * (1.0 + 1e-12):
        raise CFLViolation(dt, limit)
    new = _advance(g.packed, dt, bg, scheme, g.grid)
    if not np.all(np.isfinite(new)):
        raise BlowUpError("non-finite metric after step", t=state.t + dt)
    gn = g.with_packed(new)
    t = state.t + dt
    try:
        check_spd(gn)
    except NotPositiveDefiniteError as e:
        raise BlowUpError(f"positive definiteness lost at t={t:.4e}: {e}", t=t,
                          node=e.node) from e
    if eps0 is not None:
        dev = pinning_deviation(gn, bg)
        if float(np.max(dev)) > 3.0 * eps0:
            node = np.unravel_index(int(np.argmax(dev)), g.grid.shape)
            raise BlowUpError(f"|g - h| exceeded 3 eps0 at t={t:.4e}", t=t,
                              node=tuple(int(i) for i in node))
    return FlowState(t, gn, state.step_count + 1)


def derivative_sups(g: MetricField, bg: BackgroundMetric):
    """Max-node |nab g|_h and |nab^2 g|_h."""
    _, _, nab, nn = metric_derivatives(g, bg)
    if bg.euclidean:
        s1 = np.sum(nab.reshape((-1,) + g.grid.shape) ** 2, axis=0)
        s2 = np.sum(nn.reshape((-1,) + g.grid.shape) ** 2, axis=0)
    else:
        from .tensor_core import _norm_sq
        s1 = _norm_sq(nab, "ddd", bg.hfull, bg.hinv)
        s2 = _norm_sq(nn, "dddd", bg.hfull, bg.hinv)
    return math.sqrt(float(np.max(s1))), math.sqrt(float(np.max(s2)))


def _snapshot_steps(times, dt, nsteps):
    steps = sorted({min(nsteps, max(0, int(round(t / dt)))) for t in times})
    return [0] + [s for s in steps if s > 0]


def evolve(g0: MetricField, T_final, bg: BackgroundMetric, snapshot_times=(),
           scheme="rk2", c_cfl=DEFAULT_C_CFL, eps0=0.1, monitor=True,
           dt=None, max_steps=None, callback=None) -> FlowTrajectory:
    """Integrate from t = 0 to T_final with a uniform step.

    The step is the CFL limit at g0 shrunk by the worst case of the pinning
    conclusion (eigenvalues of h^{-1} g stay above 1 - 2 eps0), then reduced
    so that T_final is hit exactly.  Snapshots go to the nearest step; t = 0
    and T_final are always stored.  On blow-up or pinning loss the
    trajectory is returned truncated with ``failure`` set.
    """
    if not T_final > 0:
        raise ValueError("T_final must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    check_spd(g0)
    grid = g0.grid
    if dt is None:
        lo, _ = relative_eigenvalues(g0, bg)
        floor = min(float(np.min(lo)), 1.0 - 2.0 * eps0) if monitor else float(np.min(lo))
        dt = c_cfl * grid.spacing ** 2 * floor / (2 * grid.dim)
    nsteps = max(1, math.ceil(T_final / dt - 1e-9))
    if max_steps is not None and nsteps > max_steps:
        raise ValueError(f"{nsteps} steps needed, max_steps={max_steps}")
    dt = T_final / nsteps
    want = _snapshot_steps(list(snapshot_times) + [T_final], dt, nsteps)
    want_set = set(want)
    state = FlowState(0.0, g0, 0)
    states = [state]
    diag = {"grad_sup": [], "hess_sup": [], "pin": []}

    def record(s):
        a, b = derivative_sups(s.g, bg)
        diag["grad_sup"].append(a)
        diag["hess_sup"].append(b)
        diag["pin"].append(float(np.max(pinning_deviation(s.g, bg))))

    record(state)
    failure = None
    for k in range(1, nsteps + 1):
        try:
            state = step(state, dt, bg, scheme, c_cfl, eps0 if monitor else None)
        except CFLViolation as e:
            failure = f"cfl: {e}"
            break
        except BlowUpError as e:
            failure = f"blowup: {e}"
            break
        # uniform dt gives a drifting float sum; pin times to k * dt
        state = FlowState(k * dt if k < nsteps else float(T_final), state.g, k)
        if k in want_set:
            states.append(state)
            record(state)
            if monitor and diag["pin"][-1] > 2.0 * eps0:
                failure = f"pinning: |g - h| reached {diag['pin'][-1]:.4f} > 2 eps0 at t={state.t:.4e}"
                break
        if callback is not None:
            callback(state)
    taken = state.step_count
    diag = {k: np.array(v) for k, v in diag.items()}
    diag["dt"] = dt
    diag["scheme"] = scheme
    return FlowTrajectory(states, np.full(taken, dt), bg, diag, failure)


# ---------------------------------------------------------------------------
# omega monitor
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OmegaDiagnostic:
    L_const: float
    omega: ScalarField
    inequality_residual: ScalarField
    max_residual: float
    terms: dict


def _omega_parts(g, bg, L_const):
    _, ginv, nab, nn = metric_derivatives(g, bg)
    diff = (g.packed - bg.h.packed)[kernels.packed_index(g.grid.dim)]
    if bg.euclidean:
        grad2 = np.sum(nab.reshape((-1,) + g.grid.shape) ** 2, axis=0)
        hess2 = np.sum(nn.reshape((-1,) + g.grid.shape) ** 2, axis=0)
        dist2 = np.sum(diff.reshape((-1,) + g.grid.shape) ** 2, axis=0)
    else:
        from .tensor_core import _norm_sq
        grad2 = _norm_sq(nab, "ddd", bg.hfull, bg.hinv)
        hess2 = _norm_sq(nn, "dddd", bg.hfull, bg.hinv)
        dist2 = _norm_sq(diff, "dd", bg.hfull, bg.hinv)
    omega = grad2 * (1.0 + L_const * dist2)
    return omega, ginv, grad2, hess2


def omega_monitor(state: FlowState, nxt: FlowState, bg: BackgroundMetric,
                  L_const) -> OmegaDiagnostic:
    """Residual c_eff = d_t omega - g^ab nab_a nab_b omega + 8/7 |nab^2 g|^2
    + 3/4 L |nab g|^4, with omega = |nab g|^2 (1 + L |g - h|^2).

    The time derivative is the forward difference between the two states;
    every spatial term is evaluated on ``state``.
    """
    grid = state.g.grid
    dt = nxt.t - state.t
    if not dt > 0:
        raise ValueError("states must be consecutive in increasing time")
    w0, ginv, grad2, hess2 = _omega_parts(state.g, bg, L_const)
    w1 = _omega_parts(nxt.g, bg, L_const)[0]
    dtw = (w1 - w0) / dt
    hw = second_partials(w0, grid)
    if not bg.flat:
        hw = hw - np.einsum("mab...,m...->ab...", bg.christoffel_h.values, partials(w0, grid))
    ell = np.einsum("ab...,ab...->...", ginv, hw)
    quartic = 0.75 * L_const * grad2 ** 2
    hess_term = (8.0 / 7.0) * hess2
    res = dtw - ell + hess_term + quartic
    return OmegaDiagnostic(
        L_const=float(L_const),
        omega=ScalarField(grid, w0),
        inequality_residual=ScalarField(grid, res),
        max_residual=float(np.max(res)),
        terms={"dt_omega": dtw, "elliptic": ell, "hessian": hess_term, "quartic": quartic},
    )
