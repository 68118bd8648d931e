"""Localized energies, cutoff functions, rate fits and the estimate checks.

Balls use the flat periodic distance.  The resolved time window is
[10 dx^2, T_final]: earlier times are dominated by grid-scale content of the
rough data.  The theorems' constants are existential, so every check here
reports fitted constants and exponents; verdicts are reserved for signs,
monotonicity, decay to zero and fitted exponents.
"""
from dataclasses import dataclass
import math

import numpy as np

from .report import NormReport
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    _norm_sq,
    christoffel,
    integrate,
    kernels,
    metric_derivatives,
    packed_index,
    partials,
    second_partials,
    spectral_partials,
    spectral_second_partials,
)

# ---------------------------------------------------------------------------
# exponents that appear in the estimates
# ---------------------------------------------------------------------------


def holder_exponent(sigma):
    """v(sigma) = sigma / (2 + sigma): 1/r + 1/v_hat = 1 with r = (4+2s)/4."""
    r = (4.0 + 2.0 * sigma) / 4.0
    v_hat = 1.0 / (1.0 - 1.0 / r)
    return 1.0 / v_hat


def p_sigma(sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return (2.0 + sigma) / sigma


def eps1(sigma, eps0):
    """Admissible pinning for the scalar-curvature propagation runs."""
    return min(sigma ** 3, eps0)


def _check_sigma(sigma, open_interval=False):
    if open_interval:
        if not 0.0 < sigma < 0.25:
            raise ValueError(f"sigma must lie in (0, 1/4), got {sigma}")
    elif not 0.0 <= sigma <= 0.25:
        raise ValueError(f"sigma must lie in [0, 1/4], got {sigma}")


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def periodic_distance(grid, center):
    """Flat distance to ``center`` on the torus, one value per node."""
    L = grid.period
    d2 = 0.0
    for x, c in zip(grid.coords(), np.broadcast_to(center, (grid.dim,))):
        dx = np.abs(x - c) % L
        dx = np.minimum(dx, L - dx)
        d2 = d2 + dx * dx
    return np.sqrt(d2)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def weight(self, grid):
        if not 0 < self.radius:
            raise ValueError("ball radius must be positive")
        if self.radius >= grid.period / 2 * math.sqrt(grid.dim):
            return np.ones(grid.shape)
        return (periodic_distance(grid, np.asarray(self.center, float)) < self.radius).astype(float)


def _smoothstep(u):
    """C^2 quintic going from 1 (u <= 0) to 0 (u >= 1), with derivatives."""
    u = np.clip(u, 0.0, 1.0)
    s = 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)
    ds = -30.0 * u * u * (1.0 - u) ** 2
    dds = -60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return s, ds, dds


@dataclass(frozen=True, eq=False)
class CutoffFunction:
    center: tuple
    r: float
    l_out: float
    field: ScalarField
    power: int
    ratio_max: float

    def weight(self, grid):
        grid.check_same(self.field.grid)
        return self.field.values


def build_cutoff(center, r, l_out, grid, power=8, floor=1e-8) -> CutoffFunction:
    """eta = s(d)^power, 1 on B(center, r), 0 outside B(center, (r + l_out)/2).

    Derivatives are analytic in the distance d, so the recorded ratio
    |grad eta|^2/eta + |grad eta|^4/eta^3 + |hess eta|^2/eta is free of
    differencing error.
    """
    if not 0 < r < l_out < grid.period / 2:
        raise ValueError(f"need 0 < r < l_out < L/2, got r={r}, l_out={l_out}")
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
    rho = 0.5 * (r + l_out)
    d = periodic_distance(grid, center)
    w = rho - r
    s, ds, dds = _smoothstep((d - r) / w)
    ds = ds / w
    dds = dds / (w * w)
    m = power
    eta = s ** m
    f1 = m * s ** (m - 1) * ds
    f2 = m * (m - 1) * s ** (m - 2) * ds * ds + m * s ** (m - 1) * dds
    with np.errstate(divide="ignore", invalid="ignore"):
        tang = np.where(d > 0, f1 / d, 0.0)
    hess2 = f2 * f2 + (grid.dim - 1) * tang * tang
    ok = eta > floor
    ratio = np.zeros(grid.shape)
    e = eta[ok]
    ratio[ok] = f1[ok] ** 2 / e + f1[ok] ** 4 / e ** 3 + hess2[ok] / e
    return CutoffFunction(tuple(float(c) for c in center), float(r), float(l_out),
                          ScalarField(grid, eta), m, float(ratio.max()))


def _weight(region, grid):
    if region is None:
        return np.ones(grid.shape)
    if isinstance(region, np.ndarray):
        return region
    return region.weight(grid)


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------

def _sq_norm(values, valence, bg):
    if bg.euclidean:
        return np.sum(values.reshape((-1,) + bg.grid.shape) ** 2, axis=0)
    return _norm_sq(values, valence, bg.hfull, bg.hinv)


def grad_sq(g: MetricField, bg: BackgroundMetric, second=False):
    """|nab g|_h^2 (and |nab^2 g|_h^2 when ``second``)."""
    _, _, nab, nn = metric_derivatives(g, bg, second=second)
    a = _sq_norm(nab, "ddd", bg)
    if not second:
        return a
    return a, _sq_norm(nn, "dddd", bg)


def _int(grid, vals, bg, w):
    return integrate(ScalarField(grid, vals * w), bg.sqrt_det)


def local_l2_distance(g_t, g_0, bg, region=None, p=2):
    """int_region |g_t - g_0|_h^p dh."""
    grid = g_t.grid
    grid.check_same(g_0.grid)
    diff = (g_t.packed - g_0.packed)[packed_index(grid.dim)]
    sq = _sq_norm(diff, "dd", bg)
    return _int(grid, sq ** (0.5 * p), bg, _weight(region, grid))


def sobolev_energy(g, bg, region=None, sigma=0.0):
    """int_region |nab g|^{2 + 2 sigma} dh."""
    _check_sigma(sigma)
    return _int(g.grid, grad_sq(g, bg) ** (1.0 + sigma), bg, _weight(region, g.grid))


def _trapezoid_accum(t, y):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def dirichlet_energy_accum(traj, region=None):
    """t_k -> int_0^{t_k} int_region |nab g|^2 dh ds (trapezoid over snapshots)."""
    bg = traj.bg
    w = _weight(region, traj.grid)
    y = np.array([_int(traj.grid, grad_sq(s.g, bg), bg, w) for s in traj.states])
    t = traj.times
    return t, _trapezoid_accum(t, y)


def sobolev_dissipation(traj, region=None, sigma=0.0):
    """t_k -> int_0^{t_k} int_region (|nab g|^{4+2s} + |nab g|^{2s} |nab^2 g|^2)."""
    _check_sigma(sigma)
    bg = traj.bg
    w = _weight(region, traj.grid)
    y = []
    for s in traj.states:
        a, b = grad_sq(s.g, bg, second=True)
        y.append(_int(traj.grid, a ** (2.0 + sigma) + a ** sigma * b, bg, w))
    t = traj.times
    return t, _trapezoid_accum(t, np.array(y))


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------

def fit_power_law(t, y):
    """Least squares of log y = log C + q log t.  Returns (q, C, rms residual)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 2 or np.any(t <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs >= 2 points with t, y > 0")
    A = np.vstack([np.log(t), np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    q, logC = coef
    res = np.log(y) - A @ coef
    return float(q), float(math.exp(logC)), float(np.sqrt(np.mean(res ** 2)))


def fit_linear(t, y):
    """Least squares y = a + B t.  Returns (B, a)."""
    A = np.vstack([np.asarray(t, float), np.ones(len(t))]).T
    (B, a), *_ = np.linalg.lstsq(A, np.asarray(y, float), rcond=None)
    return float(B), float(a)


def resolved_window(traj, t_min=None):
    if t_min is None:
        t_min = 10.0 * traj.grid.spacing ** 2
    return np.array([k for k, s in enumerate(traj.states) if s.t >= t_min * (1 - 1e-12)])


def _meta(traj):
    g = traj.grid
    return {"dim": g.dim, "res": g.res, "period": g.period,
            "dt": float(traj.diagnostics.get("dt", 0.0)) if traj.diagnostics else 0.0}


# ---------------------------------------------------------------------------
# the checks
# ---------------------------------------------------------------------------

def verify_l2_rate(traj, g_0, ball, region_outer, t_min=None, q_min=0.9) -> NormReport:
    """LHS(t) = int_B |g(t) - g0|^2 + int_0^t int_B |nab g|^2, fitted as C t^q."""
    bg = traj.bg
    grid = traj.grid
    win = resolved_window(traj, t_min)
    if len(win) < 4:
        raise ValueError("fewer than 4 resolved snapshots")
    w = _weight(ball, grid)
    t, E = dirichlet_energy_accum(traj, w)
    dist = np.array([local_l2_distance(s.g, g_0, bg, w) for s in traj.states])
    lhs = dist + E
    e0 = sobolev_energy(g_0, bg, region_outer, 0.0)
    rep = NormReport("l2_rate", meta=_meta(traj))
    rep.add_series("lhs", t[win], lhs[win])
    rep.add_series("distance", t[win], dist[win])
    rep.add_series("dirichlet", t[win], E[win])
    rep.add_scalar("initial_dirichlet_outer", e0)
    if np.all(lhs[win] == 0):
        rep.add_fit("lhs", q=1.0, C=0.0, residual=0.0, C_normalized=0.0)
        rep.set_verdict("rate", True)
        rep.set_verdict("small_at_tmin", True)
        return rep
    q, C, res = fit_power_law(t[win], lhs[win])
    rep.add_fit("lhs", q=q, C=C, residual=res, C_normalized=C / (1.0 + e0))
    rep.add_scalar("lhs_tmin_over_C", lhs[win[0]] / C)
    rep.set_verdict("rate", q >= q_min)
    rep.set_verdict("small_at_tmin", lhs[win[0]] <= 1e-2 * C)
    return rep


def verify_sobolev_estimate(traj, g_0, sigma, ball_inner, ball_outer, t_min=None,
                            c_n=1.0, window=None) -> NormReport:
    """Left side of the local W^{1,2+2s} estimate against its two ingredients.

    LHS(t) = int_{B_r} |nab g(t)|^{2+2s} + int_0^t int_{B_r} (|nab g|^{4+2s}
    + |nab g|^{2s} |nab^2 g|^2).  First ingredient I0 = int_{B_l}
    |nab g0|^{2+2s}, second J = 1 + int_{B_l} |nab g0|^2.  The excess
    LHS - c_n I0 is fitted as a + B t on the window; B / J is the implied
    t-linear constant.
    """
    _check_sigma(sigma)
    bg = traj.bg
    grid = traj.grid
    win = resolved_window(traj, t_min)
    if window is not None:
        ts = traj.times
        win = np.array([k for k in win if window[0] * (1 - 1e-12) <= ts[k] <= window[1] * (1 + 1e-12)])
    if len(win) < 3:
        raise ValueError("fewer than 3 resolved snapshots")
    wi = _weight(ball_inner, grid)
    wo = _weight(ball_outer, grid)
    t, D = sobolev_dissipation(traj, wi, sigma)
    E = np.array([sobolev_energy(s.g, bg, wi, sigma) for s in traj.states])
    lhs = E + D
    I0 = sobolev_energy(g_0, bg, wo, sigma)
    J = 1.0 + sobolev_energy(g_0, bg, wo, 0.0)
    excess = lhs - c_n * I0
    B, a = fit_linear(t[win], excess[win])
    tw = t[win]
    # smallest B_sup with excess <= max(a, 0) + B_sup t on the window
    B_sup = float(np.max((excess[win] - max(a, 0.0)) / tw))
    rep = NormReport(f"sobolev_sigma_{sigma:g}", meta=_meta(traj))
    rep.add_series("lhs", tw, lhs[win])
    rep.add_series("excess", tw, excess[win])
    rep.add_scalar("first_ingredient", I0)
    rep.add_scalar("second_ingredient", J)
    rep.add_scalar("c_n", c_n)
    rep.add_fit("excess_linear", B=B, a=a, B_over_J=B / J, B_sup=max(B_sup, 0.0))
    resid = excess[win] - (a + B * tw)
    scale = max(abs(I0), float(np.max(np.abs(lhs[win]))), 1e-300)
    rep.add_scalar("linear_fit_rel_residual", float(np.max(np.abs(resid))) / scale)
    rep.set_verdict("bounded", bool(np.all(np.isfinite(lhs))))
    return rep


def grad_diff_power(g_t, g_0, bg, power, region=None):
    """int |nab g_t - nab g_0|_h^power dh."""
    _, _, a, _ = metric_derivatives(g_t, bg, second=False)
    _, _, b, _ = metric_derivatives(g_0, bg, second=False)
    sq = _sq_norm(a - b, "ddd", bg)
    return _int(g_t.grid, sq ** (0.5 * power), bg, _weight(region, g_t.grid))


def _monotone_up(y):
    return bool(np.all(np.diff(y) >= 0.0))


def verify_w12sigma_convergence(traj, g_0, sigma, p_list=(2, 4), region=None,
                                t_min=None, frac=0.05, ball_inner=None,
                                ball_outer=None) -> NormReport:
    """Decay of int |nab g(t) - nab g0|^{2+s} and int |g(t) - g0|^p as t -> 0.

    Verdicts: each series is monotone in t on the resolved window and its
    value at t_min is at most ``frac`` of the value at T_final.  The
    Dirichlet-energy excess |int_{B_r} |nab g(t)|^2 - int_{B_l} |nab g0|^2|
    is fitted as C t^q and q compared with v(sigma).
    """
    _check_sigma(sigma, open_interval=True)
    bg = traj.bg
    win = resolved_window(traj, t_min)
    if len(win) < 3:
        raise ValueError("fewer than 3 resolved snapshots")
    ts = traj.times[win]
    rep = NormReport(f"w12sigma_sigma_{sigma:g}", meta=_meta(traj))
    G = np.array([grad_diff_power(traj.states[k].g, g_0, bg, 2.0 + sigma, region) for k in win])
    rep.add_series("grad_diff", ts, G)
    rep.set_verdict("grad_diff_monotone", _monotone_up(G))
    rep.set_verdict("grad_diff_small", G[0] <= frac * G[-1])
    rep.add_scalar("grad_diff_ratio", G[0] / G[-1] if G[-1] > 0 else 0.0)
    for p in p_list:
        if p < 2:
            raise ValueError("p must be >= 2")
        P = np.array([local_l2_distance(traj.states[k].g, g_0, bg, region, p) for k in win])
        rep.add_series(f"lp_{p:g}", ts, P)
        rep.set_verdict(f"lp_{p:g}_monotone", _monotone_up(P))
        rep.set_verdict(f"lp_{p:g}_small", P[0] <= frac * P[-1])
        rep.add_scalar(f"lp_{p:g}_ratio", P[0] / P[-1] if P[-1] > 0 else 0.0)
    v = holder_exponent(sigma)
    rep.add_scalar("v_sigma", v)
    wi = _weight(ball_inner if ball_inner is not None else region, traj.grid)
    wo = _weight(ball_outer if ball_outer is not None else region, traj.grid)
    e0 = _int(traj.grid, grad_sq(g_0, bg), bg, wo)
    ex = np.array([abs(_int(traj.grid, grad_sq(traj.states[k].g, bg), bg, wi) - e0) for k in win])
    rep.add_series("dirichlet_excess", ts, ex)
    if np.all(ex > 0):
        q, C, res = fit_power_law(ts, ex)
        rep.add_fit("dirichlet_excess", q=q, C=C, residual=res, v_sigma=v)
        rep.set_verdict("excess_exponent_at_least_v", q >= v)
    else:
        rep.set_verdict("excess_exponent_at_least_v", None)
    return rep


def interpolation_inequality_check(f: ScalarField, g: MetricField,
                                   derivatives="fd") -> NormReport:
    """int |grad f|_g^4 / f^2 dg versus int |hess f|_g^2 dg, plus the identity

        4 int |grad w|^4 = int (Lap f) |grad w|^2 + 2 int hess f (grad w, grad w)

    for w = f^(1/2), which underlies the inequality.  All derivatives are
    g-covariant; only f itself is differenced (grad w = grad f / (2 w)).
    ``derivatives="spectral"`` differentiates f exactly as a trigonometric
    polynomial, which is the right choice for band-limited f; the metric's
    Christoffel symbols always use the finite-difference stencils.
    """
    grid = f.grid
    grid.check_same(g.grid)
    if np.any(f.values <= 0):
        raise ValueError("f must be positive")
    n = grid.dim
    idx = packed_index(n)
    full = g.packed[idx]
    inv = kernels.sym_inverse(g.packed, n)[0][idx]
    vol = np.sqrt(g.determinant())
    if derivatives == "fd":
        df = partials(f.values, grid)
        hf = second_partials(f.values, grid)
    elif derivatives == "spectral":
        df = spectral_partials(f.values, grid)
        hf = spectral_second_partials(f.values, grid)
    else:
        raise ValueError("derivatives must be 'fd' or 'spectral'")
    if not all(np.ptp(c) == 0.0 for c in g.packed):
        gam, _ = christoffel(full, inv, partials(g.packed, grid)[:, idx])
        hf = hf - np.einsum("kij...,k...->ij...", gam, df)
    es = np.einsum
    grad2 = es("ij...,i...,j...->...", inv, df, df)
    hess2 = es("ia...,jb...,ij...,ab...->...", inv, inv, hf, hf)
    lap = es("ij...,ij...->...", inv, hf)
    lhs = integrate(ScalarField(grid, grad2 ** 2 / f.values ** 2), vol)
    rhs = integrate(ScalarField(grid, hess2), vol)
    # w = sqrt f: grad w = df / (2 w), |grad w|^2 = grad2 / (4 f)
    dw = df / (2.0 * np.sqrt(f.values))
    gw2 = grad2 / (4.0 * f.values)
    I4 = integrate(ScalarField(grid, gw2 ** 2), vol)
    hww = es("ia...,jb...,ij...,a...,b...->...", inv, inv, hf, dw, dw)
    ident = integrate(ScalarField(grid, lap * gw2 + 2.0 * hww), vol)
    rep = NormReport("interpolation", meta={"dim": n, "res": grid.res, "period": grid.period})
    rep.add_scalar("lhs", lhs)
    rep.add_scalar("rhs", rhs)
    rep.add_scalar("ratio", lhs / rhs if rhs > 0 else 0.0)
    rep.add_scalar("identity_lhs", 4.0 * I4)
    rep.add_scalar("identity_rhs", ident)
    rep.add_scalar("identity_residual", abs(4.0 * I4 - ident) / (4.0 * I4) if I4 > 0 else 0.0)
    return rep
