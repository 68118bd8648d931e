"""generate -> flow -> pullback -> conjugate heat -> verify, driven by an
ExperimentConfig.  Each stage is a plain function so the command line and
the tests can run any prefix of the chain."""
from dataclasses import dataclass, field
import math
import os

import numpy as np

from . import io as rio
from .config import ConfigError, ExperimentConfig
from .conjugate_heat import check_conjugate_bounds, scalar_mass_series, solve_conjugate
from .curvature import (
    distributional_verdict,
    phi_family,
    random_bandlimited_phi,
    scalar_curvature,
)
from .deturck import integrate_diffeo, related_ricci_flow, ricci_flow_residual
from .flow import FlowTrajectory, evolve
from .harness import (
    Ball,
    interpolation_inequality_check,
    verify_l2_rate,
    verify_sobolev_estimate,
    verify_w12sigma_convergence,
)
from .initial_data import (
    MollifierParams,
    RoughMetricSpec,
    generate_rough_metric,
    mollify,
    perturbed_background,
    pulled_back_flat_metric,
)
from .report import NormReport
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    TorusGrid,
    integrate,
    metric_derivatives,
    pinning_deviation,
)

EXIT_OK, EXIT_VERDICT, EXIT_INPUT, EXIT_BLOWUP = 0, 1, 2, 3


class InputError(RuntimeError):
    """Missing or inconsistent input files."""


@dataclass(eq=False)
class PipelineResult:
    config: ExperimentConfig
    g0: MetricField
    traj: FlowTrajectory | None = None
    ell_traj: FlowTrajectory | None = None
    reports: list = field(default_factory=list)
    failure: str | None = None

    @property
    def passed(self):
        return all(r.passed for r in self.reports)

    def exit_code(self):
        if self.failure is not None:
            return EXIT_BLOWUP
        return EXIT_OK if self.passed else EXIT_VERDICT


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def make_grid(cfg: ExperimentConfig) -> TorusGrid:
    return TorusGrid(cfg.grid.dim, cfg.grid.res, float(cfg.grid.period))


def build_background(cfg: ExperimentConfig) -> BackgroundMetric:
    grid = make_grid(cfg)
    if cfg.background.kind == "flat" or cfg.background.amplitude == 0.0:
        return BackgroundMetric.flat_torus(grid)
    return perturbed_background(grid, cfg.background.amplitude, cfg.background.modes)


def build_initial(cfg: ExperimentConfig, bg: BackgroundMetric) -> MetricField:
    ini = cfg.initial
    grid = bg.grid
    if ini.kind == "identity":
        g = MetricField(grid, bg.h.packed.copy(), pinned_eps=0.0)
    elif ini.kind == "rough":
        spec = RoughMetricSpec(
            decay_exponent=ini.decay_exponent, amplitude_cap=ini.amplitude_cap,
            seed=cfg.seed, mode_cutoff=ini.mode_cutoff,
            component_pattern=ini.component_pattern, phases=ini.phases,
            eps0=cfg.flow.eps0)
        g = generate_rough_metric(spec, bg)
    elif ini.kind == "pulled_back":
        eps = ini.eps if ini.eps is not None else cfg.eps1()
        g, _ = pulled_back_flat_metric(grid, eps, ini.decay_exponent, cfg.seed, ini.mode_cutoff)
    else:
        if not os.path.exists(ini.path):
            raise InputError(f"initial metric file not found: {ini.path}")
        g = rio.read_metric(ini.path, bg)
        grid.check_same(g.grid)
    if ini.mollify_scale > 0:
        g = mollify(g, MollifierParams(ini.mollify_scale))
    return g


def t_min_of(cfg, grid):
    return cfg.deturck.t_min if cfg.deturck.t_min is not None else 10.0 * grid.spacing ** 2


def snapshot_times(cfg: ExperimentConfig, grid: TorusGrid):
    """k T / U for k = 1..U, plus G geometric times from t_min to T."""
    T = cfg.T_final()
    U = cfg.flow.uniform_snapshots
    ts = [T * k / U for k in range(1, U + 1)]
    G = cfg.flow.geometric_snapshots
    tm = 10.0 * grid.spacing ** 2
    if G > 0 and tm < T:
        ts += list(np.geomspace(tm, T, G))
    return sorted(set(ts))


def run_flow(cfg: ExperimentConfig, g0: MetricField, bg: BackgroundMetric) -> FlowTrajectory:
    f = cfg.flow
    return evolve(g0, cfg.T_final(), bg, snapshot_times(cfg, bg.grid), scheme=f.scheme,
                  c_cfl=f.c_cfl, eps0=f.eps0, monitor=f.monitor)


def _uniform_indices(cfg, traj, t_min):
    """Indices of the uniform snapshots k T / U with k even-aligned so that
    dropping every other one halves the spacing over the same interval."""
    U = cfg.flow.uniform_snapshots
    if U < 4:
        return [], []
    T = cfg.T_final()
    dt = float(traj.diagnostics.get("dt", 0.0)) or (traj.times[1] - traj.times[0])
    ts = traj.times
    idx = {}
    for k in range(U + 1):
        j = int(np.argmin(np.abs(ts - T * k / U)))
        if abs(ts[j] - T * k / U) <= 0.51 * dt:
            idx[k] = j
    k0 = next((k for k in range(0, U + 1, 2) if k in idx and ts[idx[k]] >= t_min * (1 - 1e-12)), None)
    if k0 is None:
        return [], []
    fine = [idx[k] for k in range(k0, U + 1) if k in idx]
    coarse = [idx[k] for k in range(k0, U + 1, 2) if k in idx]
    return fine, coarse


def _need_resolved(cfg, traj, count, what):
    t_min = t_min_of(cfg, traj.grid)
    have = sum(1 for t in traj.times if t >= t_min * (1 - 1e-12))
    if have < count:
        raise ConfigError(f"{what} needs {count} snapshots at t >= t_min = {t_min:.3e}, "
                          f"found {have}; raise flow.T_final or the snapshot counts")


def _sub(traj, ids):
    return FlowTrajectory([traj.states[i] for i in ids], traj.dt_schedule, traj.bg,
                          traj.diagnostics, traj.failure)


def _curvature_integral(g):
    R = scalar_curvature(g).values
    vol = np.sqrt(g.determinant())
    return (integrate(ScalarField(g.grid, R), vol),
            integrate(ScalarField(g.grid, np.abs(R)), vol))


def related_flow_stage(cfg: ExperimentConfig, traj: FlowTrajectory):
    """Diffeomorphisms, l(t) = Phi^* g(t), and the Ricci-flow residual at the
    uniform spacing and at double spacing.  Returns (ell_traj, report)."""
    grid = traj.grid
    t_min = t_min_of(cfg, grid)
    fine, coarse = _uniform_indices(cfg, traj, t_min)
    if len(coarse) < 3:
        raise ConfigError("need at least 3 uniform snapshots at double spacing in the "
                          "resolved window; raise flow.uniform_snapshots or flow.T_final")
    sub = _sub(traj, fine)
    S = cfg.deturck.S if cfg.deturck.S is not None else sub.times[-1]
    S = float(sub.times[int(np.argmin(np.abs(sub.times - S)))])
    fam = integrate_diffeo(sub, S=S, t_min=sub.times[0], substeps=cfg.deturck.substeps)
    ell = related_ricci_flow(sub, fam)
    rep = NormReport("related_flow", meta=_meta(traj))
    res_f = ricci_flow_residual(ell)
    sub_c = _sub(traj, coarse)
    fam_c = integrate_diffeo(sub_c, S=S, t_min=sub_c.times[0], substeps=cfg.deturck.substeps)
    res_c = ricci_flow_residual(related_ricci_flow(sub_c, fam_c))
    tf, lf = res_f.series["l2"]
    tc, lc = res_c.series["l2"]
    common = np.isin(tf, tc)
    rep.add_series("residual_l2", tf, lf)
    rep.add_series("residual_l2_coarse", tc, lc)
    e_f = float(np.max(lf[common]))
    e_c = float(np.max(lc[np.isin(tc, tf[common])]))
    order = math.log2(e_c / e_f) if e_f > 0 and e_c > 0 else float("inf")
    rep.add_scalar("residual_fine", e_f)
    rep.add_scalar("residual_coarse", e_c)
    if math.isfinite(order):
        rep.add_scalar("residual_order", order)
    # the time difference amplifies roundoff by 1 / spacing; below this the
    # residual carries no order information
    h = float(np.min(np.diff(sub.times)))
    amp = max(float(np.max(np.abs(s.g.packed))) for s in ell.states)
    floor = 1e3 * np.finfo(float).eps * amp / h * math.sqrt(grid.volume)
    rep.add_scalar("residual_roundoff_floor", floor)
    rep.set_verdict("residual_first_order", order >= 1.0 or e_c <= floor)
    kS = int(np.flatnonzero(fam.times == S)[0])
    disp = float(np.max(np.abs(fam.maps[kS].displacement)))
    rep.add_scalar("phi_S_displacement", disp)
    rep.set_verdict("phi_S_identity", disp == 0.0)
    diffs, ts = [], []
    for s_g, s_l in zip(sub.states, ell.states):
        ig, ag = _curvature_integral(s_g.g)
        il, _ = _curvature_integral(s_l.g)
        diffs.append(abs(il - ig) / ag if ag > 0 else abs(il - ig))
        ts.append(s_g.t)
    rep.add_series("curvature_integral_rel_diff", ts, diffs)
    rep.add_scalar("curvature_integral_max_rel_diff", max(diffs))
    rep.set_verdict("curvature_integral", max(diffs) <= 1e-3)
    return ell, rep


def scalar_stage(cfg: ExperimentConfig, g0, traj, ell_traj, bg):
    """Distributional verdict on g0, the smooth lower bound along the flow,
    and the conjugate heat checks along l(t)."""
    st = cfg.scalar_test
    grid = bg.grid
    b = float(st.b)
    reps = []
    fam = phi_family(grid, st.family_size, seed=cfg.seed, kmax=st.phi_kmax)
    ok, vals, rel = distributional_verdict(g0, bg, b, fam, st.pairing_tol)
    pin0 = float(np.max(pinning_deviation(g0, bg)))
    eps1 = cfg.eps1()
    hyp = ok and pin0 <= eps1 * (1 + 1e-9)
    pr = NormReport("scalar_pairing", meta=_meta(traj))
    pr.add_series("pairing", np.arange(len(vals), dtype=float), vals)
    pr.add_series("pairing_relative", np.arange(len(rel), dtype=float), rel)
    pr.add_scalar("min_relative", min(rel))
    pr.add_scalar("pinning_g0", pin0)
    pr.add_scalar("eps1", eps1)
    pr.add_scalar("distributional_nonneg", float(ok))
    pr.add_scalar("hypothesis_holds", float(hyp))
    reps.append(pr)

    if "scalar_bound" in cfg.verify.checks:
        _need_resolved(cfg, traj, 1, "scalar_bound")
        sb = NormReport("scalar_bound", meta=_meta(traj))
        t_min = t_min_of(cfg, grid)
        ts, mins, ratios = [], [], []
        for s in traj.states:
            if s.t < t_min * (1 - 1e-12):
                continue
            R = scalar_curvature(s.g).values
            _, _, nab, nn = metric_derivatives(s.g, bg)
            n = grid.dim
            hess = np.sqrt(np.sum(nn.reshape(n ** 4, -1) ** 2, axis=0))
            grad2 = np.sum(nab.reshape(n ** 3, -1) ** 2, axis=0)
            scale = float(np.max(hess + grad2))
            m = float(np.min(R)) + b
            ts.append(s.t)
            mins.append(m)
            ratios.append(m / scale if scale > 0 else 0.0)
        sb.add_series("min_R_plus_b", ts, mins)
        sb.add_series("min_over_scale", ts, ratios)
        sb.add_scalar("worst_ratio", min(ratios))
        sb.set_verdict("lower_bound", (min(ratios) >= -st.bound_tol) if hyp else None)
        reps.append(sb)

    if "conjugate" in cfg.verify.checks and ell_traj is not None:
        rng = np.random.default_rng([cfg.seed, 11])
        phi_Y = random_bandlimited_phi(grid, rng, st.phi_kmax, floor=0.1)
        Y = st.Y if st.Y is not None else ell_traj.times[-1]
        Y = float(ell_traj.times[int(np.argmin(np.abs(ell_traj.times - Y)))])
        run = solve_conjugate(ell_traj, phi_Y, Y, float(ell_traj.times[0]), b=b)
        mass = scalar_mass_series(run, cfg.verify.mass_tol)
        mass.meta.update(_meta(traj))
        reps.append(mass)
        eps = st.conj_eps
        if eps is None:
            worst = min(float(np.min(scalar_curvature(s.g).values)) * s.t for s in ell_traj.states)
            eps = max(-worst, 1e-12)
        bounds = check_conjugate_bounds(run, eps, tuple(cfg.verify.p_list))
        bounds.add_scalar("eps_used", eps)
        bounds.meta.update(_meta(traj))
        reps.append(bounds)
    return reps


def verify_stage(cfg: ExperimentConfig, traj: FlowTrajectory, g0: MetricField):
    v = cfg.verify
    grid = traj.grid
    center, r, lo = cfg.balls()
    inner, outer = Ball(center, r), Ball(center, lo)
    if set(v.checks) & {"l2_rate", "sobolev", "w12sigma"}:
        _need_resolved(cfg, traj, 4, "the estimate checks")
    reps = []
    if "l2_rate" in v.checks:
        reps.append(verify_l2_rate(traj, g0, inner, outer, q_min=v.q_min))
    if "sobolev" in v.checks:
        for s in v.sigma_list:
            reps.append(verify_sobolev_estimate(traj, g0, s, inner, outer, c_n=v.c_n,
                                                window=v.window))
    if "w12sigma" in v.checks:
        reps.append(verify_w12sigma_convergence(traj, g0, v.w12_sigma, tuple(v.p_list),
                                                region=inner, frac=v.decay_frac,
                                                ball_inner=inner, ball_outer=outer))
    if "interpolation" in v.checks:
        reps.append(interpolation_family(traj.states[-1].g, v.interp_count, cfg.seed))
    return reps


def interpolation_family(g: MetricField, count=20, seed=0, kmax=2, floor=0.05,
                         derivatives="spectral", ratio_max=8.0, identity_tol=1e-6,
                         lam=3.0):
    """The interpolation inequality on ``count`` random positive band-limited
    f: one ratio bound for all of them, scale invariance under f -> lam f and
    the integration-by-parts identity."""
    grid = g.grid
    rng = np.random.default_rng([seed, 13])
    ratios, resid, drift = [], [], []
    for _ in range(count):
        f = random_bandlimited_phi(grid, rng, kmax, floor=floor)
        a = interpolation_inequality_check(f, g, derivatives)
        b = interpolation_inequality_check(ScalarField(grid, lam * f.values), g, derivatives)
        ratios.append(a.scalars["ratio"])
        resid.append(a.scalars["identity_residual"])
        drift.append(abs(b.scalars["ratio"] - a.scalars["ratio"]) / max(a.scalars["ratio"], 1e-300))
    rep = NormReport("interpolation_family",
                     meta={"dim": grid.dim, "res": grid.res, "period": grid.period,
                           "derivatives": derivatives})
    idx = np.arange(count, dtype=float)
    rep.add_series("ratio", idx, ratios)
    rep.add_series("identity_residual", idx, resid)
    rep.add_series("scale_drift", idx, drift)
    rep.add_scalar("max_ratio", max(ratios))
    rep.add_scalar("max_identity_residual", max(resid))
    rep.add_scalar("max_scale_drift", max(drift))
    rep.set_verdict("ratio_bounded", max(ratios) <= ratio_max)
    rep.set_verdict("identity", max(resid) <= identity_tol)
    rep.set_verdict("scale_invariant", max(drift) <= 1e-12)
    return rep


def _meta(traj):
    g = traj.grid
    return {"dim": g.dim, "res": g.res, "period": g.period,
            "dt": float(traj.diagnostics.get("dt", 0.0)) if traj.diagnostics else 0.0}


def flow_report(traj: FlowTrajectory) -> NormReport:
    """Smoothing-bound monitors t |nab g|^2, t^2 |nab^2 g|^2 and the pinning."""
    rep = NormReport("flow", meta=_meta(traj))
    d = traj.diagnostics
    t = traj.times
    if "grad_sup" in d and len(d["grad_sup"]) == len(t):
        rep.add_series("grad_sup", t, d["grad_sup"])
        rep.add_series("hess_sup", t, d["hess_sup"])
        rep.add_series("pin", t, d["pin"])
        rep.add_series("t_grad_sq", t, t * np.asarray(d["grad_sup"]) ** 2)
        rep.add_series("t2_hess_sq", t, t ** 2 * np.asarray(d["hess_sup"]) ** 2)
    rep.add_scalar("snapshots", len(t))
    rep.add_scalar("steps", len(traj.dt_schedule))
    rep.set_verdict("completed", traj.failure is None)
    return rep


# ---------------------------------------------------------------------------
# the whole chain
# ---------------------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, out_dir=None, write=True) -> PipelineResult:
    bg = build_background(cfg)
    g0 = build_initial(cfg, bg)
    res = PipelineResult(cfg, g0)
    traj = run_flow(cfg, g0, bg)
    res.traj = traj
    res.reports.append(flow_report(traj))
    if traj.failure is not None:
        res.failure = traj.failure
    else:
        if cfg.verify.enabled:
            res.reports += verify_stage(cfg, traj, g0)
        if cfg.deturck.enabled and ("related_flow" in cfg.verify.checks
                                    or "conjugate" in cfg.verify.checks):
            ell, rr = related_flow_stage(cfg, traj)
            res.ell_traj = ell
            if "related_flow" in cfg.verify.checks:
                res.reports.append(rr)
        if cfg.scalar_test.enabled:
            res.reports += scalar_stage(cfg, g0, traj, res.ell_traj, bg)
    if write:
        write_artifacts(res, out_dir or cfg.output.directory)
    return res


def write_artifacts(res: PipelineResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    fmts = res.config.output.formats
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(res.config.to_json() + "\n")
    if "bin" in fmts:
        bg = res.traj.bg if res.traj is not None else None
        rio.write_metric(os.path.join(out_dir, "initial.rdtl"), res.g0, bg)
        if res.traj is not None:
            rio.write_trajectory(os.path.join(out_dir, "trajectory.rdtl"), res.traj)
        if res.ell_traj is not None:
            rio.write_trajectory(os.path.join(out_dir, "related.rdtl"), res.ell_traj)
    if "json" in fmts:
        rio.write_reports_json(os.path.join(out_dir, "reports.json"), res.reports)
    if "csv" in fmts:
        rio.write_series_csv(os.path.join(out_dir, "series.csv"), res.reports)
    return out_dir
