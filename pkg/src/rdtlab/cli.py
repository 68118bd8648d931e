"""Command line entry point.

    rdtlab run               whole pipeline from a config
    rdtlab gen-data          initial metric -> initial.rdtl
    rdtlab run-flow          initial.rdtl -> trajectory.rdtl
    rdtlab related-flow      trajectory.rdtl -> related.rdtl
    rdtlab check-scalar      distributional verdict on g0, flow, smooth bound
    rdtlab verify-estimates  estimate checks on a stored trajectory
    rdtlab report            summarize reports.json files

Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 bad config or
missing input, 3 numerical blow-up (partial artifacts are kept).
"""
import argparse
import json
import logging
import os
import sys

from . import io as rio
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig
from .flow import FlowTrajectory
from .tensor_core import GridMismatchError

OUT_ENV = "RDTLAB_OUT_DIR"


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--override", metavar="KEY=VALUE", action="append", default=[],
                        help="override a config value, e.g. flow.T_final=0.01 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="rdtlab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="generate, flow, pull back, test, verify")
    sub.add_parser("gen-data", parents=[common], help="write the initial metric")
    for name, helptext in (("run-flow", "evolve a stored initial metric"),
                           ("check-scalar", "scalar-curvature checks on a stored initial metric")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--input", metavar="FILE", help="initial metric (default OUT/initial.rdtl)")
    for name, helptext in (("related-flow", "pull back a stored trajectory"),
                           ("verify-estimates", "estimate checks on a stored trajectory")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--input", metavar="FILE", help="trajectory (default OUT/trajectory.rdtl)")
        if name == "verify-estimates":
            s.add_argument("--initial", metavar="FILE",
                           help="initial metric (default: the trajectory's t = 0 snapshot)")
    r = sub.add_parser("report", parents=[common], help="summarize stored reports")
    r.add_argument("paths", nargs="*", help="reports JSON files (default OUT/*.json)")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = list(args.override)
    if args.seed is not None:
        over.append(f"seed={args.seed}")
    if args.out is not None:
        over.append(f"output.directory={_json_str(args.out)}")
    elif args.config is None and os.environ.get(OUT_ENV):
        over.append(f"output.directory={_json_str(os.environ[OUT_ENV])}")
    return cfg.with_overrides(over) if over else cfg


def _json_str(s):
    return json.dumps(s)


def _need(path):
    if not os.path.exists(path):
        raise pl.InputError(f"missing input: {path}")
    return path


def _write_reports(out, tag, reports, cfg):
    os.makedirs(out, exist_ok=True)
    if "json" in cfg.output.formats:
        rio.write_reports_json(os.path.join(out, f"reports_{tag}.json"), reports)
    if "csv" in cfg.output.formats:
        rio.write_series_csv(os.path.join(out, f"series_{tag}.csv"), reports)


def _verdict_code(reports):
    return pl.EXIT_OK if all(r.passed for r in reports) else pl.EXIT_VERDICT


def _summarize(reports, stream=None):
    stream = stream or sys.stdout
    for r in reports:
        bad = [k for k, v in r.verdicts.items() if v is False]
        na = [k for k, v in r.verdicts.items() if v is None]
        status = "FAIL" if bad else "ok"
        extra = f" failed: {', '.join(bad)}" if bad else ""
        if na:
            extra += f" (n/a: {', '.join(na)})"
        print(f"{status:4s} {r.name}{extra}", file=stream)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(cfg, args):
    res = pl.run_pipeline(cfg, cfg.output.directory)
    _summarize(res.reports)
    if res.failure:
        print(f"blow-up: {res.failure}", file=sys.stderr)
    return res.exit_code()


def cmd_gen_data(cfg, args):
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    bg = pl.build_background(cfg)
    g0 = pl.build_initial(cfg, bg)
    rio.write_metric(os.path.join(out, "initial.rdtl"), g0, bg)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    return pl.EXIT_OK


def _load_initial(cfg, args):
    path = _need(args.input or os.path.join(cfg.output.directory, "initial.rdtl"))
    traj = rio.read_trajectory(path)
    bg = traj.bg
    g0 = traj.states[0].g
    pl.make_grid(cfg).check_same(g0.grid)
    return g0, bg


def cmd_run_flow(cfg, args):
    g0, bg = _load_initial(cfg, args)
    traj = pl.run_flow(cfg, g0, bg)
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    rio.write_trajectory(os.path.join(out, "trajectory.rdtl"), traj)
    rep = pl.flow_report(traj)
    _write_reports(out, "flow", [rep], cfg)
    _summarize([rep])
    if traj.failure:
        print(f"blow-up: {traj.failure}", file=sys.stderr)
        return pl.EXIT_BLOWUP
    return _verdict_code([rep])


def _load_traj(cfg, args) -> FlowTrajectory:
    path = _need(args.input or os.path.join(cfg.output.directory, "trajectory.rdtl"))
    traj = rio.read_trajectory(path)
    pl.make_grid(cfg).check_same(traj.grid)
    # dt is needed to locate the uniform snapshots
    if len(traj.dt_schedule):
        traj.diagnostics["dt"] = float(traj.dt_schedule[0])
    return traj


def cmd_related_flow(cfg, args):
    traj = _load_traj(cfg, args)
    ell, rep = pl.related_flow_stage(cfg, traj)
    out = cfg.output.directory
    rio.write_trajectory(os.path.join(out, "related.rdtl"), ell)
    _write_reports(out, "related", [rep], cfg)
    _summarize([rep])
    return _verdict_code([rep])


def cmd_check_scalar(cfg, args):
    g0, bg = _load_initial(cfg, args)
    traj = pl.run_flow(cfg, g0, bg)
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    reports = [pl.flow_report(traj)]
    if traj.failure:
        _write_reports(out, "scalar", reports, cfg)
        print(f"blow-up: {traj.failure}", file=sys.stderr)
        return pl.EXIT_BLOWUP
    ell = None
    if cfg.deturck.enabled and "conjugate" in cfg.verify.checks:
        ell, _ = pl.related_flow_stage(cfg, traj)
    reports += pl.scalar_stage(cfg, g0, traj, ell, bg)
    _write_reports(out, "scalar", reports, cfg)
    _summarize(reports)
    return _verdict_code(reports)


def cmd_verify(cfg, args):
    traj = _load_traj(cfg, args)
    if args.initial:
        g0 = rio.read_metric(_need(args.initial), traj.bg)
    else:
        if traj.states[0].t != 0.0:
            raise pl.InputError("trajectory has no t = 0 snapshot; pass --initial")
        g0 = traj.states[0].g
    reports = pl.verify_stage(cfg, traj, g0)
    _write_reports(cfg.output.directory, "verify", reports, cfg)
    _summarize(reports)
    return _verdict_code(reports)


def cmd_report(cfg, args):
    paths = args.paths
    if not paths:
        d = cfg.output.directory
        if not os.path.isdir(d):
            raise pl.InputError(f"missing output directory: {d}")
        paths = sorted(os.path.join(d, f) for f in os.listdir(d)
                       if f.startswith("reports") and f.endswith(".json"))
        if not paths:
            raise pl.InputError(f"no reports*.json in {d}")
    reports = []
    for p in paths:
        reports += rio.read_reports_json(_need(p))
    _summarize(reports)
    return _verdict_code(reports)


COMMANDS = {
    "run": cmd_run,
    "gen-data": cmd_gen_data,
    "run-flow": cmd_run_flow,
    "related-flow": cmd_related_flow,
    "check-scalar": cmd_check_scalar,
    "verify-estimates": cmd_verify,
    "report": cmd_report,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, pl.InputError, rio.FormatError, GridMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return pl.EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
