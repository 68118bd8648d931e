import os
import pathlib
import sys

import numpy as np
import pytest

HERE = pathlib.Path(__file__).resolve().parent
ROOT = HERE.parent
CONFIGS = ROOT / "configs"
sys.path.insert(0, str(HERE))

_ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Store one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- shared expensive computations -------------------------------------------

_cache = {}


def cached(key, fn):
    if key not in _cache:
        _cache[key] = fn()
    return _cache[key]


def load_config(name, *overrides):
    from rdtlab.config import ExperimentConfig

    cfg = ExperimentConfig.load(CONFIGS / f"{name}.json")
    return cfg.with_overrides(list(overrides)) if overrides else cfg


def pipeline_run(name, *overrides):
    """run_pipeline on a shipped config, memoized for the session."""
    from rdtlab.pipeline import run_pipeline

    return cached(("pipe", name, overrides),
                  lambda: run_pipeline(load_config(name, *overrides), write=False))


def report(res, name):
    return next(r for r in res.reports if r.name == name)


ORACLE_CASES = {
    # name: (dim, builder, resolutions)
    "sin2": (2, "sin", (64, 128, 256)),
    "conformal2": (2, "conformal", (64, 128, 256)),
    "conformal3": (3, "conformal", (16, 32, 64)),
}
ORACLE_QUANTITIES = ("rdtf", "scalar", "deturck", "Z", "L")


def oracle_errors(case):
    """Max-node errors against the symbolic oracle, per quantity and N."""
    def compute():
        import oracles
        from rdtlab.curvature import lee_lefloch_terms, scalar_curvature
        from rdtlab.deturck import deturck_vector
        from rdtlab.flow import rdtf_rhs
        from rdtlab.tensor_core import BackgroundMetric, MetricField, TorusGrid

        n, kind, Ns = ORACLE_CASES[case]
        if kind == "sin":
            o = oracles.Oracle(oracles.sin_metric(n, 0.05, 1.0))
        else:
            o = oracles.Oracle(oracles.conformal_metric(n, 0.05, 1.0))
        Zs, Ls = o.lee_lefloch
        out = {}
        for N in Ns:
            grid = TorusGrid(n, N, 1.0)
            bg = BackgroundMetric.flat_torus(grid)
            g = MetricField(grid, o.packed(grid))
            terms = lee_lefloch_terms(g, bg)
            vec = lambda exprs: np.stack([o.sample(e, grid) for e in exprs])
            out[N] = {
                "rdtf": np.max(np.abs(rdtf_rhs(g, bg).values - o.sample_matrix(o.rdtf_via_ricci, grid))),
                "scalar": np.max(np.abs(scalar_curvature(g).values - o.sample(o.scalar, grid))),
                "deturck": np.max(np.abs(deturck_vector(g, bg).values - vec(o.deturck))),
                "Z": np.max(np.abs(terms.Z_vector.values - vec(Zs))),
                "L": np.max(np.abs(terms.L_scalar.values - o.sample(Ls, grid))),
            }
        return out

    return cached(("oracle", case), compute)


CONVERGED = 1e-12  # errors at roundoff carry no order information


def observed_orders(errs):
    Ns = sorted(errs)
    out = {}
    for q in ORACLE_QUANTITIES:
        pairs = []
        for a, b in zip(Ns, Ns[1:]):
            ea, eb = errs[a][q], errs[b][q]
            pairs.append(np.inf if eb <= CONVERGED else np.log2(ea / eb))
        out[q] = pairs
    return out


def tmp_env(**kw):
    env = dict(os.environ)
    env.update({k: str(v) for k, v in kw.items()})
    return env
