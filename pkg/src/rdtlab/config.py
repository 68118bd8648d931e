"""Experiment configuration: nested dataclasses read from JSON.

Every field has a default, unknown keys are rejected, and values can be
overridden from the command line as ``section.key=value`` (the value is
parsed as JSON when possible, else taken as a string).

Lengths (ball radii, centers, mollifier scale) are in the torus' length
units; times are in length^2 units.  ``None`` defaults are resolved against
the grid when the pipeline starts (see ``resolved``).
"""
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import json
import typing

CHECKS = ("l2_rate", "sobolev", "w12sigma", "interpolation", "related_flow",
          "conjugate", "scalar_bound")
INITIAL_KINDS = ("rough", "identity", "file", "pulled_back")
EPS1_RULES = ("min_sigma3_eps0", "fixed")


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    dim: int = 2
    res: int = 128
    period: float = 1.0


@dataclass
class BackgroundConfig:
    kind: str = "flat"  # "flat" | "perturbed"
    amplitude: float = 0.0
    modes: list = field(default_factory=lambda: [1])


@dataclass
class InitialConfig:
    kind: str = "rough"
    decay_exponent: float = 2.5
    amplitude_cap: float = 0.05
    mode_cutoff: int | None = None
    component_pattern: typing.Any = "all"
    phases: str = "random"
    mollify_scale: float = 0.0
    path: str | None = None
    # pulled_back: pinning of Psi^* delta; None means the eps1 rule of scalar_test
    eps: float | None = None


@dataclass
class FlowConfig:
    T_final: float | None = None  # default 0.1 L^2
    scheme: str = "rk2"
    c_cfl: float = 0.2
    eps0: float = 0.1
    uniform_snapshots: int = 40
    geometric_snapshots: int = 12
    monitor: bool = True


@dataclass
class DeturckConfig:
    enabled: bool = True
    S: float | None = None  # default T_final
    t_min: float | None = None  # default 10 dx^2
    substeps: int = 4


@dataclass
class ScalarTestConfig:
    enabled: bool = True
    b: float = 0.0
    sigma: float = 0.1
    eps1_rule: str = "min_sigma3_eps0"
    eps1: float | None = None  # used when eps1_rule == "fixed"
    family_size: int = 8
    phi_kmax: int = 4
    pairing_tol: float = 1e-2
    Y: float | None = None  # default T_final
    conj_eps: float | None = None  # default: measured from R_l
    bound_tol: float = 1e-3


@dataclass
class VerifyConfig:
    enabled: bool = True
    checks: list = field(default_factory=lambda: list(CHECKS))
    sigma_list: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    w12_sigma: float = 0.1
    p_list: list = field(default_factory=lambda: [2.0, 4.0])
    ball_center: list | None = None  # default: center of the torus
    ball_radius: float | None = None  # default 0.3 L
    ball_outer: float | None = None  # default 0.45 L
    q_min: float = 0.9
    decay_frac: float = 0.05
    c_n: float = 1.0
    window: list | None = None  # fit window [t0, t1] for the Sobolev slope
    interp_count: int = 20
    mass_tol: float = 1e-4


@dataclass
class OutputConfig:
    directory: str = "rdtlab_out"
    formats: list = field(default_factory=lambda: ["bin", "json", "csv"])


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    deturck: DeturckConfig = field(default_factory=DeturckConfig)
    scalar_test: ScalarTestConfig = field(default_factory=ScalarTestConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def with_overrides(self, items):
        d = self.to_dict()
        for item in items:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = val
        return ExperimentConfig.from_dict(d)

    # -- checks ------------------------------------------------------------

    def validate(self):
        g = self.grid
        if g.dim not in (1, 2, 3):
            raise ConfigError("grid.dim must be 1, 2 or 3")
        if g.res < 8 or g.res & (g.res - 1):
            raise ConfigError("grid.res must be a power of two >= 8")
        if not g.period > 0:
            raise ConfigError("grid.period must be positive")
        if self.background.kind not in ("flat", "perturbed"):
            raise ConfigError("background.kind must be 'flat' or 'perturbed'")
        ini = self.initial
        if ini.kind not in INITIAL_KINDS:
            raise ConfigError(f"initial.kind must be one of {INITIAL_KINDS}")
        if ini.kind == "file" and not ini.path:
            raise ConfigError("initial.kind = 'file' needs initial.path")
        if ini.kind == "pulled_back" and self.background.kind != "flat":
            raise ConfigError("initial.kind = 'pulled_back' needs a flat background")
        if not 0.0 <= ini.amplitude_cap <= self.flow.eps0:
            raise ConfigError("initial.amplitude_cap must lie in [0, flow.eps0]")
        if ini.mollify_scale < 0:
            raise ConfigError("initial.mollify_scale must be >= 0")
        f = self.flow
        if f.T_final is not None and not f.T_final > 0:
            raise ConfigError("flow.T_final must be positive")
        if f.scheme not in ("euler", "rk2", "rk4"):
            raise ConfigError("flow.scheme must be euler, rk2 or rk4")
        if not 0 < f.c_cfl <= 1:
            raise ConfigError("flow.c_cfl must lie in (0, 1]")
        if f.uniform_snapshots < 0 or f.geometric_snapshots < 0:
            raise ConfigError("snapshot counts must be >= 0")
        if f.uniform_snapshots % 2:
            raise ConfigError("flow.uniform_snapshots must be even (the spacing is halved)")
        s = self.scalar_test
        if s.eps1_rule not in EPS1_RULES:
            raise ConfigError(f"scalar_test.eps1_rule must be one of {EPS1_RULES}")
        if s.eps1_rule == "fixed" and s.eps1 is None:
            raise ConfigError("scalar_test.eps1_rule = 'fixed' needs scalar_test.eps1")
        if not 0 < s.sigma < 0.25:
            raise ConfigError("scalar_test.sigma must lie in (0, 1/4)")
        v = self.verify
        bad = set(v.checks) - set(CHECKS)
        if bad:
            raise ConfigError(f"unknown verify.checks {sorted(bad)}; known: {CHECKS}")
        if any(not 0 <= x <= 0.25 for x in v.sigma_list):
            raise ConfigError("verify.sigma_list entries must lie in [0, 1/4]")
        if not 0 < v.w12_sigma < 0.25:
            raise ConfigError("verify.w12_sigma must lie in (0, 1/4)")
        if any(p < 2 for p in v.p_list):
            raise ConfigError("verify.p_list entries must be >= 2")
        if set(self.output.formats) - {"bin", "json", "csv"}:
            raise ConfigError("output.formats entries must be bin, json or csv")

    # -- derived values ----------------------------------------------------

    def T_final(self):
        L = self.grid.period
        return float(self.flow.T_final) if self.flow.T_final is not None else 0.1 * L * L

    def eps1(self):
        s = self.scalar_test
        if s.eps1_rule == "fixed":
            return float(s.eps1)
        return min(s.sigma ** 3, self.flow.eps0)

    def balls(self):
        L = self.grid.period
        v = self.verify
        c = tuple(v.ball_center) if v.ball_center is not None else (0.5 * L,) * self.grid.dim
        r = v.ball_radius if v.ball_radius is not None else 0.3 * L
        lo = v.ball_outer if v.ball_outer is not None else 0.45 * L
        if len(c) != self.grid.dim:
            raise ConfigError("verify.ball_center has the wrong dimension")
        if not 0 < r < lo < 0.5 * L:
            raise ConfigError("need 0 < ball_radius < ball_outer < L/2")
        return c, float(r), float(lo)


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kw = {}
    for name, val in d.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if is_dataclass(tp):
            kw[name] = _build(tp, val, path)
        else:
            kw[name] = _coerce(tp, val, path)
    return replace(cls(), **kw)


def _coerce(tp, val, path):
    args = typing.get_args(tp)
    optional = type(None) in args
    if val is None:
        if optional or tp is typing.Any:
            return None
        raise ConfigError(f"{path} may not be null")
    base = next((a for a in args if a is not type(None)), tp) if args else tp
    if base is typing.Any:
        return val
    if base is bool:
        if not isinstance(val, bool):
            raise ConfigError(f"{path} must be true or false")
        return val
    if base is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path} must be an integer")
        return val
    if base is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(val)
    if base is str:
        if not isinstance(val, str):
            raise ConfigError(f"{path} must be a string")
        return val
    if base is list:
        if not isinstance(val, list):
            raise ConfigError(f"{path} must be a list")
        return list(val)
    return val
