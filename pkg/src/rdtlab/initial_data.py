"""Rough, pinned initial metrics and their spectral mollification.

Roughness is dialled by the decay law of random Fourier coefficients: mode
m gets amplitude |m|^(-alpha), so smaller alpha means a rougher field.  Phases
are drawn shell by shell (shell = max-norm of the integer mode) from a
seeded generator in a fixed order, which makes the low modes of a field
identical across resolutions.
"""
from dataclasses import dataclass
import itertools

import numpy as np

from .tensor_core import (
    BackgroundMetric,
    MetricField,
    _norm_sq,
    background_curvature,
    packed_index,
    packed_pairs,
    pinning_deviation,
    spectral_partials,
)

DEFAULT_EPS0 = 0.1
_PATTERNS = ("all", "diagonal", "conformal")


class ZeroPerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class RoughMetricSpec:
    decay_exponent: float = 2.5
    amplitude_cap: float = 0.05
    seed: int = 0
    mode_cutoff: int | None = None  # max |m|_inf; default N/2 - 1
    component_pattern: object = "all"  # "all" | "diagonal" | "conformal" | list of packed ids
    phases: str = "random"  # "random" | "focused"
    eps0: float = DEFAULT_EPS0

    def validate(self, res):
        if not self.decay_exponent > 0:
            raise ValueError("decay_exponent must be positive")
        if not 0.0 <= self.amplitude_cap <= self.eps0:
            raise ValueError(f"amplitude_cap must lie in [0, eps0={self.eps0}]")
        kmax = self.kmax(res)
        if not 1 <= kmax < res // 2:
            raise ValueError(f"mode_cutoff must be in [1, {res // 2 - 1}] (below Nyquist)")
        if self.phases not in ("random", "focused"):
            raise ValueError(f"unknown phases option {self.phases!r}")
        if isinstance(self.component_pattern, str) and self.component_pattern not in _PATTERNS:
            raise ValueError(f"unknown component_pattern {self.component_pattern!r}")

    def kmax(self, res):
        return res // 2 - 1 if self.mode_cutoff is None else int(self.mode_cutoff)


@dataclass(frozen=True)
class MollifierParams:
    scale: float = 0.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("mollifier scale must be >= 0")


def _shell_modes(n, s):
    """Half of the integer modes with |m|_inf == s (first nonzero entry > 0),
    lexicographic order."""
    out = []
    for m in itertools.product(range(-s, s + 1), repeat=n):
        if max(abs(c) for c in m) != s:
            continue
        nz = next(c for c in m if c != 0)
        if nz > 0:
            out.append(m)
    return np.array(out, dtype=np.int64).reshape(-1, n)


def _rough_scalar(grid, alpha, kmax, rng_key, focused_at=None):
    """Real field sum_m |m|^-alpha cos(k.x + theta_m) via one inverse FFT."""
    n, N = grid.dim, grid.res
    coef = np.zeros(grid.shape, dtype=np.complex128)
    for s in range(1, kmax + 1):
        modes = _shell_modes(n, s)
        amp = np.sum(modes.astype(float) ** 2, axis=1) ** (-0.5 * alpha)
        if focused_at is None:
            rng = np.random.default_rng(list(rng_key) + [s])
            theta = rng.uniform(0.0, 2 * np.pi, len(modes))
        else:
            k = 2 * np.pi / grid.period * modes
            theta = -(k @ focused_at)
        c = 0.5 * amp * np.exp(1j * theta)
        pos = tuple((modes % N).T)
        neg = tuple(((-modes) % N).T)
        coef[pos] += c
        coef[neg] += np.conj(c)
    return np.fft.ifftn(coef).real * grid.size


def _perturbation(spec, grid, bg):
    n = grid.dim
    pairs = packed_pairs(n)
    kmax = spec.kmax(grid.res)
    focus = None
    if spec.phases == "focused":
        focus = np.full(n, 0.5 * grid.period)
    pat = spec.component_pattern
    P = np.zeros((grid.ncomp,) + grid.shape)
    if pat == "conformal":
        f = _rough_scalar(grid, spec.decay_exponent, kmax, [spec.seed, 0], focus)
        P = bg.h.packed * f
        return P
    if pat == "all":
        comps = range(len(pairs))
    elif pat == "diagonal":
        comps = [c for c, (i, j) in enumerate(pairs) if i == j]
    else:
        comps = [int(c) for c in pat]
        if any(not 0 <= c < len(pairs) for c in comps):
            raise ValueError(f"component ids must be in [0, {len(pairs) - 1}]")
    for c in comps:
        P[c] = _rough_scalar(grid, spec.decay_exponent, kmax, [spec.seed, c], focus)
    return P


def generate_rough_metric(spec: RoughMetricSpec, bg: BackgroundMetric) -> MetricField:
    """g0 = h + P with P rescaled so that max-node |P|_h equals the cap.

    The result is pinned: (1 - cap) h <= g0 <= (1 + cap) h at every node.
    """
    grid = bg.grid
    spec.validate(grid.res)
    if spec.amplitude_cap == 0.0:
        return MetricField(grid, bg.h.packed.copy(), pinned_eps=0.0)
    P = _perturbation(spec, grid, bg)
    norm = np.sqrt(np.maximum(_norm_sq(P[packed_index(grid.dim)], "dd", bg.hfull, bg.hinv), 0.0))
    peak = float(np.max(norm))
    if not peak > 0.0:
        raise ZeroPerturbationError("perturbation vanishes identically; cannot rescale")
    P *= spec.amplitude_cap / peak
    return MetricField(grid, bg.h.packed + P, pinned_eps=spec.amplitude_cap)


def mollify(g: MetricField, m: MollifierParams) -> MetricField:
    """Gaussian spectral filter: mode k is multiplied by exp(-s^2 |k|^2 / 2)."""
    s = float(m.scale if isinstance(m, MollifierParams) else m)
    if s == 0.0:
        return g.with_packed(g.packed.copy())
    grid = g.grid
    ax = tuple(range(1, grid.dim + 1))
    k = 2 * np.pi * np.fft.fftfreq(grid.res, d=grid.spacing)
    kr = 2 * np.pi * np.fft.rfftfreq(grid.res, d=grid.spacing)
    ks = np.meshgrid(*([k] * (grid.dim - 1) + [kr]), indexing="ij")
    k2 = sum(c * c for c in ks)
    filt = np.exp(-0.5 * s * s * k2)
    spec = np.fft.rfftn(g.packed, axes=ax) * filt
    out = np.fft.irfftn(spec, s=grid.shape, axes=ax)
    return g.with_packed(out)


def pulled_back_flat_metric(grid, eps, decay_exponent=2.5, seed=0, mode_cutoff=None,
                            tol=1e-10):
    """g0 = Psi^* delta for a rough periodic map Psi(x) = x + u(x).

    g0 is flat (R = 0 in the distributional sense) but only as regular as the
    Jacobian of u.  The displacement is rescaled by bisection so that the
    pinning deviation of g0 against delta is exactly ``eps``.
    Returns (g0, u).
    """
    n = grid.dim
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    kmax = grid.res // 2 - 1 if mode_cutoff is None else int(mode_cutoff)
    u = np.stack([_rough_scalar(grid, decay_exponent, kmax, [seed, 100 + a]) for a in range(n)])
    Du = spectral_partials(u, grid)  # [i, a] = d_i u^a
    pairs = packed_pairs(n)
    bg = BackgroundMetric.flat_torus(grid)

    def metric(s):
        J = s * np.swapaxes(Du, 0, 1)  # [a, i]
        for a in range(n):
            J[a, a] += 1.0
        full = np.einsum("ai...,aj...->ij...", J, J)
        return MetricField(grid, np.stack([full[i, j] for i, j in pairs]))

    def dev(s):
        return float(np.max(pinning_deviation(metric(s), bg)))

    lo, hi = 0.0, 1.0
    while dev(hi) < eps:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dev(mid) < eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    g = metric(lo)
    return MetricField(grid, g.packed, pinned_eps=eps), lo * u


def perturbed_background(grid, amplitude, modes=(1,)) -> BackgroundMetric:
    """Conformally flat background h = exp(2 f) delta with
    f = a * mean_m sin(2 pi m x^0 / L) cos(2 pi m x^(n-1) / L)."""
    x = grid.coords()
    w = 2 * np.pi / grid.period
    f = np.zeros(grid.shape)
    for m in modes:
        f += np.sin(w * m * x[0]) * np.cos(w * m * x[-1])
    f *= float(amplitude) / max(1, len(modes))
    h = MetricField.identity(grid).packed * np.exp(2.0 * f)
    return background_curvature(MetricField(grid, h))
