"""Periodic structured-grid tensor calculus on the flat n-torus.

Fields carry their components in leading axes and the grid in the trailing
``dim`` axes.  Derivatives are 4th-order centered finite differences with
periodic wrap; pure second derivatives use the compact 5-point stencil and
mixed ones compose two first-derivative stencils.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .kernels import packed_index, packed_pairs

SPD_REL_TOL = 1e-10


class GridMismatchError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    """Raised when a metric fails the SPD check; carries the offending node."""

    def __init__(self, node, eigenvalue, message=None):
        self.node = tuple(int(i) for i in node)
        self.eigenvalue = float(eigenvalue)
        super().__init__(message or
                         f"metric not positive definite at node {self.node} "
                         f"(smallest eigenvalue {self.eigenvalue:.3e})")


@dataclass(frozen=True)
class TorusGrid:
    dim: int
    res: int
    period: float = 2 * math.pi

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.res < 8 or self.res & (self.res - 1):
            raise ValueError(f"res must be a power of two >= 8, got {self.res}")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def spacing(self):
        return self.period / self.res

    @property
    def shape(self):
        return (self.res,) * self.dim

    @property
    def size(self):
        return self.res ** self.dim

    @property
    def ncomp(self):
        """Stored components of a symmetric 2-tensor."""
        return self.dim * (self.dim + 1) // 2

    @property
    def volume(self):
        return self.period ** self.dim

    def coords(self):
        x = np.arange(self.res) * self.spacing
        return np.meshgrid(*([x] * self.dim), indexing="ij")

    def wavenumbers(self):
        """Physical angular wavenumbers per axis, broadcast to the grid."""
        k = 2 * np.pi * np.fft.fftfreq(self.res, d=self.spacing)
        return np.meshgrid(*([k] * self.dim), indexing="ij")

    def integer_modes(self):
        m = np.fft.fftfreq(self.res, d=1.0 / self.res).astype(np.int64)
        return np.meshgrid(*([m] * self.dim), indexing="ij")

    def check_same(self, other):
        if other != self:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"scalar field shape {v.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field has non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.shape, float(c)))

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape).astype(float))


@dataclass(frozen=True, eq=False)
class TensorField:
    """Tensor field with slot valence given left to right, e.g. ``"udd"``
    for T^i_{jk}.  ``values`` has shape (n,)*rank + grid.shape."""

    grid: TorusGrid
    values: np.ndarray
    valence: str

    def __post_init__(self):
        if set(self.valence) - {"u", "d"}:
            raise ValueError(f"bad valence {self.valence!r}")
        v = np.asarray(self.values, dtype=np.float64)
        want = (self.grid.dim,) * len(self.valence) + self.grid.shape
        if v.shape != want:
            raise ValueError(f"tensor shape {v.shape} != expected {want}")
        object.__setattr__(self, "values", v)

    @property
    def rank(self):
        return len(self.valence)

    def __add__(self, other):
        self.grid.check_same(other.grid)
        if other.valence != self.valence:
            raise ValueError("valence mismatch")
        return TensorField(self.grid, self.values + other.values, self.valence)

    def __mul__(self, c):
        return TensorField(self.grid, self.values * float(c), self.valence)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class MetricField:
    """Symmetric 2-tensor stored packed: (n(n+1)/2,) + grid.shape.

    Packed order is upper-triangular row-major, e.g. (00, 01, 11) for n = 2.
    """

    grid: TorusGrid
    packed: np.ndarray
    pinned_eps: float | None = None

    def __post_init__(self):
        p = np.asarray(self.packed, dtype=np.float64)
        want = (self.grid.ncomp,) + self.grid.shape
        if p.shape != want:
            raise ValueError(f"packed shape {p.shape} != expected {want}")
        object.__setattr__(self, "packed", p)

    @classmethod
    def identity(cls, grid, scale=1.0):
        p = np.zeros((grid.ncomp,) + grid.shape)
        for c, (i, j) in enumerate(packed_pairs(grid.dim)):
            if i == j:
                p[c] = scale
        return cls(grid, p)

    @classmethod
    def from_full(cls, grid, full, pinned_eps=None):
        full = np.asarray(full, dtype=np.float64)
        pairs = packed_pairs(grid.dim)
        p = np.stack([0.5 * (full[i, j] + full[j, i]) if i != j else full[i, i]
                      for i, j in pairs])
        return cls(grid, p, pinned_eps)

    def full(self):
        return self.packed[packed_index(self.grid.dim)]

    def as_tensor(self):
        return TensorField(self.grid, self.full(), "dd")

    def with_packed(self, packed):
        return MetricField(self.grid, packed, self.pinned_eps)

    def determinant(self):
        return kernels.sym_inverse(self.packed, self.grid.dim)[1]


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------

def partials(values, grid):
    """Stack of first partial derivatives along each grid axis (leading axis)."""
    nd = grid.dim
    ax0 = np.ndim(values) - nd
    return np.stack([kernels.d1(values, ax0 + a, grid.spacing) for a in range(nd)])


def second_partials(values, grid, firsts=None):
    """Symmetric (n, n, ...) array of second partials.

    Diagonal entries use the compact stencil, off-diagonal ones apply the
    first-derivative stencil twice (``firsts`` may pass precomputed ones).
    """
    nd = grid.dim
    ax0 = np.ndim(values) - nd
    dx = grid.spacing
    out = np.empty((nd, nd) + np.shape(values))
    if nd > 1 and firsts is None:
        firsts = [kernels.d1(values, ax0 + a, dx) for a in range(nd)]
    for a in range(nd):
        out[a, a] = kernels.d2(values, ax0 + a, dx)
        for b in range(a + 1, nd):
            m = kernels.d1(firsts[a], ax0 + b, dx)
            out[a, b] = m
            out[b, a] = m
    return out


def _spectral_k(grid, a):
    k = grid.wavenumbers()[a].copy()
    k[(slice(None),) * a + (grid.res // 2,)] = 0.0  # drop the Nyquist mode
    return k


def spectral_partials(values, grid):
    """First partials of the trigonometric interpolant (Nyquist mode dropped)."""
    nd = grid.dim
    ax = tuple(range(np.ndim(values) - nd, np.ndim(values)))
    F = np.fft.fftn(values, axes=ax)
    return np.stack([np.fft.ifftn(1j * _spectral_k(grid, a) * F, axes=ax).real
                     for a in range(nd)])


def spectral_second_partials(values, grid):
    nd = grid.dim
    ax = tuple(range(np.ndim(values) - nd, np.ndim(values)))
    F = np.fft.fftn(values, axes=ax)
    ks = [_spectral_k(grid, a) for a in range(nd)]
    out = np.empty((nd, nd) + np.shape(values))
    for a in range(nd):
        for b in range(a, nd):
            m = np.fft.ifftn(-ks[a] * ks[b] * F, axes=ax).real
            out[a, b] = m
            out[b, a] = m
    return out


def christoffel(full, inv, dfull, ddfull=None):
    """Christoffel symbols Gamma^a_{bc}, indexed [a, b, c], from a metric and
    its partials (``dfull[k, i, j]`` = d_k g_ij).  With ``ddfull`` also
    returns the derivatives d_d Gamma^a_{bc}, indexed [d, a, b, c]."""
    es = lambda spec, *ops: np.einsum(spec, *ops, optimize=True)
    low = 0.5 * (np.einsum("bmc...->mbc...", dfull) + np.einsum("cmb...->mbc...", dfull)
                 - dfull)
    gam = es("am...,mbc...->abc...", inv, low)
    if ddfull is None:
        return gam, None
    dinv = -es("ap...,dpq...,qm...->dam...", inv, dfull, inv)
    dlow = 0.5 * (np.einsum("dbmc...->dmbc...", ddfull) + np.einsum("dcmb...->dmbc...", ddfull)
                  - ddfull)
    dgam = es("dam...,mbc...->dabc...", dinv, low) + es("am...,dmbc...->dabc...", inv, dlow)
    return gam, dgam


def riemann_from_christoffel(gam, dgam, full):
    """Lowered Riemann tensor Rm_{abcd} = g_{ae} R^e_{bcd} with
    R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb} + Gamma^a_{ce} Gamma^e_{db}
    - Gamma^a_{de} Gamma^e_{cb}; Ric_{bd} = R^a_{bad}."""
    es = lambda spec, *ops: np.einsum(spec, *ops, optimize=True)
    up = (np.einsum("cadb...->abcd...", dgam) - np.einsum("dacb...->abcd...", dgam)
          + es("ace...,edb...->abcd...", gam, gam) - es("ade...,ecb...->abcd...", gam, gam))
    return es("ae...,ebcd...->abcd...", full, up)


# ---------------------------------------------------------------------------
# background metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BackgroundMetric:
    h: MetricField
    hfull: np.ndarray
    hinv: np.ndarray
    christoffel_h: TensorField
    dchristoffel_h: np.ndarray
    riemann_h: TensorField
    riemann_grad_h: TensorField
    K0: float
    K1: float
    flat: bool
    euclidean: bool
    sqrt_det: np.ndarray = field(repr=False)

    @property
    def grid(self):
        return self.h.grid

    @classmethod
    def flat_torus(cls, grid):
        return background_curvature(MetricField.identity(grid))

    def scalar_curvature(self):
        if self.flat:
            return np.zeros(self.grid.shape)
        ric = np.einsum("ac...,abcd...->bd...", self.hinv, self.riemann_h.values)
        return np.einsum("bd...,bd...->...", self.hinv, ric)


def background_curvature(h: MetricField) -> BackgroundMetric:
    grid = h.grid
    n = grid.dim
    check_spd(h)
    full = h.full()
    inv_p, det = kernels.sym_inverse(h.packed, n)
    inv = inv_p[packed_index(n)]
    const = all(np.ptp(c) == 0.0 for c in h.packed)
    zero4 = np.zeros((n,) * 4 + grid.shape)
    if const:
        gam = np.zeros((n,) * 3 + grid.shape)
        dgam = zero4
        rm = zero4
        drm = np.zeros((n,) * 5 + grid.shape)
        k0 = k1 = 0.0
    else:
        dfull = partials(full, grid)
        ddfull = second_partials(full, grid)
        gam, dgam = christoffel(full, inv, dfull, ddfull)
        rm = riemann_from_christoffel(gam, dgam, full)
        drm = _cov_deriv_values(rm, "dddd", gam, grid)
        k0 = float(np.max(_norm_sq(rm, "dddd", full, inv)) ** 0.5)
        k1 = float(np.max(_norm_sq(drm, "ddddd", full, inv)) ** 0.5)
    return BackgroundMetric(
        h=h, hfull=full, hinv=inv,
        christoffel_h=TensorField(grid, gam, "udd"),
        dchristoffel_h=dgam,
        riemann_h=TensorField(grid, rm, "dddd"),
        riemann_grad_h=TensorField(grid, drm, "ddddd"),
        K0=k0, K1=k1, flat=const,
        euclidean=const and bool(np.array_equal(h.packed, MetricField.identity(grid).packed)),
        sqrt_det=np.sqrt(det),
    )


# ---------------------------------------------------------------------------
# covariant derivative, inverse, norms, quadrature
# ---------------------------------------------------------------------------

def _cov_deriv_values(values, valence, gam, grid):
    out = partials(values, grid)
    rank = len(valence)
    for s, kind in enumerate(valence):
        # move slot s (offset by the new derivative axis) to the front
        moved = np.moveaxis(values, s, 0)
        if kind == "u":
            corr = np.einsum("kam...,m...->ka...", gam.swapaxes(0, 1), moved)
            out = out + np.moveaxis(corr, 1, s + 1)
        else:
            corr = np.einsum("mka...,m...->ka...", gam, moved)
            out = out - np.moveaxis(corr, 1, s + 1)
    assert out.ndim == rank + 1 + grid.dim
    return out


def hcov_deriv(T: TensorField, bg: BackgroundMetric) -> TensorField:
    """Background-covariant derivative; the new (covariant) slot goes first."""
    bg.grid.check_same(T.grid)
    if bg.flat:
        vals = partials(T.values, T.grid)
    else:
        vals = _cov_deriv_values(T.values, T.valence, bg.christoffel_h.values, T.grid)
    return TensorField(T.grid, vals, "d" + T.valence)


def check_spd(g: MetricField, rel_tol=SPD_REL_TOL):
    """Raise NotPositiveDefiniteError unless every node is SPD with smallest
    eigenvalue > rel_tol * trace / n."""
    n = g.grid.dim
    p = g.packed
    tr = sum(p[c] for c, (i, j) in enumerate(packed_pairs(n)) if i == j)
    det = kernels.sym_inverse(p, n)[1]
    # det >= lam_min * lam_max^(n-1) and lam_max <= tr, so this is sufficient
    ok = np.all(tr > 0) and np.all(det > rel_tol * tr ** n / n)
    if ok:
        return
    lam = np.linalg.eigvalsh(np.moveaxis(g.full(), (0, 1), (-2, -1)))[..., 0]
    bad = lam <= rel_tol * tr / n
    if np.any(bad) or not np.all(np.isfinite(lam)):
        bad = bad | ~np.isfinite(lam)
        node = np.unravel_index(np.argmax(bad), g.grid.shape)
        raise NotPositiveDefiniteError(node, lam[node])


def metric_inverse(g: MetricField) -> TensorField:
    check_spd(g)
    inv, _ = kernels.sym_inverse(g.packed, g.grid.dim)
    return TensorField(g.grid, inv[packed_index(g.grid.dim)], "uu")


def _norm_sq(values, valence, hfull, hinv):
    other = values
    for s, kind in enumerate(valence):
        metric = hinv if kind == "d" else hfull
        moved = np.moveaxis(other, s, 0)
        moved = np.einsum("ab...,b...->a...", metric, moved)
        other = np.moveaxis(moved, 0, s)
    rank = len(valence)
    return np.sum((values * other).reshape((-1,) + values.shape[rank:]), axis=0)


def tensor_norm_h(T: TensorField, bg: BackgroundMetric) -> ScalarField:
    """Pointwise norm |T|_h, indices raised and lowered with h."""
    bg.grid.check_same(T.grid)
    if T.rank == 0:
        return ScalarField(T.grid, np.abs(T.values))
    if bg.euclidean:
        sq = np.sum((T.values ** 2).reshape((-1,) + T.grid.shape), axis=0)
    else:
        sq = _norm_sq(T.values, T.valence, bg.hfull, bg.hinv)
    return ScalarField(T.grid, np.sqrt(np.maximum(sq, 0.0)))


def pairwise_sum(a):
    """Fixed-tree pairwise sum of a 1-d array; bit-reproducible."""
    a = np.ascontiguousarray(a, dtype=np.float64).ravel()
    n = a.size
    if n == 0:
        return 0.0
    size = 1 << (n - 1).bit_length()
    if size != n:
        a = np.concatenate([a, np.zeros(size - n)])
    while a.size > 1:
        half = a.size // 2
        a = a[:half] + a[half:]
    return float(a[0])


def integrate(f, vol=None):
    """Quadrature sum f * vol * dx^n over the torus (trapezoid rule).

    ``f`` and ``vol`` are ScalarFields or raw arrays on the grid of ``f``.
    """
    grid = f.grid
    vals = f.values
    if vol is not None:
        if isinstance(vol, ScalarField):
            grid.check_same(vol.grid)
            vol = vol.values
        vals = vals * vol
    return pairwise_sum(vals) * grid.spacing ** grid.dim


def metric_derivatives(g: MetricField, bg: BackgroundMetric, second=True):
    """Full-index metric, inverse, and background-covariant derivatives.

    Returns ``(gfull, ginv, nab, nabnab)`` with ``nab[k, i, j]`` =
    h-nabla_k g_ij and ``nabnab[a, b, i, j]`` = h-nabla_a h-nabla_b g_ij (or
    None when ``second`` is false).
    """
    grid = g.grid
    bg.grid.check_same(grid)
    n = grid.dim
    idx = packed_index(n)
    inv_p, _ = kernels.sym_inverse(g.packed, n)
    gfull = g.packed[idx]
    ginv = inv_p[idx]
    Dp = partials(g.packed, grid)
    D = Dp[:, idx]
    DD = second_partials(g.packed, grid, Dp)[:, :, idx] if second else None
    if bg.flat:
        return gfull, ginv, D, DD
    es = lambda spec, *ops: np.einsum(spec, *ops, optimize=True)
    gam = bg.christoffel_h.values
    t = es("mbi...,mj...->bij...", gam, gfull)
    nab = D - t - np.swapaxes(t, 1, 2)
    if not second:
        return gfull, ginv, nab, None
    u = (es("ambi...,mj...->abij...", bg.dchristoffel_h, gfull)
         + es("mbi...,amj...->abij...", gam, D))
    dnab = DD - u - np.swapaxes(u, 2, 3)
    v = es("mai...,bmj...->abij...", gam, nab)
    nn = dnab - es("mab...,mij...->abij...", gam, nab) - v - np.swapaxes(v, 2, 3)
    return gfull, ginv, nab, nn


def ricci_tensor_h(bg: BackgroundMetric):
    """Ric(h)_{bd} = h^{ac} Rm_{abcd}(h), as an (n, n, ...) array."""
    if bg.flat:
        n = bg.grid.dim
        return np.zeros((n, n) + bg.grid.shape)
    return np.einsum("ac...,abcd...->bd...", bg.hinv, bg.riemann_h.values)


def relative_eigenvalues(g: MetricField, bg: BackgroundMetric):
    """Nodewise (min, max) eigenvalues of h^{-1} g."""
    bg.grid.check_same(g.grid)
    n = g.grid.dim
    if bg.euclidean:
        p = g.packed
        if n == 1:
            return p[0], p[0]
        if n == 2:
            a, b, d = p
            m = 0.5 * (a + d)
            r = np.sqrt(0.25 * (a - d) ** 2 + b * b)
            return m - r, m + r
        M = np.moveaxis(g.full(), (0, 1), (-2, -1))
    else:
        # congruence by the inverse Cholesky factor of h
        Lc = np.linalg.cholesky(np.moveaxis(bg.hfull, (0, 1), (-2, -1)))
        X = np.linalg.solve(Lc, np.moveaxis(g.full(), (0, 1), (-2, -1)))
        M = np.linalg.solve(Lc, np.swapaxes(X, -1, -2))
        M = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam = np.linalg.eigvalsh(M)
    return lam[..., 0], lam[..., -1]


def pinning_deviation(g: MetricField, bg: BackgroundMetric):
    """Nodewise smallest eps with (1 - eps) h <= g <= (1 + eps) h."""
    lo, hi = relative_eigenvalues(g, bg)
    return np.maximum(np.abs(1.0 - lo), np.abs(hi - 1.0))
