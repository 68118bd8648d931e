"""Curvature of a grid metric and the first-order distributional scalar
curvature pairing of Lee and LeFloch.

The pairing only ever differentiates ``g`` once, which is what lets it act on
rough (grid-W^{1,2}) metrics.  For smooth ``g`` it agrees with
``int (R_g + b) phi dg`` after one integration by parts.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_core import (
    BackgroundMetric,
    MetricField,
    ScalarField,
    TensorField,
    check_spd,
    christoffel,
    integrate,
    metric_derivatives,
    packed_index,
    partials,
    ricci_tensor_h,
    second_partials,
)


class PairingPreconditionError(ValueError):
    pass


def _es(spec, *ops):
    return np.einsum(spec, *ops, optimize=True)


def _christoffel_g(g: MetricField, second=True):
    n = g.grid.dim
    idx = packed_index(n)
    full = g.packed[idx]
    inv = kernels.sym_inverse(g.packed, n)[0][idx]
    dfull = partials(g.packed, g.grid)[:, idx]
    ddfull = second_partials(g.packed, g.grid)[:, :, idx] if second else None
    gam, dgam = christoffel(full, inv, dfull, ddfull)
    return full, inv, gam, dgam


def ricci(g: MetricField) -> TensorField:
    """Ricci tensor from Gamma(g) and its partials; symmetrized exactly."""
    check_spd(g)
    _, _, gam, dgam = _christoffel_g(g)
    ric = (_es("aadb...->db...", dgam) - _es("daab...->db...", dgam)
           + _es("aae...,edb...->db...", gam, gam)
           - _es("ade...,eab...->db...", gam, gam))
    ric = 0.5 * (ric + np.swapaxes(ric, 0, 1))
    return TensorField(g.grid, ric, "dd")


def scalar_curvature(g: MetricField) -> ScalarField:
    ric = ricci(g).values
    n = g.grid.dim
    inv = kernels.sym_inverse(g.packed, n)[0][packed_index(n)]
    return ScalarField(g.grid, _es("ij...,ij...->...", inv, ric))


def volume_ratio(g: MetricField, bg: BackgroundMetric) -> ScalarField:
    """dg/dh = sqrt(det g / det h) nodewise."""
    det = g.determinant()
    return ScalarField(g.grid, np.sqrt(det) / bg.sqrt_det)


@dataclass(frozen=True, eq=False)
class LeeLeFlochTerms:
    T_tensor: TensorField
    L_scalar: ScalarField
    Z_vector: TensorField
    vol_ratio: ScalarField


def lee_lefloch_terms(g: MetricField, bg: BackgroundMetric) -> LeeLeFlochTerms:
    """T(g,h), L(g,h), Z(g,h) and dg/dh from first derivatives of g only.

    The zeroth-order background term is g^{ij} Ric(h)_{ij}.  It equals R_h
    when g = h and vanishes on flat h; with it the smooth identity
    R_g = L + div_h Z holds exactly for every g (checked numerically in the tests).
    """
    check_spd(g)
    grid = g.grid
    gfull, ginv, nab, _ = metric_derivatives(g, bg, second=False)
    # lowered T_{ljk} = 1/2 (nab_j g_kl + nab_k g_jl - nab_l g_jk)
    low = 0.5 * (_es("jkl...->ljk...", nab) + _es("kjl...->ljk...", nab) - nab)
    T = _es("il...,ljk...->ijk...", ginv, low)
    dginv = -_es("ia...,jb...,kab...->kij...", ginv, ginv, nab)
    trT = _es("jji...->i...", T)  # T^j_{ji}
    L = (_es("ij...,ij...->...", ginv, ricci_tensor_h(bg))
         - _es("kij...,kij...->...", dginv, T)
         + _es("kik...,i...->...", dginv, trT)
         + _es("ij...,kkl...,lij...->...", ginv, T, T)
         - _es("ij...,kjl...,lik...->...", ginv, T, T))
    Z = _es("ij...,kij...->k...", ginv, T) - _es("ik...,i...->k...", ginv, trT)
    return LeeLeFlochTerms(
        T_tensor=TensorField(grid, T, "udd"),
        L_scalar=ScalarField(grid, L),
        Z_vector=TensorField(grid, Z, "u"),
        vol_ratio=volume_ratio(g, bg),
    )


def _check_phi(phi: ScalarField):
    if np.any(phi.values < 0.0):
        i = np.unravel_index(np.argmin(phi.values), phi.grid.shape)
        raise PairingPreconditionError(
            f"test function negative at node {tuple(int(a) for a in i)}: "
            f"{phi.values[i]:.3e}")


def distributional_pairing(g: MetricField, bg: BackgroundMetric, phi: ScalarField,
                           b: float, terms: LeeLeFlochTerms | None = None) -> float:
    """int ( L F - h(Z, grad F) + b F ) dh with F = phi * dg/dh.

    Only first derivatives of g enter.  For smooth g this equals
    ``smooth_pairing(g, phi, b)`` up to discretization error.
    """
    g.grid.check_same(phi.grid)
    _check_phi(phi)
    if not np.any(phi.values):
        return 0.0
    if terms is None:
        terms = lee_lefloch_terms(g, bg)
    F = phi.values * terms.vol_ratio.values
    dF = partials(F, g.grid)
    zdf = _es("k...,k...->...", terms.Z_vector.values, dF)
    integrand = (terms.L_scalar.values + b) * F - zdf
    return integrate(ScalarField(g.grid, integrand), bg.sqrt_det)


def smooth_pairing(g: MetricField, phi: ScalarField, b: float,
                   R: ScalarField | None = None) -> float:
    """int (R_g + b) phi dg with dg = sqrt(det g) dx."""
    g.grid.check_same(phi.grid)
    if R is None:
        R = scalar_curvature(g)
    vol = np.sqrt(g.determinant())
    return integrate(ScalarField(g.grid, (R.values + b) * phi.values), vol)


# ---------------------------------------------------------------------------
# test-function family for the distributional verdict
# ---------------------------------------------------------------------------

def random_bandlimited_phi(grid, rng, kmax=4, floor=0.0):
    """Nonnegative trigonometric polynomial with integer modes |m|_inf <= kmax.

    Built as q^2 + floor with q a random real band-limited field, so it is
    exactly nonnegative on the grid.
    """
    modes = grid.integer_modes()
    mask = np.ones(grid.shape, dtype=bool)
    for m in modes:
        mask &= np.abs(m) <= kmax // 2
    coef = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    q = np.fft.ifftn(np.where(mask, coef, 0.0)).real
    q /= np.max(np.abs(q)) or 1.0
    return ScalarField(grid, q * q + floor)


def phi_family(grid, count=8, seed=0, kmax=4, n_bumps=2):
    """Random nonnegative band-limited functions plus cutoff bumps."""
    from .harness import build_cutoff

    rng = np.random.default_rng([seed, 5])
    fam = [random_bandlimited_phi(grid, rng, kmax) for _ in range(count)]
    L = grid.period
    for j in range(n_bumps):
        center = rng.uniform(0.0, L, grid.dim)
        fam.append(build_cutoff(center, 0.1 * L, 0.3 * L, grid).field)
    return fam


def pairing_scale(g: MetricField, bg: BackgroundMetric, phi: ScalarField, b: float,
                  terms: LeeLeFlochTerms | None = None) -> float:
    """int ( |(L + b) F| + |h(Z, grad F)| ) dh, the size a pairing is judged against."""
    if terms is None:
        terms = lee_lefloch_terms(g, bg)
    F = phi.values * terms.vol_ratio.values
    dF = partials(F, g.grid)
    zdf = _es("k...,k...->...", terms.Z_vector.values, dF)
    a = np.abs((terms.L_scalar.values + b) * F) + np.abs(zdf)
    return integrate(ScalarField(g.grid, a), bg.sqrt_det)


def distributional_verdict(g, bg, b, family, rel_tol=1e-2):
    """Pairings over a test-function family.

    Returns (ok, values, relative) where relative = pairing / pairing_scale
    and ok means every relative value is >= -rel_tol.
    """
    terms = lee_lefloch_terms(g, bg)
    vals, rel = [], []
    for phi in family:
        v = distributional_pairing(g, bg, phi, b, terms)
        sc = pairing_scale(g, bg, phi, b, terms)
        vals.append(v)
        rel.append(v / sc if sc > 0 else 0.0)
    return bool(min(rel) >= -rel_tol), vals, rel
