"""Hot grid kernels, each with a numba implementation and a numpy fallback.

Every public function here dispatches on :func:`rdtlab._accel.get_backend`.
The two paths evaluate the same arithmetic; the stencils use the same
operation order and agree bit-for-bit, the contractions agree to rounding.

Layout conventions: spatial axes are always the trailing axes of an array;
flattened kernels take node index as the last axis.
"""
import numpy as np

from ._accel import njit, prange, using_numba

__all__ = [
    "d1",
    "d2",
    "rdtf_assemble",
    "interp_cubic",
    "sym_inverse",
    "packed_pairs",
    "packed_index",
]


_BLOCK = 512  # nodes per parallel work item


def packed_pairs(n):
    """Upper-triangular (i, j) pairs in row-major order: the packed layout."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def packed_index(n):
    """(n, n) integer table mapping (i, j) to the packed component."""
    idx = np.empty((n, n), dtype=np.intp)
    for c, (i, j) in enumerate(packed_pairs(n)):
        idx[i, j] = c
        idx[j, i] = c
    return idx


# ---------------------------------------------------------------------------
# periodic 4th-order stencils
# ---------------------------------------------------------------------------

def _wrap(N):
    i = np.arange(N)
    return ((i - 2) % N, (i - 1) % N, (i + 1) % N, (i + 2) % N)


@njit(cache=True, parallel=True)
def _d1_nb(f, out, scale, im2, im1, ip1, ip2):
    A, N, B = f.shape
    for a in prange(A):
        for i in range(N):
            m2 = im2[i]
            m1 = im1[i]
            p1 = ip1[i]
            p2 = ip2[i]
            for b in range(B):
                out[a, i, b] = (f[a, m2, b] - f[a, p2, b]
                                + 8.0 * (f[a, p1, b] - f[a, m1, b])) * scale


@njit(cache=True, parallel=True)
def _d2_nb(f, out, scale, im2, im1, ip1, ip2):
    A, N, B = f.shape
    for a in prange(A):
        for i in range(N):
            m2 = im2[i]
            m1 = im1[i]
            p1 = ip1[i]
            p2 = ip2[i]
            for b in range(B):
                out[a, i, b] = (16.0 * (f[a, p1, b] + f[a, m1, b])
                                - (f[a, p2, b] + f[a, m2, b])
                                - 30.0 * f[a, i, b]) * scale


def _as3(f, axis):
    f = np.ascontiguousarray(f, dtype=np.float64)
    axis = axis % f.ndim
    A = int(np.prod(f.shape[:axis], dtype=np.int64))
    B = int(np.prod(f.shape[axis + 1:], dtype=np.int64))
    return f.reshape(A, f.shape[axis], B)


def d1(f, axis, dx):
    """Centered 4th-order first derivative along ``axis`` with periodic wrap."""
    scale = 1.0 / (12.0 * dx)
    if using_numba():
        f3 = _as3(f, axis)
        out = np.empty_like(f3)
        _d1_nb(f3, out, scale, *_wrap(f3.shape[1]))
        return out.reshape(np.shape(f))
    f = np.asarray(f, dtype=np.float64)
    r = np.roll
    return (r(f, 2, axis) - r(f, -2, axis)
            + 8.0 * (r(f, -1, axis) - r(f, 1, axis))) * scale


def d2(f, axis, dx):
    """Compact centered 4th-order second derivative along ``axis``."""
    scale = 1.0 / (12.0 * dx * dx)
    if using_numba():
        f3 = _as3(f, axis)
        out = np.empty_like(f3)
        _d2_nb(f3, out, scale, *_wrap(f3.shape[1]))
        return out.reshape(np.shape(f))
    f = np.asarray(f, dtype=np.float64)
    r = np.roll
    return (16.0 * (r(f, -1, axis) + r(f, 1, axis))
            - (r(f, -2, axis) + r(f, 2, axis))
            - 30.0 * f) * scale


# ---------------------------------------------------------------------------
# nodewise symmetric inverse (closed form, n <= 3)
# ---------------------------------------------------------------------------

def sym_inverse(packed, n):
    """Inverse and determinant of packed symmetric matrices, nodewise.

    ``packed`` has shape (m, ...).  Returns ``(inv_packed, det)``.
    """
    p = packed
    if n == 1:
        det = p[0].copy()
        return (1.0 / det)[None], det
    if n == 2:
        a, b, d = p[0], p[1], p[2]
        det = a * d - b * b
        inv = np.stack([d / det, -b / det, a / det])
        return inv, det
    if n == 3:
        a, b, c, d, e, f = p  # (00, 01, 02, 11, 12, 22)
        A = d * f - e * e
        B = c * e - b * f
        C = b * e - c * d
        D = a * f - c * c
        E = b * c - a * e
        F = a * d - b * b
        det = a * A + b * B + c * C
        inv = np.stack([A, B, C, D, E, F]) / det
        return inv, det
    raise ValueError(f"unsupported dimension {n}")


# ---------------------------------------------------------------------------
# Ricci-DeTurck right-hand side assembly
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _rdtf_nb(g, ginv, dg, ddg, hinv, rm, curved, pi, pj, out):
    # nodes are blocked and innermost so every load is unit-stride
    n = g.shape[0]
    P = g.shape[2]
    M = pi.shape[0]
    nblk = (P + _BLOCK - 1) // _BLOCK
    for blk in prange(nblk):
        z0 = blk * _BLOCK
        z1 = min(P, z0 + _BLOCK)
        for c in range(M):
            i = pi[c]
            j = pj[c]
            for z in range(z0, z1):
                out[c, z] = 0.0
            for a in range(n):
                for b in range(n):
                    for z in range(z0, z1):
                        out[c, z] += ginv[a, b, z] * ddg[a, b, i, j, z]
            for a in range(n):
                for b in range(n):
                    for p in range(n):
                        for qq in range(n):
                            for z in range(z0, z1):
                                w = 0.5 * ginv[a, b, z] * ginv[p, qq, z]
                                out[c, z] += w * (dg[i, p, a, z] * dg[j, qq, b, z]
                                                  + 2.0 * dg[a, j, p, z] * dg[qq, i, b, z]
                                                  - 2.0 * dg[a, j, p, z] * dg[b, i, qq, z]
                                                  - 2.0 * dg[j, p, a, z] * dg[b, i, qq, z]
                                                  - 2.0 * dg[i, p, a, z] * dg[b, j, qq, z])
            if curved:
                for k in range(n):
                    for l in range(n):
                        for p in range(n):
                            for qq in range(n):
                                for z in range(z0, z1):
                                    out[c, z] -= ginv[k, l, z] * hinv[p, qq, z] * (
                                        g[i, p, z] * rm[j, k, qq, l, z]
                                        + g[j, p, z] * rm[i, k, qq, l, z])


def _rdtf_np(g, ginv, dg, ddg, hinv, rm, curved, pi, pj):
    es = lambda spec, *ops: np.einsum(spec, *ops, optimize=True)
    full = es("abz,abijz->ijz", ginv, ddg)
    q = (es("abz,pqz,ipaz,jqbz->ijz", ginv, ginv, dg, dg)
         + 2.0 * es("abz,pqz,ajpz,qibz->ijz", ginv, ginv, dg, dg)
         - 2.0 * es("abz,pqz,ajpz,biqz->ijz", ginv, ginv, dg, dg)
         - 2.0 * es("abz,pqz,jpaz,biqz->ijz", ginv, ginv, dg, dg)
         - 2.0 * es("abz,pqz,ipaz,bjqz->ijz", ginv, ginv, dg, dg))
    full = full + 0.5 * q
    if curved:
        t = es("klz,ipz,pqz,jkqlz->ijz", ginv, g, hinv, rm)
        full = full - (t + np.swapaxes(t, 0, 1))
    return full[pi, pj]


def rdtf_assemble(g, ginv, dg, ddg, hinv=None, rm=None):
    """Assemble the Ricci-DeTurck right-hand side from its ingredients.

    All inputs are full-index arrays with nodes flattened into the last axis:
    ``g, ginv`` (n, n, P); ``dg[k, i, j]`` is the background-covariant first
    derivative (n, n, n, P); ``ddg[a, b, i, j]`` the second derivative
    (n, n, n, n, P).  ``hinv`` and ``rm`` (lowered Riemann tensor of the
    background) are only needed for curved backgrounds.

    Returns the packed symmetric result, shape (m, P).
    """
    n = g.shape[0]
    pairs = packed_pairs(n)
    pi = np.array([p[0] for p in pairs], dtype=np.intp)
    pj = np.array([p[1] for p in pairs], dtype=np.intp)
    curved = rm is not None
    if not curved:
        hinv = np.zeros((1, 1, 1))
        rm = np.zeros((1, 1, 1, 1, 1))
    if using_numba():
        out = np.empty((len(pairs), g.shape[-1]))
        _rdtf_nb(np.ascontiguousarray(g), np.ascontiguousarray(ginv),
                 np.ascontiguousarray(dg), np.ascontiguousarray(ddg),
                 np.ascontiguousarray(hinv), np.ascontiguousarray(rm),
                 curved, pi, pj, out)
        return out
    return _rdtf_np(g, ginv, dg, ddg, hinv, rm, curved, pi, pj)


# ---------------------------------------------------------------------------
# periodic tensor-product cubic (4-point Lagrange) interpolation
# ---------------------------------------------------------------------------

def _lagrange_weights(f):
    # nodes at offsets -1, 0, 1, 2 relative to floor(x / dx)
    return (
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    )


@njit(cache=True)
def _interp_block(vals, pts, N, z0, z1, out):
    C = vals.shape[0]
    n = pts.shape[0]
    nst = 4 ** n
    base = np.empty(n, dtype=np.int64)
    w = np.empty((n, 4))
    for z in range(z0, z1):
        for d in range(n):
            s = pts[d, z]
            b = np.floor(s)
            f = s - b
            base[d] = np.int64(b)
            w[d, 0] = -f * (f - 1.0) * (f - 2.0) / 6.0
            w[d, 1] = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0
            w[d, 2] = -(f + 1.0) * f * (f - 2.0) / 2.0
            w[d, 3] = (f + 1.0) * f * (f - 1.0) / 6.0
        for c in range(C):
            out[c, z] = 0.0
        for st in range(nst):
            rem = st
            flat = 0
            wt = 1.0
            for d in range(n):
                o = rem % 4
                rem //= 4
                idx = (base[d] + o - 1) % N
                flat = flat * N + idx
                wt *= w[d, o]
            for c in range(C):
                out[c, z] += wt * vals[c, flat]


@njit(cache=True, parallel=True)
def _interp_nb(vals, pts, N, out):
    P = pts.shape[1]
    nblk = (P + _BLOCK - 1) // _BLOCK
    for blk in prange(nblk):
        _interp_block(vals, pts, N, blk * _BLOCK, min(P, (blk + 1) * _BLOCK), out)


def _interp_np(vals, pts, N):
    n, P = pts.shape
    C = vals.shape[0]
    s = pts
    base = np.floor(s)
    f = s - base
    base = base.astype(np.int64)
    w = [_lagrange_weights(f[d]) for d in range(n)]
    out = np.zeros((C, P))
    for st in range(4 ** n):
        rem = st
        flat = np.zeros(P, dtype=np.int64)
        wt = np.ones(P)
        for d in range(n):
            o = rem % 4
            rem //= 4
            flat = flat * N + (base[d] + o - 1) % N
            wt = wt * w[d][o]
        out += wt * vals[:, flat]
    return out


def interp_cubic(vals, pts):
    """Interpolate periodic grid data at arbitrary points.

    ``vals`` has shape (C, N, ..., N) (C components over an n-dim grid);
    ``pts`` has shape (n, P) in grid-index units, so node k sits at k and
    any real value is allowed (periodic wrap).  Integer points reproduce
    node values exactly.  Returns (C, P).
    """
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    C = vals.shape[0]
    N = vals.shape[-1]
    flatvals = vals.reshape(C, -1)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if using_numba():
        out = np.empty((C, pts.shape[1]))
        _interp_nb(flatvals, pts, N, out)
        return out
    return _interp_np(flatvals, pts, N)


# ---------------------------------------------------------------------------
# fused flat-background right-hand side (stencils + inverse + assembly)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _inv_small(m, n, out):
    if n == 1:
        out[0, 0] = 1.0 / m[0, 0]
    elif n == 2:
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[0, 1]
        out[0, 0] = m[1, 1] / det
        out[1, 1] = m[0, 0] / det
        out[0, 1] = -m[0, 1] / det
        out[1, 0] = out[0, 1]
    else:
        a = m[0, 0]; b = m[0, 1]; c = m[0, 2]
        d = m[1, 1]; e = m[1, 2]; f = m[2, 2]
        A = d * f - e * e
        B = c * e - b * f
        C = b * e - c * d
        det = a * A + b * B + c * C
        out[0, 0] = A / det
        out[0, 1] = B / det
        out[0, 2] = C / det
        out[1, 1] = (a * f - c * c) / det
        out[1, 2] = (b * c - a * e) / det
        out[2, 2] = (a * d - b * b) / det
        out[1, 0] = out[0, 1]
        out[2, 0] = out[0, 2]
        out[2, 1] = out[1, 2]


@njit(cache=True)
def _rdtf_flat_block(gp, n, N, z0, z1, stride, offs, w1, w2, c2, pi, pj, idx, out):
    m = gp.shape[0]
    coord = np.empty(n, dtype=np.int64)
    g = np.empty((n, n))
    gi = np.empty((n, n))
    Dp = np.empty((n, m))
    DDp = np.empty((n, n, m))
    shift = np.empty((n, 4), dtype=np.int64)
    V = np.empty((n, n, n))
    Y = np.empty((n, n, n))
    for z in range(z0, z1):
        rem = z
        for d in range(n - 1, -1, -1):
            coord[d] = rem % N
            rem //= N
        for d in range(n):
            for o in range(4):
                shift[d, o] = (((coord[d] + offs[o]) % N) - coord[d]) * stride[d]
        for c in range(m):
            f0 = gp[c, z]
            for a in range(n):
                s1 = 0.0
                s2 = c2 * f0
                for o in range(4):
                    v = gp[c, z + shift[a, o]]
                    s1 += w1[o] * v
                    s2 += w2[o] * v
                Dp[a, c] = s1
                DDp[a, a, c] = s2
                for b in range(a + 1, n):
                    sm = 0.0
                    for o in range(4):
                        zo = z + shift[a, o]
                        inner = 0.0
                        for q in range(4):
                            inner += w1[q] * gp[c, zo + shift[b, q]]
                        sm += w1[o] * inner
                    DDp[a, b, c] = sm
                    DDp[b, a, c] = sm
        for i in range(n):
            for j in range(n):
                g[i, j] = gp[idx[i, j], z]
        _inv_small(g, n, gi)
        # V[a,i,q] = D_a g_ip g^pq (last slot raised), Y[a,i,q] = g^ab D_b g_iq
        for a in range(n):
            for i in range(n):
                for q in range(n):
                    sv = 0.0
                    sy = 0.0
                    for p in range(n):
                        sv += Dp[a, idx[i, p]] * gi[p, q]
                        sy += gi[a, p] * Dp[p, idx[i, q]]
                    V[a, i, q] = sv
                    Y[a, i, q] = sy
        for c in range(pi.shape[0]):
            i = pi[c]
            j = pj[c]
            acc = 0.0
            for a in range(n):
                for b in range(n):
                    acc += gi[a, b] * DDp[a, b, idx[i, j]]
            q = 0.0
            for a in range(n):
                for b in range(n):
                    q += (V[i, a, b] * V[j, b, a]
                          + 2.0 * V[a, j, b] * V[b, i, a]
                          - 2.0 * V[a, j, b] * Y[a, i, b]
                          - 2.0 * V[j, a, b] * V[b, i, a]
                          - 2.0 * V[i, a, b] * V[b, j, a])
            out[c, z] = acc + 0.5 * q


@njit(cache=True, parallel=True)
def _rdtf_flat_nb(gp, n, N, dx, pi, pj, idx, out):
    P = gp.shape[1]
    offs = np.array([-2, -1, 1, 2])
    w1 = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * dx)
    w2 = np.array([-1.0, 16.0, 16.0, -1.0]) / (12.0 * dx * dx)
    c2 = -30.0 / (12.0 * dx * dx)
    stride = np.empty(n, dtype=np.int64)
    s = 1
    for d in range(n - 1, -1, -1):
        stride[d] = s
        s *= N
    nblk = (P + _BLOCK - 1) // _BLOCK
    for blk in prange(nblk):
        _rdtf_flat_block(gp, n, N, blk * _BLOCK, min(P, (blk + 1) * _BLOCK),
                         stride, offs, w1, w2, c2, pi, pj, idx, out)


def rdtf_flat_fused(packed, n, dx):
    """Flat-background right-hand side straight from packed components.

    Compiled path only: evaluates the stencils, the nodewise inverse and the
    contraction in one sweep.  Agrees with the staged numpy path to rounding.
    """
    N = packed.shape[1]
    m = packed.shape[0]
    gp = np.ascontiguousarray(packed, dtype=np.float64).reshape(m, -1)
    pairs = packed_pairs(n)
    pi = np.array([p[0] for p in pairs], dtype=np.int64)
    pj = np.array([p[1] for p in pairs], dtype=np.int64)
    out = np.empty_like(gp)
    _rdtf_flat_nb(gp, n, N, float(dx), pi, pj, packed_index(n).astype(np.int64), out)
    return out.reshape(packed.shape)
