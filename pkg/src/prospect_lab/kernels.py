"""Hot inner loops, each with a numba kernel and a numpy fallback.

Integer kernels, gathers and the ``col2im`` scatter-add (same (ki, kj)
accumulation order in both paths) are bit-identical across backends. The
FiLM reductions accumulate in float64 in both paths but in different order,
so they agree to float32 rounding.
"""
import numpy as np

from . import _accel

# Philox4x32-10 constants (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
PHILOX_ROUNDS = 10
_MASK32 = 0xFFFFFFFF


# --------------------------------------------------------------------------
# Philox4x32-10 block function
# --------------------------------------------------------------------------

def _philox_np(start, nblocks, stream, key):
    """Return uint32 array (nblocks, 4) for counters start..start+nblocks-1."""
    m32 = np.uint64(_MASK32)
    ctr = np.uint64(start) + np.arange(nblocks, dtype=np.uint64)
    c0 = ctr & m32
    c1 = ctr >> np.uint64(32)
    c2 = np.full(nblocks, stream & _MASK32, dtype=np.uint64)
    c3 = np.full(nblocks, stream >> 32, dtype=np.uint64)
    k0 = key & _MASK32
    k1 = key >> 32
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    s32 = np.uint64(32)
    for _ in range(PHILOX_ROUNDS):
        p0 = m0 * c0
        p1 = m1 * c2
        hi0, lo0 = p0 >> s32, p0 & m32
        hi1, lo1 = p1 >> s32, p1 & m32
        c0, c1, c2, c3 = (hi1 ^ c1 ^ np.uint64(k0), lo1,
                          hi0 ^ c3 ^ np.uint64(k1), lo0)
        k0 = (k0 + PHILOX_W0) & _MASK32
        k1 = (k1 + PHILOX_W1) & _MASK32
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


@_accel.njit
def _philox_nb_impl(start, nblocks, s_lo, s_hi, k_lo, k_hi):
    out = np.empty((nblocks, 4), dtype=np.uint32)
    m32 = np.uint64(0xFFFFFFFF)
    m0 = np.uint64(0xD2511F53)
    m1 = np.uint64(0xCD9E8D57)
    w0 = np.uint64(0x9E3779B9)
    w1 = np.uint64(0xBB67AE85)
    s32 = np.uint64(32)
    for i in range(nblocks):
        ctr = start + np.uint64(i)
        c0 = ctr & m32
        c1 = ctr >> s32
        c2 = s_lo
        c3 = s_hi
        k0 = k_lo
        k1 = k_hi
        for _ in range(10):
            p0 = m0 * c0
            p1 = m1 * c2
            n0 = (p1 >> s32) ^ c1 ^ k0
            n1 = p1 & m32
            n2 = (p0 >> s32) ^ c3 ^ k1
            n3 = p0 & m32
            c0, c1, c2, c3 = n0, n1, n2, n3
            k0 = (k0 + w0) & m32
            k1 = (k1 + w1) & m32
        out[i, 0] = c0
        out[i, 1] = c1
        out[i, 2] = c2
        out[i, 3] = c3
    return out


def _philox_nb(start, nblocks, stream, key):
    return _philox_nb_impl(np.uint64(start), int(nblocks),
                           np.uint64(stream & _MASK32), np.uint64(stream >> 32),
                           np.uint64(key & _MASK32), np.uint64(key >> 32))


# --------------------------------------------------------------------------
# im2col / col2im on NHWC tensors
# --------------------------------------------------------------------------

def _im2col_np(xp, kh, kw, stride):
    b, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return np.ascontiguousarray(view)


@_accel.njit
def _im2col_nb(xp, kh, kw, stride):
    b, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            out[n, i, j, ki, kj, ch] = xp[n, i * stride + ki, j * stride + kj, ch]
    return out


def _col2im_np(cols, hp, wp, stride):
    b, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, ki, kj, :]
    return out


@_accel.njit
def _col2im_nb(cols, hp, wp, stride):
    b, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    # (ki, kj) outermost: same accumulation order as the numpy path
    for ki in range(kh):
        for kj in range(kw):
            for n in range(b):
                for i in range(ho):
                    for j in range(wo):
                        for ch in range(c):
                            out[n, i * stride + ki, j * stride + kj, ch] += cols[n, i, j, ki, kj, ch]
    return out


# --------------------------------------------------------------------------
# fused FiLM + ReLU:  r = max(h * (1 + g) + beta, 0)
# --------------------------------------------------------------------------

def _film_relu_fwd_np(h, g, be):
    f = h * (1 + g[:, None, None, :]) + be[:, None, None, :]
    m = f > 0
    return f * m, m


@_accel.njit
def _film_relu_fwd_nb(h, g, be):
    b, hh, ww, c = h.shape
    r = np.empty_like(h)
    m = np.empty(h.shape, dtype=np.bool_)
    one = h.dtype.type(1)
    zero = h.dtype.type(0)
    for n in range(b):
        for i in range(hh):
            for j in range(ww):
                for ch in range(c):
                    f = h[n, i, j, ch] * (one + g[n, ch]) + be[n, ch]
                    pos = f > zero
                    m[n, i, j, ch] = pos
                    r[n, i, j, ch] = f if pos else zero
    return r, m


def _film_relu_bwd_np(dr, h, g, m):
    df = dr * m
    dh = df * (1 + g[:, None, None, :])
    dg = np.sum(df * h, axis=(1, 2), dtype=np.float64).astype(h.dtype)
    dbe = np.sum(df, axis=(1, 2), dtype=np.float64).astype(h.dtype)
    return dh, dg, dbe


@_accel.njit
def _film_relu_bwd_nb(dr, h, g, m):
    b, hh, ww, c = h.shape
    dh = np.empty_like(h)
    dg = np.zeros((b, c), dtype=np.float64)
    dbe = np.zeros((b, c), dtype=np.float64)
    one = h.dtype.type(1)
    zero = h.dtype.type(0)
    for n in range(b):
        for i in range(hh):
            for j in range(ww):
                for ch in range(c):
                    df = dr[n, i, j, ch] if m[n, i, j, ch] else zero
                    dh[n, i, j, ch] = df * (one + g[n, ch])
                    dg[n, ch] += df * h[n, i, j, ch]
                    dbe[n, ch] += df
    return dh, dg.astype(h.dtype), dbe.astype(h.dtype)


# --------------------------------------------------------------------------
# binary template IoU (content oracle)
# --------------------------------------------------------------------------

def _template_iou_np(mask, templates):
    m = mask.reshape(1, -1).astype(np.int64)
    t = templates.reshape(templates.shape[0], -1).astype(np.int64)
    inter = (t & m).sum(axis=1)
    union = (t | m).sum(axis=1)
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


@_accel.njit
def _template_iou_nb(mask, templates):
    n, h, w = templates.shape
    out = np.empty(n, dtype=np.float64)
    for k in range(n):
        inter = 0
        union = 0
        for i in range(h):
            for j in range(w):
                a = templates[k, i, j]
                b = mask[i, j]
                if a and b:
                    inter += 1
                if a or b:
                    union += 1
        out[k] = inter / union if union > 0 else 0.0
    return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

IMPLS = {
    "philox": (_philox_np, _philox_nb),
    "im2col": (_im2col_np, _im2col_nb),
    "col2im": (_col2im_np, _col2im_nb),
    "template_iou": (_template_iou_np, _template_iou_nb),
    "film_relu_fwd": (_film_relu_fwd_np, _film_relu_fwd_nb),
    "film_relu_bwd": (_film_relu_bwd_np, _film_relu_bwd_nb),
}


# numpy's contiguous copy of a strided view beats the compiled gather
# (see benchmarks/bench_kernels.py), so im2col stays on numpy everywhere.
NUMPY_PREFERRED = frozenset({"im2col"})


def _pick(name):
    np_fn, nb_fn = IMPLS[name]
    return nb_fn if _accel.USE_NUMBA and name not in NUMPY_PREFERRED else np_fn


def philox_blocks(start: int, nblocks: int, stream: int, key: int) -> np.ndarray:
    return _pick("philox")(start, nblocks, stream, key)


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patches of a padded NHWC tensor as (B, Ho, Wo, kh, kw, C)."""
    return _pick("im2col")(np.ascontiguousarray(xp), kh, kw, stride)


def col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches into (B, hp, wp, C)."""
    return _pick("col2im")(np.ascontiguousarray(cols), hp, wp, stride)


def template_iou(mask: np.ndarray, templates: np.ndarray) -> np.ndarray:
    return _pick("template_iou")(np.ascontiguousarray(mask, dtype=np.bool_),
                                 np.ascontiguousarray(templates, dtype=np.bool_))


def film_relu_fwd(h, g, beta):
    """ReLU(h * (1 + g) + beta) with per-(batch, channel) g, beta; returns (r, mask)."""
    return _pick("film_relu_fwd")(np.ascontiguousarray(h), np.ascontiguousarray(g),
                                  np.ascontiguousarray(beta))


def film_relu_bwd(dr, h, g, mask):
    """Returns (dh, dg, dbeta) for :func:`film_relu_fwd`."""
    return _pick("film_relu_bwd")(np.ascontiguousarray(dr), np.ascontiguousarray(h),
                                  np.ascontiguousarray(g), np.ascontiguousarray(mask))
