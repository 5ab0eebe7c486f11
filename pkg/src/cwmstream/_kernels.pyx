# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution kernels.

Every output element is accumulated over (c, i, j) in lexicographic order,
starting from zero, with the bias added last.  ``_fallback.py`` follows the
same order, so both backends produce bit-identical forward results as long as
this module is built without FMA contraction (see setup.py).
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t off, int s) noexcept nogil:
    # smallest k >= 0 with k*s + off >= 0
    if off >= 0:
        return 0
    return (-off + s - 1) // s


cdef inline Py_ssize_t _end_valid(Py_ssize_t off, Py_ssize_t size, int s, Py_ssize_t limit) noexcept nogil:
    # one past the largest k with k*s + off <= size - 1, clamped to limit
    cdef Py_ssize_t top = size - 1 - off
    cdef Py_ssize_t k
    if top < 0:
        return 0
    k = top // s + 1
    return k if k < limit else limit


cdef void _fwd_plane(const real* x, const real* w, real* out,
                     Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
                     Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo,
                     int s, int p) noexcept nogil:
    cdef Py_ssize_t c, i, j, y, xx, iy, x0, x1, y0, y1, off
    cdef real wv
    cdef const real* xrow
    cdef real* orow
    for c in range(C):
        for i in range(kh):
            y0 = _first_valid(i - p, s)
            y1 = _end_valid(i - p, H, s, Ho)
            for j in range(kw):
                wv = w[(c * kh + i) * kw + j]
                off = j - p
                x0 = _first_valid(off, s)
                x1 = _end_valid(off, W, s, Wo)
                for y in range(y0, y1):
                    iy = y * s + i - p
                    xrow = x + (c * H + iy) * W
                    orow = out + y * Wo
                    if s == 1:
                        for xx in range(x0, x1):
                            orow[xx] = orow[xx] + wv * xrow[xx + off]
                    else:
                        for xx in range(x0, x1):
                            orow[xx] = orow[xx] + wv * xrow[xx * s + off]


cdef void _fwd_wide(const real* xp, const real* w, real* acc, Py_ssize_t nb,
                     Py_ssize_t C, Py_ssize_t Hp, Py_ssize_t Wp,
                     Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t n_acc) noexcept nogil:
    # Stride-1 forward for nb (1..4) consecutive output channels over the
    # padded input; acc holds nb planes of n_acc = (Ho-1)*Wp + Wo elements on
    # a grid of row pitch Wp, columns >= Wo are scratch.
    cdef Py_ssize_t c, i, j, q, ksz = C * kh * kw
    cdef real w0, w1, w2, w3, v
    cdef const real* src
    cdef real* a0 = acc
    cdef real* a1 = acc + n_acc
    cdef real* a2 = acc + 2 * n_acc
    cdef real* a3 = acc + 3 * n_acc
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                src = xp + (c * Hp + i) * Wp + j
                w0 = w[(c * kh + i) * kw + j]
                if nb == 4:
                    w1 = w[ksz + (c * kh + i) * kw + j]
                    w2 = w[2 * ksz + (c * kh + i) * kw + j]
                    w3 = w[3 * ksz + (c * kh + i) * kw + j]
                    for q in range(n_acc):
                        v = src[q]
                        a0[q] = a0[q] + w0 * v
                        a1[q] = a1[q] + w1 * v
                        a2[q] = a2[q] + w2 * v
                        a3[q] = a3[q] + w3 * v
                else:
                    for q in range(n_acc):
                        a0[q] = a0[q] + w0 * src[q]


cdef void _fwd_block(const real* xp, const real* w, const real* b, bint has_bias,
                     real* out, real* acc, Py_ssize_t o0, Py_ssize_t nb,
                     Py_ssize_t C, Py_ssize_t Hp, Py_ssize_t Wp,
                     Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t n_acc = (Ho - 1) * Wp + Wo
    cdef Py_ssize_t k, q, y, xx, ksz = C * kh * kw
    cdef real* dst
    cdef real* a
    for q in range(nb * n_acc):
        acc[q] = 0
    if nb == 4:
        _fwd_wide(xp, w + o0 * ksz, acc, 4, C, Hp, Wp, kh, kw, n_acc)
    else:
        for k in range(nb):
            _fwd_wide(xp, w + (o0 + k) * ksz, acc + k * n_acc, 1, C, Hp, Wp, kh, kw, n_acc)
    for k in range(nb):
        a = acc + k * n_acc
        dst = out + (o0 + k) * Ho * Wo
        for y in range(Ho):
            for xx in range(Wo):
                dst[y * Wo + xx] = a[y * Wp + xx]
        if has_bias:
            for q in range(Ho * Wo):
                dst[q] = dst[q] + b[o0 + k]


def _forward_wide(real[:, :, :, ::1] xp, real[:, :, :, ::1] w, bias,
                  Py_ssize_t Ho, Py_ssize_t Wo, int num_threads):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n_acc = (Ho - 1) * Wp + Wo
    cdef Py_ssize_t nblocks = (O + 3) // 4
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, O, Ho, Wo), dtype=dtype)
    acc_arr = np.zeros((nblocks, 4 * n_acc), dtype=dtype)
    bias_arr = np.zeros(O, dtype=dtype) if bias is None else bias
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] acc = acc_arr
    cdef real[::1] b = bias_arr
    cdef bint has_bias = bias is not None
    cdef Py_ssize_t n, blk, o0, nb
    for n in range(N):
        for blk in prange(nblocks, nogil=True, num_threads=num_threads, schedule='static'):
            o0 = blk * 4
            nb = O - o0
            if nb > 4:
                nb = 4
            _fwd_block(&xp[n, 0, 0, 0], &w[0, 0, 0, 0], &b[0], has_bias,
                       &out[n, 0, 0, 0], &acc[blk, 0], o0, nb, C, Hp, Wp, kh, kw, Ho, Wo)
    return out_arr


def conv2d_forward(x, w, bias, int stride, int padding, int num_threads=1):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if N == 0 or O == 0 or Ho <= 0 or Wo <= 0:
        return np.zeros((N, O, max(Ho, 0), max(Wo, 0)), dtype=x.dtype)
    if stride == 1:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        return _forward_wide(xp, w, bias, Ho, Wo, num_threads)
    return _forward_direct(x, w, bias, stride, padding, num_threads)


def _forward_direct(real[:, :, :, ::1] x, real[:, :, :, ::1] w, bias,
                    int stride, int padding, int num_threads):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, O, Ho, Wo), dtype=dtype)
    bias_arr = np.zeros(O, dtype=dtype) if bias is None else bias
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[::1] b = bias_arr
    cdef bint has_bias = bias is not None
    cdef Py_ssize_t n, o, k
    for n in range(N):
        for o in prange(O, nogil=True, num_threads=num_threads, schedule='static'):
            _fwd_plane(&x[n, 0, 0, 0], &w[o, 0, 0, 0], &out[n, o, 0, 0],
                       C, H, W, kh, kw, Ho, Wo, stride, padding)
            if has_bias:
                for k in range(Ho * Wo):
                    (&out[n, o, 0, 0])[k] = (&out[n, o, 0, 0])[k] + b[o]
    return out_arr


cdef void _bwd_input_plane(const real* g, const real* w, real* gi,
                           Py_ssize_t O, Py_ssize_t C, Py_ssize_t c,
                           Py_ssize_t H, Py_ssize_t W,
                           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo,
                           int s, int p) noexcept nogil:
    # gi: H*W plane of input channel c; g: O*Ho*Wo for one image
    cdef Py_ssize_t o, i, j, y, xx, iy, x0, x1, y0, y1, off
    cdef real wv
    cdef const real* grow
    cdef real* irow
    for o in range(O):
        for i in range(kh):
            y0 = _first_valid(i - p, s)
            y1 = _end_valid(i - p, H, s, Ho)
            for j in range(kw):
                wv = w[((o * C + c) * kh + i) * kw + j]
                off = j - p
                x0 = _first_valid(off, s)
                x1 = _end_valid(off, W, s, Wo)
                for y in range(y0, y1):
                    iy = y * s + i - p
                    irow = gi + iy * W
                    grow = g + (o * Ho + y) * Wo
                    if s == 1:
                        for xx in range(x0, x1):
                            irow[xx + off] = irow[xx + off] + wv * grow[xx]
                    else:
                        for xx in range(x0, x1):
                            irow[xx * s + off] = irow[xx * s + off] + wv * grow[xx]


cdef void _bwd_kernel_plane(const real* g, const real* x, real* gk, real* tmp,
                            Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
                            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Ho, Py_ssize_t Wo,
                            int s, int p) noexcept nogil:
    # g: Ho*Wo plane of one output channel; x: C*H*W; gk: C*kh*kw (accumulated)
    cdef Py_ssize_t c, i, j, y, xx, iy, x0, x1, y0, y1, off
    cdef real acc
    cdef const real* xrow
    cdef const real* grow
    for c in range(C):
        for i in range(kh):
            y0 = _first_valid(i - p, s)
            y1 = _end_valid(i - p, H, s, Ho)
            for j in range(kw):
                off = j - p
                x0 = _first_valid(off, s)
                x1 = _end_valid(off, W, s, Wo)
                for xx in range(Wo):
                    tmp[xx] = 0
                for y in range(y0, y1):
                    iy = y * s + i - p
                    xrow = x + (c * H + iy) * W
                    grow = g + y * Wo
                    if s == 1:
                        for xx in range(x0, x1):
                            tmp[xx] = tmp[xx] + grow[xx] * xrow[xx + off]
                    else:
                        for xx in range(x0, x1):
                            tmp[xx] = tmp[xx] + grow[xx] * xrow[xx * s + off]
                acc = 0
                for xx in range(Wo):
                    acc = acc + tmp[xx]
                gk[(c * kh + i) * kw + j] += acc


cdef void _bwd_input_wide(const real* gw, const real* w, real* gip,
                          Py_ssize_t O, Py_ssize_t C, Py_ssize_t c,
                          Py_ssize_t Hp, Py_ssize_t Wp, Py_ssize_t kh, Py_ssize_t kw,
                          Py_ssize_t n_acc) noexcept nogil:
    # gw: O planes of the output gradient on the Wp-pitch grid (scratch
    # columns zeroed); gip: padded input-gradient plane of channel c.
    cdef Py_ssize_t o, i, j, q, ksz = C * kh * kw, gsz = n_acc
    cdef real w0, w1, w2, w3
    cdef real* dst
    cdef const real* g0
    cdef const real* g1
    cdef const real* g2
    cdef const real* g3
    o = 0
    while o < O:
        g0 = gw + o * gsz
        if o + 4 <= O:
            g1 = g0 + gsz
            g2 = g1 + gsz
            g3 = g2 + gsz
        for i in range(kh):
            for j in range(kw):
                dst = gip + i * Wp + j
                w0 = w[o * ksz + (c * kh + i) * kw + j]
                if o + 4 <= O:
                    w1 = w[(o + 1) * ksz + (c * kh + i) * kw + j]
                    w2 = w[(o + 2) * ksz + (c * kh + i) * kw + j]
                    w3 = w[(o + 3) * ksz + (c * kh + i) * kw + j]
                    for q in range(n_acc):
                        dst[q] = dst[q] + (w0 * g0[q] + w1 * g1[q] + w2 * g2[q] + w3 * g3[q])
                else:
                    for q in range(n_acc):
                        dst[q] = dst[q] + w0 * g0[q]
        o = o + 4 if o + 4 <= O else o + 1


def _backward_input_wide(real[:, ::1] gw, real[:, :, :, ::1] w,
                         Py_ssize_t Hp, Py_ssize_t Wp, Py_ssize_t n_acc, int num_threads):
    cdef Py_ssize_t O = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    dtype = np.float32 if real is float else np.float64
    gip_arr = np.zeros((C, Hp, Wp), dtype=dtype)
    cdef real[:, :, ::1] gip = gip_arr
    cdef Py_ssize_t c
    for c in prange(C, nogil=True, num_threads=num_threads, schedule='static'):
        _bwd_input_wide(&gw[0, 0], &w[0, 0, 0, 0], &gip[c, 0, 0], O, C, c, Hp, Wp, kh, kw, n_acc)
    return gip_arr


def conv2d_backward(g, x, w, int stride, int padding, int num_threads=1):
    """Return (grad_input, grad_kernel); the bias gradient is a plain sum."""
    if stride != 1:
        return _backward_direct(g, x, w, stride, padding, num_threads)
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    Hp, Wp = H + 2 * padding, W + 2 * padding
    n_acc = (Ho - 1) * Wp + Wo
    gi = np.empty_like(x)
    gk = np.zeros_like(w)
    xp = np.zeros((N, C, Hp, Wp), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    item = x.itemsize
    for n in range(N):
        gw = np.zeros((O, Ho, Wp), dtype=x.dtype)
        gw[:, :, :Wo] = g[n]
        gw = gw.reshape(O, Ho * Wp)[:, :n_acc].copy()
        gip = _backward_input_wide(gw, w, Hp, Wp, n_acc, num_threads)
        gi[n] = gip[:, padding:padding + H, padding:padding + W]
        # im2col over the padded grid; scratch columns meet zero gradient
        cols = np.lib.stride_tricks.as_strided(
            xp[n], shape=(C, kh, kw, n_acc),
            strides=(Hp * Wp * item, Wp * item, item, item), writeable=False)
        gk += (gw @ cols.reshape(C * kh * kw, n_acc).T).reshape(O, C, kh, kw)
    return gi, gk


def _backward_direct(real[:, :, :, ::1] g, real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                     int stride, int padding, int num_threads=1):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    gi_arr = np.zeros((N, C, H, W), dtype=dtype)
    gk_arr = np.zeros((O, C, kh, kw), dtype=dtype)
    tmp_arr = np.zeros((O, max(Wo, 1)), dtype=dtype)
    cdef real[:, :, :, ::1] gi = gi_arr
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef real[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t n, c, o
    if N == 0 or Ho <= 0 or Wo <= 0:
        return gi_arr, gk_arr
    for n in range(N):
        for c in prange(C, nogil=True, num_threads=num_threads, schedule='static'):
            _bwd_input_plane(&g[n, 0, 0, 0], &w[0, 0, 0, 0], &gi[n, c, 0, 0],
                             O, C, c, H, W, kh, kw, Ho, Wo, stride, padding)
        for o in prange(O, nogil=True, num_threads=num_threads, schedule='static'):
            _bwd_kernel_plane(&g[n, o, 0, 0], &x[n, 0, 0, 0], &gk[o, 0, 0, 0], &tmp[o, 0],
                              C, H, W, kh, kw, Ho, Wo, stride, padding)
    return gi_arr, gk_arr
