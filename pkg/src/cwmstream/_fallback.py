"""Pure-numpy convolution kernels, used when the compiled extension is absent.

The forward pass accumulates each output element over (c, i, j) in the same
order as ``_kernels.pyx`` using separate multiply and add steps, so the two
backends agree bit-for-bit.  Output channels never interact, which is what
makes a sliced-kernel convolution reproduce the matching channels of the full
one exactly.
"""
import numpy as np


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, bias, stride, padding, num_threads=1):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = _pad(x, padding)
    out = np.zeros((N, O, Ho, Wo), dtype=x.dtype)
    ys = stride * (Ho - 1) + 1
    xs = stride * (Wo - 1) + 1
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                window = xp[:, c, i:i + ys:stride, j:j + xs:stride]
                out += w[:, c, i, j][None, :, None, None] * window[:, None]
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(g, x, w, stride, padding, num_threads=1):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    xp = _pad(x, padding)
    gip = np.zeros_like(xp)
    gk = np.zeros_like(w)
    ys = stride * (Ho - 1) + 1
    xs = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + ys:stride, j:j + xs:stride]
            gk[:, :, i, j] = np.einsum("nohw,nchw->oc", g, window)
            gip[:, :, i:i + ys:stride, j:j + xs:stride] += np.einsum("oc,nohw->nchw", w[:, :, i, j], g)
    gi = gip[:, :, padding:padding + H, padding:padding + W] if padding else gip
    return np.ascontiguousarray(gi), gk
