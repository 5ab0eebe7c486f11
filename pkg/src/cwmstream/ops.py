"""Dense tensor kernels: convolution (full and channel-masked), their adjoints,
and the small elementwise/pooling ops the toy networks are built from.

Tensors are plain C-contiguous numpy arrays, NCHW for activations and OIHW for
kernels, in float32 or float64.  Ops never modify their inputs.

The convolution kernels come from the compiled ``_kernels`` extension when it
is importable and from ``_fallback`` otherwise.  ``CWM_BACKEND`` set to
``python`` or ``cython`` forces one of them; ``CWM_THREADS`` caps the number
of threads the compiled kernels use (default 1).
"""
import os
import warnings

import numpy as np

from . import _fallback

IGNORE_INDEX = 255
DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


def _load_backend(name):
    if name == "python":
        return "python", _fallback
    try:
        from . import _kernels
    except ImportError:
        if name == "cython":
            raise
        warnings.warn("compiled kernels unavailable, using numpy fallback", RuntimeWarning, stacklevel=3)
        return "python", _fallback
    return "cython", _kernels


BACKEND, _impl = _load_backend(os.environ.get("CWM_BACKEND", "auto"))


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    return _load_backend(name)[1]


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global BACKEND, _impl
    previous = BACKEND
    BACKEND, _impl = _load_backend(name)
    return previous


def num_threads():
    return max(1, int(os.environ.get("CWM_THREADS", "1")))


def _check_tensor(t, ndim, what):
    if not isinstance(t, np.ndarray):
        raise TypeError(f"{what} must be a numpy array, got {type(t).__name__}")
    if t.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {t.shape}")
    if t.dtype not in DTYPES:
        raise TypeError(f"{what} dtype must be float32 or float64, got {t.dtype}")


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output size: ({size} + 2*{padding} - {k}) / {stride}")
    return span // stride + 1


def _check_conv(x, kernel, bias, stride, padding):
    _check_tensor(x, 4, "input")
    _check_tensor(kernel, 4, "kernel")
    if x.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype}, kernel {kernel.dtype}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if bias is not None:
        _check_tensor(bias, 1, "bias")
        if bias.shape[0] != kernel.shape[0] or bias.dtype != kernel.dtype:
            raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    ho = conv_output_size(x.shape[2], kernel.shape[2], stride, padding)
    wo = conv_output_size(x.shape[3], kernel.shape[3], stride, padding)
    return ho, wo


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Direct 2-D cross-correlation with zero padding."""
    _check_conv(x, kernel, bias, stride, padding)
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel)
    if bias is not None:
        bias = np.ascontiguousarray(bias)
    return _impl.conv2d_forward(x, kernel, bias, stride, padding, num_threads())


def conv2d_masked(x, kernel, bias, mask, stride=1, padding=0):
    """Compute only the output channels ``[mask.start, mask.end)``.

    The kernel rows (and bias entries) are copied into a contiguous block
    before the convolution, so the result has ``mask.count`` channels.
    """
    if mask.total != kernel.shape[0]:
        raise ShapeError(f"mask covers {mask.total} channels, kernel has {kernel.shape[0]}")
    rows = np.ascontiguousarray(kernel[mask.start:mask.end])
    b = None if bias is None else np.ascontiguousarray(bias[mask.start:mask.end])
    return conv2d(x, rows, b, stride, padding)


def conv2d_backward(grad_out, x, kernel, stride=1, padding=0, with_bias=True):
    """Adjoint of :func:`conv2d`; returns ``(grad_input, grad_kernel, grad_bias)``."""
    ho, wo = _check_conv(x, kernel, None, stride, padding)
    _check_tensor(grad_out, 4, "grad_out")
    expected = (x.shape[0], kernel.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    if grad_out.dtype != x.dtype:
        raise TypeError("grad_out dtype does not match input")
    gi, gk = _impl.conv2d_backward(np.ascontiguousarray(grad_out), np.ascontiguousarray(x),
                                   np.ascontiguousarray(kernel), stride, padding, num_threads())
    gb = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    return gi, gk, gb


def conv_macs(input_hw, kernel_shape, stride=1, padding=0, active=None):
    """Multiply-accumulate count of one conv: Ho*Wo*Cout_active*Cin*kh*kw."""
    cout, cin, kh, kw = kernel_shape
    ho = conv_output_size(input_hw[0], kh, stride, padding)
    wo = conv_output_size(input_hw[1], kw, stride, padding)
    return ho * wo * (cout if active is None else active) * cin * kh * kw


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a + b


def _pool_windows(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial size, got {h}x{w}")
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))


def maxpool2x2(x):
    _check_tensor(x, 4, "input")
    return _pool_windows(x).max(axis=-1)


def maxpool_backward(grad_out, x):
    """Route each gradient to the first maximal element of its 2x2 window."""
    win = _pool_windows(x)
    if grad_out.shape != win.shape[:4]:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {win.shape[:4]}")
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, win.argmax(axis=-1)[..., None], 1, axis=-1)
    g = onehot * grad_out[..., None]
    n, c, h2, w2, _ = g.shape
    return (g.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, 2 * h2, 2 * w2))


def upsample_nearest2x(x):
    _check_tensor(x, 4, "input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(grad_out):
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample gradient must have even size, got {h}x{w}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def softmax_ce_loss(logits, labels, ignore_index=IGNORE_INDEX):
    """Pixel-averaged softmax cross-entropy.

    ``labels`` is (N, H, W) or, for a single image, (H, W).  Pixels equal to
    ``ignore_index`` contribute neither loss nor gradient; the mean is over the
    remaining pixels.  Returns ``(loss, grad_logits)``.
    """
    _check_tensor(logits, 4, "logits")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= c)):
        raise ValueError(f"label out of class range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    count = int(valid.sum())
    grad = np.exp(logp)
    if count == 0:
        return 0.0, np.zeros_like(logits)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -float(picked[valid].sum()) / count
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, safe[:, None], 1, axis=1)
    grad = (grad - onehot) * valid[:, None] / count
    return loss, grad.astype(logits.dtype, copy=False)
