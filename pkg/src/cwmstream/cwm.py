"""Channel-wise masked convolution layer with a cached previous output.

At step 0 the layer runs a full convolution.  At step t >= 1 it computes only
the channels of ``mask_for_step(schedule, t)`` and copies every other channel
from the previous step's output.  Weights live in :class:`CwmConvLayer`,
which is immutable; the step counter and cached output live in
:class:`CwmState`, owned by the caller, so several sessions can share one
layer.
"""
from dataclasses import dataclass

import numpy as np

from . import ops
from .masks import MaskSchedule, mask_for_step

# Default gradient semantics: stop at the cache boundary.  Training can opt
# into backpropagation through time (net.backward(..., through_time=True)).
BPTT = False


@dataclass(frozen=True, eq=False)
class CwmConvLayer:
    kernel: np.ndarray
    bias: np.ndarray | None
    schedule: MaskSchedule
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.schedule.total != self.kernel.shape[0]:
            raise ValueError(
                f"schedule covers {self.schedule.total} channels, kernel has {self.kernel.shape[0]}")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def mask_at(self, step):
        """Mask for ``step``, or None for the unmasked step 0."""
        return None if step == 0 else mask_for_step(self.schedule, step)


@dataclass(frozen=True, eq=False)
class CwmState:
    step: int = 0
    cached: np.ndarray | None = None

    def __post_init__(self):
        if (self.cached is None) != (self.step == 0):
            raise ValueError("cached output must be present exactly when step > 0")


def reset(state=None):
    return CwmState()


def interlace(partial, cached, mask):
    """Copy of ``cached`` with channels ``[mask.start, mask.end)`` replaced by ``partial``."""
    out = cached.copy()
    out[:, mask.start:mask.end] = partial
    return out


def cwm_forward(layer, state, x):
    """Run one time-step; returns ``(output, new_state)``."""
    if state.step == 0:
        out = ops.conv2d(x, layer.kernel, layer.bias, layer.stride, layer.padding)
        return out, CwmState(1, out)
    ho = ops.conv_output_size(x.shape[2], layer.kernel.shape[2], layer.stride, layer.padding)
    wo = ops.conv_output_size(x.shape[3], layer.kernel.shape[3], layer.stride, layer.padding)
    expected = (x.shape[0], layer.out_channels, ho, wo)
    if state.cached.shape != expected:
        raise ops.ShapeError(f"input size changed mid-session: cached {state.cached.shape}, now {expected}")
    m = mask_for_step(layer.schedule, state.step)
    partial = ops.conv2d_masked(x, layer.kernel, layer.bias, m, layer.stride, layer.padding)
    out = interlace(partial, state.cached, m)
    return out, CwmState(state.step + 1, out)


def cwm_backward(layer, state, x, grad_out):
    """Gradients of the most recent :func:`cwm_forward` call.

    ``state`` is the state returned by that call and ``x`` its input.  Only
    the channels computed at that step carry gradient; cached channels are
    constants, so kernel and bias rows outside the mask get exact zeros.
    Returns ``(grad_input, grad_kernel, grad_bias)``; ``grad_bias`` is None
    for a bias-free layer.
    """
    if state.step == 0:
        raise ValueError("cwm_backward needs a preceding forward step")
    m = layer.mask_at(state.step - 1)
    has_bias = layer.bias is not None
    if m is None or m.count == layer.out_channels:
        return ops.conv2d_backward(grad_out, x, layer.kernel, layer.stride, layer.padding, has_bias)
    rows = np.ascontiguousarray(layer.kernel[m.start:m.end])
    g = np.ascontiguousarray(grad_out[:, m.start:m.end])
    gi, gk_rows, gb_rows = ops.conv2d_backward(g, x, rows, layer.stride, layer.padding, has_bias)
    gk = np.zeros_like(layer.kernel)
    gk[m.start:m.end] = gk_rows
    gb = None
    if has_bias:
        gb = np.zeros_like(layer.bias)
        gb[m.start:m.end] = gb_rows
    return gi, gk, gb
