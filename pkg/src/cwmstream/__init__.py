"""Streaming channel-wise masked (CWM) convolutions.

A CWM convolution recomputes only a contiguous block of its output channels
at each time-step and reuses the previous step's output for the rest.
"""
from .ops import BACKEND
from .masks import ChannelMask, MaskSchedule, bistep_generator, random_contiguous_generator, mask_for_step, flop_fraction
from .cwm import CwmConvLayer, CwmState, cwm_forward, cwm_backward, reset

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ChannelMask",
    "MaskSchedule",
    "bistep_generator",
    "random_contiguous_generator",
    "mask_for_step",
    "flop_fraction",
    "CwmConvLayer",
    "CwmState",
    "cwm_forward",
    "cwm_backward",
    "reset",
]
