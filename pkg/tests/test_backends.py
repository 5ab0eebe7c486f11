import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cwmstream import ops
from cwmstream.net import StreamSession, build_toynet

cython = pytest.importorskip("cwmstream._kernels")
python = ops.get_backend("python")


def test_auto_selects_compiled():
    assert ops.BACKEND == "cython"


def test_switch_and_restore():
    prev = ops.set_backend("python")
    try:
        assert ops.BACKEND == "python"
    finally:
        ops.set_backend(prev)
    assert ops.BACKEND == prev


shapes = st.tuples(st.integers(1, 2), st.integers(1, 6), st.integers(1, 6), st.integers(3, 12),
                   st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.integers(0, 2))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, dtype=st.sampled_from([np.float32, np.float64]), bias=st.booleans(),
       seed=st.integers(0, 2**31))
def test_forward_bit_identical(shape, dtype, bias, seed):
    n, cin, cout, h, k, s, p = shape
    if h + 2 * p < k or (h + 2 * p - k) % s:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, h + 1 if s == 1 else h)).astype(dtype)
    if s == 2 and (x.shape[3] + 2 * p - k) % 2:
        return
    w = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype) if bias else None
    a = cython.conv2d_forward(x, w, b, s, p, 1)
    r = python.conv2d_forward(x, w, b, s, p, 1)
    assert a.dtype == r.dtype and np.array_equal(a, r)


@settings(max_examples=30, deadline=None)
@given(shape=shapes, dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**31))
def test_backward_agrees(shape, dtype, seed):
    n, cin, cout, h, k, s, p = shape
    if h + 2 * p < k or (h + 2 * p - k) % s:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, h)).astype(dtype)
    w = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    ho = (h + 2 * p - k) // s + 1
    g = rng.standard_normal((n, cout, ho, ho)).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for a, r in zip(cython.conv2d_backward(g, x, w, s, p, 1), python.conv2d_backward(g, x, w, s, p, 1)):
        assert a.dtype == r.dtype
        assert np.max(np.abs(a - r)) <= tol * max(1.0, np.abs(r).max())


def test_threads_do_not_change_forward():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    assert np.array_equal(cython.conv2d_forward(x, w, None, 1, 1, 1), cython.conv2d_forward(x, w, None, 1, 1, 4))


def test_streaming_net_identical_across_backends():
    net = build_toynet(5, 8, 1.0, 0.25, seed=3)
    frames = np.random.default_rng(1).uniform(0, 1, (4, 1, 3, 16, 16)).astype(np.float32)
    outs = {}
    for name in ("cython", "python"):
        prev = ops.set_backend(name)
        try:
            s = StreamSession(net)
            outs[name] = [s.forward(f) for f in frames]
        finally:
            ops.set_backend(prev)
    assert all(np.array_equal(a, b) for a, b in zip(outs["cython"], outs["python"]))
