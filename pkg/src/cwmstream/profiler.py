"""Exact FLOP counts and single-threaded latency microbenchmarks.

FLOP convention: one multiply-accumulate is 2 FLOPs and each conv bias adds
one FLOP per computed output element.  Only convolutions are counted.
Timing uses ``time.perf_counter_ns`` (monotonic), discards warm-up runs and
reports the median with p10/p90 over at least 30 iterations.
"""
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .cwm import interlace
from .masks import ChannelMask
from .net import StreamSession

FLOP_CONVENTION = "1 MAC = 2 FLOPs; conv bias adds 1 FLOP per output element; non-conv ops not counted"
MIN_WARMUP = 5
MIN_ITERS = 30


@dataclass
class FlopReport:
    mode: str
    input_hw: tuple
    layers: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(l["macs"] for l in self.layers)

    @property
    def total_flops(self):
        return sum(l["flops"] for l in self.layers)

    def layer(self, name):
        for l in self.layers:
            if l["name"] == name:
                return l
        raise KeyError(name)

    def to_dict(self):
        return {"convention": FLOP_CONVENTION, "mode": self.mode, "input_hw": list(self.input_hw),
                "total_macs": self.total_macs, "total_flops": self.total_flops, "layers": self.layers}

    def csv_rows(self):
        yield "name,kind,active,cout,macs,flops"
        for l in self.layers:
            yield f"{l['name']},{l['kind']},{l['active']},{l['cout']},{l['macs']},{l['flops']}"


def conv_flops(macs, active, ho, wo, bias=True):
    return 2 * macs + (active * ho * wo if bias else 0)


def count_flops(net_or_spec, input_hw, mode="stateless", step=1):
    """Per-layer conv cost of one frame.

    ``mode='cwm_step'`` charges masked layers only for the channels active at
    time-step ``step`` (>= 1); ``'stateless'`` charges every conv in full.
    """
    if mode not in ("stateless", "cwm_step"):
        raise ValueError(f"unknown mode {mode!r}")
    spec = getattr(net_or_spec, "spec", net_or_spec)
    schedules = getattr(net_or_spec, "schedules", None)
    if schedules is None:
        from .masks import bistep_generator
        schedules = {l.name: bistep_generator(l.cout, spec.rho) for l in spec.cwm_layers}
    hw = {"input": tuple(input_hw)}
    report = FlopReport(mode, tuple(input_hw))
    for l in spec.layers:
        h, w = hw[l.inputs[0]]
        if l.kind == "maxpool":
            hw[l.name] = (h // 2, w // 2)
        elif l.kind == "upsample":
            hw[l.name] = (2 * h, 2 * w)
        elif l.is_conv:
            ho = ops.conv_output_size(h, l.kernel, l.stride, l.padding)
            wo = ops.conv_output_size(w, l.kernel, l.stride, l.padding)
            hw[l.name] = (ho, wo)
            active = l.cout
            if mode == "cwm_step" and l.kind == "cwm_conv":
                sched = schedules[l.name]
                active = sched.masks[(step - 1) % len(sched.masks)].count
            macs = ops.conv_macs((h, w), (l.cout, l.cin, l.kernel, l.kernel), l.stride, l.padding, active)
            report.layers.append({"name": l.name, "kind": l.kind, "active": active, "cout": l.cout,
                                  "macs": macs, "flops": conv_flops(macs, active, ho, wo)})
        else:
            hw[l.name] = (h, w)
    return report


@dataclass
class LatencyReport:
    results: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def add(self, name, samples_ns, warmup):
        s = np.asarray(samples_ns, dtype=np.float64) / 1e3
        self.results[name] = {
            "warmup": warmup,
            "iterations": len(s),
            "median_us": float(np.median(s)),
            "p10_us": float(np.percentile(s, 10)),
            "p90_us": float(np.percentile(s, 90)),
        }

    def median(self, name):
        return self.results[name]["median_us"]

    def ratio(self, a, b):
        return self.median(a) / self.median(b)

    def to_dict(self):
        return {"environment": self.environment, "results": self.results}

    def csv_rows(self):
        yield "config,warmup,iterations,median_us,p10_us,p90_us"
        for k, r in self.results.items():
            yield f"{k},{r['warmup']},{r['iterations']},{r['median_us']:.2f},{r['p10_us']:.2f},{r['p90_us']:.2f}"


def environment():
    return {"machine": platform.machine(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "backend": ops.BACKEND,
            "threads": ops.num_threads(), "device": "cpu"}


def _check_timing(warmup, iters):
    if warmup < MIN_WARMUP or iters < MIN_ITERS:
        raise ValueError(f"need warmup >= {MIN_WARMUP} and iterations >= {MIN_ITERS}")


def _time_interleaved(fns, warmup, iters):
    """Run the callables round-robin so drift hits all of them equally."""
    for _ in range(warmup):
        for f in fns.values():
            f()
    samples = {k: [] for k in fns}
    for it in range(iters):
        names = list(fns)
        if it % 2:
            names.reverse()
        for k in names:
            t0 = time.perf_counter_ns()
            fns[k]()
            dt = time.perf_counter_ns() - t0
            if dt <= 0:
                raise RuntimeError("clock reported a zero-duration run; timing is degenerate")
            samples[k].append(dt)
    return samples


def scattered_channels(total, active):
    """``active`` channel indices spread evenly over ``total``."""
    return (np.arange(active) * total) // active


def bench_layer(cin, cout, size, active, kernel=3, warmup=5, iters=30, seed=0, dtype=np.float32):
    """Time a full conv, a contiguous-masked conv plus interlace, and a
    scattered-masked conv (same active count, strided channels) plus scatter."""
    _check_timing(warmup, iters)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, size, size)).astype(dtype)
    w = rng.standard_normal((cout, cin, kernel, kernel)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    pad = kernel // 2
    cache = ops.conv2d(x, w, b, 1, pad)
    mask = ChannelMask(0, active, cout)
    idx = scattered_channels(cout, active)

    def full():
        ops.conv2d(x, w, b, 1, pad)

    def contiguous():
        interlace(ops.conv2d_masked(x, w, b, mask, 1, pad), cache, mask)

    def scattered():
        part = ops.conv2d(x, np.take(w, idx, axis=0), np.take(b, idx), 1, pad)
        out = cache.copy()
        out[:, idx] = part

    report = LatencyReport(environment=dict(environment(), cin=cin, cout=cout, size=size,
                                            active=active, kernel=kernel))
    for k, s in _time_interleaved({"full": full, "contiguous": contiguous, "scattered": scattered},
                                  warmup, iters).items():
        report.add(k, s, warmup)
    return report


def bench_network(net, input_hw, steps=40, warmup=5, seed=0):
    """Per-frame latency of the streaming net versus its stateless twin.

    Step 0 of the stream is a full pass and is not timed.
    """
    _check_timing(warmup, steps)
    rng = np.random.default_rng(seed)
    h, w = input_hw
    frames = rng.uniform(0, 1, size=(steps + warmup + 1, 1, 3, h, w)).astype(net.dtype)
    session = StreamSession(net)
    session.forward(frames[0])
    it = iter(frames[1:])
    holder = {}

    def cwm():
        holder["f"] = next(it)
        session.forward(holder["f"])

    def stateless():
        net.forward(holder["f"])

    report = LatencyReport(environment=dict(environment(), input_hw=list(input_hw),
                                            rho=net.spec.rho, alpha=net.spec.alpha))
    # cwm first in each pair so the stateless run reuses the same frame
    for _ in range(warmup):
        cwm()
        stateless()
    samples = {"cwm": [], "stateless": []}
    for _ in range(steps):
        for name, f in (("cwm", cwm), ("stateless", stateless)):
            t0 = time.perf_counter_ns()
            f()
            dt = time.perf_counter_ns() - t0
            if dt <= 0:
                raise RuntimeError("clock reported a zero-duration run; timing is degenerate")
            samples[name].append(dt)
    for k, s in samples.items():
        report.add(k, s, warmup)
    return report
