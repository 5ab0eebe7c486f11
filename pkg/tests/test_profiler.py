from fractions import Fraction

import numpy as np
import pytest

from cwmstream.masks import flop_fraction
from cwmstream.net import build_toynet, toynet_spec
from cwmstream.profiler import (FLOP_CONVENTION, LatencyReport, bench_layer, bench_network, count_flops,
                                scattered_channels)
from cwmstream import ops


def test_hand_counted_layer():
    macs = ops.conv_macs((32, 32), (32, 16, 3, 3), 1, 1)
    assert macs == 4_718_592 and 2 * macs == 9_437_184
    assert ops.conv_macs((32, 32), (32, 16, 3, 3), 1, 1, active=16) == 2_359_296


def test_report_layer_formula():
    spec = toynet_spec(5, 16, rho=0.0)
    rep = count_flops(spec, (32, 32))
    l = rep.layer("b1_conv1")
    assert l["macs"] == 32 * 32 * 16 * 16 * 9
    assert l["flops"] == 2 * l["macs"] + 16 * 32 * 32
    assert rep.total_flops == sum(x["flops"] for x in rep.layers)
    assert {x["name"] for x in rep.layers} == {c.name for c in spec.convs}
    assert rep.to_dict()["convention"] == FLOP_CONVENTION


@pytest.mark.parametrize("rho", [0.0, 0.25, 0.5])
def test_per_layer_ratio_is_flop_fraction(rho):
    net = build_toynet(5, 16, 0.65, rho)
    full = count_flops(net, (32, 32), "stateless")
    for step in (1, 2):
        cwm = count_flops(net, (32, 32), "cwm_step", step)
        for l in net.spec.convs:
            a, b = cwm.layer(l.name), full.layer(l.name)
            if l.kind == "cwm_conv":
                frac = Fraction(net.schedules[l.name].count, l.cout)
                assert Fraction(a["flops"], b["flops"]) == frac
                assert Fraction(a["macs"], b["macs"]) == frac
                assert flop_fraction(net.schedules[l.name]) == float(frac)
            else:
                assert a == b
        assert cwm.total_flops < full.total_flops


def test_bistep_phases_cost_the_same():
    net = build_toynet(5, 16, 0.8, 0.25)
    assert count_flops(net, (32, 32), "cwm_step", 1).total_flops == \
        count_flops(net, (32, 32), "cwm_step", 2).total_flops


def test_full_masks_cost_stateless():
    net = build_toynet(5, 16, 1.0, 1.0)
    assert count_flops(net, (32, 32), "cwm_step").total_flops == count_flops(net, (32, 32)).total_flops


def test_spec_without_schedules():
    spec = toynet_spec(5, 16, rho=0.0)
    assert count_flops(spec, (16, 16), "cwm_step").total_macs == \
        count_flops(build_toynet(5, 16, 1.0, 0.0), (16, 16), "cwm_step").total_macs


def test_bad_mode():
    with pytest.raises(ValueError):
        count_flops(toynet_spec(5, 16), (16, 16), "bogus")


def test_latency_report_stats():
    r = LatencyReport()
    r.add("a", [1000 * i for i in range(1, 31)], 5)
    assert r.median("a") == pytest.approx(15.5)
    assert r.results["a"]["iterations"] == 30
    assert list(r.csv_rows())[0] == "config,warmup,iterations,median_us,p10_us,p90_us"


def test_timing_minimums():
    with pytest.raises(ValueError):
        bench_layer(4, 4, 8, 2, warmup=4)
    with pytest.raises(ValueError):
        bench_network(build_toynet(5, 8), (8, 8), steps=29)


def test_scattered_channels_spread():
    idx = scattered_channels(64, 32)
    assert len(set(idx)) == 32 and idx.max() < 64
    assert np.all(np.diff(idx) == 2)


def test_bench_layer_reports_all_variants():
    r = bench_layer(8, 16, 16, 8)
    assert set(r.results) == {"full", "contiguous", "scattered"}
    assert all(v["iterations"] == 30 and v["warmup"] == 5 for v in r.results.values())
    assert r.environment["threads"] == 1


def test_bench_network_reports_both():
    r = bench_network(build_toynet(5, 8, 0.5, 0.0), (16, 16), steps=30)
    assert set(r.results) == {"cwm", "stateless"}


@pytest.mark.slow
def test_full_mask_layer_overhead_small():
    r = bench_layer(64, 64, 32, 64, iters=60)
    assert 0.9 <= r.ratio("contiguous", "full") <= 1.15


@pytest.mark.slow
def test_half_mask_layer_faster():
    r = bench_layer(64, 64, 32, 32, iters=60)
    assert r.median("contiguous") < r.median("full")
    assert r.median("contiguous") <= r.median("scattered")


@pytest.mark.slow
def test_network_latency_bounds():
    size = (64, 64)
    full = build_toynet(5, 32, 1.0, 1.0)
    r1 = bench_network(full, size, steps=30)
    assert r1.ratio("cwm", "stateless") <= 1.15
    half = build_toynet(5, 32, 1.0, 0.0)
    r0 = bench_network(half, size, steps=30)
    assert r0.median("cwm") < r0.median("stateless")
    flop_ratio = count_flops(half, size, "cwm_step").total_flops / count_flops(half, size).total_flops
    assert flop_ratio <= r0.ratio("cwm", "stateless")
