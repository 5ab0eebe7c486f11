import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from cwmstream.masks import (ChannelMask, MaskSchedule, SplitMix64, bistep_generator, flop_fraction,
                             mask_for_step, random_contiguous_generator, strip_diagram)


def ranges(s):
    return [(m.start, m.end) for m in s.masks]


def test_splitmix_reference_stream():
    # published splitmix64 outputs for seed 0
    r = SplitMix64(0)
    assert r.next() == 0xE220A8397B1DCDAF
    assert r.next() == 0x6E789E6AA1B965F4


def test_channel_mask_rejects_bad_ranges():
    for s, e, t in [(0, 0, 4), (3, 2, 4), (-1, 2, 4), (0, 5, 4)]:
        with pytest.raises(ValueError):
            ChannelMask(s, e, t)


def test_bistep_examples():
    assert ranges(bistep_generator(8, 0)) == [(0, 4), (4, 8)]
    assert ranges(bistep_generator(8, 1)) == [(0, 8), (0, 8)]
    s = bistep_generator(8, 0.25)
    assert ranges(s) == [(0, 5), (3, 8)]
    assert s.always_active == 2


def test_bistep_odd_channels_round_up():
    s = bistep_generator(7, 0)
    assert s.count == 4 and s.always_active == 1
    assert s.rho == 0.0


def test_bistep_errors():
    with pytest.raises(ValueError):
        bistep_generator(1, 0.5)
    with pytest.raises(ValueError):
        bistep_generator(8, 1.5)


@given(C=st.integers(2, 512), tenths=st.integers(0, 10))
def test_bistep_invariants(C, tenths):
    rho = tenths / 10
    s = bistep_generator(C, rho)
    a, b = s.masks
    assert len(s.masks) == 2 and a.count == b.count
    assert a.start == 0 and b.end == C
    # count = ceil((1 + rho)/2 * C) clamped to [ceil(C/2), C]
    expect = min(C, max(math.ceil((1 + Fraction(tenths, 10)) * C / 2), -(-C // 2)))
    assert s.count == expect
    assert set(a.channels()) | set(b.channels()) == set(range(C))
    assert 2 * s.count - C >= math.floor(Fraction(tenths, 10) * C)
    overlap = set(range(C - s.count, s.count))
    assert overlap <= set(a.channels()) and overlap <= set(b.channels())


def test_random_full_count_is_full_mask():
    for seed in range(5):
        assert ranges(random_contiguous_generator(6, 6, 3, seed)) == [(0, 6)] * 3


def test_random_frozen_schedule():
    s = random_contiguous_generator(8, 5, 4, 42)
    assert ranges(s) == [(1, 6), (3, 8), (2, 7), (0, 5)]
    assert ranges(random_contiguous_generator(8, 5, 4, 42)) == ranges(s)


@given(C=st.integers(2, 64), data=st.data())
def test_random_invariants(C, data):
    count = data.draw(st.integers(-(-C // 2), C))
    n = data.draw(st.integers(2, 6))
    seed = data.draw(st.integers(0, 2**64 - 1))
    s = random_contiguous_generator(C, count, n, seed)
    assert len(s.masks) == n
    assert all(m.count == count for m in s.masks)
    assert set().union(*(m.channels() for m in s.masks)) == set(range(C))


def test_random_errors():
    with pytest.raises(ValueError):
        random_contiguous_generator(8, 9, 2, 0)
    with pytest.raises(ValueError):
        random_contiguous_generator(8, 5, 1, 0)
    with pytest.raises(ValueError):
        random_contiguous_generator(8, 0, 2, 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MaskSchedule(8, [ChannelMask(0, 4, 8), ChannelMask(4, 7, 8)])
    with pytest.raises(ValueError):
        MaskSchedule(8, [ChannelMask(0, 4, 8), ChannelMask(0, 4, 8)])
    with pytest.raises(ValueError):
        MaskSchedule(8, [])


def test_mask_for_step_cycles():
    s = bistep_generator(8, 0.25)
    a, b = s.masks
    assert [mask_for_step(s, t) for t in (1, 2, 3, 4)] == [a, b, a, b]
    for t in range(1, 20):
        assert mask_for_step(s, t) == mask_for_step(s, t + 2)
    single = random_contiguous_generator(4, 4, 1, 0)
    assert {mask_for_step(single, t) for t in range(1, 6)} == {single.masks[0]}
    with pytest.raises(ValueError):
        mask_for_step(s, 0)


def test_flop_fraction():
    assert flop_fraction(bistep_generator(16, 0)) == 0.5
    assert flop_fraction(bistep_generator(8, 0.25)) == 0.625
    assert flop_fraction(bistep_generator(8, 1)) == 1.0


def test_json_round_trip():
    s = bistep_generator(10, 0.3)
    assert MaskSchedule.from_dict(s.to_dict()) == s
    assert s.to_dict() == {"total": 10, "rho": 0.3, "masks": [{"start": 0, "end": 7}, {"start": 3, "end": 10}]}


def test_strip_diagram():
    assert strip_diagram(bistep_generator(8, 0.25), 2) == "t=1 |#####...|\nt=2 |...#####|"
