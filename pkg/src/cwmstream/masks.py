"""Pre-defined schedules of contiguous channel masks.

A mask is a half-open channel range, so a scattered mask cannot be expressed.
Schedules are fixed at construction, use the same active count in every mask
and together cover every channel.

Two generators are provided:

* :func:`bistep_generator` builds the two-mask rho-BG schedule.  Mask A is
  ``[0, count)`` and mask B is ``[C - count, C)`` with
  ``count = ceil((1 + rho) / 2 * C)``; the ``2*count - C`` channels in the
  middle are active at every step.  ``rho`` is read as its shortest decimal
  representation (``0.1`` means exactly 1/10), so the rounding is not at the
  mercy of binary floating point.
* :func:`random_contiguous_generator` draws mask starts from a seeded
  splitmix64 stream (see :class:`SplitMix64`).
"""
import json
import math
from dataclasses import dataclass
from fractions import Fraction

MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 generator.

    ``next()`` advances ``state += 0x9E3779B97F4A7C15`` and returns the mixed
    value ``z ^ (z >> 31)`` where
    ``z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9`` followed by
    ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB`` (all mod 2**64).
    ``below(n)`` is ``next() % n``.
    """

    def __init__(self, seed):
        self.state = seed & MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n):
        return self.next() % n


@dataclass(frozen=True)
class ChannelMask:
    start: int
    end: int
    total: int

    def __post_init__(self):
        if not (0 <= self.start < self.end <= self.total):
            raise ValueError(f"invalid mask [{self.start}, {self.end}) of {self.total}")

    @property
    def count(self):
        return self.end - self.start

    def channels(self):
        return range(self.start, self.end)

    def __contains__(self, c):
        return self.start <= c < self.end


@dataclass(frozen=True)
class MaskSchedule:
    total: int
    masks: tuple
    rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        if not self.masks:
            raise ValueError("schedule needs at least one mask")
        for m in self.masks:
            if m.total != self.total:
                raise ValueError(f"mask total {m.total} != schedule total {self.total}")
        counts = {m.count for m in self.masks}
        if len(counts) != 1:
            raise ValueError(f"masks must share one active count, got {sorted(counts)}")
        if not covers(self.masks, self.total):
            raise ValueError("masks do not cover every channel")

    @property
    def count(self):
        return self.masks[0].count

    @property
    def always_active(self):
        """Number of channels active in every mask."""
        lo = max(m.start for m in self.masks)
        hi = min(m.end for m in self.masks)
        return max(0, hi - lo)

    def to_dict(self):
        return {
            "total": self.total,
            "rho": self.rho,
            "masks": [{"start": m.start, "end": m.end} for m in self.masks],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        masks = [ChannelMask(m["start"], m["end"], d["total"]) for m in d["masks"]]
        return cls(d["total"], masks, d.get("rho"))


def covers(masks, total):
    reach = 0
    for m in sorted(masks, key=lambda m: m.start):
        if m.start > reach:
            return False
        reach = max(reach, m.end)
    return reach >= total


def bistep_count(C, rho):
    """Active channels per mask of a rho-BG over ``C`` channels."""
    r = Fraction(repr(float(rho)))
    count = math.ceil((1 + r) * C / 2)
    return min(C, max(count, (C + 1) // 2))


def bistep_generator(C, rho):
    if C < 2:
        raise ValueError(f"bi-step generator needs C >= 2, got {C}")
    if not 0 <= rho <= 1:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    count = bistep_count(C, rho)
    masks = (ChannelMask(0, count, C), ChannelMask(C - count, C, C))
    return MaskSchedule(C, masks, float(rho))


def random_contiguous_generator(C, count, n_masks, seed, max_tries=1000):
    if not 1 <= count <= C:
        raise ValueError(f"count must be in [1, {C}], got {count}")
    if n_masks < 1:
        raise ValueError(f"n_masks must be >= 1, got {n_masks}")
    if count < C and (n_masks == 1 or n_masks * count < C):
        raise ValueError(f"{n_masks} masks of {count} cannot cover {C} channels")
    rng = SplitMix64(seed)
    span = C - count + 1
    for _ in range(max_tries):
        masks = [ChannelMask(s, s + count, C) for s in (rng.below(span) for _ in range(n_masks))]
        if covers(masks, C):
            return MaskSchedule(C, masks, None)
    raise ValueError(f"no covering schedule found in {max_tries} draws")


def mask_for_step(schedule, t):
    """Mask used at time-step ``t >= 1``; step 0 is always a full pass."""
    if t < 1:
        raise ValueError(f"masked steps start at t=1, got {t}")
    return schedule.masks[(t - 1) % len(schedule.masks)]


def flop_fraction(schedule):
    return schedule.count / schedule.total


def strip_diagram(schedule, steps=4):
    """ASCII picture of the masks for the first ``steps`` masked time-steps.

    ``#`` is an active channel, ``.`` an inactive one.
    """
    lines = []
    width = len(str(steps))
    for t in range(1, steps + 1):
        m = mask_for_step(schedule, t)
        row = "".join("#" if c in m else "." for c in range(schedule.total))
        lines.append(f"t={t:<{width}} |{row}|")
    return "\n".join(lines)
