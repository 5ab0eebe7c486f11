"""Synthetic moving-shape video sequences with exact per-frame labels.

Each sequence has 30 frames; frame 19 (the 20th) is the annotated target.
Objects are rectangles, circles, triangles and crosses (classes 1-4, class 0
is background), each with a fixed canonical color, an integer position and a
constant integer velocity.  Motion wraps around the canvas, so an object's
mask at frame t+1 is its mask at frame t rolled by the velocity.  Objects are
drawn in list order; later ones occlude earlier ones.  The background is a
static, seeded per-pixel texture.

Sequence ``i`` of split ``s`` (0 = train, 1 = val) draws everything from
``numpy.random.default_rng([seed, s, i])``.

On disk: ``seq_%05d/frame_%02d.cwmt`` (float32 [3, H, W]),
``seq_%05d/label_%02d.cwmt`` (float32 [H, W] holding class ids) and
``index.json``.  Train sequences are numbered first, then val.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import cwmt

NUM_FRAMES = 30
ANNOTATED_INDEX = 19
SHAPES = ("rectangle", "circle", "triangle", "cross")
COLORS = np.array([
    [0.5, 0.5, 0.5],    # background base
    [0.9, 0.15, 0.15],  # rectangle
    [0.15, 0.8, 0.2],   # circle
    [0.2, 0.3, 0.95],   # triangle
    [0.95, 0.85, 0.1],  # cross
], dtype=np.float32)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    min_shapes: int = 2
    max_shapes: int = 5
    min_size: int = 4
    max_size: int = 9
    max_speed: int = 3
    noise: float = 0.08
    seed: int = 0
    n_train: int = 200
    n_val: int = 50

    def validate(self):
        if self.num_classes != 1 + len(SHAPES):
            raise ValueError(f"num_classes must be {1 + len(SHAPES)}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if 2 * self.max_size + 1 > min(self.height, self.width) // 2:
            raise ValueError(
                f"canvas {self.height}x{self.width} too small for shapes of half-size {self.max_size}")
        if self.max_speed < 0:
            raise ValueError("max_speed must be >= 0")


@dataclass(frozen=True)
class SynthObject:
    cls: int
    y: int
    x: int
    vy: int
    vx: int
    size: int
    aspect: float = 1.0

    def position(self, t, h, w):
        return (self.y + t * self.vy) % h, (self.x + t * self.vx) % w


@dataclass
class SequenceSample:
    frames: np.ndarray       # [30, 3, H, W] float32 in [0, 1]
    labels: np.ndarray       # [30, H, W] uint8
    objects: list
    annotated_index: int = ANNOTATED_INDEX

    @property
    def label(self):
        return self.labels[self.annotated_index]


def _offsets(center, n):
    d = (np.arange(n) - center) % n
    return np.where(d > n // 2, d - n, d)


def object_mask(obj, t, h, w):
    """Boolean mask of ``obj`` at frame ``t`` (before occlusion)."""
    cy, cx = obj.position(t, h, w)
    dy = _offsets(cy, h)[:, None]
    dx = _offsets(cx, w)[None, :]
    r = obj.size
    if obj.cls == 1:
        rw = max(1, int(round(r * obj.aspect)))
        return (np.abs(dy) <= r) & (np.abs(dx) <= rw)
    if obj.cls == 2:
        return dy * dy + dx * dx <= r * r
    if obj.cls == 3:
        return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    if obj.cls == 4:
        t_ = max(1, r // 3)
        return ((np.abs(dy) <= r) & (np.abs(dx) <= t_)) | ((np.abs(dx) <= r) & (np.abs(dy) <= t_))
    raise ValueError(f"unknown shape class {obj.cls}")


def render(objects, background, t):
    """Frame and label map at time ``t``."""
    _, h, w = background.shape
    frame = background.copy()
    label = np.zeros((h, w), dtype=np.uint8)
    for obj in objects:
        m = object_mask(obj, t, h, w)
        frame[:, m] = COLORS[obj.cls][:, None]
        label[m] = obj.cls
    return frame, label


def make_sequence(cfg, split, index):
    rng = np.random.default_rng([cfg.seed, split, index])
    h, w = cfg.height, cfg.width
    n_obj = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    objects = []
    for _ in range(n_obj):
        objects.append(SynthObject(
            cls=int(rng.integers(1, len(SHAPES) + 1)),
            y=int(rng.integers(0, h)),
            x=int(rng.integers(0, w)),
            vy=int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)),
            vx=int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)),
            size=int(rng.integers(cfg.min_size, cfg.max_size + 1)),
            aspect=float(rng.uniform(0.5, 1.5)),
        ))
    texture = rng.uniform(-cfg.noise, cfg.noise, size=(3, h, w))
    background = np.clip(COLORS[0][:, None, None] + texture, 0, 1).astype(np.float32)
    frames = np.empty((NUM_FRAMES, 3, h, w), dtype=np.float32)
    labels = np.empty((NUM_FRAMES, h, w), dtype=np.uint8)
    for t in range(NUM_FRAMES):
        frames[t], labels[t] = render(objects, background, t)
    return SequenceSample(frames, labels, objects)


def generate_split(cfg, split):
    cfg.validate()
    n = cfg.n_train if split == 0 else cfg.n_val
    return [make_sequence(cfg, split, i) for i in range(n)]


def generate(cfg, out_dir):
    """Render all train and val sequences into ``out_dir``; returns the index dict."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    seq_id = 0
    for split, n in ((0, cfg.n_train), (1, cfg.n_val)):
        for i in range(n):
            sample = make_sequence(cfg, split, i)
            name = f"seq_{seq_id:05d}"
            d = os.path.join(out_dir, name)
            os.makedirs(d, exist_ok=True)
            for t in range(NUM_FRAMES):
                cwmt.save(os.path.join(d, f"frame_{t:02d}.cwmt"), sample.frames[t])
                cwmt.save(os.path.join(d, f"label_{t:02d}.cwmt"), sample.labels[t].astype(np.float32))
            entries.append({"name": name, "split": "train" if split == 0 else "val",
                            "objects": [asdict(o) for o in sample.objects]})
            seq_id += 1
    index = {"config": asdict(cfg), "num_frames": NUM_FRAMES,
             "annotated_index": ANNOTATED_INDEX, "sequences": entries}
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=1)
    return index


def read_index(root):
    with open(os.path.join(root, "index.json")) as f:
        return json.load(f)


def load_sequence(root, idx, index=None):
    index = index or read_index(root)
    seqs = index["sequences"]
    if not 0 <= idx < len(seqs):
        raise IndexError(f"sequence index {idx} out of range [0, {len(seqs)})")
    entry = seqs[idx]
    d = os.path.join(root, entry["name"])
    frames, labels = [], []
    for t in range(index["num_frames"]):
        for kind, out in (("frame", frames), ("label", labels)):
            path = os.path.join(d, f"{kind}_{t:02d}.cwmt")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing {path}")
            out.append(cwmt.load(path))
    objects = [SynthObject(**o) for o in entry["objects"]]
    return SequenceSample(np.stack(frames).astype(np.float32),
                          np.stack(labels).astype(np.uint8), objects, index["annotated_index"])


def load_split(root, split):
    """All sequences of ``split`` ('train' or 'val')."""
    index = read_index(root)
    return [load_sequence(root, i, index)
            for i, e in enumerate(index["sequences"]) if e["split"] == split]
