"""Sequence training for future-frame segmentation.

One optimization step streams frames ``T-j .. T-1`` through a reset session
and applies softmax cross-entropy between the last logits and the label at
``T``.  By default gradients stop at the cached channels of masked layers;
``bptt=True`` also follows them back through earlier steps (see
:func:`cwmstream.net.backward`).  With ``sequences_per_sample = k`` every
sample is used for ``k`` steps, starting at offsets ``j, j-1, ..., j-k+1``.
"""
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .metrics import AbtConfig, abt_eval
from .net import StreamSession, backward


LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    j: int = 7
    sequences_per_sample: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    seed: int = 0
    eval_every: int = 0
    bptt: bool = False
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.j < 1:
            raise ValueError(f"j must be >= 1, got {self.j}")
        if not 1 <= self.sequences_per_sample <= 4:
            raise ValueError(f"sequences_per_sample must be in [1, 4], got {self.sequences_per_sample}")
        if self.j < self.sequences_per_sample:
            raise ValueError(f"j={self.j} is shorter than sequences_per_sample={self.sequences_per_sample}")


def epoch_lr(cfg, epoch):
    """Learning rate for ``epoch`` (0-based); cosine decays from ``lr`` towards 0."""
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.lr


class SGD:
    """SGD with momentum and decoupled weight decay on every parameter:
    ``v = m*v + g``, ``p = p*(1 - lr*wd) - lr*v``."""

    def __init__(self, net, lr=0.01, momentum=0.9, weight_decay=1e-4):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in net.params.items()}
        self.updates = 0

    def step(self, grads):
        dt = self.net.dtype
        decay = dt.type(1 - self.lr * self.weight_decay)
        lr = dt.type(self.lr)
        m = dt.type(self.momentum)
        new = {}
        for name, (w, b) in self.net.params.items():
            gw, gb = grads[name]
            vw, vb = self.velocity[name]
            vw = m * vw + gw
            vb = m * vb + gb
            self.velocity[name] = (vw, vb)
            new[name] = (w * decay - lr * vw, b * decay - lr * vb)
        self.net.params = new
        self.updates += 1


def sequence_gradients(session, frames, target, bptt=False):
    """Loss and parameter gradients for one sequence ending at ``frames[-1]``.

    ``bptt`` lets gradients flow through cached channels into earlier steps.
    """
    if len(frames) == 0:
        raise ValueError("empty sequence")
    session.reset()
    if not session.net.spec.stateful:
        frames = frames[-1:]
    for f in frames[:-1]:
        session.forward(f[None], record=bptt)
    logits = session.forward(frames[-1][None], record=True)
    if target.shape != logits.shape[2:]:
        raise ops.ShapeError(f"target {target.shape} does not match logits {logits.shape[2:]}")
    loss, grad = ops.softmax_ce_loss(logits, target)
    grads = backward(session, grad, through_time=bptt)
    session.tapes.clear()
    return loss, grads


def train_sequence_step(session, frames, target, opt, bptt=False):
    loss, grads = sequence_gradients(session, frames, target, bptt)
    opt.step(grads)
    return loss


def sequence_offsets(j, k):
    """Starting offsets (frames before T) of the ``k`` sub-sequences."""
    if j < k:
        raise ValueError(f"j={j} is shorter than sequences_per_sample={k}")
    return [j - s for s in range(k)]


def train_bisequence_step(session, frames, target, opt, sequences_per_sample=2, bptt=False):
    """``frames`` are ``T-j .. T-1``; one update per sub-sequence, each from a reset session."""
    j = len(frames)
    return [train_sequence_step(session, frames[j - off:], target, opt, bptt)
            for off in sequence_offsets(j, sequences_per_sample)]


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    miou: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    updates: int = 0
    weights_path: str | None = None

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "miou", "wall_clock_s"])
            for e, (l, m, t) in enumerate(zip(self.losses, self.miou, self.wall_clock), 1):
                w.writerow([e, repr(l), "" if m is None else repr(m), f"{t:.3f}"])


def train(net, train_data, cfg, val_data=None, abt=AbtConfig(), log=None):
    """Train ``net`` in place; returns a :class:`TrainReport`."""
    opt = SGD(net, cfg.lr, cfg.momentum, cfg.weight_decay)
    session = StreamSession(net)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.lr = epoch_lr(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_data))
        total, n = 0.0, 0
        for i in order:
            sample = train_data[i]
            T = sample.annotated_index
            losses = train_bisequence_step(session, sample.frames[T - cfg.j:T], sample.labels[T],
                                           opt, cfg.sequences_per_sample, cfg.bptt)
            total += sum(losses)
            n += len(losses)
        loss = total / n
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at epoch {epoch + 1}")
        m = None
        if val_data and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            m = abt_eval(net, val_data, abt)
        report.losses.append(loss)
        report.miou.append(m)
        report.wall_clock.append(time.perf_counter() - start)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.4f}" + ("" if m is None else f" miou {m:.4f}"))
    report.updates = opt.updates
    return report
