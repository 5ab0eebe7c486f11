"""Confusion-matrix mIoU and steady-state (ABT) evaluation of streaming nets.

ABT feeds frames ``T-k .. T-1`` to a freshly reset session and scores its
prediction of the label at ``T``.  With ``average_pair`` the result is the
mean of the runs at ``k`` and ``k-1``, which cancels the two-phase swing of
bi-step masks.
"""
from dataclasses import dataclass

import numpy as np

from .net import StreamSession
from .ops import IGNORE_INDEX


class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ignore pixels are dropped."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred, gt):
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
        keep = gt != IGNORE_INDEX
        pred, gt = pred[keep], gt[keep]
        if gt.size and (gt.max() >= self.num_classes or gt.min() < 0):
            raise ValueError(f"ground-truth label out of range [0, {self.num_classes})")
        if pred.size and (pred.max() >= self.num_classes or pred.min() < 0):
            raise ValueError(f"predicted label out of range [0, {self.num_classes})")
        self.counts += np.bincount(gt * self.num_classes + pred,
                                   minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def merge(self, other):
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def __add__(self, other):
        return self.merge(other)

    def iou(self):
        """Per-class IoU; NaN where a class has an empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def miou(cm):
    """Mean IoU over classes with a non-empty union."""
    if cm.counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    iou = cm.iou()
    return float(np.mean(iou[~np.isnan(iou)]))


@dataclass(frozen=True)
class AbtConfig:
    k: int = 19
    average_pair: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.average_pair and self.k < 2:
            raise ValueError("average_pair needs k >= 2")


def predict_future(net, frames, session=None):
    """Stream ``frames`` through a fresh session; return the final argmax map."""
    session = session or StreamSession(net)
    session.reset()
    if not net.spec.stateful:
        frames = frames[-1:]
    for f in frames:
        logits = session.forward(f[None])
    return logits[0].argmax(axis=0)


def confusion_at(net, dataset, k):
    cm = ConfusionMatrix(net.spec.num_classes)
    session = StreamSession(net)
    for sample in dataset:
        T = sample.annotated_index
        if T - k < 0:
            raise ValueError(f"k={k} needs {k} frames before index {T}")
        pred = predict_future(net, sample.frames[T - k:T], session)
        cm.add(pred, sample.labels[T])
    return cm


def abt_eval(net, dataset, cfg=AbtConfig()):
    if not cfg.average_pair:
        return miou(confusion_at(net, dataset, cfg.k))
    return 0.5 * (miou(confusion_at(net, dataset, cfg.k)) + miou(confusion_at(net, dataset, cfg.k - 1)))


def abt_sweep(net, dataset, k_range=range(3, 20)):
    """``[(k, miou)]`` for each ``k``, unpaired."""
    return [(k, miou(confusion_at(net, dataset, k))) for k in k_range]


def write_sweep_csv(rows, path):
    with open(path, "w") as f:
        f.write("k,miou\n")
        for k, m in rows:
            f.write(f"{k},{m!r}\n")
