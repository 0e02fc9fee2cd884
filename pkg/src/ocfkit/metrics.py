"""Forecast evaluation: IoU, AP, precision/recall/F1, and the two losses.

Every operation here masks out voxels whose ground-truth state is UNKNOWN;
undecidable space must affect neither supervision nor scores. Degenerate
frames use reward-the-correct-empty conventions: IoU is 1 when both occupied
sets are empty, precision is 1 with no predicted positives, and AP is 1 when
the ground truth has no positives.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import GridSpec
from .occupancy import FREE, OCCUPIED, UNKNOWN, OccupancyGrid

__all__ = [
    "ProbabilityGrid",
    "FrameMetrics",
    "binarize",
    "frame_iou",
    "frame_pr",
    "frame_ap",
    "frame_metrics",
    "sequence_report",
    "aggregate_records",
    "soft_iou_loss",
    "bce_loss",
]

BCE_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class ProbabilityGrid:
    """Per-voxel occupancy probabilities over a GridSpec."""

    spec: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        expected = tuple(int(d) for d in self.spec.dims)
        if probs.shape != expected:
            raise ValueError(f"probs shape {probs.shape} does not match dims {expected}")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class FrameMetrics:
    """All per-frame scores plus the confusion counts they derive from."""

    iou: float
    ap: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    masked: int

    def as_dict(self) -> dict:
        return asdict(self)


def _check_same_spec(a_spec: GridSpec, b_spec: GridSpec) -> None:
    if a_spec != b_spec:
        raise ShapeError(f"grid specs differ: {a_spec} vs {b_spec}")


def binarize(pred: ProbabilityGrid, threshold: float) -> OccupancyGrid:
    """Threshold probabilities into a binary grid; ties (p == t) are OCCUPIED."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    states = np.where(pred.probs >= threshold, OCCUPIED, FREE).astype(np.uint8)
    return OccupancyGrid(pred.spec, states)


def _masked_sets(pred_occupied: np.ndarray, gt: OccupancyGrid):
    mask = gt.states != UNKNOWN
    return pred_occupied & mask, gt.states == OCCUPIED, mask


def frame_iou(pred_binary: OccupancyGrid, gt: OccupancyGrid) -> float:
    """Geometric IoU of occupied sets over decidable voxels; 1.0 if both empty."""
    _check_same_spec(pred_binary.spec, gt.spec)
    p, g, _ = _masked_sets(pred_binary.states == OCCUPIED, gt)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g) / union)


def frame_pr(pred_binary: OccupancyGrid, gt: OccupancyGrid) -> tuple[float, float, float]:
    """(precision, recall, f1) over decidable voxels."""
    _check_same_spec(pred_binary.spec, gt.spec)
    p, g, _ = _masked_sets(pred_binary.states == OCCUPIED, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return precision, recall, f1


def frame_ap(pred: ProbabilityGrid, gt: OccupancyGrid) -> float:
    """Area under the precision-recall curve by exact step integration.

    Decidable voxels are ranked by predicted probability (ties grouped, so
    the result equals a sweep over every distinct threshold); AP is 1.0 when
    the ground truth has no occupied voxel.
    """
    _check_same_spec(pred.spec, gt.spec)
    mask = (gt.states != UNKNOWN).ravel()
    probs = pred.probs.ravel()[mask]
    labels = (gt.states == OCCUPIED).ravel()[mask]
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 1.0

    order = np.argsort(-probs, kind="stable")
    probs = probs[order]
    labels = labels[order]
    # Last index of each group of equal scores = one PR point per threshold.
    boundary = np.empty(probs.size, dtype=bool)
    boundary[-1] = True
    boundary[:-1] = probs[1:] != probs[:-1]
    cum_tp = np.cumsum(labels)[boundary].astype(np.float64)
    predicted = np.flatnonzero(boundary) + 1.0
    precision = cum_tp / predicted
    recall = cum_tp / n_pos
    recall_steps = np.diff(recall, prepend=0.0)
    return float(np.sum(recall_steps * precision))


def frame_metrics(pred: ProbabilityGrid, gt: OccupancyGrid, threshold: float) -> FrameMetrics:
    """Full per-frame record: thresholded scores plus ranking-based AP."""
    _check_same_spec(pred.spec, gt.spec)
    pred_binary = binarize(pred, threshold)
    p, g, mask = _masked_sets(pred_binary.states == OCCUPIED, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g & mask))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g & mask))
    masked = int(np.count_nonzero(~mask))
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    return FrameMetrics(
        iou=float(iou),
        ap=frame_ap(pred, gt),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        masked=masked,
    )


def aggregate_records(records: list[dict]) -> dict:
    """Aggregate per-(sample, step) records into the report's summary block.

    `averaged` is the unweighted mean over all records (the headline
    numbers); `pooled` recomputes the count-based metrics from summed
    confusion counts, for readers who prefer voxel pooling. `iou_by_step`
    is the per-future-step mean IoU curve.
    """
    if not records:
        raise ConfigError("no evaluation records to aggregate")
    means = {
        key: float(np.mean([r[key] for r in records]))
        for key in ("iou", "ap", "precision", "recall", "f1")
    }
    tp = sum(r["tp"] for r in records)
    fp = sum(r["fp"] for r in records)
    fn = sum(r["fn"] for r in records)
    pooled_precision = tp / (tp + fp) if (tp + fp) else 1.0
    pooled_recall = tp / (tp + fn) if (tp + fn) else 1.0
    pooled = {
        "iou": tp / (tp + fp + fn) if (tp + fp + fn) else 1.0,
        "precision": pooled_precision,
        "recall": pooled_recall,
        "f1": (
            2 * pooled_precision * pooled_recall / (pooled_precision + pooled_recall)
            if (pooled_precision + pooled_recall)
            else 0.0
        ),
    }
    steps = sorted({r["step"] for r in records})
    iou_by_step = [
        float(np.mean([r["iou"] for r in records if r["step"] == s])) for s in steps
    ]
    return {
        "miou": means["iou"],
        "map": means["ap"],
        "precision": means["precision"],
        "recall": means["recall"],
        "f1": means["f1"],
        "pooled": pooled,
        "iou_by_step": iou_by_step,
        "num_frames": len(records),
    }


def sequence_report(preds: list, gts: list, threshold: float = 0.5) -> dict:
    """Evaluate one output sequence; returns per-frame records plus aggregates."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions vs {len(gts)} ground-truth frames")
    if not preds:
        raise ShapeError("empty sequence")
    frames = []
    for step, (pred, gt) in enumerate(zip(preds, gts)):
        record = frame_metrics(pred, gt, threshold).as_dict()
        record["step"] = step
        frames.append(record)
    report = aggregate_records(frames)
    report["frames"] = frames
    return report


def _loss_pairs(preds, gts):
    """Normalize loss inputs: each batch element becomes (probs, y, mask) flats."""
    if len(preds) != len(gts):
        raise ShapeError(f"batch size mismatch: {len(preds)} preds vs {len(gts)} gts")
    if len(preds) == 0:
        raise ConfigError("empty batch")
    pairs = []
    for pred, gt in zip(preds, gts):
        pred_seq = pred if isinstance(pred, (list, tuple)) else [pred]
        gt_seq = gt if isinstance(gt, (list, tuple)) else [gt]
        if len(pred_seq) != len(gt_seq):
            raise ShapeError("prediction and ground-truth sequences differ in length")
        probs, ys, masks = [], [], []
        for p, g in zip(pred_seq, gt_seq):
            _check_same_spec(p.spec, g.spec)
            probs.append(p.probs.ravel())
            ys.append((g.states == OCCUPIED).ravel().astype(np.float64))
            masks.append((g.states != UNKNOWN).ravel())
        pairs.append(
            (np.concatenate(probs), np.concatenate(ys), np.concatenate(masks))
        )
    return pairs


def soft_iou_loss(preds, gts) -> float:
    """Soft-IoU loss, averaged over the batch; always in [-1, 0].

    Each batch element is one sample: a ProbabilityGrid (or list of them,
    one per output frame) scored jointly against the matching 3-state
    grids. UNKNOWN voxels are excluded from the voxel set. A sample whose
    numerator and denominator are both zero (empty ground truth, all-zero
    prediction) contributes 0.
    """
    terms = []
    for probs, y, mask in _loss_pairs(preds, gts):
        p = probs[mask]
        yv = y[mask]
        numerator = float(np.sum(yv * p))
        denominator = float(np.sum(yv + p - yv * p))
        terms.append(0.0 if denominator == 0.0 else numerator / denominator)
    return -float(np.mean(terms))


def bce_loss(preds, gts) -> float:
    """Binary cross entropy, mean over all decidable voxels in the batch."""
    total = 0.0
    count = 0
    for probs, y, mask in _loss_pairs(preds, gts):
        p = np.clip(probs[mask], BCE_EPS, 1.0 - BCE_EPS)
        yv = y[mask]
        total += float(-np.sum(yv * np.log(p) + (1.0 - yv) * np.log1p(-p)))
        count += int(mask.sum())
    if count == 0:
        raise ConfigError("no decidable voxels in batch")
    return total / count
