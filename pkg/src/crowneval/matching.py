"""One-to-one greedy matching between predicted and ground-truth crowns.

COCO-style semantics: predictions are consumed in descending score, each
taking the best still-free ground truth above the IoU threshold. Size-class
stratification flags out-of-class ground truths as ignored (matches to them
neither reward nor penalize) and drops out-of-class unmatched predictions
instead of counting them as false positives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    BinaryMask,
    CrownInstance,
    RasterGrid,
    SizeClass,
    box_iou,
    instance_box,
    instance_mask,
    mask_iou,
)

__all__ = ["MatchConfig", "MatchResult", "greedy_match", "stratify", "pairwise_iou"]


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    iou_kind: str = "mask"  # "mask" or "box"
    size_filter: Optional[SizeClass] = None
    max_detections: int = 300

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.iou_kind not in ("mask", "box"):
            raise ValueError(f"iou_kind must be 'mask' or 'box', got {self.iou_kind!r}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


@dataclass
class MatchResult:
    """Partition of predictions and ground truths at one IoU threshold.

    matched + false_positives + ignored_predictions partitions prediction
    indices; matched + false_negatives + ignored_gts partitions GT indices.
    Predictions truncated by the max_detections cap land in
    ignored_predictions.
    """

    matches: list = field(default_factory=list)  # (pred_idx, gt_idx, iou)
    false_positives: list = field(default_factory=list)
    false_negatives: list = field(default_factory=list)
    ignored_predictions: list = field(default_factory=list)
    ignored_gts: list = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def _instance_iou(a: CrownInstance, b: CrownInstance, kind: str) -> float:
    if kind == "box":
        return box_iou(instance_box(a), instance_box(b))
    return mask_iou(instance_mask(a), instance_mask(b))


def _boxes_may_touch(a: CrownInstance, b: CrownInstance) -> bool:
    ax0, ay0, ax1, ay1 = instance_box(a)
    bx0, by0, bx1, by1 = instance_box(b)
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1

def pairwise_iou(preds: Sequence[CrownInstance], gts: Sequence[CrownInstance],
                 kind: str = "mask") -> np.ndarray:
    """Dense |preds| x |gts| IoU matrix; bbox prefilter skips disjoint pairs."""
    ious = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if _boxes_may_touch(p, g):
                ious[i, j] = _instance_iou(p, g, kind)
    return ious


def stratify(preds: Sequence[CrownInstance], gts: Sequence[CrownInstance],
             cls: Optional[SizeClass], grid: Optional[RasterGrid]) -> tuple[list, list]:
    """Per-instance in-class flags for a size filter.

    Returns (pred_in_class, gt_in_class) boolean lists. With no filter every
    instance is in class. Out-of-class GTs are evaluated as ignored;
    out-of-class predictions are still allowed to match in-class GTs but are
    dropped rather than counted FP when they stay unmatched.
    """
    if cls is None:
        return [True] * len(preds), [True] * len(gts)
    if grid is None:
        raise ValueError("size stratification requires a RasterGrid for areas")
    return ([p.size_class(grid) == cls for p in preds],
            [g.size_class(grid) == cls for g in gts])


def greedy_match(preds: Sequence[CrownInstance], gts: Sequence[CrownInstance],
                 cfg: MatchConfig, grid: Optional[RasterGrid] = None,
                 ious: Optional[np.ndarray] = None) -> MatchResult:
    """Deterministic greedy one-to-one matching.

    Rule: predictions are processed in descending score. Within a block of
    equal scores, candidate (prediction, GT) pairs are taken globally in
    descending IoU, which makes equal-score matching symmetric in the two
    roles. Each prediction takes the best free non-ignored GT with
    IoU >= threshold; failing that, the best free ignored GT (the prediction
    then counts as ignored); failing that it is a false positive, unless it
    is itself out of the stratified class, in which case it is dropped.

    ``ious`` may supply a precomputed |preds| x |gts| IoU matrix.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    kept = order[:cfg.max_detections]
    truncated = order[cfg.max_detections:]

    pred_in_class, gt_in_class = stratify(preds, gts, cfg.size_filter, grid)
    if ious is None:
        ious = pairwise_iou(preds, gts, cfg.iou_kind)

    result = MatchResult()
    result.ignored_predictions.extend(sorted(truncated))
    gt_free = [True] * len(gts)
    matched_preds: dict[int, tuple[int, float]] = {}
    pred_ignored: set[int] = set()

    pos = 0
    while pos < len(kept):
        # Maximal run of equal-score predictions.
        end = pos
        while end < len(kept) and preds[kept[end]].score == preds[kept[pos]].score:
            end += 1
        block = kept[pos:end]
        _match_block(block, ious, gt_free, gt_in_class, cfg.iou_threshold,
                     matched_preds, pred_ignored)
        pos = end

    for i in kept:
        if i in matched_preds:
            j, iou = matched_preds[i]
            result.matches.append((i, j, iou))
        elif i in pred_ignored:
            result.ignored_predictions.append(i)
        elif pred_in_class[i]:
            result.false_positives.append(i)
        else:
            result.ignored_predictions.append(i)

    matched_gts = {j for j, _ in matched_preds.values()}
    for j in range(len(gts)):
        if j in matched_gts:
            continue
        if gt_in_class[j]:
            result.false_negatives.append(j)
        else:
            result.ignored_gts.append(j)

    result.matches.sort(key=lambda m: m[0])
    result.ignored_predictions.sort()
    return result


def _match_block(block, ious, gt_free, gt_in_class, tau, matched_preds, pred_ignored):
    """Pair-greedy assignment of one equal-score prediction block."""
    for want_in_class in (True, False):
        candidates = []
        for i in block:
            if i in matched_preds or i in pred_ignored:
                continue
            for j in range(len(gt_free)):
                if gt_free[j] and gt_in_class[j] == want_in_class and ious[i, j] >= tau:
                    candidates.append((-ious[i, j], i, j))
        candidates.sort()
        for neg_iou, i, j in candidates:
            if gt_free[j] and i not in matched_preds and i not in pred_ignored:
                gt_free[j] = False
                if want_in_class:
                    matched_preds[i] = (j, -neg_iou)
                else:
                    # Matched an ignored GT: the prediction is ignored too and
                    # the GT stays out of the matched set.
                    pred_ignored.add(i)
