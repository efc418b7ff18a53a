"""Tile-level COCO-style metrics: AP/AR per IoU threshold and their means.

Detections are matched per tile, then pooled across tiles by descending
score to build a single precision-recall curve per threshold. AP uses the
101-point interpolation with the precision envelope. Size-stratified
variants reuse the same machinery with a per-class ignore rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import CrownInstance, RasterGrid, SizeClass
from .matching import MatchConfig, greedy_match, pairwise_iou

__all__ = [
    "DEFAULT_THRESHOLDS",
    "RECALL_LEVELS",
    "TileEval",
    "CocoSummary",
    "average_precision",
    "average_recall",
    "coco_summary",
    "evaluate_tiles",
]

# tau in {0.50, 0.55, ..., 0.95}
DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)


def check_thresholds(thresholds: Sequence[float]) -> tuple[float, ...]:
    ts = tuple(float(t) for t in thresholds)
    if not ts:
        raise ValueError("threshold set is empty")
    if any(not 0.0 < t < 1.0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"thresholds must be strictly increasing within (0, 1): {ts}")
    return ts


@dataclass
class TileEval:
    """Match bookkeeping for one (tile, threshold, size filter) cell."""

    tp_flags: list  # per evaluated pred, score order: True TP / False FP
    scores: list
    n_gt: int  # non-ignored GTs


def _evaluate_tile(preds, gts, tau, size_filter, max_detections, iou_kind, grid, ious):
    cfg = MatchConfig(iou_threshold=tau, iou_kind=iou_kind,
                      size_filter=size_filter, max_detections=max_detections)
    res = greedy_match(preds, gts, cfg, grid=grid, ious=ious)
    matched = {i for i, _, _ in res.matches}
    fp = set(res.false_positives)
    flags, scores = [], []
    for i in sorted(matched | fp, key=lambda i: (-preds[i].score, i)):
        flags.append(i in matched)
        scores.append(preds[i].score)
    n_gt = res.tp + res.fn
    return TileEval(tp_flags=flags, scores=scores, n_gt=n_gt)


def _pool(tiles_eval: Sequence[TileEval]):
    """Pool per-tile detections by descending score with a stable tiebreak."""
    rows = []
    for t_idx, te in enumerate(tiles_eval):
        for d_idx, (flag, score) in enumerate(zip(te.tp_flags, te.scores)):
            rows.append((-score, t_idx, d_idx, flag))
    rows.sort()
    flags = np.array([r[3] for r in rows], dtype=bool)
    n_gt = sum(te.n_gt for te in tiles_eval)
    return flags, n_gt


def _ap_from_flags(flags: np.ndarray, n_gt: int) -> Optional[float]:
    if n_gt == 0:
        return 0.0 if len(flags) else None
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope: max precision at any recall >= r.
    q = np.zeros_like(RECALL_LEVELS)
    if len(recall):
        env = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
        valid = idx < len(recall)
        q[valid] = env[idx[valid]]
    return float(q.mean())


def _tile_evals(tiles, tau, size_filter, max_detections, iou_kind, grid, iou_cache):
    evals = []
    for t_idx, (preds, gts) in enumerate(tiles):
        ious = iou_cache.get(t_idx) if iou_cache is not None else None
        if ious is None:
            ious = pairwise_iou(preds, gts, iou_kind)
            if iou_cache is not None:
                iou_cache[t_idx] = ious
        evals.append(_evaluate_tile(preds, gts, tau, size_filter,
                                    max_detections, iou_kind, grid, ious))
    return evals


def average_precision(tiles, tau: float, size_filter: Optional[SizeClass] = None,
                      max_detections: int = 300, iou_kind: str = "mask",
                      grid: Optional[RasterGrid] = None) -> Optional[float]:
    """101-point interpolated AP at one IoU threshold, pooled over tiles.

    Returns None (absent) when there are neither GTs nor predictions.
    """
    evals = _tile_evals(tiles, tau, size_filter, max_detections, iou_kind, grid, None)
    flags, n_gt = _pool(evals)
    return _ap_from_flags(flags, n_gt)


def average_recall(tiles, thresholds, size_filter: Optional[SizeClass] = None,
                   max_detections: int = 300, iou_kind: str = "mask",
                   grid: Optional[RasterGrid] = None) -> Optional[float]:
    """Fraction of GTs matched under the detection cap, averaged over thresholds.

    ``thresholds`` may be a single float or an iterable of thresholds.
    """
    if isinstance(thresholds, (int, float)):
        thresholds = (float(thresholds),)
    recalls = []
    for tau in thresholds:
        evals = _tile_evals(tiles, tau, size_filter, max_detections, iou_kind, grid, None)
        n_gt = sum(te.n_gt for te in evals)
        if n_gt == 0:
            return None
        tp = sum(sum(te.tp_flags) for te in evals)
        recalls.append(tp / n_gt)
    return float(np.mean(recalls))


@dataclass
class CocoSummary:
    """mAP/mAR family over a threshold set, plus per-size-class variants.

    All values live in [0, 1]; absent metrics (a class with no GTs anywhere)
    are None and excluded from any cross-class averaging by the caller.
    """

    thresholds: tuple
    map: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    mar: Optional[float]
    ar50: Optional[float]
    ar75: Optional[float]
    ap_per_threshold: dict = field(default_factory=dict)
    ar_per_threshold: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)  # class label -> {"map":..,"mar":..}

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map": self.map, "ap50": self.ap50, "ap75": self.ap75,
            "mar": self.mar, "ar50": self.ar50, "ar75": self.ar75,
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "ar_per_threshold": {f"{t:.2f}": v for t, v in self.ar_per_threshold.items()},
            "per_class": self.per_class,
        }


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_tiles(tiles, thresholds=DEFAULT_THRESHOLDS, size_filter=None,
                   max_detections: int = 300, iou_kind: str = "mask",
                   grid: Optional[RasterGrid] = None):
    """AP and AR per threshold for one size filter. Returns two dicts tau -> value."""
    thresholds = check_thresholds(thresholds)
    iou_cache: dict = {}
    ap, ar = {}, {}
    for tau in thresholds:
        evals = _tile_evals(tiles, tau, size_filter, max_detections, iou_kind, grid, iou_cache)
        flags, n_gt = _pool(evals)
        if size_filter is not None and n_gt == 0:
            # A stratified class with no GTs anywhere is absent, never 0.
            ap[tau] = None
            ar[tau] = None
        else:
            ap[tau] = _ap_from_flags(flags, n_gt)
            ar[tau] = (sum(flags) / n_gt) if n_gt else None
    return ap, ar


def coco_summary(tiles, thresholds=DEFAULT_THRESHOLDS, max_detections: int = 300,
                 iou_kind: str = "mask", grid: Optional[RasterGrid] = None,
                 size_classes: bool = True) -> CocoSummary:
    """Full tile-level report: mAP, AP50, AP75, mAR, AR50, AR75 and per-class means."""
    thresholds = check_thresholds(thresholds)
    ap, ar = evaluate_tiles(tiles, thresholds, None, max_detections, iou_kind, grid)

    def at(d, tau):
        return d.get(round(tau, 2))

    summary = CocoSummary(
        thresholds=thresholds,
        map=_mean_or_none(ap.values()),
        ap50=at(ap, 0.50), ap75=at(ap, 0.75),
        mar=_mean_or_none(ar.values()),
        ar50=at(ar, 0.50), ar75=at(ar, 0.75),
        ap_per_threshold=ap, ar_per_threshold=ar,
    )
    if size_classes:
        if grid is None:
            raise ValueError("per-size-class metrics require a RasterGrid")
        for cls in SizeClass:
            ap_c, ar_c = evaluate_tiles(tiles, thresholds, cls, max_detections, iou_kind, grid)
            summary.per_class[cls.label] = {
                "map": _mean_or_none(ap_c.values()),
                "mar": _mean_or_none(ar_c.values()),
                "ap50": at(ap_c, 0.50), "ap75": at(ap_c, 0.75),
            }
    return summary
