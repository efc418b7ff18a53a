"""Raster-level metrics: NMS tile aggregation, RF1 per threshold and mRF1.

Tile predictions are translated into the raster frame, confidence-filtered,
deduplicated with greedy NMS, then matched one-to-one against raster ground
truth at every threshold in the set. mRF1 is the plain mean of RF1 over the
thresholds; size-stratified copies use the matching module's ignore rules.
Threshold optimization exhaustively scores an (nms_iou x confidence) grid on
a validation set and emits the full audit table.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .geometry import (
    CrownInstance,
    RasterGrid,
    SizeClass,
    box_iou,
    instance_box,
    instance_mask,
    mask_iou,
    translate_instance,
)
from .matching import MatchConfig, greedy_match, pairwise_iou
from .tile_metrics import DEFAULT_THRESHOLDS, check_thresholds

__all__ = [
    "AggregationConfig",
    "RasterScore",
    "aggregate_tiles",
    "rf1",
    "mrf1",
    "optimize_thresholds",
    "DEFAULT_NMS_GRID",
    "DEFAULT_CONFIDENCE_GRID",
]

DEFAULT_NMS_GRID = tuple(round(0.30 + 0.05 * k, 2) for k in range(14))         # 0.30..0.95
DEFAULT_CONFIDENCE_GRID = tuple(round(0.05 + 0.05 * k, 2) for k in range(19))  # 0.05..0.95


@dataclass(frozen=True)
class AggregationConfig:
    nms_iou: float = 0.5
    confidence_threshold: float = 0.0
    nms_geometry: str = "mask"  # "mask" or "box"
    tile_offsets: dict = field(default_factory=dict)  # tile id -> (x0, y0)
    filter_before_nms: bool = True

    def __post_init__(self):
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in (0, 1], got {self.nms_iou}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(
                f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}")
        if self.nms_geometry not in ("mask", "box"):
            raise ValueError(f"nms_geometry must be 'mask' or 'box', got {self.nms_geometry!r}")


def _nms(instances: Sequence[CrownInstance], nms_iou: float, geometry: str):
    """Greedy suppression in descending score; stable order breaks ties."""
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].score, i))
    kept: list[int] = []
    boxes = [instance_box(instances[i]) for i in range(len(instances))]
    for i in order:
        suppressed = False
        for k in kept:
            bi, bk = boxes[i], boxes[k]
            if bi[0] >= bk[2] or bk[0] >= bi[2] or bi[1] >= bk[3] or bk[1] >= bi[3]:
                continue
            if geometry == "box":
                iou = box_iou(bi, bk)
            else:
                iou = mask_iou(instance_mask(instances[i]), instance_mask(instances[k]))
            if iou >= nms_iou:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [instances[i] for i in sorted(kept)]


def aggregate_tiles(tile_preds: dict, cfg: AggregationConfig) -> list:
    """Merge per-tile predictions into one raster-frame instance list.

    Instances are translated by their tile offset, filtered by confidence
    (before NMS by default, after when filter_before_nms is False) and
    deduplicated by NMS. The kept instance retains its own score.
    """
    instances = []
    for tile_id in sorted(tile_preds, key=str):
        if tile_id not in cfg.tile_offsets:
            raise KeyError(f"no offset registered for tile id {tile_id!r}")
        x0, y0 = cfg.tile_offsets[tile_id]
        for inst in tile_preds[tile_id]:
            instances.append(translate_instance(inst, x0, y0))

    if cfg.filter_before_nms:
        instances = [p for p in instances if p.score >= cfg.confidence_threshold]
        return _nms(instances, cfg.nms_iou, cfg.nms_geometry)
    instances = _nms(instances, cfg.nms_iou, cfg.nms_geometry)
    return [p for p in instances if p.score >= cfg.confidence_threshold]


def _counts_to_prf(tp: int, fp: int, fn: int):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return precision, recall, f1


def rf1(raster_preds: Sequence[CrownInstance], raster_gts: Sequence[CrownInstance],
        tau: float, size_filter: Optional[SizeClass] = None,
        grid: Optional[RasterGrid] = None, iou_kind: str = "mask",
        ious=None) -> Optional[tuple]:
    """(precision, recall, F1, tp, fp, fn) at one threshold, or None when the
    size class holds neither predictions nor ground truths."""
    cfg = MatchConfig(iou_threshold=tau, iou_kind=iou_kind, size_filter=size_filter,
                      max_detections=max(1, len(raster_preds)))
    res = greedy_match(raster_preds, raster_gts, cfg, grid=grid, ious=ious)
    tp, fp, fn = res.tp, res.fp, res.fn
    if tp + fp + fn == 0:
        return None
    precision, recall, f1 = _counts_to_prf(tp, fp, fn)
    return precision, recall, f1, tp, fp, fn


@dataclass
class RasterScore:
    """Per-threshold P/R/F1 with counts, their mean, and per-class copies."""

    thresholds: tuple
    per_threshold: dict  # tau -> {"precision","recall","f1","tp","fp","fn"} or None
    mrf1: Optional[float]
    per_class: dict = field(default_factory=dict)  # label -> {"mrf1":..,"per_threshold":..}

    def rf1_at(self, tau: float) -> Optional[float]:
        row = self.per_threshold.get(round(tau, 2))
        return row["f1"] if row else None

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "mrf1": self.mrf1,
            "rf1_50": self.rf1_at(0.50),
            "rf1_75": self.rf1_at(0.75),
            "per_threshold": {f"{t:.2f}": row for t, row in self.per_threshold.items()},
            "per_class": self.per_class,
        }


def _score_rows(preds, gts, thresholds, size_filter, grid, iou_kind, ious):
    rows = {}
    for tau in thresholds:
        r = rf1(preds, gts, tau, size_filter, grid, iou_kind, ious=ious)
        rows[tau] = None if r is None else {
            "precision": r[0], "recall": r[1], "f1": r[2],
            "tp": r[3], "fp": r[4], "fn": r[5],
        }
    f1s = [row["f1"] for row in rows.values() if row is not None]
    mean = sum(f1s) / len(thresholds) if f1s else None
    return rows, mean


def mrf1(raster_preds: Sequence[CrownInstance], raster_gts: Sequence[CrownInstance],
         thresholds=DEFAULT_THRESHOLDS, grid: Optional[RasterGrid] = None,
         iou_kind: str = "mask", size_classes: bool = True) -> RasterScore:
    """RF1 at every threshold plus the mean, optionally stratified by size."""
    thresholds = check_thresholds(thresholds)
    ious = pairwise_iou(raster_preds, raster_gts, iou_kind)
    rows, mean = _score_rows(raster_preds, raster_gts, thresholds, None, grid, iou_kind, ious)
    score = RasterScore(thresholds=thresholds, per_threshold=rows, mrf1=mean)
    if size_classes:
        if grid is None:
            raise ValueError("size stratification requires a RasterGrid")
        for cls in SizeClass:
            crows, cmean = _score_rows(raster_preds, raster_gts, thresholds,
                                       cls, grid, iou_kind, ious)
            score.per_class[cls.label] = {
                "mrf1": cmean,
                "per_threshold": {f"{t:.2f}": row for t, row in crows.items()},
            }
    return score


def optimize_thresholds(tile_preds: dict, raster_gts: Sequence[CrownInstance],
                        base_cfg: AggregationConfig,
                        nms_values=DEFAULT_NMS_GRID,
                        confidence_values=DEFAULT_CONFIDENCE_GRID,
                        thresholds=DEFAULT_THRESHOLDS,
                        objective: str = "mrf1",
                        grid: Optional[RasterGrid] = None):
    """Exhaustive grid search over (nms_iou, confidence) maximizing the objective.

    Returns (best AggregationConfig, audit rows). Audit rows are dicts with
    nms_iou, confidence, mrf1, rf1_50, rf1_75 and the filtering mode, one per
    grid cell, in evaluation order. Ties go to the lower confidence threshold,
    then the lower nms_iou.
    """
    if objective not in ("mrf1", "rf1_75"):
        raise ValueError(f"objective must be 'mrf1' or 'rf1_75', got {objective!r}")
    nms_values = tuple(nms_values)
    confidence_values = tuple(confidence_values)
    if not nms_values or not confidence_values:
        raise ValueError("threshold grid is empty")
    if not raster_gts:
        raise ValueError("validation set has no ground truths")

    audit = []
    best = None  # (-objective, confidence, nms_iou, cfg)
    for nms_iou in nms_values:
        for conf in confidence_values:
            cfg = replace(base_cfg, nms_iou=nms_iou, confidence_threshold=conf)
            preds = aggregate_tiles(tile_preds, cfg)
            score = mrf1(preds, raster_gts, thresholds, grid=grid,
                         iou_kind=cfg.nms_geometry, size_classes=False)
            value = score.mrf1 if objective == "mrf1" else score.rf1_at(0.75)
            value = 0.0 if value is None else value
            audit.append({
                "nms_iou": nms_iou, "confidence": conf,
                "mrf1": score.mrf1 if score.mrf1 is not None else 0.0,
                "rf1_50": score.rf1_at(0.50) or 0.0,
                "rf1_75": score.rf1_at(0.75) or 0.0,
                "filter_before_nms": cfg.filter_before_nms,
            })
            key = (-value, conf, nms_iou)
            if best is None or key < best[0]:
                best = (key, cfg)
    return best[1], audit
