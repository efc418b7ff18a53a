"""Pairwise inter-annotator agreement via size-stratified raster F1.

Each annotator's crown set is treated in turn as prediction against the
other as reference. Annotator crowns carry no confidence, so the confidence
filter is disabled and no NMS runs; instead each set is validated to be
overlap-free (IoU above a small epsilon between any two crowns of the same
annotator is rejected).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from shapely.geometry import box as shapely_box

from .geometry import CrownInstance, Polygon, RasterGrid, instance_box, instance_mask, mask_iou
from .raster_metrics import RasterScore, mrf1
from .tile_metrics import DEFAULT_THRESHOLDS
from .tiler import to_shapely

__all__ = ["AnnotationSet", "pairwise_agreement", "agreement_matrix", "validate_annotation_set"]

OVERLAP_IOU_EPSILON = 0.01


@dataclass
class AnnotationSet:
    """One annotator's crowns plus the polygon bounding the annotated region."""

    annotator_id: str
    crowns: list
    region: Polygon

    def __post_init__(self):
        for c in self.crowns:
            if c.score != 1.0:
                raise ValueError(
                    f"annotator {self.annotator_id!r} carries a crown with score "
                    f"{c.score}; annotation sets must have all scores = 1.0")


def validate_annotation_set(annotation_set: AnnotationSet,
                            iou_epsilon: float = OVERLAP_IOU_EPSILON) -> None:
    """Reject sets containing overlapping polygons above the IoU epsilon."""
    crowns = annotation_set.crowns
    boxes = [instance_box(c) for c in crowns]
    for i in range(len(crowns)):
        for j in range(i + 1, len(crowns)):
            a, b = boxes[i], boxes[j]
            if a[0] >= b[2] or b[0] >= a[2] or a[1] >= b[3] or b[1] >= a[3]:
                continue
            iou = mask_iou(instance_mask(crowns[i]), instance_mask(crowns[j]))
            if iou > iou_epsilon:
                raise ValueError(
                    f"annotation set {annotation_set.annotator_id!r} has overlapping "
                    f"crowns {i} and {j} (IoU {iou:.3f} > {iou_epsilon})")


def _clip_to_region(crowns: Sequence[CrownInstance], region) -> list:
    kept = []
    for c in crowns:
        bx = shapely_box(*instance_box(c))
        if region.intersects(bx) and region.intersection(bx).area > 0:
            kept.append(c)
    return kept


def pairwise_agreement(prediction_set: AnnotationSet, reference_set: AnnotationSet,
                       thresholds=DEFAULT_THRESHOLDS,
                       grid: Optional[RasterGrid] = None,
                       iou_kind: str = "mask") -> RasterScore:
    """Stratified mean raster F1 with the first set as prediction.

    Both sets are restricted to the intersection of their regions; callers
    invoke both orderings to mirror the alternating-reference protocol.
    """
    ra = to_shapely(prediction_set.region)
    rb = to_shapely(reference_set.region)
    shared = ra.intersection(rb)
    if shared.is_empty or shared.area == 0:
        raise ValueError(
            f"annotation sets {prediction_set.annotator_id!r} and "
            f"{reference_set.annotator_id!r} have disjoint regions")
    validate_annotation_set(prediction_set)
    validate_annotation_set(reference_set)
    preds = _clip_to_region(prediction_set.crowns, shared)
    refs = _clip_to_region(reference_set.crowns, shared)
    return mrf1(preds, refs, thresholds, grid=grid, iou_kind=iou_kind, size_classes=True)


def agreement_matrix(sets: Sequence[AnnotationSet], thresholds=DEFAULT_THRESHOLDS,
                     grid: Optional[RasterGrid] = None,
                     iou_kind: str = "mask") -> list[dict]:
    """Per-class mRF1 for every ordered pair of annotation sets (diagonal omitted).

    Rows mirror the usual agreement-table layout: prediction id, reference id,
    overall mRF1 and one column per size class.
    """
    if len(sets) < 2:
        raise ValueError("agreement matrix needs at least 2 annotation sets")
    rows = []
    for pred_set in sets:
        for ref_set in sets:
            if pred_set.annotator_id == ref_set.annotator_id:
                continue
            score = pairwise_agreement(pred_set, ref_set, thresholds, grid, iou_kind)
            row = {
                "prediction": pred_set.annotator_id,
                "reference": ref_set.annotator_id,
                "mrf1": score.mrf1,
            }
            for label, entry in score.per_class.items():
                row[label] = entry["mrf1"]
            rows.append(row)
    return rows
