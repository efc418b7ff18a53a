"""Modular detection-prompter -> box-prompt segmenter harness.

A Detector proposes scored boxes on a tile; a BoxPromptSegmenter turns each
box into exactly one mask. The harness caps detections, combines detection
and mask confidences into the instance score, and drops empty masks with a
warning. Synthetic oracle implementations of both interfaces (ground truth
plus seeded noise) make full end-to-end runs possible at desk scale; real
models plug in through a file-based batch protocol without linking.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from . import rle
from .geometry import (
    BinaryMask,
    CrownInstance,
    RasterGrid,
    box_iou,
    instance_box,
    instance_mask,
    mask_iou,
)
from .raster_metrics import AggregationConfig, RasterScore, aggregate_tiles, mrf1
from .tile_metrics import DEFAULT_THRESHOLDS, CocoSummary, check_thresholds, coco_summary
from .tiler import Tile, TilingSpec, clip_annotations, cut_tile, plan_tiles

log = logging.getLogger(__name__)

__all__ = [
    "Detector",
    "BoxPromptSegmenter",
    "PipelineConfig",
    "RasterScene",
    "run_pipeline",
    "OracleDetector",
    "OracleSegmenter",
    "end_to_end_eval",
    "EndToEndReport",
    "FileBackendDetector",
    "FileBackendSegmenter",
]


class Detector(Protocol):
    def detect(self, tile: Tile) -> list[tuple[tuple, float]]:
        """Scored boxes (x0, y0, x1, y1) in tile-local pixels, within bounds."""
        ...


class BoxPromptSegmenter(Protocol):
    def segment(self, tile: Tile, boxes: Sequence[tuple]) -> list[tuple[BinaryMask, float]]:
        """Exactly one (mask, mask_score) per input box, tile-local frame."""
        ...


@dataclass(frozen=True)
class PipelineConfig:
    max_instances: int = 300
    score_combiner: str = "product"  # product | geometric_mean | detection_only
    seed: int = 0

    def __post_init__(self):
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")
        if self.score_combiner not in ("product", "geometric_mean", "detection_only"):
            raise ValueError(f"unknown score_combiner {self.score_combiner!r}")

    def combine(self, det_score: float, mask_score: float) -> float:
        if self.score_combiner == "product":
            return det_score * mask_score
        if self.score_combiner == "geometric_mean":
            return math.sqrt(det_score * mask_score)
        return det_score


@dataclass
class RasterScene:
    """One orthomosaic with its ground truth; pixels are optional for oracle runs."""

    grid: RasterGrid
    gts: list
    pixels: Optional[np.ndarray] = None

    def pixel_array(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        return np.zeros((self.grid.height, self.grid.width), dtype=np.uint8)


def run_pipeline(tile: Tile, detector: Detector, segmenter: BoxPromptSegmenter,
                 cfg: PipelineConfig, stats: Optional[dict] = None) -> list[CrownInstance]:
    """Detect, cap, segment, score. Returns tile-local crown instances.

    A segmenter returning the wrong number of masks is a contract breach and
    raises; empty masks are dropped with a logged warning (and counted in
    ``stats["empty_masks"]`` when a stats dict is passed).
    """
    detections = detector.detect(tile)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    kept = [detections[i] for i in order[:cfg.max_instances]]
    if not kept:
        return []
    boxes = [d[0] for d in kept]
    masks = segmenter.segment(tile, boxes)
    if len(masks) != len(boxes):
        raise RuntimeError(
            f"segmenter returned {len(masks)} masks for {len(boxes)} prompt boxes")
    instances = []
    for (box, det_score), (mask, mask_score) in zip(kept, masks):
        if mask.area_px == 0:
            log.warning("dropping empty mask for box %s on tile %s", box, tile.id)
            if stats is not None:
                stats["empty_masks"] = stats.get("empty_masks", 0) + 1
            continue
        instances.append(CrownInstance(mask=mask, source="prediction",
                                       score=cfg.combine(det_score, mask_score)))
    return instances


def _clamp_box(box, w, h):
    x0, y0, x1, y1 = box
    return (max(0.0, min(x0, w)), max(0.0, min(y0, h)),
            max(0.0, min(x1, w)), max(0.0, min(y1, h)))


class OracleDetector:
    """Ground-truth boxes with seeded jitter; a stand-in for a real detector.

    Per-crown noise is drawn once at construction so the same crown gets the
    same jittered box in every overlapping tile. The detection score is the
    IoU of the jittered box with the original, so it decreases with the
    perturbation magnitude; unit draws are scaled by the sigmas, which makes
    sweeps over sigma monotone for a fixed seed.
    """

    def __init__(self, gts: Sequence[CrownInstance], shift_sigma: float = 0.0,
                 scale_sigma: float = 0.0, drop_rate: float = 0.0,
                 spurious_rate: float = 0.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.spurious_rate = spurious_rate
        self.boxes = []  # (jittered raster-frame box, score) for surviving crowns
        for gt in gts:
            shift_unit = rng.standard_normal(2)
            scale_unit = rng.standard_normal()
            drop_u = rng.uniform()
            if drop_u < drop_rate:
                continue
            original = instance_box(gt)
            if shift_sigma == 0 and scale_sigma == 0:
                self.boxes.append((original, 1.0))
                continue
            x0, y0, x1, y1 = original
            cx = (x0 + x1) / 2 + shift_sigma * shift_unit[0]
            cy = (y0 + y1) / 2 + shift_sigma * shift_unit[1]
            hw, hh = (x1 - x0) / 2, (y1 - y0) / 2
            factor = math.exp(scale_sigma * scale_unit)
            jittered = (cx - hw * factor, cy - hh * factor,
                        cx + hw * factor, cy + hh * factor)
            self.boxes.append((jittered, box_iou(jittered, original)))

    def detect(self, tile: Tile) -> list[tuple[tuple, float]]:
        x0, y0, w, h = tile.window
        out = []
        for (bx0, by0, bx1, by1), score in self.boxes:
            if bx0 >= x0 + w or bx1 <= x0 or by0 >= y0 + h or by1 <= y0:
                continue
            out.append((_clamp_box((bx0 - x0, by0 - y0, bx1 - x0, by1 - y0), w, h), score))
        if self.spurious_rate > 0:
            tile_rng = np.random.default_rng([self.seed, 7919, x0, y0])
            n = tile_rng.poisson(self.spurious_rate * max(1, len(out)))
            for _ in range(n):
                bw, bh = tile_rng.uniform(20, 100, size=2)
                sx = tile_rng.uniform(0, max(1.0, w - bw))
                sy = tile_rng.uniform(0, max(1.0, h - bh))
                out.append(((sx, sy, sx + bw, sy + bh), float(tile_rng.uniform(0.05, 0.4))))
        return out


class OracleSegmenter:
    """Returns the GT mask best matching each prompt box, optionally corrupted.

    The mask score is the IoU of the (corrupted) mask against its uncorrupted
    original, so a noiseless segmenter scores 1.0 everywhere. Prompts that
    overlap no GT box fall back to the nearest mask by center distance.
    """

    def __init__(self, gts: Sequence[CrownInstance], erode_radius: int = 0,
                 dilate_radius: int = 0, boundary_noise: float = 0.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.gt_boxes = [instance_box(g) for g in gts]
        self.masks = []
        self.scores = []
        for g in gts:
            original = instance_mask(g)
            corrupted = _corrupt_mask(original, erode_radius, dilate_radius,
                                      boundary_noise, rng)
            self.masks.append(corrupted)
            if corrupted.area_px == 0:
                self.scores.append(0.0)
            else:
                self.scores.append(mask_iou(corrupted, original))

    def segment(self, tile: Tile, boxes: Sequence[tuple]) -> list[tuple[BinaryMask, float]]:
        x0, y0, w, h = tile.window
        out = []
        for box in boxes:
            raster_box = (box[0] + x0, box[1] + y0, box[2] + x0, box[3] + y0)
            best, best_iou = None, 0.0
            for i, gt_box in enumerate(self.gt_boxes):
                try:
                    iou = box_iou(raster_box, gt_box)
                except Exception:
                    continue
                if iou > best_iou:
                    best, best_iou = i, iou
            if best is None:
                best = self._nearest(raster_box)
            mask = self.masks[best].crop(x0, y0, w, h).translated(-x0, -y0)
            score = self.scores[best] if best_iou > 0 else min(self.scores[best], 0.05)
            out.append((mask, score))
        return out

    def _nearest(self, box) -> int:
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        best, best_d = 0, float("inf")
        for i, (gx0, gy0, gx1, gy1) in enumerate(self.gt_boxes):
            d = math.hypot((gx0 + gx1) / 2 - cx, (gy0 + gy1) / 2 - cy)
            if d < best_d:
                best, best_d = i, d
        return best


def _corrupt_mask(mask: BinaryMask, erode_radius: int, dilate_radius: int,
                  boundary_noise: float, rng) -> BinaryMask:
    data = mask.data
    if erode_radius > 0:
        data = ndimage.binary_erosion(data, structure=np.ones((3, 3)),
                                      iterations=erode_radius)
    if dilate_radius > 0:
        pad = dilate_radius
        padded = np.pad(data, pad)
        padded = ndimage.binary_dilation(padded, structure=np.ones((3, 3)),
                                         iterations=dilate_radius)
        return _corrupt_boundary(BinaryMask(padded, mask.x0 - pad, mask.y0 - pad),
                                 boundary_noise, rng)
    return _corrupt_boundary(BinaryMask(data, mask.x0, mask.y0), boundary_noise, rng)


def _corrupt_boundary(mask: BinaryMask, boundary_noise: float, rng) -> BinaryMask:
    if boundary_noise <= 0 or mask.area_px == 0:
        return mask
    interior = ndimage.binary_erosion(mask.data, structure=np.ones((3, 3)))
    boundary = mask.data & ~interior
    flips = boundary & (rng.random(mask.data.shape) < boundary_noise)
    data = mask.data & ~flips
    if not data.any():
        return mask  # never corrupt a mask into emptiness
    return BinaryMask(data, mask.x0, mask.y0)


@dataclass
class EndToEndReport:
    tile: CocoSummary
    raster: RasterScore
    warnings: dict = field(default_factory=dict)


def end_to_end_eval(runs: Sequence[tuple], tiling_spec: TilingSpec,
                    agg_cfg: AggregationConfig, pipeline_cfg: PipelineConfig,
                    thresholds=DEFAULT_THRESHOLDS, iou_kind: str = "mask",
                    size_classes: bool = True) -> EndToEndReport:
    """Tile, run the pipeline, and score both tile- and raster-level metrics.

    ``runs`` is a sequence of (RasterScene, Detector, BoxPromptSegmenter).
    Tile metrics are pooled over every tile of every scene; raster counts are
    pooled (micro-averaged) over scenes at each threshold.
    """
    thresholds = check_thresholds(thresholds)
    stats: dict = {}
    all_tiles = []
    raster_scores = []
    grid = None
    for scene_idx, (scene, detector, segmenter) in enumerate(runs):
        grid = grid or scene.grid
        windows = plan_tiles(scene.grid, tiling_spec)
        pixels = scene.pixel_array()
        tile_preds = {}
        offsets = {}
        for (x0, y0, w, h) in windows:
            tile = cut_tile(pixels, (x0, y0, w, h), tiling_spec.zone,
                            tile_id=f"s{scene_idx}_{x0}_{y0}")
            gts_tile = clip_annotations(scene.gts, tile.window, tiling_spec)
            preds = run_pipeline(tile, detector, segmenter, pipeline_cfg, stats)
            all_tiles.append((preds, gts_tile))
            tile_preds[tile.id] = preds
            offsets[tile.id] = (x0, y0)
        scene_cfg = replace(agg_cfg, tile_offsets=offsets)
        raster_preds = aggregate_tiles(tile_preds, scene_cfg)
        raster_scores.append(mrf1(raster_preds, scene.gts, thresholds, grid=scene.grid,
                                  iou_kind=iou_kind, size_classes=size_classes))

    tile_summary = coco_summary(all_tiles, thresholds, pipeline_cfg.max_instances,
                                iou_kind, grid, size_classes=size_classes)
    raster = _pool_raster_scores(raster_scores, thresholds, size_classes)
    return EndToEndReport(tile=tile_summary, raster=raster, warnings=stats)


def _pool_raster_scores(scores: Sequence[RasterScore], thresholds, size_classes: bool):
    def pool(rows_per_scene):
        pooled = {}
        for tau in thresholds:
            tp = fp = fn = 0
            seen = False
            for rows in rows_per_scene:
                row = rows.get(tau, rows.get(f"{tau:.2f}"))
                if row is None:
                    continue
                seen = True
                tp += row["tp"]; fp += row["fp"]; fn += row["fn"]
            if not seen:
                pooled[tau] = None
                continue
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
            pooled[tau] = {"precision": precision, "recall": recall, "f1": f1,
                           "tp": tp, "fp": fp, "fn": fn}
        f1s = [r["f1"] for r in pooled.values() if r is not None]
        mean = sum(f1s) / len(thresholds) if f1s else None
        return pooled, mean

    rows, mean = pool([s.per_threshold for s in scores])
    pooled = RasterScore(thresholds=tuple(thresholds), per_threshold=rows, mrf1=mean)
    if size_classes and scores:
        for label in scores[0].per_class:
            crows, cmean = pool([s.per_class[label]["per_threshold"] for s in scores])
            pooled.per_class[label] = {
                "mrf1": cmean,
                "per_threshold": {f"{t:.2f}": r for t, r in crows.items()},
            }
    return pooled


# ---------------------------------------------------------------------------
# File-based batch protocol for external model backends.
#
# The harness writes <root>/requests/<request_id>.json plus the tile image
# (<request_id>.png, single-band or RGB); the backend answers with
# <root>/responses/<request_id>.json. Detector responses carry
# {"boxes": [[x0,y0,x1,y1], ...], "scores": [...]}; segmenter responses carry
# {"masks": [<uncompressed RLE>, ...], "scores": [...]} in the tile-local
# frame. The harness polls for the response file until a timeout.
# ---------------------------------------------------------------------------


class _FileBackend:
    def __init__(self, root, poll_interval: float = 0.05, timeout: float = 30.0):
        self.root = Path(root)
        (self.root / "requests").mkdir(parents=True, exist_ok=True)
        (self.root / "responses").mkdir(parents=True, exist_ok=True)
        self.poll_interval = poll_interval
        self.timeout = timeout
        self._counter = 0

    def _exchange(self, payload: dict, tile: Tile) -> dict:
        self._counter += 1
        request_id = f"{payload['kind']}_{self._counter:06d}"
        payload["request_id"] = request_id
        payload["tile_id"] = tile.id
        payload["window"] = list(tile.window)
        if tile.pixels is not None:
            from PIL import Image
            arr = tile.pixels
            if arr.dtype != np.uint8:
                arr = arr.astype(np.uint8)
            Image.fromarray(arr).save(self.root / "requests" / f"{request_id}.png")
        request_path = self.root / "requests" / f"{request_id}.json"
        tmp = request_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True))
        tmp.rename(request_path)

        response_path = self.root / "responses" / f"{request_id}.json"
        deadline = time.monotonic() + self.timeout
        while not response_path.exists():
            if time.monotonic() > deadline:
                raise TimeoutError(f"backend did not answer request {request_id} "
                                   f"within {self.timeout}s")
            time.sleep(self.poll_interval)
        return json.loads(response_path.read_text())


class FileBackendDetector(_FileBackend):
    def detect(self, tile: Tile) -> list[tuple[tuple, float]]:
        resp = self._exchange({"kind": "detect"}, tile)
        boxes = resp["boxes"]
        scores = resp["scores"]
        if len(boxes) != len(scores):
            raise RuntimeError("backend returned mismatched boxes/scores lengths")
        w, h = tile.window[2], tile.window[3]
        return [(_clamp_box(tuple(b), w, h), float(s)) for b, s in zip(boxes, scores)]


class FileBackendSegmenter(_FileBackend):
    def segment(self, tile: Tile, boxes: Sequence[tuple]) -> list[tuple[BinaryMask, float]]:
        resp = self._exchange({"kind": "segment", "boxes": [list(b) for b in boxes]}, tile)
        masks = resp["masks"]
        scores = resp["scores"]
        if len(masks) != len(boxes) or len(scores) != len(boxes):
            raise RuntimeError("backend must return exactly one mask and score per box")
        return [(BinaryMask(rle.decode(m), int(m.get("offset", (0, 0))[0]),
                            int(m.get("offset", (0, 0))[1])), float(s))
                for m, s in zip(masks, scores)]
