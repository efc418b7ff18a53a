"""COCO-style instance JSON interchange.

One category ("tree"). Polygon segmentations are stored as a single flat
ring; polygons with holes and mask-only instances fall back to uncompressed
RLE so the round-trip stays lossless. Image entries carry the tile window
offset in the extension fields ``x0``/``y0``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import rle
from .geometry import BinaryMask, CrownInstance, Polygon, GROUND_TRUTH

__all__ = ["load_coco", "save_coco"]

CATEGORY = {"id": 1, "name": "tree"}


def _segmentation_of(inst: CrownInstance):
    if inst.polygon is not None and not inst.polygon.holes:
        return [np.round(inst.polygon.exterior.ravel(), 6).tolist()]
    if inst.polygon is not None:
        # Holes are not expressible in COCO polygon form; rasterize to RLE.
        from .geometry import instance_mask
        mask = instance_mask(inst)
    else:
        mask = inst.mask
    enc = rle.encode(mask.data)
    enc["offset"] = [int(mask.x0), int(mask.y0)]
    return enc


def _instance_from_annotation(ann: dict) -> CrownInstance:
    seg = ann["segmentation"]
    score = float(ann.get("score", 1.0))
    source = ann.get("source", GROUND_TRUTH if "score" not in ann else "prediction")
    truncated = bool(ann.get("truncated", False))
    if isinstance(seg, dict):
        data = rle.decode(seg)
        x0, y0 = seg.get("offset", (0, 0))
        return CrownInstance(mask=BinaryMask(data, int(x0), int(y0)), score=score,
                             source=source, truncated=truncated)
    ring = np.asarray(seg[0], dtype=float).reshape(-1, 2)
    return CrownInstance(polygon=Polygon(ring), score=score, source=source,
                         truncated=truncated)


def save_coco(tiles: dict, path) -> None:
    """Write {image_id: {"info": {...}, "instances": [...]}} to a COCO file."""
    images, annotations = [], []
    ann_id = 1
    for image_id in sorted(tiles, key=str):
        entry = tiles[image_id]
        info = dict(entry.get("info", {}))
        info["id"] = image_id
        images.append(info)
        for inst in entry["instances"]:
            from .geometry import instance_box
            bx0, by0, bx1, by1 = instance_box(inst)
            ann = {
                "id": ann_id,
                "image_id": image_id,
                "category_id": CATEGORY["id"],
                "segmentation": _segmentation_of(inst),
                "bbox": [round(v, 6) for v in (bx0, by0, bx1 - bx0, by1 - by0)],
                "area": round(inst.pixel_area(), 6),
                "iscrowd": 0,
            }
            if inst.source != GROUND_TRUTH:
                ann["source"] = inst.source
            if inst.source == "prediction":
                ann["score"] = inst.score
            if inst.truncated:
                ann["truncated"] = True
            annotations.append(ann)
            ann_id += 1
    doc = {"images": images, "annotations": annotations, "categories": [CATEGORY]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_coco(path) -> dict:
    """Read a COCO instance file back into {image_id: {"info", "instances"}}."""
    doc = json.loads(Path(path).read_text())
    tiles = {img["id"]: {"info": img, "instances": []} for img in doc["images"]}
    for ann in doc.get("annotations", []):
        image_id = ann["image_id"]
        if image_id not in tiles:
            raise ValueError(f"annotation {ann.get('id')} references missing image id {image_id!r}")
        tiles[image_id]["instances"].append(_instance_from_annotation(ann))
    return tiles
