"""Sliding-window tiling of orthomosaics with zone masking and GT clipping.

Windows are laid out row-major at stride = floor(tile_size * (1 - overlap)),
with a final flush row/column shifted to the raster edge so every pixel is
covered exactly once at native resolution. Pixels outside a split zone are
zeroed and flagged invalid, which keeps tiles from different splits strictly
spatially isolated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon, box as shapely_box
from shapely.geometry import MultiPolygon

from .geometry import (
    BinaryMask,
    CrownInstance,
    Polygon,
    RasterGrid,
    rasterize,
    translate_instance,
)

__all__ = [
    "TilingSpec",
    "Tile",
    "plan_tiles",
    "cut_tile",
    "clip_annotations",
    "split_census",
    "to_shapely",
    "from_shapely",
]


@dataclass(frozen=True)
class TilingSpec:
    tile_size: int
    overlap: float = 0.0
    zone: Optional[Polygon] = None
    min_annotation_area_ratio: float = 0.0

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if not 0.0 <= self.min_annotation_area_ratio <= 1.0:
            raise ValueError("min_annotation_area_ratio must be in [0, 1]")

    @property
    def stride(self) -> int:
        return max(1, math.floor(self.tile_size * (1.0 - self.overlap)))


@dataclass
class Tile:
    """One extracted window: pixels, validity mask and tile-local annotations."""

    id: str
    window: tuple  # (x0, y0, w, h) in raster pixels
    pixels: Optional[np.ndarray] = None
    validity: Optional[BinaryMask] = None
    annotations: list = field(default_factory=list)

    @property
    def x0(self) -> int:
        return self.window[0]

    @property
    def y0(self) -> int:
        return self.window[1]


def _axis_origins(extent: int, tile_size: int, stride: int) -> list[int]:
    if tile_size >= extent:
        return [0]
    origins = list(range(0, extent - tile_size + 1, stride))
    flush = extent - tile_size
    if origins[-1] != flush:
        origins.append(flush)
    return origins


def to_shapely(p: Polygon) -> ShapelyPolygon:
    return ShapelyPolygon(p.exterior, [h for h in p.holes])


def from_shapely(sp: ShapelyPolygon) -> Polygon:
    return Polygon(np.asarray(sp.exterior.coords),
                   tuple(np.asarray(i.coords) for i in sp.interiors))


def plan_tiles(grid: RasterGrid, spec: TilingSpec) -> list[tuple[int, int, int, int]]:
    """Deterministic row-major window plan over the raster extent.

    Windows whose intersection with the zone polygon is empty are dropped.
    When tile_size exceeds the raster extent a single flush window per axis
    is emitted.
    """
    stride = spec.stride
    xs = _axis_origins(grid.width, spec.tile_size, stride)
    ys = _axis_origins(grid.height, spec.tile_size, stride)
    zone = to_shapely(spec.zone) if spec.zone is not None else None
    windows = []
    for y0 in ys:
        for x0 in xs:
            if zone is not None:
                w_box = shapely_box(x0, y0, x0 + spec.tile_size, y0 + spec.tile_size)
                if not zone.intersects(w_box) or zone.intersection(w_box).area == 0:
                    continue
            windows.append((x0, y0, spec.tile_size, spec.tile_size))
    return windows


def cut_tile(pixels: np.ndarray, window: tuple, zone: Optional[Polygon] = None,
             tile_id: Optional[str] = None) -> Tile:
    """Extract one tile: copy in-zone pixels verbatim, zero the rest.

    The validity mask is the zone polygon rasterized over the window (all
    true when no zone is given). The window must intersect the raster.
    """
    x0, y0, w, h = window
    H, W = pixels.shape[:2]
    if x0 >= W or y0 >= H or x0 + w <= 0 or y0 + h <= 0:
        raise ValueError(f"window {window} lies fully outside the {W}x{H} raster")

    out_shape = (h, w) + pixels.shape[2:]
    out = np.zeros(out_shape, dtype=pixels.dtype)
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(W, x0 + w), min(H, y0 + h)
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = pixels[sy0:sy1, sx0:sx1]

    if zone is not None:
        validity = rasterize(zone, (x0, y0, w, h))
        out[~validity.data] = 0
    else:
        validity = BinaryMask(np.ones((h, w), dtype=bool), x0, y0)
    return Tile(id=tile_id or f"{x0}_{y0}", window=tuple(window),
                pixels=out, validity=validity, annotations=[])


def clip_annotations(crowns: Sequence[CrownInstance], window: tuple,
                     spec: TilingSpec) -> list[CrownInstance]:
    """Clip raster-frame crowns to a window and translate to tile-local frame.

    Instances whose clipped/original area ratio falls below
    spec.min_annotation_area_ratio are dropped; partially clipped survivors
    carry truncated=True.
    """
    x0, y0, w, h = window
    w_box = shapely_box(x0, y0, x0 + w, y0 + h)
    out = []
    for crown in crowns:
        if crown.polygon is not None:
            sp = to_shapely(crown.polygon)
            inter = sp.intersection(w_box)
            if inter.is_empty or inter.area == 0:
                continue
            ratio = inter.area / sp.area
            if ratio < spec.min_annotation_area_ratio:
                continue
            truncated = ratio < 1.0 - 1e-12
            geom = _clipped_geometry(inter, window)
            if geom is None:
                continue
            poly, mask = geom
            out.append(CrownInstance(polygon=poly, mask=mask, score=crown.score,
                                     source=crown.source, truncated=truncated))
        else:
            clipped = crown.mask.crop(x0, y0, w, h)
            full = crown.mask.area_px
            kept = clipped.area_px
            if kept == 0 or kept / full < spec.min_annotation_area_ratio:
                continue
            out.append(CrownInstance(mask=clipped.translated(-x0, -y0),
                                     score=crown.score, source=crown.source,
                                     truncated=kept < full))
    return out


def _clipped_geometry(inter, window):
    """Tile-local geometry of a clip result; multipart clips become masks."""
    x0, y0, w, h = window
    if isinstance(inter, ShapelyPolygon):
        return from_shapely(inter).translated(-x0, -y0), None
    parts = [g for g in getattr(inter, "geoms", ())
             if isinstance(g, ShapelyPolygon) and g.area > 0]
    if not parts:
        return None  # lines/points from tangent clips carry no area
    if len(parts) == 1:
        return from_shapely(parts[0]).translated(-x0, -y0), None
    acc = np.zeros((h, w), dtype=bool)
    for part in parts:
        local = from_shapely(part).translated(-x0, -y0)
        acc |= rasterize(local, (0, 0, w, h)).data
    if not acc.any():
        return None
    return None, BinaryMask(acc, 0, 0)


def split_census(zones: dict, crowns: Sequence[CrownInstance],
                 grid: RasterGrid) -> dict:
    """Per-split crown counts and annotated area in hectares.

    ``zones`` maps a split name to its zone Polygon (pixel frame). Zones must
    be pairwise disjoint; each crown is assigned to the zone holding the
    largest share of its area.
    """
    names = list(zones)
    shapes = {n: to_shapely(zones[n]) for n in names}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if shapes[a].intersection(shapes[b]).area > 1e-9:
                raise ValueError(f"split zones {a!r} and {b!r} overlap")

    census = {n: {"crowns": 0, "area_ha": shapes[n].area * grid.gsd ** 2 / 1e4}
              for n in names}
    for crown in crowns:
        if crown.polygon is not None:
            sp = to_shapely(crown.polygon)
            best, best_area = None, 0.0
            for n in names:
                a = shapes[n].intersection(sp).area
                if a > best_area:
                    best, best_area = n, a
            if best is not None:
                census[best]["crowns"] += 1
        else:
            bx0, by0, bx1, by1 = (crown.mask.x0, crown.mask.y0,
                                  crown.mask.x0 + crown.mask.width,
                                  crown.mask.y0 + crown.mask.height)
            sp = shapely_box(bx0, by0, bx1, by1)
            best, best_area = None, 0.0
            for n in names:
                a = shapes[n].intersection(sp).area
                if a > best_area:
                    best, best_area = n, a
            if best is not None:
                census[best]["crowns"] += 1
    return census
