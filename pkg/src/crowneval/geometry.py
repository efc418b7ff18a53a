"""Crown geometry primitives.

Polygons and binary masks in the pixel frame of a parent raster, plus the
operations the metric stack is built on: shoelace areas, even-odd scanline
rasterization, mask/box IoU and size classification of crown areas.

All values are immutable after construction and all operations are pure, so
they are safe to share across parallel workers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Polygon",
    "BinaryMask",
    "RasterGrid",
    "CrownInstance",
    "SizeClass",
    "SIZE_CLASS_BOUNDS",
    "polygon_area_px",
    "crown_area_m2",
    "size_class",
    "rasterize",
    "mask_iou",
    "box_iou",
    "mask_to_box",
    "instance_mask",
    "instance_box",
    "translate_instance",
]

GROUND_TRUTH = "ground_truth"
PREDICTION = "prediction"


class GeometryError(ValueError):
    """Raised for degenerate or missing geometry."""


class SizeClass(enum.IntEnum):
    """Ecological crown-size buckets, ordered smallest to largest."""

    TINY = 0
    SMALL = 1
    MEDIUM = 2
    LARGE = 3
    GIANT = 4

    @property
    def label(self) -> str:
        return self.name.capitalize()


# Half-open [lo, hi) intervals in m^2; GIANT is unbounded above.
SIZE_CLASS_BOUNDS = {
    SizeClass.TINY: (0.0, 9.0),
    SizeClass.SMALL: (9.0, 25.0),
    SizeClass.MEDIUM: (25.0, 49.0),
    SizeClass.LARGE: (49.0, 100.0),
    SizeClass.GIANT: (100.0, math.inf),
}


def size_class(area_m2: float) -> SizeClass:
    """Classify a crown area into one of the five size classes.

    Intervals are half-open [lo, hi): an area of exactly 9 m^2 is SMALL and
    exactly 100 m^2 is GIANT, so the classes partition [0, inf) with no gap.
    """
    if area_m2 < 0:
        raise ValueError(f"negative crown area: {area_m2}")
    for cls, (lo, hi) in SIZE_CLASS_BOUNDS.items():
        if lo <= area_m2 < hi:
            return cls
    return SizeClass.GIANT


def _as_ring(coords: Sequence) -> np.ndarray:
    ring = np.asarray(coords, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise GeometryError(f"ring must be an (N, 2) coordinate array, got shape {ring.shape}")
    # Closure is implicit: a duplicated closing vertex is dropped.
    if len(ring) >= 2 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 3:
        raise GeometryError(f"ring needs at least 3 distinct vertices, got {len(ring)}")
    return ring


def _ring_signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class Polygon:
    """Simple polygon in raster pixel units: one exterior ring, optional holes.

    Rings are stored open (no duplicated closing vertex); closure is implicit.
    """

    exterior: np.ndarray
    holes: tuple = ()

    def __init__(self, exterior, holes=()):
        ext = _as_ring(exterior)
        if abs(_ring_signed_area(ext)) == 0.0:
            raise GeometryError("exterior ring has zero signed area")
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in holes))
        self.exterior.setflags(write=False)
        for h in self.holes:
            h.setflags(write=False)

    def rings(self):
        return (self.exterior, *self.holes)

    def bounds(self) -> tuple[float, float, float, float]:
        pts = np.vstack(self.rings())
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self.exterior + (dx, dy), tuple(h + (dx, dy) for h in self.holes))

    def perimeter(self) -> float:
        total = 0.0
        for ring in self.rings():
            total += float(np.sum(np.hypot(*(np.roll(ring, -1, axis=0) - ring).T)))
        return total


def polygon_area_px(p: Polygon) -> float:
    """Shoelace area of the exterior minus the holes, in pixel^2."""
    area = abs(_ring_signed_area(p.exterior))
    for hole in p.holes:
        area -= abs(_ring_signed_area(hole))
    if area <= 0:
        raise GeometryError("degenerate polygon: non-positive net area")
    return area


@dataclass(frozen=True)
class BinaryMask:
    """Bit grid with an origin offset into the parent raster frame.

    Storing the offset lets tile-local masks compose into the raster frame
    without reallocating to full-raster extent.
    """

    data: np.ndarray
    x0: int = 0
    y0: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        object.__setattr__(self, "data", data)
        data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area_px(self) -> int:
        return int(self.data.sum())

    def translated(self, dx: int, dy: int) -> "BinaryMask":
        return BinaryMask(self.data, self.x0 + int(dx), self.y0 + int(dy))

    def crop(self, x0: int, y0: int, w: int, h: int) -> "BinaryMask":
        """Intersect with the given raster-frame window; offset is preserved."""
        ax0 = max(x0, self.x0)
        ay0 = max(y0, self.y0)
        ax1 = min(x0 + w, self.x0 + self.width)
        ay1 = min(y0 + h, self.y0 + self.height)
        if ax1 <= ax0 or ay1 <= ay0:
            return BinaryMask(np.zeros((0, 0), dtype=bool), x0, y0)
        sub = self.data[ay0 - self.y0:ay1 - self.y0, ax0 - self.x0:ax1 - self.x0]
        return BinaryMask(sub, ax0, ay0)


def mask_to_box(m: BinaryMask) -> tuple[float, float, float, float]:
    """Tight (x0, y0, x1, y1) bounding box of the set pixels, raster frame."""
    ys, xs = np.nonzero(m.data)
    if len(ys) == 0:
        raise GeometryError("cannot box an empty mask")
    return (float(m.x0 + xs.min()), float(m.y0 + ys.min()),
            float(m.x0 + xs.max() + 1), float(m.y0 + ys.max() + 1))


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two axis-aligned (x0, y0, x1, y1) boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0:
        raise GeometryError("both boxes are empty")
    return inter / union


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """IoU of two masks sharing a raster frame; origin offsets are honored."""
    area_a, area_b = a.area_px, b.area_px
    if area_a == 0 and area_b == 0:
        raise GeometryError("both masks are empty")
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x0 + a.width, b.x0 + b.width)
    iy1 = min(a.y0 + a.height, b.y0 + b.height)
    if ix1 <= ix0 or iy1 <= iy0:
        inter = 0
    else:
        sub_a = a.data[iy0 - a.y0:iy1 - a.y0, ix0 - a.x0:ix1 - a.x0]
        sub_b = b.data[iy0 - b.y0:iy1 - b.y0, ix0 - b.x0:ix1 - b.x0]
        inter = int(np.count_nonzero(sub_a & sub_b))
    return inter / (area_a + area_b - inter)


def rasterize(p: Polygon, window: tuple[int, int, int, int]) -> BinaryMask:
    """Rasterize a polygon over an integer pixel window (x0, y0, w, h).

    A pixel is set iff its center lies inside the polygon under the even-odd
    rule, holes included. Deterministic; an all-empty result is allowed.
    """
    x0, y0, w, h = (int(v) for v in window)
    if w <= 0 or h <= 0:
        raise GeometryError(f"empty rasterization window: {window}")
    grid = np.zeros((h, w), dtype=bool)

    edges = []
    for ring in p.rings():
        nxt = np.roll(ring, -1, axis=0)
        for (xa, ya), (xb, yb) in zip(ring, nxt):
            if ya != yb:
                edges.append((xa, ya, xb, yb))
    if not edges:
        return BinaryMask(grid, x0, y0)
    ex0, ey0, ex1, ey1 = np.array([e[0] for e in edges]), np.array([e[1] for e in edges]), \
        np.array([e[2] for e in edges]), np.array([e[3] for e in edges])
    ymin = np.minimum(ey0, ey1)
    ymax = np.maximum(ey0, ey1)

    for j in range(h):
        yc = y0 + j + 0.5
        active = (ymin <= yc) & (yc < ymax)
        if not active.any():
            continue
        t = (yc - ey0[active]) / (ey1[active] - ey0[active])
        xs = np.sort(ex0[active] + t * (ex1[active] - ex0[active]))
        # Even-odd: fill between alternating crossing pairs.
        for a, b in zip(xs[0::2], xs[1::2]):
            i_lo = max(0, math.ceil(a - x0 - 0.5))
            i_hi = min(w, math.ceil(b - x0 - 0.5))
            if i_hi > i_lo:
                grid[j, i_lo:i_hi] = True
    return BinaryMask(grid, x0, y0)


@dataclass(frozen=True)
class RasterGrid:
    """Orthomosaic frame: pixel extent, ground sampling distance, georeferencing.

    ``geotransform`` follows the usual 6-parameter affine convention
    (x_origin, px_w, row_rot, y_origin, col_rot, px_h) mapping pixel (col, row)
    to world coordinates. The identity pixel frame is the default.
    """

    width: int
    height: int
    gsd: float
    geotransform: tuple = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    crs: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"raster extent must be positive, got {self.width}x{self.height}")
        if self.gsd <= 0:
            raise ValueError(f"gsd must be positive, got {self.gsd}")
        object.__setattr__(self, "geotransform", tuple(float(v) for v in self.geotransform))

    def pixel_to_world(self, x: float, y: float) -> tuple[float, float]:
        g = self.geotransform
        return (g[0] + x * g[1] + y * g[2], g[3] + x * g[4] + y * g[5])

    def world_to_pixel(self, wx: float, wy: float) -> tuple[float, float]:
        g = self.geotransform
        det = g[1] * g[5] - g[2] * g[4]
        if det == 0:
            raise ValueError("geotransform is not invertible")
        dx, dy = wx - g[0], wy - g[3]
        return ((dx * g[5] - dy * g[2]) / det, (dy * g[1] - dx * g[4]) / det)


@dataclass
class CrownInstance:
    """One crown: polygon and/or mask geometry, confidence and provenance.

    Ground-truth and annotator instances carry score 1.0. ``area_m2`` and
    ``size_class`` are derived lazily against a RasterGrid.
    """

    polygon: Optional[Polygon] = None
    mask: Optional[BinaryMask] = None
    score: float = 1.0
    source: str = GROUND_TRUTH
    truncated: bool = False
    _cached_mask: Optional[BinaryMask] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.polygon is None and self.mask is None:
            raise GeometryError("crown instance needs a polygon or a mask")
        if self.mask is not None and self.mask.area_px == 0:
            raise GeometryError("crown instance mask has no set pixels")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def pixel_area(self) -> float:
        """Exact shoelace area when a polygon is present, else the pixel count."""
        if self.polygon is not None:
            return polygon_area_px(self.polygon)
        return float(self.mask.area_px)

    def area_m2(self, grid: RasterGrid) -> float:
        return self.pixel_area() * grid.gsd ** 2

    def size_class(self, grid: RasterGrid) -> SizeClass:
        return size_class(self.area_m2(grid))


def crown_area_m2(instance: CrownInstance, grid: RasterGrid) -> float:
    """Crown area in m^2: pixel area scaled by gsd^2."""
    return instance.area_m2(grid)


def instance_mask(instance: CrownInstance) -> BinaryMask:
    """Mask form of an instance, rasterizing the polygon over its bbox if needed."""
    if instance.mask is not None:
        return instance.mask
    if instance._cached_mask is None:
        bx0, by0, bx1, by1 = instance.polygon.bounds()
        x0, y0 = math.floor(bx0), math.floor(by0)
        w = max(1, math.ceil(bx1) - x0)
        h = max(1, math.ceil(by1) - y0)
        instance._cached_mask = rasterize(instance.polygon, (x0, y0, w, h))
    return instance._cached_mask


def instance_box(instance: CrownInstance) -> tuple[float, float, float, float]:
    """Bounding box of an instance in the raster frame."""
    if instance.polygon is not None:
        return instance.polygon.bounds()
    return mask_to_box(instance.mask)


def translate_instance(instance: CrownInstance, dx: float, dy: float) -> CrownInstance:
    """Copy of an instance shifted by (dx, dy) pixels in the raster frame."""
    poly = instance.polygon.translated(dx, dy) if instance.polygon is not None else None
    mask = instance.mask.translated(int(dx), int(dy)) if instance.mask is not None else None
    return CrownInstance(polygon=poly, mask=mask, score=instance.score,
                         source=instance.source, truncated=instance.truncated)
