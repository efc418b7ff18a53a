"""Synthetic raster scenes with planted crowns for desk-scale runs.

Crowns are planted in distinct cells of a coarse grid, so no crown ever
straddles a tile boundary for any sliding-window plan whose stride is a
multiple of the cell size. That property is what lets a noiseless oracle
pipeline close the loop exactly.
"""
from __future__ import annotations

import numpy as np

from .geometry import CrownInstance, Polygon, RasterGrid
from .pipeline import RasterScene

__all__ = ["generate_scene", "plant_crowns"]


def plant_crowns(width: int, height: int, n: int, cell: int, rng,
                 margin: int = 4, min_size: int = 8,
                 max_size: int | None = None) -> list[CrownInstance]:
    """Axis-aligned rectangular crowns, at most one per grid cell."""
    if max_size is None:
        max_size = cell - 2 * margin
    max_size = min(max_size, cell - 2 * margin)
    if max_size < min_size:
        raise ValueError(f"cell {cell} too small for crowns of at least {min_size} px")
    nx, ny = width // cell, height // cell
    if n > nx * ny:
        raise ValueError(f"cannot plant {n} crowns in {nx * ny} cells")
    cells = rng.choice(nx * ny, size=n, replace=False)
    crowns = []
    for c in cells:
        cx, cy = (int(c) % nx) * cell, (int(c) // nx) * cell
        w = int(rng.integers(min_size, max_size + 1))
        h = int(rng.integers(min_size, max_size + 1))
        x0 = cx + int(rng.integers(margin, cell - margin - w + 1))
        y0 = cy + int(rng.integers(margin, cell - margin - h + 1))
        poly = Polygon([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)])
        crowns.append(CrownInstance(polygon=poly))
    return crowns


def generate_scene(seed: int, width: int = 2048, height: int = 2048,
                   gsd: float = 0.05, n_crowns: int = 50,
                   cell: int = 128, with_pixels: bool = False) -> RasterScene:
    rng = np.random.default_rng(seed)
    grid = RasterGrid(width=width, height=height, gsd=gsd)
    gts = plant_crowns(width, height, n_crowns, cell, rng)
    pixels = None
    if with_pixels:
        pixels = rng.integers(0, 255, size=(height, width), dtype=np.uint8)
    return RasterScene(grid=grid, gts=gts, pixels=pixels)
