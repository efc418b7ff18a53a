"""Georeferenced TIFF export of tiles, with alpha carrying the validity mask.

Writes RGBA TIFFs with the two conventional georeferencing tags
(ModelPixelScale, ModelTiepoint) so downstream GIS tooling can place the
tile; pixels masked outside the split zone are fully transparent.
"""
from __future__ import annotations

import numpy as np
from PIL import Image, TiffImagePlugin

from .geometry import RasterGrid
from .tiler import Tile

__all__ = ["save_tile_tiff", "load_tiff"]

MODEL_PIXEL_SCALE = 33550
MODEL_TIEPOINT = 33922


def save_tile_tiff(tile: Tile, grid: RasterGrid, path) -> None:
    pixels = tile.pixels
    if pixels is None:
        raise ValueError(f"tile {tile.id} has no pixels to export")
    if pixels.ndim == 2:
        rgb = np.repeat(pixels[:, :, None], 3, axis=2)
    else:
        rgb = pixels[:, :, :3]
    alpha = (tile.validity.data.astype(np.uint8) * 255)[:, :, None]
    rgba = np.concatenate([rgb.astype(np.uint8), alpha], axis=2)

    g = grid.geotransform
    wx, wy = grid.pixel_to_world(tile.x0, tile.y0)
    tags = TiffImagePlugin.ImageFileDirectory_v2()
    tags[MODEL_PIXEL_SCALE] = (abs(g[1]), abs(g[5]), 0.0)
    tags[MODEL_TIEPOINT] = (0.0, 0.0, 0.0, float(wx), float(wy), 0.0)
    tags.tagtype[MODEL_PIXEL_SCALE] = TiffImagePlugin.TiffTags.DOUBLE
    tags.tagtype[MODEL_TIEPOINT] = TiffImagePlugin.TiffTags.DOUBLE
    Image.fromarray(rgba, mode="RGBA").save(path, tiffinfo=tags)


def load_tiff(path) -> np.ndarray:
    """Read a raster image into a numpy array (any PIL-readable format)."""
    with Image.open(path) as img:
        return np.asarray(img)
