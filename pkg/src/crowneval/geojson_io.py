"""GeoJSON interchange for georeferenced crown polygons.

World coordinates are converted to the raster pixel frame through the
inverse geotransform on load and back on save. Only (Multi)Polygon features
are accepted; each part of a MultiPolygon becomes its own crown instance.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CrownInstance, Polygon, RasterGrid, GROUND_TRUTH

__all__ = ["load_geojson", "save_geojson"]


def _ring_to_pixels(ring, grid: RasterGrid) -> np.ndarray:
    return np.array([grid.world_to_pixel(x, y) for x, y in ring], dtype=float)


def _polygon_from_rings(rings, grid: RasterGrid) -> Polygon:
    exterior = _ring_to_pixels(rings[0], grid)
    holes = tuple(_ring_to_pixels(r, grid) for r in rings[1:])
    return Polygon(exterior, holes)


def load_geojson(path, grid: RasterGrid) -> list[CrownInstance]:
    doc = json.loads(Path(path).read_text())
    features = doc.get("features", [])
    crowns = []
    for feat in features:
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        score = float(props.get("score", 1.0))
        source = props.get("source", GROUND_TRUTH if "score" not in props else "prediction")
        kind = geom.get("type")
        if kind == "Polygon":
            parts = [geom["coordinates"]]
        elif kind == "MultiPolygon":
            parts = geom["coordinates"]
        else:
            raise ValueError(f"unsupported geometry type {kind!r}; expected (Multi)Polygon")
        for rings in parts:
            crowns.append(CrownInstance(polygon=_polygon_from_rings(rings, grid),
                                        score=score, source=source))
    return crowns


def _ring_to_world(ring: np.ndarray, grid: RasterGrid) -> list:
    coords = [list(grid.pixel_to_world(x, y)) for x, y in ring]
    coords.append(coords[0])  # GeoJSON rings are explicitly closed
    return coords


def save_geojson(crowns, grid: RasterGrid, path) -> None:
    features = []
    for inst in crowns:
        if inst.polygon is None:
            raise ValueError("only polygon-backed instances can be saved as GeoJSON")
        rings = [_ring_to_world(inst.polygon.exterior, grid)]
        rings.extend(_ring_to_world(h, grid) for h in inst.polygon.holes)
        props = {}
        if inst.source != GROUND_TRUTH:
            props["source"] = inst.source
        if inst.source == "prediction":
            props["score"] = inst.score
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": rings},
            "properties": props,
        })
    doc = {"type": "FeatureCollection", "features": features}
    if grid.crs:
        doc["crs"] = {"type": "name", "properties": {"name": grid.crs}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
