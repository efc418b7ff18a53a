from __future__ import annotations

import numpy as np
import pytest

from crowneval.geometry import BinaryMask, CrownInstance, Polygon, RasterGrid


def square_polygon(x0, y0, w, h=None):
    h = w if h is None else h
    return Polygon([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)])


def square_instance(x0, y0, w, h=None, score=1.0, source="ground_truth"):
    return CrownInstance(polygon=square_polygon(x0, y0, w, h),
                         score=score, source=source)


def mask_instance(data, x0=0, y0=0, score=1.0, source="prediction"):
    return CrownInstance(mask=BinaryMask(np.asarray(data, dtype=bool), x0, y0),
                         score=score, source=source)


def grid_layout_instances(rng, nx, ny, cell, jitter=0, min_size=4,
                          max_size=None, score=None, keep_prob=1.0):
    """Non-overlapping square crowns, at most one per cell of an nx x ny grid."""
    if max_size is None:
        max_size = cell - 2
    crowns = []
    for cy in range(ny):
        for cx in range(nx):
            if rng.uniform() > keep_prob:
                continue
            w = int(rng.integers(min_size, max_size + 1))
            margin = cell - w
            x0 = cx * cell + int(rng.integers(0, max(1, margin - jitter)))
            y0 = cy * cell + int(rng.integers(0, max(1, margin - jitter)))
            if jitter:
                x0 += int(rng.integers(-jitter, jitter + 1))
                y0 += int(rng.integers(-jitter, jitter + 1))
                x0, y0 = max(0, x0), max(0, y0)
            s = float(rng.uniform(0.05, 1.0)) if score is None else score
            crowns.append(square_instance(x0, y0, w, score=s,
                                          source="prediction" if s < 1.0
                                          else "ground_truth"))
    return crowns


def noisy_prediction_fixture(seed, nx=4, ny=4, cell=24):
    """A (preds, gts) pair: jittered copies of planted crowns plus extras."""
    rng = np.random.default_rng(seed)
    gts = grid_layout_instances(rng, nx, ny, cell, score=1.0, keep_prob=0.9)
    preds = []
    for gt in gts:
        if rng.uniform() < 0.15:
            continue  # missed crown
        x0, y0 = gt.polygon.exterior[0]
        w = gt.polygon.exterior[1][0] - x0
        dx, dy = rng.integers(-3, 4, size=2)
        grow = int(rng.integers(-2, 3))
        w2 = max(3, int(w) + grow)
        preds.append(square_instance(int(x0) + int(dx), int(y0) + int(dy), w2,
                                     score=float(rng.uniform(0.1, 1.0)),
                                     source="prediction"))
    n_false = int(rng.integers(0, 4))
    for _ in range(n_false):
        preds.append(square_instance(int(rng.integers(0, nx * cell - 6)),
                                     int(rng.integers(0, ny * cell - 6)),
                                     int(rng.integers(3, 8)),
                                     score=float(rng.uniform(0.05, 0.6)),
                                     source="prediction"))
    return preds, gts


@pytest.fixture
def unit_grid():
    return RasterGrid(width=256, height=256, gsd=1.0)
