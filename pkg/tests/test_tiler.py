from __future__ import annotations

import numpy as np
import pytest

from crowneval.geometry import Polygon, RasterGrid, rasterize
from crowneval.tiler import (
    Tile,
    TilingSpec,
    clip_annotations,
    cut_tile,
    plan_tiles,
    split_census,
)
from conftest import mask_instance, square_instance, square_polygon


class TestTilingSpec:
    def test_production_parameters_stride(self):
        assert TilingSpec(tile_size=1777, overlap=0.75).stride == 444

    def test_stride_floor_and_minimum(self):
        assert TilingSpec(tile_size=512, overlap=0.0).stride == 512
        assert TilingSpec(tile_size=512, overlap=0.5).stride == 256
        assert TilingSpec(tile_size=512, overlap=0.75).stride == 128
        assert TilingSpec(tile_size=3, overlap=0.9).stride == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            TilingSpec(tile_size=0)
        with pytest.raises(ValueError):
            TilingSpec(tile_size=10, overlap=1.0)
        with pytest.raises(ValueError):
            TilingSpec(tile_size=10, min_annotation_area_ratio=2.0)


class TestPlanTiles:
    def test_production_raster_origins(self):
        grid = RasterGrid(width=4000, height=4000, gsd=0.0183)
        spec = TilingSpec(tile_size=1777, overlap=0.75)
        windows = plan_tiles(grid, spec)
        xs = sorted({w[0] for w in windows})
        assert xs == [0, 444, 888, 1332, 1776, 2220, 2223]
        assert xs[-1] == 4000 - 1777  # flush-shifted final origin

    def test_tile_covering_whole_raster(self):
        grid = RasterGrid(width=100, height=80, gsd=0.1)
        windows = plan_tiles(grid, TilingSpec(tile_size=128, overlap=0.5))
        assert windows == [(0, 0, 128, 128)]

    def test_zero_overlap_partitions_raster(self):
        grid = RasterGrid(width=256, height=256, gsd=0.1)
        windows = plan_tiles(grid, TilingSpec(tile_size=64, overlap=0.0))
        assert len(windows) == 16
        covered = np.zeros((256, 256), dtype=int)
        for x0, y0, w, h in windows:
            covered[y0:y0 + h, x0:x0 + w] += 1
        assert (covered == 1).all()

    def test_flush_shift_covers_ragged_edge(self):
        grid = RasterGrid(width=250, height=250, gsd=0.1)
        windows = plan_tiles(grid, TilingSpec(tile_size=64, overlap=0.0))
        covered = np.zeros((250, 250), dtype=bool)
        for x0, y0, w, h in windows:
            covered[y0:y0 + h, x0:x0 + w] = True
        assert covered.all()
        assert max(w[0] for w in windows) == 250 - 64

    def test_windows_outside_zone_dropped(self):
        grid = RasterGrid(width=256, height=256, gsd=0.1)
        zone = square_polygon(0, 0, 100)
        spec = TilingSpec(tile_size=64, overlap=0.0, zone=zone)
        windows = plan_tiles(grid, spec)
        assert all(x0 < 100 and y0 < 100 for x0, y0, _, _ in windows)
        assert len(windows) == 4

    def test_row_major_order(self):
        grid = RasterGrid(width=128, height=128, gsd=0.1)
        windows = plan_tiles(grid, TilingSpec(tile_size=64, overlap=0.0))
        assert windows == [(0, 0, 64, 64), (64, 0, 64, 64),
                           (0, 64, 64, 64), (64, 64, 64, 64)]


class TestCutTile:
    def test_zone_superset_all_valid(self):
        pixels = np.arange(64 * 64, dtype=np.uint8).reshape(64, 64)
        zone = square_polygon(-10, -10, 200)
        t = cut_tile(pixels, (0, 0, 32, 32), zone)
        assert t.validity.data.all()
        assert (t.pixels == pixels[:32, :32]).all()

    def test_no_zone_all_valid(self):
        pixels = np.zeros((64, 64), dtype=np.uint8)
        t = cut_tile(pixels, (16, 16, 32, 32))
        assert t.validity.data.all()
        assert (t.validity.x0, t.validity.y0) == (16, 16)

    def test_out_of_zone_pixels_zeroed(self):
        pixels = np.full((64, 64), 200, dtype=np.uint8)
        zone = square_polygon(0, 0, 16)  # left-top quadrant of the window
        t = cut_tile(pixels, (0, 0, 32, 32), zone)
        assert (t.pixels[:16, :16] == 200).all()
        assert (t.pixels[16:, :] == 0).all()
        assert (t.pixels[:, 16:] == 0).all()

    def test_diagonal_zone_validity_equals_rasterization(self):
        pixels = np.ones((100, 100), dtype=np.uint8)
        zone = Polygon([(0, 0), (100, 0), (0, 100)])  # half-plane triangle
        t = cut_tile(pixels, (10, 10, 50, 50), zone)
        expected = rasterize(zone, (10, 10, 50, 50))
        assert (t.validity.data == expected.data).all()
        assert t.validity.area_px == expected.area_px

    def test_window_fully_outside_raster_rejected(self):
        with pytest.raises(ValueError):
            cut_tile(np.zeros((10, 10)), (50, 50, 5, 5))

    def test_multiband_pixels(self):
        pixels = np.random.default_rng(0).integers(
            0, 255, size=(40, 40, 3), dtype=np.uint8)
        t = cut_tile(pixels, (8, 8, 16, 16))
        assert t.pixels.shape == (16, 16, 3)
        assert (t.pixels == pixels[8:24, 8:24]).all()


class TestClipAnnotations:
    def setup_method(self):
        self.spec = TilingSpec(tile_size=64, overlap=0.0)

    def test_inside_crown_untouched(self):
        crowns = [square_instance(10, 10, 20)]
        out = clip_annotations(crowns, (0, 0, 64, 64), self.spec)
        assert len(out) == 1
        assert not out[0].truncated
        assert out[0].polygon.bounds() == (10.0, 10.0, 30.0, 30.0)

    def test_outside_crown_dropped(self):
        crowns = [square_instance(200, 200, 20)]
        assert clip_annotations(crowns, (0, 0, 64, 64), self.spec) == []

    def test_half_inside_ratio_threshold(self):
        # Square straddling the right edge, exactly half inside.
        crowns = [square_instance(54, 10, 20)]
        spec_tight = TilingSpec(tile_size=64, min_annotation_area_ratio=0.6)
        assert clip_annotations(crowns, (0, 0, 64, 64), spec_tight) == []
        spec_loose = TilingSpec(tile_size=64, min_annotation_area_ratio=0.4)
        out = clip_annotations(crowns, (0, 0, 64, 64), spec_loose)
        assert len(out) == 1
        assert out[0].truncated
        assert out[0].pixel_area() == pytest.approx(200.0)

    def test_clip_translates_to_tile_frame(self):
        crowns = [square_instance(100, 100, 10)]
        out = clip_annotations(crowns, (96, 96, 64, 64), self.spec)
        assert out[0].polygon.bounds() == (4.0, 4.0, 14.0, 14.0)

    def test_mask_instance_clipping(self):
        inst = mask_instance(np.ones((20, 20)), 54, 10, score=1.0)
        out = clip_annotations([inst], (0, 0, 64, 64), self.spec)
        assert len(out) == 1
        assert out[0].truncated
        assert out[0].mask.area_px == 200
        assert (out[0].mask.x0, out[0].mask.y0) == (54, 10)

    def test_multipart_clip_becomes_mask(self):
        # U-shaped crown whose two prongs straddle the window so the clip has
        # two disjoint parts.
        u = Polygon([(10, -20), (18, -20), (18, 10), (30, 10), (30, -20),
                     (38, -20), (38, 18), (10, 18)])
        from crowneval.geometry import CrownInstance
        out = clip_annotations([CrownInstance(polygon=u)],
                               (0, 0, 64, 8), TilingSpec(tile_size=64))
        assert len(out) == 1
        assert out[0].polygon is None and out[0].mask is not None
        assert out[0].truncated

    def test_conservation_at_zero_overlap(self):
        rng = np.random.default_rng(4)
        crowns = [square_instance(int(rng.integers(0, 220)),
                                  int(rng.integers(0, 220)),
                                  int(rng.integers(5, 30))) for _ in range(30)]
        grid = RasterGrid(width=256, height=256, gsd=0.1)
        windows = plan_tiles(grid, TilingSpec(tile_size=64, overlap=0.0))
        total = 0.0
        for w in windows:
            for c in clip_annotations(crowns, w, self.spec):
                total += c.pixel_area()
        expected = sum(c.pixel_area() for c in crowns)
        assert total == pytest.approx(expected, rel=1e-9)


class TestSplitCensus:
    def setup_method(self):
        self.grid = RasterGrid(width=300, height=100, gsd=1.0)
        self.zones = {
            "train": square_polygon(0, 0, 100),
            "val": square_polygon(100, 0, 100),
            "test": square_polygon(200, 0, 100),
        }

    def test_one_crown_per_zone(self):
        crowns = [square_instance(10, 10, 10), square_instance(110, 10, 10),
                  square_instance(210, 10, 10)]
        census = split_census(self.zones, crowns, self.grid)
        assert [census[n]["crowns"] for n in ("train", "val", "test")] == [1, 1, 1]
        assert census["train"]["area_ha"] == pytest.approx(1.0)

    def test_majority_assignment_for_straddlers(self):
        crowns = [square_instance(94, 10, 10)]  # 60% in train, 40% in val
        census = split_census(self.zones, crowns, self.grid)
        assert census["train"]["crowns"] == 1
        assert census["val"]["crowns"] == 0

    def test_overlapping_zones_rejected(self):
        zones = {"a": square_polygon(0, 0, 60), "b": square_polygon(50, 0, 60)}
        with pytest.raises(ValueError):
            split_census(zones, [], self.grid)

    def test_mask_instances_counted(self):
        crowns = [mask_instance(np.ones((10, 10)), 110, 10, score=1.0)]
        census = split_census(self.zones, crowns, self.grid)
        assert census["val"]["crowns"] == 1


class TestTileDataclass:
    def test_window_accessors(self):
        t = Tile(id="t", window=(5, 7, 32, 32))
        assert (t.x0, t.y0) == (5, 7)
        assert t.annotations == []
