from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crowneval import coco_io, geojson_io, rle, tiff_io
from crowneval.geometry import (
    BinaryMask,
    CrownInstance,
    Polygon,
    RasterGrid,
    instance_mask,
    rasterize,
)
from crowneval.tiler import cut_tile
from conftest import mask_instance, square_instance, square_polygon


class TestRLE:
    def test_counts_convention(self):
        # Column-major, leading count is the number of unset pixels.
        mask = np.array([[1, 0], [1, 0]], dtype=bool)
        enc = rle.encode(mask)
        assert enc == {"size": [2, 2], "counts": [0, 2, 2]}

    def test_leading_zero_when_first_pixel_set(self):
        assert rle.encode(np.ones((1, 1), dtype=bool))["counts"] == [0, 1]
        assert rle.encode(np.zeros((1, 1), dtype=bool))["counts"] == [1]

    def test_empty_mask(self):
        enc = rle.encode(np.zeros((0, 0), dtype=bool))
        assert enc["counts"] == []
        assert rle.decode(enc).shape == (0, 0)

    @given(hnp.arrays(dtype=bool, shape=st.tuples(st.integers(0, 48),
                                                  st.integers(0, 48))))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, mask):
        assert (rle.decode(rle.encode(mask)) == mask).all()

    def test_round_trip_large(self):
        rng = np.random.default_rng(0)
        mask = rng.random((4096, 4096)) < 0.3
        assert (rle.decode(rle.encode(mask)) == mask).all()

    def test_bad_counts_rejected(self):
        with pytest.raises(ValueError):
            rle.decode({"size": [2, 2], "counts": [3]})
        with pytest.raises(ValueError):
            rle.decode({"size": [2, 2], "counts": [5, -1]})


class TestCocoIO:
    def _fixture_tiles(self):
        holed = Polygon([(0, 0), (20, 0), (20, 20), (0, 20)],
                        holes=[[(5, 5), (15, 5), (15, 15), (5, 15)]])
        return {
            "t0": {
                "info": {"width": 64, "height": 64, "x0": 0, "y0": 0},
                "instances": [
                    square_instance(4, 4, 10),
                    square_instance(30, 4, 12, score=0.75, source="prediction"),
                    CrownInstance(polygon=holed, truncated=True),
                ],
            },
            "t1": {
                "info": {"width": 64, "height": 64, "x0": 64, "y0": 0},
                "instances": [mask_instance(np.tri(8, 8) > 0, 3, 5, score=0.5)],
            },
        }

    def test_round_trip(self, tmp_path):
        path = tmp_path / "inst.json"
        coco_io.save_coco(self._fixture_tiles(), path)
        loaded = coco_io.load_coco(path)
        assert set(loaded) == {"t0", "t1"}
        orig = self._fixture_tiles()
        for tid in loaded:
            assert len(loaded[tid]["instances"]) == len(orig[tid]["instances"])
            for got, want in zip(loaded[tid]["instances"], orig[tid]["instances"]):
                assert got.score == want.score
                assert got.truncated == want.truncated
                a, b = instance_mask(got), instance_mask(want)
                assert a.area_px == b.area_px
                assert (a.x0, a.y0) == (b.x0, b.y0)

    def test_polygon_survives_exactly(self, tmp_path):
        path = tmp_path / "inst.json"
        coco_io.save_coco({"t": {"info": {}, "instances":
                                 [square_instance(3, 4, 7)]}}, path)
        got = coco_io.load_coco(path)["t"]["instances"][0]
        assert np.allclose(got.polygon.exterior,
                           square_polygon(3, 4, 7).exterior)

    def test_polygon_and_rle_forms_decode_identically(self, tmp_path):
        # The same square saved once as a polygon and once as a mask decodes
        # to the same pixel set.
        poly_inst = square_instance(2, 2, 6)
        mask_inst = CrownInstance(mask=instance_mask(square_instance(2, 2, 6)))
        path = tmp_path / "both.json"
        coco_io.save_coco({"t": {"info": {}, "instances":
                                 [poly_inst, mask_inst]}}, path)
        a, b = coco_io.load_coco(path)["t"]["instances"]
        ma, mb = instance_mask(a), instance_mask(b)
        assert (ma.x0, ma.y0) == (mb.x0, mb.y0)
        assert (ma.data == mb.data).all()

    def test_dangling_image_id_named_in_error(self, tmp_path):
        doc = {"images": [{"id": "t0"}],
               "annotations": [{"id": 1, "image_id": "ghost",
                                "segmentation": [[0, 0, 1, 0, 1, 1]],
                                "category_id": 1}],
               "categories": [{"id": 1, "name": "tree"}]}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="ghost"):
            coco_io.load_coco(path)

    def test_single_tree_category(self, tmp_path):
        path = tmp_path / "inst.json"
        coco_io.save_coco(self._fixture_tiles(), path)
        doc = json.loads(path.read_text())
        assert doc["categories"] == [{"id": 1, "name": "tree"}]
        assert all(a["category_id"] == 1 for a in doc["annotations"])


class TestGeoJSON:
    def _grid(self):
        return RasterGrid(width=500, height=500, gsd=0.0183,
                          geotransform=(625000.0, 0.0183, 0.0,
                                        998000.0, 0.0, -0.0183),
                          crs="EPSG:32617")

    def test_round_trip_sub_micro_pixel(self, tmp_path):
        grid = self._grid()
        crowns = [square_instance(10.25, 20.5, 30),
                  square_instance(100, 200, 55, score=0.8, source="prediction")]
        path = tmp_path / "crowns.geojson"
        geojson_io.save_geojson(crowns, grid, path)
        loaded = geojson_io.load_geojson(path, grid)
        assert len(loaded) == 2
        for got, want in zip(loaded, crowns):
            assert np.abs(got.polygon.exterior - want.polygon.exterior).max() < 1e-6
            assert got.score == want.score

    def test_crs_written(self, tmp_path):
        path = tmp_path / "c.geojson"
        geojson_io.save_geojson([square_instance(0, 0, 5)], self._grid(), path)
        doc = json.loads(path.read_text())
        assert doc["crs"]["properties"]["name"] == "EPSG:32617"

    def test_multipolygon_splits_into_instances(self, tmp_path):
        doc = {"type": "FeatureCollection", "features": [{
            "type": "Feature",
            "properties": {},
            "geometry": {"type": "MultiPolygon", "coordinates": [
                [[[0, 0], [5, 0], [5, 5], [0, 5], [0, 0]]],
                [[[10, 10], [15, 10], [15, 15], [10, 15], [10, 10]]],
            ]},
        }]}
        path = tmp_path / "mp.geojson"
        path.write_text(json.dumps(doc))
        grid = RasterGrid(width=100, height=100, gsd=1.0)
        crowns = geojson_io.load_geojson(path, grid)
        assert len(crowns) == 2

    def test_unsupported_geometry_rejected(self, tmp_path):
        doc = {"type": "FeatureCollection", "features": [{
            "type": "Feature", "properties": {},
            "geometry": {"type": "Point", "coordinates": [0, 0]},
        }]}
        path = tmp_path / "pt.geojson"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            geojson_io.load_geojson(path, RasterGrid(width=10, height=10, gsd=1.0))

    def test_mask_only_instance_rejected_on_save(self, tmp_path):
        inst = mask_instance(np.ones((3, 3)))
        with pytest.raises(ValueError):
            geojson_io.save_geojson([inst], self._grid(), tmp_path / "m.geojson")


class TestTiff:
    def test_alpha_carries_validity(self, tmp_path):
        pixels = np.full((64, 64), 120, dtype=np.uint8)
        zone = square_polygon(0, 0, 32)
        tile = cut_tile(pixels, (0, 0, 64, 64), zone)
        path = tmp_path / "tile.tif"
        grid = RasterGrid(width=64, height=64, gsd=0.05,
                          geotransform=(100.0, 0.05, 0.0, 900.0, 0.0, -0.05))
        tiff_io.save_tile_tiff(tile, grid, path)
        arr = tiff_io.load_tiff(path)
        assert arr.shape == (64, 64, 4)
        assert (arr[:32, :32, 3] == 255).all()
        assert (arr[32:, :, 3] == 0).all()
        assert (arr[:32, :32, 0] == 120).all()

    def test_georeferencing_tags(self, tmp_path):
        from PIL import Image
        pixels = np.zeros((32, 32), dtype=np.uint8)
        tile = cut_tile(pixels, (8, 8, 16, 16))
        path = tmp_path / "geo.tif"
        grid = RasterGrid(width=32, height=32, gsd=0.05,
                          geotransform=(100.0, 0.05, 0.0, 900.0, 0.0, -0.05))
        tiff_io.save_tile_tiff(tile, grid, path)
        with Image.open(path) as img:
            scale = img.tag_v2[tiff_io.MODEL_PIXEL_SCALE]
            tiepoint = img.tag_v2[tiff_io.MODEL_TIEPOINT]
        assert tuple(scale)[:2] == (0.05, 0.05)
        # Tiepoint anchors pixel (0,0) of the tile at its world position.
        assert tuple(tiepoint)[3:5] == (100.0 + 8 * 0.05, 900.0 - 8 * 0.05)

    def test_missing_pixels_rejected(self, tmp_path):
        from crowneval.tiler import Tile
        t = Tile(id="t", window=(0, 0, 4, 4))
        grid = RasterGrid(width=4, height=4, gsd=0.05)
        with pytest.raises(ValueError):
            tiff_io.save_tile_tiff(t, grid, tmp_path / "x.tif")
