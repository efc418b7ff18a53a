"""Command-line surface tying the modules into reproducible runs.

Every subcommand reads one YAML config file plus ``--set key=value``
overrides (overrides win), writes its reports, delimited tables and figures
into an output directory, and embeds a run manifest in each JSON report.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml

from . import agreement as agreement_mod
from . import coco_io, geojson_io, pipeline, raster_metrics, report, synthetic
from . import tiff_io, tile_metrics, tiler
from .geometry import CrownInstance, Polygon, RasterGrid, translate_instance
from .raster_metrics import AggregationConfig
from .report import MetricReport, RunManifest

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _load_config(path: str) -> dict:
    cfg = yaml.safe_load(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return cfg


def _apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def _grid_from(cfg: dict, width: int = 1, height: int = 1) -> RasterGrid:
    gsd = cfg.get("gsd")
    if gsd is None:
        raise ValueError("config is missing required key 'gsd'")
    gt = cfg.get("geotransform", (0.0, 1.0, 0.0, 0.0, 0.0, 1.0))
    return RasterGrid(width=cfg.get("width", width), height=cfg.get("height", height),
                      gsd=float(gsd), geotransform=tuple(gt), crs=cfg.get("crs", ""))


def _thresholds_from(cfg: dict):
    return tuple(cfg.get("thresholds", tile_metrics.DEFAULT_THRESHOLDS))


def _pooled_instances(tiles: dict) -> list:
    """All instances of a COCO file, translated by their image window offset."""
    out = []
    for image_id in sorted(tiles, key=str):
        info = tiles[image_id]["info"]
        x0, y0 = info.get("x0", 0), info.get("y0", 0)
        for inst in tiles[image_id]["instances"]:
            out.append(translate_instance(inst, x0, y0) if (x0 or y0) else inst)
    return out


def _paired_tiles(pred_tiles: dict, gt_tiles: dict) -> list:
    tiles = []
    for image_id in sorted(gt_tiles, key=str):
        preds = pred_tiles.get(image_id, {"instances": []})["instances"]
        tiles.append((preds, gt_tiles[image_id]["instances"]))
    return tiles


def _zone_polygon(path, grid: RasterGrid):
    crowns = geojson_io.load_geojson(path, grid)
    if len(crowns) != 1 or crowns[0].polygon is None:
        raise ValueError(f"zone file {path} must hold exactly one polygon feature")
    return crowns[0].polygon


@click.group()
def cli():
    """Tree-crown segmentation evaluation toolkit."""


def _common(func):
    # Existence is checked at open time so a missing path exits with the I/O code.
    func = click.argument("config_path", type=click.Path(dir_okay=False))(func)
    func = click.option("--out-dir", "-o", default="out", show_default=True,
                        help="Directory for reports and figures.")(func)
    func = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Override a config entry (dotted keys allowed).")(func)
    return func


def _prepare(config_path, overrides, out_dir):
    cfg = _apply_overrides(_load_config(config_path), overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


@cli.command("tile")
@_common
def tile_cmd(config_path, out_dir, overrides):
    """Cut a raster into zone-masked tiles and clipped annotations."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    pixels = tiff_io.load_tiff(cfg["raster"])
    grid = _grid_from(cfg, width=pixels.shape[1], height=pixels.shape[0])
    zone = _zone_polygon(cfg["zone"], grid) if cfg.get("zone") else None
    spec = tiler.TilingSpec(tile_size=int(cfg["tile_size"]),
                            overlap=float(cfg.get("overlap", 0.0)), zone=zone,
                            min_annotation_area_ratio=float(
                                cfg.get("min_annotation_area_ratio", 0.0)))
    crowns = geojson_io.load_geojson(cfg["annotations"], grid) if cfg.get("annotations") else []

    tiles_dir = out / "tiles"
    tiles_dir.mkdir(exist_ok=True)
    manifest_rows = []
    coco_tiles = {}
    for window in tiler.plan_tiles(grid, spec):
        t = tiler.cut_tile(pixels, window, zone)
        tiff_path = tiles_dir / f"{t.id}.tif"
        tiff_io.save_tile_tiff(t, grid, tiff_path)
        manifest_rows.append({
            "id": t.id,
            "window": list(window),
            "split": cfg.get("split", ""),
            "source_raster": str(cfg["raster"]),
            "checksum": report.file_checksum(tiff_path),
        })
        if crowns:
            coco_tiles[t.id] = {
                "info": {"file_name": f"{t.id}.tif", "width": window[2],
                         "height": window[3], "x0": window[0], "y0": window[1]},
                "instances": tiler.clip_annotations(crowns, window, spec),
            }
    (out / "manifest.json").write_text(report.canonical_json(manifest_rows))
    if coco_tiles:
        coco_io.save_coco(coco_tiles, out / "annotations.json")
    click.echo(f"wrote {len(manifest_rows)} tiles to {tiles_dir}")


@cli.command("eval-tiles")
@_common
def eval_tiles_cmd(config_path, out_dir, overrides):
    """COCO-style tile metrics (mAP/mAR family) for predictions vs GT."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    pred_tiles = coco_io.load_coco(cfg["predictions"])
    gt_tiles = coco_io.load_coco(cfg["ground_truth"])
    grid = _grid_from(cfg)
    tiles = _paired_tiles(pred_tiles, gt_tiles)
    summary = tile_metrics.coco_summary(
        tiles, _thresholds_from(cfg), int(cfg.get("max_detections", 300)),
        cfg.get("iou_kind", "mask"), grid)
    manifest = RunManifest.create("eval-tiles", cfg, {
        "predictions": cfg["predictions"], "ground_truth": cfg["ground_truth"]})
    rep = MetricReport(manifest=manifest, tile=summary)
    rep.save(out / "report.json")
    report.plot_size_class_bars(rep, out / "size_class_bars.png")
    for line in rep.summary_lines():
        click.echo(line)


def _aggregation_from(cfg: dict, offsets: dict) -> AggregationConfig:
    agg = dict(cfg.get("aggregation", {}))
    if cfg.get("aggregation_config"):
        agg.update(json.loads(Path(cfg["aggregation_config"]).read_text()))
    return AggregationConfig(
        nms_iou=float(agg.get("nms_iou", 0.5)),
        confidence_threshold=float(agg.get("confidence_threshold", 0.0)),
        nms_geometry=agg.get("nms_geometry", "mask"),
        filter_before_nms=bool(agg.get("filter_before_nms", True)),
        tile_offsets=offsets)


def _tile_preds_and_offsets(pred_tiles: dict):
    tile_preds, offsets = {}, {}
    for image_id, entry in pred_tiles.items():
        info = entry["info"]
        tile_preds[image_id] = entry["instances"]
        offsets[image_id] = (info.get("x0", 0), info.get("y0", 0))
    return tile_preds, offsets


@cli.command("eval-raster")
@_common
def eval_raster_cmd(config_path, out_dir, overrides):
    """NMS aggregation of tile predictions and the RF1/mRF1 family."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    pred_tiles = coco_io.load_coco(cfg["predictions"])
    gts = _pooled_instances(coco_io.load_coco(cfg["ground_truth"]))
    grid = _grid_from(cfg)
    tile_preds, offsets = _tile_preds_and_offsets(pred_tiles)
    agg = _aggregation_from(cfg, offsets)
    raster_preds = raster_metrics.aggregate_tiles(tile_preds, agg)
    score = raster_metrics.mrf1(raster_preds, gts, _thresholds_from(cfg), grid=grid,
                                iou_kind=cfg.get("iou_kind", "mask"))
    manifest = RunManifest.create("eval-raster", cfg, {
        "predictions": cfg["predictions"], "ground_truth": cfg["ground_truth"]})
    rep = MetricReport(manifest=manifest, raster=score)
    rep.save(out / "report.json")
    report.write_raster_csv(score, out / "raster.csv")
    report.plot_rf1_curve(score, out / "rf1_curve.png")
    for line in rep.summary_lines():
        click.echo(line)


@cli.command("optimize-thresholds")
@_common
def optimize_cmd(config_path, out_dir, overrides):
    """Grid-search NMS and confidence thresholds on a validation set."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    pred_tiles = coco_io.load_coco(cfg["predictions"])
    gts = _pooled_instances(coco_io.load_coco(cfg["ground_truth"]))
    grid = _grid_from(cfg)
    tile_preds, offsets = _tile_preds_and_offsets(pred_tiles)
    base = _aggregation_from(cfg, offsets)
    search = cfg.get("search", {})
    best, audit = raster_metrics.optimize_thresholds(
        tile_preds, gts, base,
        nms_values=tuple(search.get("nms_iou", raster_metrics.DEFAULT_NMS_GRID)),
        confidence_values=tuple(search.get("confidence",
                                           raster_metrics.DEFAULT_CONFIDENCE_GRID)),
        thresholds=_thresholds_from(cfg),
        objective=cfg.get("objective", "mrf1"), grid=grid)
    best_doc = {
        "nms_iou": best.nms_iou,
        "confidence_threshold": best.confidence_threshold,
        "nms_geometry": best.nms_geometry,
        "filter_before_nms": best.filter_before_nms,
    }
    (out / "best_config.json").write_text(report.canonical_json(best_doc))
    report.write_audit_csv(audit, out / "audit.csv")
    report.plot_grid_heatmap(audit, out / "grid_heatmap.png")
    click.echo(f"best: nms_iou={best.nms_iou} confidence={best.confidence_threshold}")


@cli.command("agreement")
@_common
def agreement_cmd(config_path, out_dir, overrides):
    """Pairwise inter-annotator agreement table, stratified by size class."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    grid = _grid_from(cfg)
    sets = []
    for entry in cfg["annotators"]:
        crowns = geojson_io.load_geojson(entry["crowns"], grid)
        for c in crowns:
            c.source = f"annotator:{entry['id']}"
        region = _zone_polygon(entry["region"], grid)
        sets.append(agreement_mod.AnnotationSet(annotator_id=str(entry["id"]),
                                                crowns=crowns, region=region))
    rows = agreement_mod.agreement_matrix(sets, _thresholds_from(cfg), grid,
                                          cfg.get("iou_kind", "mask"))
    manifest = RunManifest.create("agreement", cfg, {
        str(e["id"]): e["crowns"] for e in cfg["annotators"]})
    (out / "agreement.json").write_text(report.canonical_json(
        {"manifest": manifest.to_dict(), "pairs": rows}))
    report.write_agreement_csv(rows, out / "agreement.csv")
    report.plot_agreement_bars(rows, out / "agreement_bars.png")
    for row in rows:
        click.echo(f"{row['prediction']} vs {row['reference']}: "
                   f"mRF1 {report.percent(row['mrf1'])}")


def _build_backend(section: dict, gts, role: str):
    kind = section.get("type", "oracle")
    if kind == "oracle":
        if role == "detector":
            return pipeline.OracleDetector(
                gts, shift_sigma=float(section.get("shift_sigma", 0.0)),
                scale_sigma=float(section.get("scale_sigma", 0.0)),
                drop_rate=float(section.get("drop_rate", 0.0)),
                spurious_rate=float(section.get("spurious_rate", 0.0)),
                seed=int(section.get("seed", 0)))
        return pipeline.OracleSegmenter(
            gts, erode_radius=int(section.get("erode_radius", 0)),
            dilate_radius=int(section.get("dilate_radius", 0)),
            boundary_noise=float(section.get("boundary_noise", 0.0)),
            seed=int(section.get("seed", 0)))
    if kind == "file":
        cls = pipeline.FileBackendDetector if role == "detector" \
            else pipeline.FileBackendSegmenter
        return cls(section["root"], poll_interval=float(section.get("poll_interval", 0.05)),
                   timeout=float(section.get("timeout", 30.0)))
    raise ValueError(f"unknown {role} type {kind!r}")


@cli.command("pipeline-run")
@_common
def pipeline_run_cmd(config_path, out_dir, overrides):
    """End-to-end run of the detector -> segmenter pipeline plus evaluation."""
    cfg, out = _prepare(config_path, overrides, out_dir)
    scene_cfg = cfg.get("scene", {})
    n_scenes = int(scene_cfg.get("count", 1))
    runs = []
    for k in range(n_scenes):
        scene = synthetic.generate_scene(
            seed=int(scene_cfg.get("seed", 0)) + k,
            width=int(scene_cfg.get("width", 2048)),
            height=int(scene_cfg.get("height", 2048)),
            gsd=float(scene_cfg.get("gsd", 0.05)),
            n_crowns=int(scene_cfg.get("n_crowns", 50)),
            cell=int(scene_cfg.get("cell", 128)))
        det = _build_backend(cfg.get("detector", {}), scene.gts, "detector")
        seg = _build_backend(cfg.get("segmenter", {}), scene.gts, "segmenter")
        runs.append((scene, det, seg))

    tiling_cfg = cfg.get("tiling", {})
    spec = tiler.TilingSpec(tile_size=int(tiling_cfg.get("tile_size", 512)),
                            overlap=float(tiling_cfg.get("overlap", 0.5)))
    agg = _aggregation_from(cfg, {})
    pcfg = pipeline.PipelineConfig(
        max_instances=int(cfg.get("pipeline", {}).get("max_instances", 300)),
        score_combiner=cfg.get("pipeline", {}).get("score_combiner", "product"),
        seed=int(cfg.get("pipeline", {}).get("seed", 0)))
    result = pipeline.end_to_end_eval(runs, spec, agg, pcfg, _thresholds_from(cfg),
                                      iou_kind=cfg.get("iou_kind", "mask"))
    manifest = RunManifest.create("pipeline-run", cfg, {}, seed=pcfg.seed)
    rep = MetricReport(manifest=manifest, tile=result.tile, raster=result.raster,
                       warnings=result.warnings)
    rep.save(out / "report.json")
    report.write_raster_csv(result.raster, out / "raster.csv")
    report.plot_rf1_curve(result.raster, out / "rf1_curve.png")
    report.plot_size_class_bars(rep, out / "size_class_bars.png")
    for line in rep.summary_lines():
        click.echo(line)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_VALIDATION
    except click.exceptions.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        click.echo(f"error: missing input path: {exc.filename or exc}", err=True)
        return EXIT_IO
    except OSError as exc:
        click.echo(f"error: I/O failure: {exc}", err=True)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError, yaml.YAMLError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
