"""crowneval: evaluation, tiling and pipeline harness for tree-crown
instance segmentation on georeferenced orthomosaics."""

from .geometry import (
    BinaryMask,
    CrownInstance,
    Polygon,
    RasterGrid,
    SizeClass,
    box_iou,
    crown_area_m2,
    mask_iou,
    mask_to_box,
    polygon_area_px,
    rasterize,
    size_class,
)
from .matching import MatchConfig, MatchResult, greedy_match, stratify
from .tile_metrics import (
    DEFAULT_THRESHOLDS,
    CocoSummary,
    average_precision,
    average_recall,
    coco_summary,
)
from .raster_metrics import (
    AggregationConfig,
    RasterScore,
    aggregate_tiles,
    mrf1,
    optimize_thresholds,
    rf1,
)
from .tiler import Tile, TilingSpec, clip_annotations, cut_tile, plan_tiles, split_census
from .agreement import AnnotationSet, agreement_matrix, pairwise_agreement
from .pipeline import (
    OracleDetector,
    OracleSegmenter,
    PipelineConfig,
    RasterScene,
    end_to_end_eval,
    run_pipeline,
)
from .report import MetricReport, RunManifest

__version__ = "0.1.0"
