"""Report serialization, run manifests, delimited tables and figures.

Machine output is canonical JSON (sorted keys, fixed separators) so equal
manifests yield byte-identical files. Human-facing tables use percent values
with one decimal; figures are rendered with the matplotlib Agg backend next
to the delimited output.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .raster_metrics import RasterScore  # noqa: E402
from .tile_metrics import CocoSummary  # noqa: E402

__all__ = [
    "RunManifest",
    "MetricReport",
    "canonical_json",
    "percent",
    "write_audit_csv",
    "write_raster_csv",
    "write_agreement_csv",
    "plot_rf1_curve",
    "plot_size_class_bars",
    "plot_agreement_bars",
    "plot_grid_heatmap",
]

TOOL_VERSION = "0.1.0"


def percent(value: Optional[float]) -> str:
    """Human formatting: percent with one decimal, '--' when absent."""
    return "--" if value is None else f"{100.0 * value:.1f}"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to reproduce a run; embedded in every report.

    The timestamp honors SOURCE_DATE_EPOCH so reruns can be made bit-exact.
    """

    command: str
    config: dict = field(default_factory=dict)
    input_checksums: dict = field(default_factory=dict)
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    timestamp: Optional[str] = None

    @classmethod
    def create(cls, command: str, config: dict, inputs: dict, seed=None) -> "RunManifest":
        import datetime
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        if epoch is not None:
            ts = datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc)
        else:
            ts = datetime.datetime.now(datetime.timezone.utc)
        checksums = {name: file_checksum(path) for name, path in inputs.items()}
        return cls(command=command, config=config, input_checksums=checksums,
                   seed=seed, timestamp=ts.isoformat())

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "input_checksums": self.input_checksums,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
        }


@dataclass
class MetricReport:
    """Nested scores: tile-level mAP family and/or raster-level RF1 family."""

    manifest: Optional[RunManifest] = None
    tile: Optional[CocoSummary] = None
    raster: Optional[RasterScore] = None
    warnings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest.to_dict() if self.manifest else None,
            "tile": self.tile.to_dict() if self.tile else None,
            "raster": self.raster.to_dict() if self.raster else None,
            "warnings": self.warnings,
        }

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()))

    def summary_lines(self) -> list[str]:
        lines = []
        if self.tile:
            t = self.tile
            lines.append(f"mAP {percent(t.map)}  AP50 {percent(t.ap50)}  "
                         f"AP75 {percent(t.ap75)}  mAR {percent(t.mar)}")
        if self.raster:
            r = self.raster
            lines.append(f"mRF1 {percent(r.mrf1)}  RF1_50 {percent(r.rf1_at(0.50))}  "
                         f"RF1_75 {percent(r.rf1_at(0.75))}")
            for label, entry in r.per_class.items():
                lines.append(f"  {label}: mRF1 {percent(entry['mrf1'])}")
        return lines


def write_audit_csv(rows, path) -> None:
    """Grid-search audit table: nms_iou, confidence, mrf1, rf1_50, rf1_75."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["nms_iou", "confidence", "mrf1", "rf1_50", "rf1_75",
                         "filter_before_nms"])
        for row in rows:
            writer.writerow([row["nms_iou"], row["confidence"],
                             f"{row['mrf1']:.6f}", f"{row['rf1_50']:.6f}",
                             f"{row['rf1_75']:.6f}", int(row["filter_before_nms"])])


def write_raster_csv(score: RasterScore, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall", "f1", "tp", "fp", "fn"])
        for tau in score.thresholds:
            row = score.per_threshold.get(tau)
            if row is None:
                writer.writerow([f"{tau:.2f}", "", "", "", "", "", ""])
            else:
                writer.writerow([f"{tau:.2f}", f"{row['precision']:.6f}",
                                 f"{row['recall']:.6f}", f"{row['f1']:.6f}",
                                 row["tp"], row["fp"], row["fn"]])


def write_agreement_csv(rows, path) -> None:
    if not rows:
        raise ValueError("empty agreement table")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def plot_rf1_curve(score: RasterScore, path) -> None:
    """F1 against IoU threshold, one line overall plus one per size class."""
    fig, ax = plt.subplots(figsize=(6, 4))
    taus = list(score.thresholds)
    overall = [row["f1"] if row else float("nan")
               for row in (score.per_threshold.get(t) for t in taus)]
    ax.plot(taus, overall, marker="o", label="All", linewidth=2)
    for label, entry in score.per_class.items():
        vals = [r["f1"] if r else float("nan")
                for r in (entry["per_threshold"].get(f"{t:.2f}") for t in taus)]
        ax.plot(taus, vals, marker=".", alpha=0.7, label=label)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("Raster F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_size_class_bars(report: MetricReport, path) -> None:
    """Per-size-class mAP / mAR / mRF1 bars; absent classes are skipped."""
    labels, series = [], {"mAP": [], "mAR": [], "mRF1": []}
    tile_classes = report.tile.per_class if report.tile else {}
    raster_classes = report.raster.per_class if report.raster else {}
    for label in ("Tiny", "Small", "Medium", "Large", "Giant"):
        labels.append(label)
        tc = tile_classes.get(label, {})
        series["mAP"].append(tc.get("map"))
        series["mAR"].append(tc.get("mar"))
        rc = raster_classes.get(label, {})
        series["mRF1"].append(rc.get("mrf1"))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.26
    for k, (name, vals) in enumerate(series.items()):
        xs = [i + (k - 1) * width for i in range(len(labels))]
        ys = [v if v is not None else 0.0 for v in vals]
        ax.bar(xs, ys, width=width, label=name)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_agreement_bars(rows, path) -> None:
    """Grouped per-size-class agreement bars, one group per ordered pair."""
    classes = ("Tiny", "Small", "Medium", "Large", "Giant")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(rows))
    for k, row in enumerate(rows):
        xs = [i + k * width for i in range(len(classes))]
        ys = [row.get(c) if row.get(c) is not None else 0.0 for c in classes]
        ax.bar(xs, ys, width=width, label=f"{row['prediction']} vs {row['reference']}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set_ylabel("mRF1")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grid_heatmap(audit_rows, path) -> None:
    """Heatmap of the objective over the (nms_iou, confidence) search grid."""
    import numpy as np

    nms_vals = sorted({row["nms_iou"] for row in audit_rows})
    conf_vals = sorted({row["confidence"] for row in audit_rows})
    grid = np.full((len(nms_vals), len(conf_vals)), float("nan"))
    for row in audit_rows:
        grid[nms_vals.index(row["nms_iou"]), conf_vals.index(row["confidence"])] = row["mrf1"]
    fig, ax = plt.subplots(figsize=(7, 5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis",
                   extent=(min(conf_vals), max(conf_vals), min(nms_vals), max(nms_vals)))
    fig.colorbar(im, ax=ax, label="mRF1")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("NMS IoU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
