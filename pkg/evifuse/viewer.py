"""
Read-only views of a run directory as pandas tables and plotly figures.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from evifuse.errors import InputMissingError
from evifuse.heatmap import EvidenceStack
from evifuse.records import ImageInfo, read_json, read_jsonl
from evifuse.tensor_io import read_stack

logger = logging.getLogger(__name__)

INSTANCE_FILES = {
    "fused": "instances.jsonl",
    "outlier": "outliers.jsonl",
    "discarded": "discarded.jsonl",
    "kept": "relabeled.jsonl",
    "harvested": "harvested.jsonl",
}
INSTANCE_COLUMNS = ["instance_id", "image_id", "class_id", "x0", "y0", "x1", "y1", "status", "reason", "confidence"]


def instances_frame(records: Sequence[dict], status: str) -> pd.DataFrame:
    """One row per instance record, box corners split into columns."""
    rows = []
    for r in records:
        x0, y0, x1, y1 = r["box"]
        scores = r.get("scores")
        confidence = r.get("confidence", scores[r["class_id"]] if scores else np.nan)
        rows.append(
            {
                "instance_id": r["instance_id"],
                "image_id": r["image_id"],
                "class_id": r["class_id"],
                "x0": x0,
                "y0": y0,
                "x1": x1,
                "y1": y1,
                "status": status,
                "reason": r.get("reason"),
                "confidence": confidence,
            }
        )
    return pd.DataFrame(rows, columns=INSTANCE_COLUMNS)


@dataclass
class RunView:
    """Everything the inspector shows about one run directory."""

    root: Path
    images: List[ImageInfo] = field(default_factory=list)
    instances: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=INSTANCE_COLUMNS))
    report: Optional[dict] = None
    metrics: Optional[dict] = None

    @classmethod
    def load(cls, root: Path) -> "RunView":
        root = Path(root)
        if not (root / "images.jsonl").is_file():
            raise InputMissingError(f"{root} holds no images.jsonl", root / "images.jsonl")
        view = cls(root=root, images=[ImageInfo.from_record(r) for r in read_jsonl(root / "images.jsonl", "image")])
        frames = [
            instances_frame(read_jsonl(root / name, "instance"), status)
            for status, name in INSTANCE_FILES.items()
            if (root / name).is_file()
        ]
        if frames:
            view.instances = pd.concat(frames, ignore_index=True)
        if (root / "report.json").is_file():
            view.report = read_json(root / "report.json")
        if (root / "metrics.json").is_file():
            view.metrics = read_json(root / "metrics.json")
        logger.info(f"Loaded run {root}: {len(view.images)} images, {len(view.instances)} instance rows")
        return view

    def stack(self, folder: str, image_id: str, has_background: bool = False) -> Optional[EvidenceStack]:
        path = self.root / folder / f"{image_id}.evt"
        return read_stack(path, has_background=has_background) if path.is_file() else None

    def preview(self, image_id: str) -> Optional[Path]:
        path = self.root / "previews" / f"{image_id}.png"
        return path if path.is_file() else None

    def stage_table(self) -> pd.DataFrame:
        if not self.report:
            return pd.DataFrame(columns=["stage", "count", "value"])
        rows = [
            {"stage": s["stage"], "count": key, "value": value}
            for s in self.report["stages"]
            for key, value in {**s["counts"], **{f"warning:{k}": v for k, v in s["warnings"].items()}}.items()
        ]
        return pd.DataFrame(rows)

    def metrics_table(self) -> pd.DataFrame:
        if not self.metrics:
            return pd.DataFrame()
        return pd.DataFrame(self.metrics["per_class"])


def channel_figure(stack: EvidenceStack, channel: int, title: str) -> go.Figure:
    fig = px.imshow(stack.data[channel], color_continuous_scale="Viridis", zmin=0.0, zmax=1.0, title=title)
    fig.update_layout(margin=dict(l=0, r=0, t=40, b=0))
    return fig


def boxes_figure(image: ImageInfo, instances: pd.DataFrame) -> go.Figure:
    """Instance boxes of one image drawn over an empty canvas, coloured by status."""
    fig = go.Figure()
    fig.update_xaxes(range=[0, image.width], showgrid=False)
    fig.update_yaxes(range=[image.height, 0], showgrid=False, scaleanchor="x")
    palette = px.colors.qualitative.Plotly
    for k, (status, group) in enumerate(instances.groupby("status", sort=True)):
        colour = palette[k % len(palette)]
        for row in group.itertuples():
            fig.add_shape(
                type="rect", x0=row.x0, y0=row.y0, x1=row.x1, y1=row.y1, line=dict(color=colour, width=2)
            )
        fig.add_trace(
            go.Scatter(
                x=(group.x0 + group.x1) / 2,
                y=(group.y0 + group.y1) / 2,
                mode="markers",
                marker=dict(color=colour),
                name=status,
                text=group.instance_id,
            )
        )
    fig.update_layout(title=image.image_id, margin=dict(l=0, r=0, t=40, b=0))
    return fig


def metrics_barchart(per_class: pd.DataFrame, column: str) -> go.Figure:
    bar = per_class[["class", column]].dropna()
    return px.bar(bar, x=column, y="class", orientation="h", range_x=[0, 1], labels={"class": "Class"})


def status_counts(instances: pd.DataFrame) -> pd.DataFrame:
    """Instances per class and status."""
    if instances.empty:
        return pd.DataFrame(columns=["class_id", "status", "count"])
    return instances.groupby(["class_id", "status"]).size().reset_index(name="count")


def status_barchart(instances: pd.DataFrame) -> go.Figure:
    counts = status_counts(instances)
    return px.bar(counts, x="class_id", y="count", color="status", barmode="group")


def channel_names(num_classes: int, class_names: Optional[Sequence[str]] = None, background: bool = False) -> Dict[int, str]:
    names = list(class_names) if class_names else [f"class_{c}" for c in range(num_classes)]
    if background:
        names = ["background"] + names
    return dict(enumerate(names))
