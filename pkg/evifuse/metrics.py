import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from evifuse.errors import ValidationError
from evifuse.geometry import BinaryMask, Box, Component, connected_components, iou
from evifuse.heatmap import EvidenceStack
from evifuse.instance import InstanceRecord
from evifuse.pixelfusion import UNCERTAIN, PixelLabelMap

logger = logging.getLogger(__name__)

INTERPOLATIONS = ("continuous", "11point")


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.confidence):
            raise ValidationError(f"Detection confidence must be finite, got {self.confidence}")


@dataclass
class GroundTruth:
    """
    Ground truth boxes and pixel maps keyed by image id.

    Pixel maps hold 0 for background and c + 1 for class c.
    """

    boxes: Dict[str, List[Tuple[Box, int]]] = field(default_factory=dict)
    pixel_maps: Dict[str, np.ndarray] = field(default_factory=dict)

    def classes(self) -> List[int]:
        return sorted({c for objects in self.boxes.values() for _, c in objects})

    def boxes_of(self, image_id: str, class_id: int) -> List[Box]:
        return [b for b, c in self.boxes.get(image_id, []) if c == class_id]


@dataclass(frozen=True)
class MIoUResult:
    per_class: Tuple[float, ...]
    mean: float


@dataclass(frozen=True)
class ClassScores:
    """Per-class values of a detection measure and their mean."""

    per_class: Dict[int, float]
    mean: float


def _harvest(m: PixelLabelMap) -> List[Tuple[int, Component]]:
    found = []
    for value in range(1, m.num_classes + 1):
        mask = m.data == value
        if not mask.any():
            continue
        for component in connected_components(BinaryMask.from_array(mask)):
            found.append((value - 1, component))
    return found


def boxes_from_labelmap(m: PixelLabelMap, image_id: str = "") -> List[InstanceRecord]:
    """
    One instance per 4-connected region of equally labeled pixels.

    Background and UNCERTAIN pixels never form instances.
    """
    return [
        InstanceRecord(
            instance_id=f"{image_id}:h{k}",
            image_id=image_id,
            box=component.box,
            class_id=class_id,
            provenance="harvest",
        )
        for k, (class_id, component) in enumerate(_harvest(m))
    ]


def harvest_detections(
    m: PixelLabelMap, probability: Optional[EvidenceStack] = None, image_id: str = ""
) -> List[Detection]:
    """
    Detections aligned with ``boxes_from_labelmap``.

    The confidence is the mean probability of the component's class over its
    pixels, or 1.0 without a probability map.
    """
    detections = []
    for class_id, component in _harvest(m):
        confidence = 1.0
        if probability is not None:
            mask = component.to_mask(m.width, m.height).data
            confidence = float(probability.class_channel(class_id)[mask].mean())
        detections.append(Detection(image_id, component.box, class_id, confidence))
    return detections


def _as_label_array(labels: Union[PixelLabelMap, np.ndarray]) -> np.ndarray:
    return np.asarray(labels.data if isinstance(labels, PixelLabelMap) else labels)


def segmentation_confusion(
    pred: Union[PixelLabelMap, np.ndarray],
    gt: Union[PixelLabelMap, np.ndarray],
    num_classes: int,
    exclude_uncertain: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class intersection and union pixel counts, background included.

    Returns:
        Two (C+1,) integer arrays.
    """
    p = _as_label_array(pred)
    g = _as_label_array(gt)
    if p.shape != g.shape:
        raise ValidationError(f"Prediction shape {p.shape} differs from ground truth {g.shape}")
    if exclude_uncertain:
        keep = p != UNCERTAIN
        p, g = p[keep], g[keep]
    intersections = np.zeros(num_classes + 1, dtype=np.int64)
    unions = np.zeros(num_classes + 1, dtype=np.int64)
    for c in range(num_classes + 1):
        pc, gc = p == c, g == c
        intersections[c] = np.count_nonzero(pc & gc)
        unions[c] = np.count_nonzero(pc | gc)
    return intersections, unions


def _miou_from_counts(intersections: np.ndarray, unions: np.ndarray) -> MIoUResult:
    per_class = tuple(
        float(i / u) if u > 0 else float("nan") for i, u in zip(intersections, unions)
    )
    counted = [v for v in per_class if not math.isnan(v)]
    mean = float(np.mean(counted)) if counted else float("nan")
    return MIoUResult(per_class=per_class, mean=mean)


def miou(
    pred: Union[PixelLabelMap, np.ndarray],
    gt: Union[PixelLabelMap, np.ndarray],
    num_classes: int,
    exclude_uncertain: bool = True,
) -> MIoUResult:
    """
    Per-class IoU and their mean over classes seen in pred or gt.

    Classes absent from both maps get NaN and are skipped in the mean. With
    ``exclude_uncertain`` UNCERTAIN pixels are dropped, otherwise they count
    as mismatches.
    """
    return _miou_from_counts(*segmentation_confusion(pred, gt, num_classes, exclude_uncertain))


def miou_dataset(
    pairs: Iterable[Tuple[Union[PixelLabelMap, np.ndarray], Union[PixelLabelMap, np.ndarray]]],
    num_classes: int,
    exclude_uncertain: bool = True,
) -> MIoUResult:
    """mIoU with intersections and unions accumulated over all images."""
    intersections = np.zeros(num_classes + 1, dtype=np.int64)
    unions = np.zeros(num_classes + 1, dtype=np.int64)
    for pred, gt in pairs:
        i, u = segmentation_confusion(pred, gt, num_classes, exclude_uncertain)
        intersections += i
        unions += u
    return _miou_from_counts(intersections, unions)


def _positive_images(gt: GroundTruth) -> Dict[int, List[str]]:
    images = defaultdict(set)
    for image_id, objects in gt.boxes.items():
        for _, c in objects:
            images[c].add(image_id)
    return {c: sorted(ids) for c, ids in sorted(images.items())}


def corloc(
    dets: Sequence[Detection], gt: GroundTruth, iou_thresh: float = 0.5
) -> ClassScores:
    """
    Correct localization: per class, the fraction of images containing the
    class whose top-confidence detection of that class hits a GT box.
    """
    top: Dict[Tuple[str, int], Detection] = {}
    for d in dets:
        key = (d.image_id, d.class_id)
        if key not in top or d.confidence > top[key].confidence:
            top[key] = d
    per_class = {}
    for c, image_ids in _positive_images(gt).items():
        hits = 0
        for image_id in image_ids:
            best = top.get((image_id, c))
            if best is not None and any(
                iou(best.box, g) >= iou_thresh for g in gt.boxes_of(image_id, c)
            ):
                hits += 1
        per_class[c] = hits / len(image_ids)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ClassScores(per_class=per_class, mean=mean)


def average_precision(
    recall: np.ndarray, precision: np.ndarray, interpolation: str = "continuous"
) -> float:
    """
    Area under the precision envelope.

    Args:
        recall: Cumulative recall per ranked detection.
        precision: Cumulative precision per ranked detection.
        interpolation: "continuous" (all points) or "11point".
    """
    if interpolation not in INTERPOLATIONS:
        raise ValidationError(f"Unknown AP interpolation {interpolation!r}")
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if interpolation == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            ap += (above.max() if above.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def voc_map(
    dets: Sequence[Detection],
    gt: GroundTruth,
    iou_thresh: float = 0.5,
    interpolation: str = "continuous",
) -> ClassScores:
    """
    Pascal VOC style average precision per class and its mean.

    Detections are ranked by confidence (ties by image id, then input
    order) and greedily matched to the best unmatched GT box of their image
    with IoU >= iou_thresh.
    """
    per_class = {}
    for c in gt.classes():
        gt_boxes = {image_id: gt.boxes_of(image_id, c) for image_id in gt.boxes}
        npos = sum(len(v) for v in gt_boxes.values())
        matched = {image_id: [False] * len(v) for image_id, v in gt_boxes.items()}
        ranked = sorted(
            (i for i, d in enumerate(dets) if d.class_id == c),
            key=lambda i: (-dets[i].confidence, dets[i].image_id, i),
        )
        tp = np.zeros(len(ranked))
        fp = np.zeros(len(ranked))
        for rank, i in enumerate(ranked):
            d = dets[i]
            best, best_iou = -1, iou_thresh
            for j, g in enumerate(gt_boxes.get(d.image_id, [])):
                overlap = iou(d.box, g)
                if not matched[d.image_id][j] and overlap >= best_iou:
                    if best < 0 or overlap > best_iou:
                        best, best_iou = j, overlap
            if best >= 0:
                matched[d.image_id][best] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        ctp, cfp = np.cumsum(tp), np.cumsum(fp)
        recall = ctp / npos
        precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
        per_class[c] = average_precision(recall, precision, interpolation)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ClassScores(per_class=per_class, mean=mean)


def _safe_ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def multilabel_prf(
    scores: Sequence[Sequence[float]],
    gts: Sequence[Sequence[int]],
    conf_thresh: float = 0.5,
    topk: Optional[int] = None,
) -> Dict[str, float]:
    """
    Macro (per-class) and micro (overall) precision, recall and F1.

    A label is positive when its score is strictly above conf_thresh and,
    with ``topk``, it is among the image's top-k scores. Empty denominators
    contribute 0.

    Returns:
        Dictionary with keys P-C, R-C, F1-C, P-O, R-O, F1-O.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gts).astype(bool)
    if s.shape != g.shape or s.ndim != 2:
        raise ValidationError(f"Score shape {s.shape} does not match label shape {g.shape}")
    pred = s > conf_thresh
    if topk is not None:
        order = np.argsort(-s, axis=1, kind="stable")[:, :topk]
        top = np.zeros_like(pred)
        np.put_along_axis(top, order, True, axis=1)
        pred &= top
    tp = np.count_nonzero(pred & g, axis=0)
    fp = np.count_nonzero(pred & ~g, axis=0)
    fn = np.count_nonzero(~pred & g, axis=0)
    per_class_p = [_safe_ratio(a, a + b) for a, b in zip(tp, fp)]
    per_class_r = [_safe_ratio(a, a + b) for a, b in zip(tp, fn)]
    p_c = float(np.mean(per_class_p)) if per_class_p else 0.0
    r_c = float(np.mean(per_class_r)) if per_class_r else 0.0
    p_o = _safe_ratio(tp.sum(), tp.sum() + fp.sum())
    r_o = _safe_ratio(tp.sum(), tp.sum() + fn.sum())
    return {
        "P-C": p_c,
        "R-C": r_c,
        "F1-C": _harmonic(p_c, r_c),
        "P-O": p_o,
        "R-O": r_o,
        "F1-O": _harmonic(p_o, r_o),
    }


class MetricsReport:
    """
    Class for the evaluation results of one pipeline run.
    """

    def __init__(
        self,
        num_classes: int,
        segmentation: Optional[MIoUResult] = None,
        localization: Optional[ClassScores] = None,
        detection: Optional[ClassScores] = None,
        harvest_localization: Optional[ClassScores] = None,
        harvest_detection: Optional[ClassScores] = None,
        multilabel: Optional[Dict[str, float]] = None,
        multilabel_top3: Optional[Dict[str, float]] = None,
        class_names: Optional[Sequence[str]] = None,
    ) -> None:
        """
        Initialize the report from the individual measures.

        Args:
            num_classes: Number of classes C.
            segmentation: mIoU of the pixel label maps.
            localization: CorLoc of the pseudo-label instances.
            detection: AP of the pseudo-label instances.
            harvest_localization: CorLoc of boxes harvested from label maps.
            harvest_detection: AP of boxes harvested from label maps.
            multilabel: Multi-label P/R/F1.
            multilabel_top3: Multi-label P/R/F1 restricted to the top-3 labels.
            class_names: Optional display names, one per class.
        """
        self.num_classes = num_classes
        self.segmentation = segmentation
        self.localization = localization
        self.detection = detection
        self.harvest_localization = harvest_localization
        self.harvest_detection = harvest_detection
        self.multilabel = multilabel or {}
        self.multilabel_top3 = multilabel_top3 or {}
        self.class_names = list(class_names) if class_names else [
            f"class_{c}" for c in range(num_classes)
        ]

    def summary(self) -> Dict[str, float]:
        """Flat key-value view of every aggregate measure."""
        flat: Dict[str, float] = {}
        if self.segmentation is not None:
            flat["mIoU"] = self.segmentation.mean
        for key, value in (
            ("CorLoc", self.localization),
            ("mAP", self.detection),
            ("harvest_CorLoc", self.harvest_localization),
            ("harvest_mAP", self.harvest_detection),
        ):
            if value is not None:
                flat[key] = value.mean
        flat.update(self.multilabel)
        flat.update({f"{k}/top3": v for k, v in self.multilabel_top3.items()})
        return flat

    def to_dataframe(self) -> pd.DataFrame:
        """Return the per-class results as a pandas dataframe."""
        rows = []
        names = ["background"] + self.class_names
        for channel in range(self.num_classes + 1):
            class_id = channel - 1
            row = {"class": names[channel]}
            if self.segmentation is not None:
                row["IoU"] = self.segmentation.per_class[channel]
            for key, value in (
                ("CorLoc", self.localization),
                ("AP", self.detection),
                ("harvest_CorLoc", self.harvest_localization),
                ("harvest_AP", self.harvest_detection),
            ):
                if value is not None:
                    row[key] = value.per_class.get(class_id, float("nan"))
            rows.append(row)
        return pd.DataFrame(rows)

    def to_json(self) -> str:
        """Return the summary and per-class results as a JSON string."""
        per_class = self.to_dataframe().astype(object)
        per_class = per_class.where(per_class.notna(), None)
        summary = {
            k: (None if isinstance(v, float) and math.isnan(v) else v)
            for k, v in self.summary().items()
        }
        return json.dumps(
            {"summary": summary, "per_class": per_class.to_dict(orient="records")},
            indent=4,
            separators=(",", ": "),
            sort_keys=True,
        )

    def to_tsv(self) -> str:
        """Return the per-class results as a TSV spreadsheet."""
        return self.to_dataframe().to_csv(sep="\t", index=False)
