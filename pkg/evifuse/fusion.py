import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from evifuse.errors import ValidationError
from evifuse.geometry import (
    BinaryMask,
    Box,
    connected_components,
    coverage,
    intersection,
    iou,
    union_box,
)
from evifuse.heatmap import EvidenceStack, ImageLabels
from evifuse.instance import InstanceRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionThresholds:
    tau_high: float = 0.65
    tau_low: float = 0.1
    tau_att: float = 0.5
    tau_cover: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.tau_low < self.tau_high <= 1:
            raise ValidationError(
                f"Heatmap thresholds need 0 < tau_low < tau_high <= 1, got {self.tau_low}, {self.tau_high}"
            )
        if not 0 < self.tau_att <= 1:
            raise ValidationError(f"Attention threshold must lie in (0, 1], got {self.tau_att}")
        if not 0 < self.tau_cover < 1:
            raise ValidationError(f"Cover threshold must lie in (0, 1), got {self.tau_cover}")


@dataclass(frozen=True)
class ClassProposals:
    """
    Proposals of one class: high and low confidence heatmap regions and
    attention regions.
    """

    class_id: int
    high: Tuple[Box, ...] = field(default_factory=tuple)
    low: Tuple[Box, ...] = field(default_factory=tuple)
    attention: Tuple[Box, ...] = field(default_factory=tuple)


def threshold_to_boxes(map_channel: np.ndarray, tau: float) -> List[Box]:
    """
    Bounding boxes of the 4-connected regions where the map reaches tau.
    """
    mask = BinaryMask.from_array(np.asarray(map_channel) >= tau)
    return [component.box for component in connected_components(mask)]


def adjust_box(a: Box, h: Box, l: Box) -> Optional[Box]:
    """
    Grow an attention box to enclose its high confidence box, then clip it
    to the low confidence box. Clipping wins when the two conflict.
    """
    return intersection(union_box(a, h), l)


def fuse_class(
    p: ClassProposals,
    t: FusionThresholds,
    image_id: str = "",
    warnings: Optional[Counter] = None,
) -> List[InstanceRecord]:
    """
    Keep attention proposals that cover more than tau_cover of a high
    confidence proposal and reshape them between their matched high and low
    proposals.

    Args:
        p: Proposals of a single class.
        t: Fusion thresholds.
        image_id: Image the proposals belong to, copied into the instances.
        warnings: Optional counter receiving dropped-instance counts.

    Returns:
        Deduplicated instances in attention proposal order.
    """
    instances: List[InstanceRecord] = []
    emitted = set()
    if not p.high:
        return instances
    for a in p.attention:
        covers = [coverage(a, h) for h in p.high]
        best = int(np.argmax(covers))
        if covers[best] <= t.tau_cover:
            continue
        h_star = p.high[best]
        if not p.low:
            logger.warning(f"Class {p.class_id} in {image_id!r} has no low confidence region")
            if warnings is not None:
                warnings["missing_low_region"] += 1
            continue
        l_star = p.low[int(np.argmax([iou(h_star, l) for l in p.low]))]
        box = adjust_box(a, h_star, l_star)
        if box is None:
            logger.warning(
                f"Dropping empty fused box for class {p.class_id} in {image_id!r}: "
                f"a={a.to_list()} h={h_star.to_list()} l={l_star.to_list()}"
            )
            if warnings is not None:
                warnings["empty_intersection"] += 1
            continue
        if box in emitted:
            continue
        emitted.add(box)
        instances.append(
            InstanceRecord(
                instance_id=f"{image_id}:{p.class_id}:{len(instances)}",
                image_id=image_id,
                box=box,
                class_id=p.class_id,
                provenance="fusion",
            )
        )
    return instances


def class_proposals(
    heatmaps: EvidenceStack, attention: EvidenceStack, class_id: int, t: FusionThresholds
) -> ClassProposals:
    heat = heatmaps.class_channel(class_id)
    return ClassProposals(
        class_id=class_id,
        high=tuple(threshold_to_boxes(heat, t.tau_high)),
        low=tuple(threshold_to_boxes(heat, t.tau_low)),
        attention=tuple(threshold_to_boxes(attention.class_channel(class_id), t.tau_att)),
    )


def fuse_image(
    heatmaps: EvidenceStack,
    attention: EvidenceStack,
    labels: ImageLabels,
    t: FusionThresholds,
    image_id: str = "",
    warnings: Optional[Counter] = None,
) -> List[InstanceRecord]:
    """
    Fuse normalized heatmaps H and global attention A_g of one image.

    Args:
        heatmaps: Normalized C-channel heatmaps.
        attention: Normalized C-channel global attention.
        labels: Image labels; absent classes yield no instances.
        t: Fusion thresholds.
        image_id: Image identifier.
        warnings: Optional counter receiving dropped-instance counts.

    Returns:
        Instances of all present classes, class by class.
    """
    if heatmaps.data.shape != attention.data.shape:
        raise ValidationError(
            f"Heatmap shape {heatmaps.data.shape} differs from attention shape {attention.data.shape}"
        )
    instances = []
    for c in labels.present():
        proposals = class_proposals(heatmaps, attention, c, t)
        fused = fuse_class(proposals, t, image_id=image_id, warnings=warnings)
        logger.debug(
            f"{image_id}: class {c} R_h={len(proposals.high)} R_l={len(proposals.low)} "
            f"R_a={len(proposals.attention)} fused={len(fused)}"
        )
        instances.extend(fused)
    return instances
