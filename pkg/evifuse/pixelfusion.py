import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from evifuse.errors import ValidationError
from evifuse.geometry import Box
from evifuse.heatmap import EvidenceStack, ImageLabels, normalize_heatmaps

logger = logging.getLogger(__name__)

UNCERTAIN = 65535
DEFAULT_TAU_U = 0.6


@dataclass(frozen=True)
class LocalAttentionPatch:
    """
    Instance classifier attention for one instance, sized like its box.
    """

    instance_id: str
    class_id: int
    box: Box
    patch: np.ndarray

    def __post_init__(self) -> None:
        if self.patch.shape != (self.box.height, self.box.width):
            raise ValidationError(
                f"Patch of {self.instance_id} has shape {self.patch.shape}, box needs {(self.box.height, self.box.width)}"
            )
        if np.any(self.patch < 0) or not np.all(np.isfinite(self.patch)):
            raise ValidationError(f"Patch of {self.instance_id} must be finite and non-negative")

    def to_record(self) -> dict:
        return {
            "schema": "local_attention",
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "box": self.box.to_list(),
            "patch": self.patch.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict) -> "LocalAttentionPatch":
        try:
            return cls(
                instance_id=str(record["instance_id"]),
                class_id=int(record["class_id"]),
                box=Box.from_list(record["box"]),
                patch=np.asarray(record["patch"], dtype=np.float64),
            )
        except KeyError as e:
            raise ValidationError(f"Local attention record misses field {e}") from e


@dataclass(frozen=True)
class PixelLabelMap:
    """
    H x W labels: 0 background, c + 1 for class c, UNCERTAIN otherwise.
    """

    data: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValidationError(f"Label map must be 2-D, got shape {self.data.shape}")
        valid = (self.data <= self.num_classes) | (self.data == UNCERTAIN)
        if not np.all(valid):
            raise ValidationError("Label map holds values outside {0..C} and UNCERTAIN")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def uncertain_count(self) -> int:
        return int((self.data == UNCERTAIN).sum())


def active_channels(labels: ImageLabels) -> List[int]:
    """Background plus the channels of present classes."""
    return [0] + [c + 1 for c in labels.present()]


def instance_attention(
    patches: Sequence[LocalAttentionPatch],
    num_classes: int,
    width: int,
    height: int,
    labels: Optional[ImageLabels] = None,
) -> EvidenceStack:
    """
    Paint local attention patches into a C-channel map and normalize it.

    Args:
        patches: Local attention of surviving instances.
        num_classes: Number of classes C.
        width: Image width.
        height: Image height.
        labels: Present classes; defaults to the classes owning a patch.

    Returns:
        The normalized instance attention map A_l.
    """
    data = np.zeros((num_classes, height, width), dtype=np.float64)
    for p in patches:
        if not p.box.inside(width, height):
            raise ValidationError(f"Patch box {p.box.to_list()} lies outside {width}x{height}")
        if not 0 <= p.class_id < num_classes:
            raise ValidationError(f"Patch class {p.class_id} outside [0, {num_classes})")
        rows, cols = p.box.slices()
        data[p.class_id, rows, cols] += p.patch
    if labels is None:
        labels = ImageLabels.from_classes(num_classes, {p.class_id for p in patches})
    return normalize_heatmaps(EvidenceStack(data), labels)


def combine_attention(local: EvidenceStack, global_: EvidenceStack) -> EvidenceStack:
    """A = max(A_l, A_g), channel by channel."""
    if local.data.shape != global_.data.shape:
        raise ValidationError(
            f"Attention shapes differ: {local.data.shape} vs {global_.data.shape}"
        )
    return EvidenceStack(np.maximum(local.data, global_.data), has_background=global_.has_background)


def probability_map(
    heatmaps: EvidenceStack, attention: EvidenceStack, labels: ImageLabels
) -> EvidenceStack:
    """
    P = softmax(softmax(H) * softmax(A)), every softmax taken over the active
    channels only; inactive channels are exactly zero.

    Args:
        heatmaps: H with background channel.
        attention: A with background channel.
        labels: Image labels.

    Returns:
        (C+1)-channel probability map.
    """
    if not (heatmaps.has_background and attention.has_background):
        raise ValidationError("Probability map needs background channels on H and A")
    if heatmaps.data.shape != attention.data.shape:
        raise ValidationError(
            f"H shape {heatmaps.data.shape} differs from A shape {attention.data.shape}"
        )
    if heatmaps.num_classes != labels.num_classes:
        raise ValidationError(
            f"Stacks have {heatmaps.num_classes} classes, labels have {labels.num_classes}"
        )
    active = active_channels(labels)
    h_soft = softmax(heatmaps.data[active], axis=0)
    a_soft = softmax(attention.data[active], axis=0)
    data = np.zeros_like(heatmaps.data, dtype=np.float64)
    data[active] = softmax(h_soft * a_soft, axis=0)
    return EvidenceStack(data, has_background=True)


def label_with_uncertainty(
    P: EvidenceStack,
    tau_u: float = DEFAULT_TAU_U,
    labels: Optional[ImageLabels] = None,
    label_all: bool = False,
) -> PixelLabelMap:
    """
    Label pixels whose largest probability exceeds tau_u, mark the rest
    UNCERTAIN.

    Args:
        P: Probability map with background channel.
        tau_u: Confidence threshold, compared strictly.
        labels: Image labels restricting the argmax to active channels;
            defaults to every channel.
        label_all: Label every pixel with its argmax, ignoring tau_u.

    Returns:
        Pixel label map; ties go to the lowest channel.
    """
    if not P.has_background:
        raise ValidationError("Probability map needs a background channel")
    channels = active_channels(labels) if labels is not None else list(range(P.channels))
    probs = P.data[channels]
    best = np.argmax(probs, axis=0)
    peak = np.take_along_axis(probs, best[None], axis=0)[0]
    result = np.asarray(channels, dtype=np.uint16)[best]
    if not label_all:
        result[peak <= tau_u] = UNCERTAIN
    label_map = PixelLabelMap(result.astype(np.uint16), num_classes=P.num_classes)
    logger.debug(
        f"{label_map.uncertain_count()}/{result.size} pixels uncertain at tau_u={tau_u}"
    )
    return label_map
