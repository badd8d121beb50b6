import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from evifuse.errors import ValidationError
from evifuse.geometry import Box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredProposal:
    """
    A proposal window with the detector's class probability vector.
    """

    box: Box
    scores: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValidationError(f"Proposal scores must lie in [0, 1]: {self.scores}")


@dataclass(frozen=True)
class ImageLabels:
    """
    Image level label vector y: y[c] == 1 iff class c is present.
    """

    y: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "y", tuple(int(v) for v in self.y))
        if any(v not in (0, 1) for v in self.y):
            raise ValidationError(f"Image labels must be binary: {self.y}")

    @classmethod
    def from_classes(cls, num_classes: int, classes: Iterable[int]) -> "ImageLabels":
        y = [0] * num_classes
        for c in classes:
            if not 0 <= c < num_classes:
                raise ValidationError(f"Class {c} outside [0, {num_classes})")
            y[c] = 1
        return cls(tuple(y))

    @property
    def num_classes(self) -> int:
        return len(self.y)

    @property
    def K(self) -> int:
        return sum(self.y)

    def present(self) -> List[int]:
        return [c for c, v in enumerate(self.y) if v == 1]

    def require_present(self) -> None:
        if self.K < 1:
            raise ValidationError("An image entering the pipeline needs at least one class")


@dataclass(frozen=True)
class EvidenceStack:
    """
    Dense channel-major evidence: heatmaps, attention or probability maps.

    ``data`` has shape (channels, height, width). When ``has_background`` is
    set, channel 0 is background and class c lives in channel c + 1.
    """

    data: np.ndarray
    has_background: bool = False

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValidationError(f"Evidence stack must be 3-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("Evidence stack contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def num_classes(self) -> int:
        return self.channels - 1 if self.has_background else self.channels

    def class_channel(self, class_id: int) -> np.ndarray:
        return self.data[class_id + 1 if self.has_background else class_id]

    @classmethod
    def zeros(cls, channels: int, width: int, height: int) -> "EvidenceStack":
        return cls(np.zeros((channels, height, width), dtype=np.float64))


def _check_labels(stack: EvidenceStack, labels: ImageLabels) -> None:
    if stack.num_classes != labels.num_classes:
        raise ValidationError(
            f"Stack has {stack.num_classes} classes but labels have {labels.num_classes}"
        )


def accumulate_heatmaps(
    proposals: Sequence[ScoredProposal], num_classes: int, width: int, height: int
) -> EvidenceStack:
    """
    Add every proposal's class scores to all pixels of its window.

    A per-channel difference array receives four signed corner updates per
    proposal and two prefix sums turn it into the raw heatmaps, so the cost
    does not depend on window sizes.

    Args:
        proposals: Scored proposals, boxes inside the image.
        num_classes: Number of classes C.
        width: Image width.
        height: Image height.

    Returns:
        Raw C-channel stack.
    """
    if not proposals:
        return EvidenceStack.zeros(num_classes, width, height)

    boxes = np.array([p.box.to_list() for p in proposals], dtype=np.int64)
    outside = (boxes[:, 2] > width) | (boxes[:, 3] > height)
    if outside.any():
        bad = proposals[int(np.flatnonzero(outside)[0])].box
        logger.error(f"{int(outside.sum())} proposals fall outside {width}x{height}")
        raise ValidationError(f"Proposal {bad.to_list()} lies outside the {width}x{height} image")
    scores = np.array([p.scores for p in proposals], dtype=np.float64)
    if scores.shape[1] != num_classes:
        raise ValidationError(
            f"Proposals carry {scores.shape[1]} scores, expected {num_classes}"
        )

    stride = width + 1
    size = (height + 1) * stride
    x0, y0, x1, y1 = boxes.T
    corners = (
        (y0 * stride + x0, 1.0),
        (y0 * stride + x1, -1.0),
        (y1 * stride + x0, -1.0),
        (y1 * stride + x1, 1.0),
    )
    data = np.empty((num_classes, height, width), dtype=np.float64)
    for c in range(num_classes):
        diff = np.zeros(size, dtype=np.float64)
        for flat, sign in corners:
            diff += sign * np.bincount(flat, weights=scores[:, c], minlength=size)
        summed = diff.reshape(height + 1, stride).cumsum(axis=0).cumsum(axis=1)
        data[c] = summed[:height, :width]
    logger.debug(f"Accumulated {len(proposals)} proposals into {num_classes} heatmaps")
    return EvidenceStack(data)


def normalize_heatmaps(raw: EvidenceStack, labels: ImageLabels) -> EvidenceStack:
    """
    Min-shift and max-divide each present class channel into [0, 1].

    Channels of absent classes, and constant channels, become all zeros.
    """
    _check_labels(raw, labels)
    data = np.zeros_like(raw.data, dtype=np.float64)
    for c in labels.present():
        channel = raw.class_channel(c)
        shifted = channel - channel.min()
        peak = shifted.max()
        if peak > 0:
            data[c + 1 if raw.has_background else c] = shifted / peak
    return EvidenceStack(data, has_background=raw.has_background)


def mask_absent(stack: EvidenceStack, labels: ImageLabels) -> EvidenceStack:
    """Zero the channels of classes absent from the image."""
    _check_labels(stack, labels)
    data = stack.data.copy()
    for c, present in enumerate(labels.y):
        if not present:
            data[c + 1 if stack.has_background else c] = 0.0
    return EvidenceStack(data, has_background=stack.has_background)


def background_channel(stack: EvidenceStack, labels: ImageLabels) -> EvidenceStack:
    """
    Prepend the background channel max(0, 1 - sum of present class channels).
    """
    if stack.has_background:
        raise ValidationError("Stack already carries a background channel")
    _check_labels(stack, labels)
    present = labels.present()
    total = stack.data[present].sum(axis=0) if present else np.zeros(stack.data.shape[1:])
    background = np.maximum(0.0, 1.0 - total)
    return EvidenceStack(
        np.concatenate([background[None], stack.data], axis=0), has_background=True
    )
