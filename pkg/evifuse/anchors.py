import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from evifuse.errors import ValidationError
from evifuse.geometry import Box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnchorConfig:
    """
    Sliding anchor window settings.

    Attributes:
        stride: Distance in pixels between neighbouring anchor centers.
        scale_fractions: Window scales as fractions of the image short side.
        aspect_ratios: Height/width ratios; shapes preserve the scale's area.
    """

    stride: int = 8
    scale_fractions: Tuple[float, ...] = (0.125, 0.25, 0.5, 1.0)
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_fractions", tuple(self.scale_fractions))
        object.__setattr__(self, "aspect_ratios", tuple(self.aspect_ratios))
        if self.stride < 1:
            raise ValidationError(f"Anchor stride must be >= 1, got {self.stride}")
        if not self.scale_fractions or any(
            not 0 < f <= 1 for f in self.scale_fractions
        ):
            raise ValidationError(
                f"Scale fractions must lie in (0, 1], got {self.scale_fractions}"
            )
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValidationError(
                f"Aspect ratios must be positive, got {self.aspect_ratios}"
            )


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def anchor_shapes(width: int, height: int, cfg: AnchorConfig) -> List[Tuple[int, int]]:
    """
    Window (w, h) shapes in scale-major, ratio-minor order. Halves round up.
    """
    short_side = min(width, height)
    shapes = []
    for fraction in cfg.scale_fractions:
        scale = round_half_up(fraction * short_side)
        for ratio in cfg.aspect_ratios:
            shapes.append(
                (round_half_up(scale / math.sqrt(ratio)), round_half_up(scale * math.sqrt(ratio)))
            )
    return shapes


def generate_anchor_array(width: int, height: int, cfg: AnchorConfig) -> np.ndarray:
    """
    Vectorized anchor generation.

    Returns:
        (n, 4) int64 array of [x0, y0, x1, y1] rows, location-major (rows of
        the grid, then columns), then scale, then ratio. Windows crossing the
        image border are dropped, never clipped.
    """
    if width < cfg.stride or height < cfg.stride:
        logger.error(f"Image {width}x{height} is smaller than stride {cfg.stride}")
        raise ValidationError(
            f"Image {width}x{height} is smaller than the anchor stride {cfg.stride}"
        )
    cols = width // cfg.stride
    rows = height // cfg.stride
    centers_x = (np.arange(cols) + 0.5) * cfg.stride
    centers_y = (np.arange(rows) + 0.5) * cfg.stride
    cy, cx = np.meshgrid(centers_y, centers_x, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)

    shapes = np.array(anchor_shapes(width, height, cfg), dtype=np.int64)
    w = shapes[None, :, 0]
    h = shapes[None, :, 1]
    x0 = np.floor(cx - w / 2.0).astype(np.int64)
    y0 = np.floor(cy - h / 2.0).astype(np.int64)
    boxes = np.stack(
        np.broadcast_arrays(x0, y0, x0 + w, y0 + h), axis=-1
    ).reshape(-1, 4)

    keep = (
        (boxes[:, 0] >= 0)
        & (boxes[:, 1] >= 0)
        & (boxes[:, 2] <= width)
        & (boxes[:, 3] <= height)
        & (boxes[:, 2] > boxes[:, 0])
        & (boxes[:, 3] > boxes[:, 1])
    )
    logger.debug(
        f"{rows * cols} anchor locations, {int(keep.sum())}/{len(boxes)} windows inside {width}x{height}"
    )
    return boxes[keep]


def generate_anchors(width: int, height: int, cfg: AnchorConfig) -> List[Box]:
    return [Box(*(int(v) for v in row)) for row in generate_anchor_array(width, height, cfg)]
