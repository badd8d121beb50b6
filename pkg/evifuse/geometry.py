import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from evifuse.errors import ValidationError

logger = logging.getLogger(__name__)

# 4-connectivity: diagonal neighbours are not connected
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, order=True)
class Box:
    """
    Half-open integer pixel rectangle [x0, x1) x [y0, y1).
    """

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if min(self.x0, self.y0) < 0 or self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ValidationError(
                f"Invalid box [{self.x0}, {self.y0}, {self.x1}, {self.y1}]"
            )

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def to_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "Box":
        if len(values) != 4:
            raise ValidationError(f"A box needs 4 coordinates, got {list(values)}")
        return cls(*(int(v) for v in values))

    def inside(self, width: int, height: int) -> bool:
        """Check that the box lies fully inside a width x height image."""
        return self.x1 <= width and self.y1 <= height

    def slices(self) -> Tuple[slice, slice]:
        """Row and column slices selecting the box from an H x W array."""
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.shape != (self.height, self.width):
            raise ValidationError(
                f"Mask data shape {self.data.shape} does not match {self.height}x{self.width}"
            )

    @classmethod
    def from_array(cls, array: np.ndarray) -> "BinaryMask":
        array = np.asarray(array, dtype=bool)
        return cls(width=array.shape[1], height=array.shape[0], data=array)


@dataclass(frozen=True)
class Component:
    """
    A 4-connected region of true pixels.

    ``runs`` is the run-length encoding of the region: one ``(y, x_start,
    x_end)`` triple per horizontal run, x_end exclusive, sorted by row then
    column.
    """

    runs: Tuple[Tuple[int, int, int], ...]
    box: Box
    pixel_count: int

    def to_mask(self, width: int, height: int) -> BinaryMask:
        data = np.zeros((height, width), dtype=bool)
        for y, x_start, x_end in self.runs:
            data[y, x_start:x_end] = True
        return BinaryMask(width=width, height=height, data=data)


def area(b: Box) -> int:
    return (b.x1 - b.x0) * (b.y1 - b.y0)


def intersection(a: Box, b: Box) -> Optional[Box]:
    """
    Intersection of two boxes.

    Returns:
        The common rectangle, or None when the boxes do not overlap.
    """
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x0 >= x1 or y0 >= y1:
        return None
    return Box(x0, y0, x1, y1)


def union_box(a: Box, b: Box) -> Box:
    """Smallest box enclosing both boxes."""
    return Box(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def contains(outer: Box, inner: Box) -> bool:
    return (
        outer.x0 <= inner.x0
        and outer.y0 <= inner.y0
        and outer.x1 >= inner.x1
        and outer.y1 >= inner.y1
    )


def _intersection_area(a: Box, b: Box) -> int:
    common = intersection(a, b)
    return area(common) if common is not None else 0


def iou(a: Box, b: Box) -> float:
    inter = _intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def coverage(a: Box, h: Box) -> float:
    """Fraction of ``h`` covered by ``a``."""
    return _intersection_area(a, h) / area(h)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.to_list() for b in boxes], dtype=np.int64)


def iou_matrix(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two sets of boxes given as (n, 4) and (m, 4) arrays.

    Returns:
        (n, m) float array.
    """
    first = np.asarray(first, dtype=np.int64).reshape(-1, 4)
    second = np.asarray(second, dtype=np.int64).reshape(-1, 4)
    ix0 = np.maximum(first[:, None, 0], second[None, :, 0])
    iy0 = np.maximum(first[:, None, 1], second[None, :, 1])
    ix1 = np.minimum(first[:, None, 2], second[None, :, 2])
    iy1 = np.minimum(first[:, None, 3], second[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_first = (first[:, 2] - first[:, 0]) * (first[:, 3] - first[:, 1])
    area_second = (second[:, 2] - second[:, 0]) * (second[:, 3] - second[:, 1])
    union = area_first[:, None] + area_second[None, :] - inter
    result = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=result, where=union > 0)
    return result


def _encode_runs(region: np.ndarray, row_offset: int, col_offset: int):
    runs = []
    for row_index, row in enumerate(region):
        padded = np.concatenate(([0], row.astype(np.int8), [0]))
        edges = np.flatnonzero(np.diff(padded))
        for start, end in zip(edges[::2], edges[1::2]):
            runs.append(
                (row_index + row_offset, int(start) + col_offset, int(end) + col_offset)
            )
    return tuple(runs)


def connected_components(m: BinaryMask) -> List[Component]:
    """
    Extract maximal 4-connected regions of true pixels.

    Args:
        m: Binary mask.

    Returns:
        Components ordered by the (min y, min x) corner of their bounding box.
    """
    labeled, count = ndimage.label(m.data, structure=FOUR_CONNECTED)
    if count == 0:
        return []
    components = []
    for label_index, found in enumerate(ndimage.find_objects(labeled), start=1):
        rows, cols = found
        region = labeled[found] == label_index
        components.append(
            Component(
                runs=_encode_runs(region, rows.start, cols.start),
                box=Box(cols.start, rows.start, cols.stop, rows.stop),
                pixel_count=int(region.sum()),
            )
        )
    # stable sort keeps raster order of first pixel for equal corners
    components.sort(key=lambda c: (c.box.y0, c.box.x0))
    return components
