"""
EVT tensor files.

Layout: magic "EVT1", u8 dtype code, u8 rank, two zero padding bytes,
rank x u32 little-endian dimensions, then the row-major little-endian
payload. Stacks are stored channel, height, width.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from evifuse.errors import FormatError, InputMissingError
from evifuse.heatmap import EvidenceStack
from evifuse.pixelfusion import PixelLabelMap
from evifuse.records import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sBBH")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
CODES = {np.dtype("<f4"): 0, np.dtype("<u2"): 1}
MAX_RANK = 8
MAX_ELEMENTS = 2 ** 31


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize a float32 or uint16 array (other floats are cast to float32)."""
    array = np.asarray(array)
    if array.dtype.kind == "f":
        array = array.astype("<f4", copy=False)
    elif array.dtype == np.uint16:
        array = array.astype("<u2", copy=False)
    else:
        raise FormatError(f"Unsupported tensor dtype {array.dtype}")
    if not 1 <= array.ndim <= MAX_RANK:
        raise FormatError(f"Unsupported tensor rank {array.ndim}")
    if any(d > 0xFFFFFFFF for d in array.shape):
        raise FormatError(f"Dimension overflow in shape {array.shape}")
    header = HEADER.pack(MAGIC, CODES[array.dtype], array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + dims + np.ascontiguousarray(array).tobytes()


def decode_tensor(payload: bytes, path: Union[str, Path, None] = None) -> np.ndarray:
    """
    Parse EVT bytes.

    Raises:
        FormatError: On bad magic, unknown dtype, non-zero padding, truncated
            or trailing bytes, or dimensions too large to address.
    """
    if len(payload) < HEADER.size:
        raise FormatError("Tensor file shorter than its header", path)
    magic, code, rank, padding = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", path)
    if code not in DTYPES:
        raise FormatError(f"Unknown dtype code {code}", path)
    if padding != 0:
        raise FormatError("Non-zero header padding", path)
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"Unsupported tensor rank {rank}", path)
    dims_end = HEADER.size + 4 * rank
    if len(payload) < dims_end:
        raise FormatError("Tensor file truncated inside its dimensions", path)
    shape = struct.unpack_from(f"<{rank}I", payload, HEADER.size)
    count = 1
    for d in shape:
        count *= d
    if count > MAX_ELEMENTS:
        raise FormatError(f"Dimension overflow: shape {shape}", path)
    dtype = DTYPES[code]
    expected = dims_end + count * dtype.itemsize
    if len(payload) < expected:
        raise FormatError(f"Tensor payload truncated: {len(payload)} of {expected} bytes", path)
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after tensor payload", path)
    return np.frombuffer(payload, dtype=dtype, count=count, offset=dims_end).reshape(shape).copy()


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        logger.error(f"Tensor file {path} not found")
        raise InputMissingError(f"Tensor file {path} not found", path)
    return decode_tensor(path.read_bytes(), path)


def write_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    atomic_write(path, encode_tensor(array))


def read_stack(path: Union[str, Path], has_background: bool = False) -> EvidenceStack:
    """Read a C x H x W (or (C+1) x H x W) float stack."""
    data = read_tensor(path)
    if data.ndim != 3 or data.dtype != DTYPES[0]:
        raise FormatError(f"Expected a rank-3 float tensor, got {data.dtype} {data.shape}", path)
    return EvidenceStack(data.astype(np.float64), has_background=has_background)


def write_stack(path: Union[str, Path], stack: EvidenceStack) -> None:
    write_tensor(path, stack.data.astype(np.float32))


def read_label_map(path: Union[str, Path], num_classes: int) -> PixelLabelMap:
    data = read_tensor(path)
    if data.ndim != 2 or data.dtype != DTYPES[1]:
        raise FormatError(f"Expected a rank-2 u16 tensor, got {data.dtype} {data.shape}", path)
    return PixelLabelMap(data.astype(np.uint16), num_classes=num_classes)


def write_label_map(path: Union[str, Path], label_map: PixelLabelMap) -> None:
    write_tensor(path, label_map.data.astype(np.uint16))
