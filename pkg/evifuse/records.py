"""
Line-delimited JSON records, JSON documents and PNG previews.

Every JSONL line carries a ``schema`` field naming its record type.
"""
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
from PIL import Image

from evifuse.errors import FormatError, InputMissingError, ValidationError
from evifuse.geometry import Box
from evifuse.heatmap import ImageLabels, ScoredProposal
from evifuse.pixelfusion import UNCERTAIN, PixelLabelMap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
UNCERTAIN_INDEX = 255


def atomic_write(path: PathLike, data: Union[bytes, str]) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    lines = []
    for record in records:
        if "schema" not in record:
            raise ValidationError(f"Record without schema written to {path}")
        lines.append(json.dumps(record, allow_nan=False))
    atomic_write(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: PathLike, schema: str) -> List[Dict[str, Any]]:
    """
    Read a JSONL file whose every line must carry the given schema.

    Raises:
        InputMissingError: The file does not exist.
        FormatError: A line is not a JSON object of the expected schema.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Input file {path} not found")
        raise InputMissingError(f"Input file {path} not found", path)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"Line {number}: invalid JSON ({e.msg})", path) from e
            if not isinstance(record, dict):
                raise FormatError(f"Line {number}: expected a JSON object", path)
            if record.get("schema") != schema:
                raise FormatError(
                    f"Line {number}: schema {record.get('schema')!r}, expected {schema!r}", path
                )
            records.append(record)
    return records


def write_json(path: PathLike, document: Any) -> None:
    atomic_write(
        path,
        json.dumps(document, indent=4, separators=(",", ": "), sort_keys=True, allow_nan=False) + "\n",
    )


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        logger.error(f"Input file {path} not found")
        raise InputMissingError(f"Input file {path} not found", path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON at line {e.lineno}: {e.msg}", path) from e


@dataclass(frozen=True)
class ImageInfo:
    """One line of images.jsonl: size and image-level labels."""

    image_id: str
    width: int
    height: int
    labels: ImageLabels

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"Image {self.image_id} has size {self.width}x{self.height}")

    def to_record(self) -> Dict[str, Any]:
        return {
            "schema": "image",
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "labels": list(self.labels.y),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "ImageInfo":
        try:
            return cls(
                image_id=str(record["image_id"]),
                width=int(record["width"]),
                height=int(record["height"]),
                labels=ImageLabels(tuple(record["labels"])),
            )
        except KeyError as e:
            raise ValidationError(f"Image record misses field {e}") from e


def box_record(box: Box) -> Dict[str, Any]:
    return {"schema": "box", "box": box.to_list()}


def proposal_record(proposal: ScoredProposal) -> Dict[str, Any]:
    return {"schema": "scored_proposal", "box": proposal.box.to_list(), "scores": list(proposal.scores)}


def proposal_from_record(record: Dict[str, Any]) -> ScoredProposal:
    try:
        return ScoredProposal(Box.from_list(record["box"]), tuple(record["scores"]))
    except KeyError as e:
        raise ValidationError(f"Proposal record misses field {e}") from e


def embedding_record(instance_id: str, vector: Sequence[float]) -> Dict[str, Any]:
    return {"schema": "embedding", "instance_id": instance_id, "vector": [float(v) for v in vector]}


def embeddings_from_records(records: Iterable[Dict[str, Any]]) -> Dict[str, List[float]]:
    try:
        return {str(r["instance_id"]): r["vector"] for r in records}
    except KeyError as e:
        raise ValidationError(f"Embedding record misses field {e}") from e


def triplet_batch_record(index: int, instance_ids: Sequence[str]) -> Dict[str, Any]:
    return {"schema": "triplet_batch", "batch": index, "instance_ids": list(instance_ids)}


def palette(num_classes: int) -> List[int]:
    """
    Flat RGB palette: index 0 black, classes in the usual segmentation
    colour map, index 255 (uncertain) white.
    """
    colours = [0] * (256 * 3)
    for index in range(1, min(num_classes + 1, UNCERTAIN_INDEX)):
        r = g = b = 0
        value = index
        for shift in range(7, -1, -1):
            r |= (value & 1) << shift
            g |= ((value >> 1) & 1) << shift
            b |= ((value >> 2) & 1) << shift
            value >>= 3
        colours[3 * index: 3 * index + 3] = [r, g, b]
    colours[3 * UNCERTAIN_INDEX: 3 * UNCERTAIN_INDEX + 3] = [255, 255, 255]
    return colours


def preview_image(label_map: PixelLabelMap) -> Image.Image:
    if label_map.num_classes >= UNCERTAIN_INDEX:
        raise ValidationError(f"Previews support at most {UNCERTAIN_INDEX - 1} classes")
    indices = np.where(label_map.data == UNCERTAIN, UNCERTAIN_INDEX, label_map.data).astype(np.uint8)
    image = Image.fromarray(indices, mode="P")
    image.putpalette(palette(label_map.num_classes))
    return image


def write_preview(path: PathLike, label_map: PixelLabelMap) -> None:
    """Save a palette PNG of a label map; uncertain pixels are white."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    preview_image(label_map).save(tmp, format="PNG")
    os.replace(tmp, path)
