from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Tuple

from evifuse.errors import ValidationError
from evifuse.geometry import Box


@dataclass(frozen=True)
class InstanceRecord:
    """
    A harvested object instance carrying exactly one class label.

    Attributes:
        instance_id: Identifier unique within a run.
        image_id: Image the instance was found in.
        box: Instance bounding box.
        class_id: 0-based class index.
        provenance: Stage that produced the instance ("fusion", "harvest").
        reason: Why the instance was removed, None while it is kept.
        embedding: Optional metric-learning feature vector.
        scores: Optional instance classifier scores.
    """

    instance_id: str
    image_id: str
    box: Box
    class_id: int
    provenance: str = "fusion"
    reason: Optional[str] = None
    embedding: Optional[Tuple[float, ...]] = None
    scores: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValidationError(f"Instance {self.instance_id} has class {self.class_id}")
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(v) for v in self.scores))

    def removed(self, reason: str) -> "InstanceRecord":
        return replace(self, reason=reason)

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "schema": "instance",
            "instance_id": self.instance_id,
            "image_id": self.image_id,
            "box": self.box.to_list(),
            "class_id": self.class_id,
            "provenance": self.provenance,
        }
        if self.reason is not None:
            record["reason"] = self.reason
        if self.embedding is not None:
            record["embedding"] = list(self.embedding)
        if self.scores is not None:
            record["scores"] = list(self.scores)
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "InstanceRecord":
        try:
            return cls(
                instance_id=str(record["instance_id"]),
                image_id=str(record["image_id"]),
                box=Box.from_list(record["box"]),
                class_id=int(record["class_id"]),
                provenance=record.get("provenance", "fusion"),
                reason=record.get("reason"),
                embedding=record.get("embedding"),
                scores=record.get("scores"),
            )
        except KeyError as e:
            raise ValidationError(f"Instance record misses field {e}") from e
