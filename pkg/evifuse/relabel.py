import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from evifuse.errors import ValidationError
from evifuse.instance import InstanceRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstanceScores:
    """
    Single-label instance classifier scores for one instance.
    """

    instance_id: str
    scores: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError(f"Scores of {self.instance_id} are not finite")

    def to_record(self) -> dict:
        return {
            "schema": "instance_scores",
            "instance_id": self.instance_id,
            "scores": list(self.scores),
        }

    @classmethod
    def from_record(cls, record: dict) -> "InstanceScores":
        try:
            return cls(str(record["instance_id"]), tuple(record["scores"]))
        except KeyError as e:
            raise ValidationError(f"Instance scores record misses field {e}") from e


def predicted_label(s: InstanceScores) -> int:
    """Argmax class, lowest index on ties."""
    if not s.scores:
        raise ValidationError(f"Empty score vector for {s.instance_id}")
    return int(np.argmax(s.scores))


def relabel_filter(
    instances: Sequence[InstanceRecord], scores: Sequence[InstanceScores]
) -> Tuple[List[InstanceRecord], List[InstanceRecord]]:
    """
    Discard every instance whose predicted class differs from its label.

    Kept instances are returned unchanged; discarded ones carry the reason
    "relabel_mismatch:<predicted class>".

    Args:
        instances: Instances to check.
        scores: Classifier scores, one per instance id.

    Returns:
        (kept, discarded) in input order.
    """
    by_id: Dict[str, InstanceScores] = {s.instance_id: s for s in scores}
    kept, discarded = [], []
    for instance in instances:
        if instance.instance_id not in by_id:
            logger.error(f"Missing classifier scores for {instance.instance_id}")
            raise ValidationError(f"Missing classifier scores for instance {instance.instance_id}")
        predicted = predicted_label(by_id[instance.instance_id])
        if predicted == instance.class_id:
            kept.append(instance)
        else:
            discarded.append(instance.removed(f"relabel_mismatch:{predicted}"))
    if discarded:
        logger.info(f"Re-labeling discarded {len(discarded)}/{len(instances)} instances")
    return kept, discarded
