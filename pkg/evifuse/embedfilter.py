import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from evifuse.errors import ValidationError
from evifuse.instance import InstanceRecord

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_D = 0.8


@dataclass(frozen=True)
class Embedding:
    """
    Unit-norm feature vector of an instance.
    """

    vector: Tuple[float, ...]

    def __post_init__(self) -> None:
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size == 0 or not np.all(np.isfinite(vector)):
            raise ValidationError("Embedding must be a finite non-empty vector")
        if abs(np.linalg.norm(vector) - 1.0) > 1e-6:
            raise ValidationError(
                f"Embedding must be L2-normalized, norm is {np.linalg.norm(vector):.6f}"
            )
        object.__setattr__(self, "vector", tuple(float(v) for v in vector))

    @classmethod
    def from_raw(cls, values: Sequence[float]) -> "Embedding":
        vector = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm == 0 or not np.isfinite(norm):
            raise ValidationError("Cannot normalize a zero or non-finite embedding")
        return cls(tuple(vector / norm))

    @property
    def dim(self) -> int:
        return len(self.vector)


@dataclass(frozen=True)
class DistanceMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValidationError(f"Distance matrix must be square, got {e.shape}")
        if np.any(e < 0) or np.any(np.diag(e) != 0) or not np.array_equal(e, e.T):
            raise ValidationError("Distance matrix must be symmetric, non-negative, zero-diagonal")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ClusterResult:
    densities: Tuple[int, ...]
    seed: int
    members: FrozenSet[int]
    outliers: FrozenSet[int]


@dataclass(frozen=True)
class TripletBatchConfig:
    """
    Mini-batch shape for triplet-loss training: b classes with a instances each.
    """

    b: int = 2
    a: int = 4
    seed: int = 0
    num_batches: int = 8

    def __post_init__(self) -> None:
        if self.b < 2 or self.a < 2:
            raise ValidationError(f"Triplet batches need b >= 2 and a >= 2, got b={self.b}, a={self.a}")
        if self.num_batches < 1:
            raise ValidationError(f"num_batches must be >= 1, got {self.num_batches}")


def pairwise_distances(embs: Sequence[Embedding]) -> DistanceMatrix:
    """Euclidean distances between unit-norm embeddings."""
    if not embs:
        return DistanceMatrix(np.zeros((0, 0)))
    dims = {e.dim for e in embs}
    if len(dims) != 1:
        logger.error(f"Embedding dimensions disagree: {sorted(dims)}")
        raise ValidationError(f"Embedding dimensions disagree: {sorted(dims)}")
    vectors = np.array([e.vector for e in embs], dtype=np.float64)
    if len(embs) == 1:
        return DistanceMatrix(np.zeros((1, 1)))
    return DistanceMatrix(squareform(pdist(vectors, metric="euclidean")))


def densities(D: DistanceMatrix, lambda_d: float = DEFAULT_LAMBDA_D) -> np.ndarray:
    """
    Count, for every instance, the other instances strictly closer than lambda_d.
    """
    close = D.entries < lambda_d
    np.fill_diagonal(close, False)
    return close.sum(axis=1).astype(np.int64)


def density_cluster(
    D: DistanceMatrix, lambda_d: float = DEFAULT_LAMBDA_D, n: Optional[int] = None
) -> ClusterResult:
    """
    Grow a single cluster from the densest instance.

    Instances are scanned once in descending density order (ties by index);
    an instance joins when its density exceeds n/4 and it lies closer than
    lambda_d to some current member. The seed is exempt from the density
    floor.

    Args:
        D: Distance matrix of one class.
        lambda_d: Distance cut-off.
        n: Class size N_c, defaults to the matrix size.

    Returns:
        Cluster membership and outliers.
    """
    n = D.n if n is None else n
    if D.n < 1:
        raise ValidationError("Cannot cluster an empty set")
    dens = densities(D, lambda_d)
    order = sorted(range(D.n), key=lambda i: (-dens[i], i))
    seed = order[0]
    members = [seed]
    outliers = []
    floor = n / 4.0
    for i in order[1:]:
        if dens[i] > floor and D.entries[i, members].min() < lambda_d:
            members.append(i)
        else:
            outliers.append(i)
    return ClusterResult(
        densities=tuple(int(d) for d in dens),
        seed=seed,
        members=frozenset(members),
        outliers=frozenset(outliers),
    )


def _group_by_class(instances: Sequence[InstanceRecord]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = defaultdict(list)
    for index, instance in enumerate(instances):
        groups[instance.class_id].append(index)
    return dict(sorted(groups.items()))


def cluster_by_class(
    instances: Sequence[InstanceRecord], lambda_d: float = DEFAULT_LAMBDA_D
) -> Dict[int, ClusterResult]:
    """
    Cluster each class independently. Member and outlier indices refer to
    positions inside the class group, in input order.
    """
    results = {}
    for class_id, indices in _group_by_class(instances).items():
        embs = []
        for i in indices:
            if instances[i].embedding is None:
                raise ValidationError(
                    f"Instance {instances[i].instance_id} has no embedding"
                )
            embs.append(Embedding(instances[i].embedding))
        results[class_id] = density_cluster(pairwise_distances(embs), lambda_d)
    return results


def filter_instances(
    instances: Sequence[InstanceRecord], lambda_d: float = DEFAULT_LAMBDA_D
) -> Tuple[List[InstanceRecord], List[InstanceRecord]]:
    """
    Remove per-class outliers by density clustering of the instance embeddings.

    Returns:
        (kept, removed) in input order; removed instances carry the reason
        "cluster_outlier".
    """
    if not instances:
        return [], []
    groups = _group_by_class(instances)
    clusters = cluster_by_class(instances, lambda_d)
    outlier_positions = set()
    for class_id, indices in groups.items():
        result = clusters[class_id]
        outlier_positions.update(indices[j] for j in result.outliers)
        logger.info(
            f"Class {class_id}: {len(result.members)}/{len(indices)} instances kept, seed density {result.densities[result.seed]}"
        )
    kept, removed = [], []
    for index, instance in enumerate(instances):
        if index in outlier_positions:
            removed.append(instance.removed("cluster_outlier"))
        else:
            kept.append(instance)
    return kept, removed


def compose_triplet_batches(
    instances: Sequence[InstanceRecord], cfg: TripletBatchConfig
) -> List[List[int]]:
    """
    Sample mini-batches of b random classes with a random instances each.

    Classes with fewer than a instances are sampled with replacement.

    Returns:
        One list of instance indices per batch, grouped class by class.
    """
    groups = _group_by_class(instances)
    classes = list(groups)
    if len(classes) < cfg.b:
        logger.error(f"Only {len(classes)} non-empty classes for batches of {cfg.b}")
        raise ValidationError(
            f"Need at least {cfg.b} non-empty classes, found {len(classes)}"
        )
    rng = np.random.default_rng(cfg.seed)
    batches = []
    for _ in range(cfg.num_batches):
        batch: List[int] = []
        for class_id in rng.choice(classes, size=cfg.b, replace=False):
            pool = groups[int(class_id)]
            picks = rng.choice(pool, size=cfg.a, replace=len(pool) < cfg.a)
            batch.extend(int(i) for i in picks)
        batches.append(batch)
    return batches


def attach_embeddings(
    instances: Sequence[InstanceRecord], embeddings: Dict[str, Sequence[float]]
) -> List[InstanceRecord]:
    """Attach unit-norm embeddings looked up by instance id."""
    attached = []
    for instance in instances:
        if instance.instance_id not in embeddings:
            raise ValidationError(f"No embedding for instance {instance.instance_id}")
        vector = Embedding.from_raw(embeddings[instance.instance_id]).vector
        attached.append(replace(instance, embedding=vector))
    return attached
