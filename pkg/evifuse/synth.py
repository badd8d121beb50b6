"""
Synthetic scenes with controllable evidence.

Stands in for the external networks (detector scores, classifier attention,
metric-learning embeddings, instance classifier) so every stage can be
exercised and graded against known ground truth.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from evifuse.anchors import AnchorConfig, generate_anchors
from evifuse.errors import ValidationError
from evifuse.geometry import Box, boxes_to_array, iou, iou_matrix
from evifuse.heatmap import EvidenceStack, ImageLabels, ScoredProposal, normalize_heatmaps
from evifuse.instance import InstanceRecord
from evifuse.pixelfusion import LocalAttentionPatch
from evifuse.relabel import InstanceScores

logger = logging.getLogger(__name__)

MIN_OBJECT_SIZE = 4
PLACEMENT_ATTEMPTS = 200
SAME_CLASS_GAP = 2

STREAMS = {"scores": 1, "embeddings": 2, "instance_scores": 3}


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box


@dataclass(frozen=True)
class Scene:
    """
    Synthetic ground truth of one image. Later objects occlude earlier ones
    in the pixel map.
    """

    image_id: str
    width: int
    height: int
    num_classes: int
    objects: Tuple[SceneObject, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        for obj in self.objects:
            if not obj.box.inside(self.width, self.height):
                raise ValidationError(
                    f"Object box {obj.box.to_list()} lies outside {self.width}x{self.height}"
                )
            if not 0 <= obj.class_id < self.num_classes:
                raise ValidationError(f"Object class {obj.class_id} outside [0, {self.num_classes})")

    @property
    def labels(self) -> ImageLabels:
        return ImageLabels.from_classes(self.num_classes, {o.class_id for o in self.objects})

    def boxes_of(self, class_id: int) -> List[Box]:
        return [o.box for o in self.objects if o.class_id == class_id]

    def gt_map(self) -> np.ndarray:
        """H x W uint16 map, 0 background and c + 1 for class c."""
        data = np.zeros((self.height, self.width), dtype=np.uint16)
        for obj in self.objects:
            data[obj.box.slices()] = obj.class_id + 1
        return data

    def to_record(self) -> dict:
        return {
            "schema": "ground_truth",
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "objects": [{"class_id": o.class_id, "box": o.box.to_list()} for o in self.objects],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Scene":
        try:
            return cls(
                image_id=str(record["image_id"]),
                width=int(record["width"]),
                height=int(record["height"]),
                num_classes=int(record["num_classes"]),
                objects=tuple(
                    SceneObject(int(o["class_id"]), Box.from_list(o["box"]))
                    for o in record["objects"]
                ),
                seed=int(record.get("seed", 0)),
            )
        except KeyError as e:
            raise ValidationError(f"Ground truth record misses field {e}") from e


@dataclass(frozen=True)
class NoiseConfig:
    """
    Evidence degradation knobs.

    Attributes:
        score_noise: Std of the Gaussian added to proposal and classifier scores.
        attention_blur: Box blur radius in pixels.
        attention_shrink: Area fraction of each object rendered hot in the
            global attention.
        embedding_noise: Expected norm of the perturbation added to class
            centroids before normalization.
        outlier_rate: Probability that an embedding is replaced by an outlier.
        embedding_dim: Embedding dimensionality (raised to C + 1 if smaller).
        seed: Noise seed, combined with each scene's seed.
    """

    score_noise: float = 0.0
    attention_blur: int = 0
    attention_shrink: float = 1.0
    embedding_noise: float = 0.0
    outlier_rate: float = 0.0
    embedding_dim: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.score_noise, self.attention_blur, self.embedding_noise) < 0:
            raise ValidationError("Noise magnitudes must be >= 0")
        if not 0 < self.attention_shrink <= 1:
            raise ValidationError(f"attention_shrink must lie in (0, 1], got {self.attention_shrink}")
        if not 0 <= self.outlier_rate <= 1:
            raise ValidationError(f"outlier_rate must lie in [0, 1], got {self.outlier_rate}")
        if self.embedding_dim < 1 or self.seed < 0:
            raise ValidationError("embedding_dim must be >= 1 and seed >= 0")


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 20
    num_classes: int = 4
    width: int = 96
    height: int = 96
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.3
    max_size: float = 0.6
    max_overlap: float = 0.3
    distinct_classes: bool = True
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self) -> None:
        if self.num_images < 1 or self.num_classes < 1:
            raise ValidationError("Synthetic datasets need at least one image and one class")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValidationError(
                f"Invalid object count range [{self.min_objects}, {self.max_objects}]"
            )
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValidationError(f"Invalid object size range [{self.min_size}, {self.max_size}]")
        if not 0 <= self.max_overlap <= 1:
            raise ValidationError(f"max_overlap must lie in [0, 1], got {self.max_overlap}")


@dataclass(frozen=True)
class SyntheticImage:
    scene: Scene
    proposals: List[ScoredProposal]
    attention: EvidenceStack


def _rng(noise: NoiseConfig, scene: Scene, stream: str) -> np.random.Generator:
    return np.random.default_rng([noise.seed, scene.seed, STREAMS[stream]])


def _separated(a: Box, b: Box, gap: int) -> bool:
    return (
        a.x1 + gap <= b.x0
        or b.x1 + gap <= a.x0
        or a.y1 + gap <= b.y0
        or b.y1 + gap <= a.y0
    )


def generate_scene(
    seed: int,
    num_classes: int,
    width: int,
    height: int,
    object_count: Tuple[int, int] = (1, 3),
    size_range: Tuple[float, float] = (0.3, 0.6),
    max_overlap: float = 0.3,
    distinct_classes: bool = True,
    image_id: Optional[str] = None,
) -> Scene:
    """
    Draw a random scene, deterministic under ``seed``.

    Objects never overlap another object by more than ``max_overlap`` IoU;
    objects of the same class are kept apart by a small gap.

    Args:
        seed: Scene seed.
        num_classes: Number of classes C.
        width: Image width.
        height: Image height.
        object_count: Inclusive (min, max) number of objects.
        size_range: Object side lengths as fractions of the image short side.
        max_overlap: Largest IoU allowed between two objects.
        distinct_classes: Give every object of the scene its own class.
        image_id: Identifier, defaults to "scene_<seed>".

    Returns:
        A scene with at least one object.
    """
    lo, hi = object_count
    if lo < 1 or hi < lo:
        raise ValidationError(f"Invalid object count range {object_count}")
    if distinct_classes:
        if lo > num_classes:
            raise ValidationError(f"Cannot place {lo} objects of distinct classes among {num_classes}")
        hi = min(hi, num_classes)
    short_side = min(width, height)
    min_px = max(MIN_OBJECT_SIZE, int(round(size_range[0] * short_side)))
    max_px = min(short_side, max(min_px, int(round(size_range[1] * short_side))))
    if min_px > short_side:
        logger.error(f"{width}x{height} image cannot hold objects of {min_px} px")
        raise ValidationError(f"Image {width}x{height} is too small for objects of {min_px} px")

    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))
    classes = rng.choice(num_classes, size=count, replace=not distinct_classes)
    objects: List[SceneObject] = []
    for class_id in classes:
        for _ in range(PLACEMENT_ATTEMPTS):
            w = int(rng.integers(min_px, max_px + 1))
            h = int(rng.integers(min_px, max_px + 1))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            box = Box(x0, y0, x0 + w, y0 + h)
            if all(
                iou(box, o.box) <= max_overlap
                and (o.class_id != class_id or _separated(box, o.box, SAME_CLASS_GAP))
                for o in objects
            ):
                objects.append(SceneObject(int(class_id), box))
                break
        else:
            logger.debug(f"Scene {seed}: could not place an object of class {class_id}")
    return Scene(
        image_id=image_id if image_id is not None else f"scene_{seed}",
        width=width,
        height=height,
        num_classes=num_classes,
        objects=tuple(objects),
        seed=seed,
    )


def render_proposal_scores(
    scene: Scene, proposals: Sequence[Box], noise: NoiseConfig
) -> List[ScoredProposal]:
    """
    Score each proposal with its best IoU against ground truth of each class,
    plus clamped Gaussian noise.
    """
    boxes = boxes_to_array(proposals)
    scores = np.zeros((len(boxes), scene.num_classes), dtype=np.float64)
    for c in range(scene.num_classes):
        gts = scene.boxes_of(c)
        if gts and len(boxes):
            scores[:, c] = iou_matrix(boxes, boxes_to_array(gts)).max(axis=1)
    if noise.score_noise > 0:
        scores += _rng(noise, scene, "scores").normal(0.0, noise.score_noise, scores.shape)
    np.clip(scores, 0.0, 1.0, out=scores)
    return [ScoredProposal(box, tuple(row)) for box, row in zip(proposals, scores)]


def _hot_box(box: Box, shrink: float) -> Box:
    factor = math.sqrt(shrink)
    w = max(1, int(round(box.width * factor)))
    h = max(1, int(round(box.height * factor)))
    x0 = box.x0 + (box.width - w) // 2
    y0 = box.y0 + (box.height - h) // 2
    return Box(x0, y0, x0 + w, y0 + h)


def _blurred_indicator(boxes: Sequence[Box], width: int, height: int, radius: int) -> np.ndarray:
    indicator = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        indicator[box.slices()] = 1.0
    if radius > 0:
        indicator = uniform_filter(indicator, size=2 * radius + 1, mode="constant")
    return indicator


def render_attention(
    scene: Scene, noise: NoiseConfig
) -> Tuple[EvidenceStack, List[LocalAttentionPatch]]:
    """
    Render the global attention A_g and per-object local attention.

    Each object contributes a centered hot sub-box holding
    ``attention_shrink`` of its area, box-blurred; the global map keeps the
    per-class maximum over objects and is normalized.
    """
    hot = np.zeros((scene.num_classes, scene.height, scene.width), dtype=np.float64)
    patches = []
    for k, obj in enumerate(scene.objects):
        region = _blurred_indicator(
            [_hot_box(obj.box, noise.attention_shrink)],
            scene.width,
            scene.height,
            noise.attention_blur,
        )
        np.maximum(hot[obj.class_id], region, out=hot[obj.class_id])
        patches.append(
            LocalAttentionPatch(
                instance_id=f"{scene.image_id}:gt{k}",
                class_id=obj.class_id,
                box=obj.box,
                patch=np.clip(region[obj.box.slices()], 0.0, None),
            )
        )
    return normalize_heatmaps(EvidenceStack(hot), scene.labels), patches


def render_local_attention(
    scene: Scene, instances: Sequence[InstanceRecord], noise: NoiseConfig
) -> List[LocalAttentionPatch]:
    """
    Simulated instance classifier attention: the blurred indicator of the
    instance class's objects, cropped to the instance box.
    """
    maps: Dict[int, np.ndarray] = {}
    patches = []
    for instance in instances:
        if instance.class_id not in maps:
            maps[instance.class_id] = _blurred_indicator(
                scene.boxes_of(instance.class_id), scene.width, scene.height, noise.attention_blur
            )
        patches.append(
            LocalAttentionPatch(
                instance_id=instance.instance_id,
                class_id=instance.class_id,
                box=instance.box,
                patch=np.clip(maps[instance.class_id][instance.box.slices()], 0.0, None),
            )
        )
    return patches


def render_instance_scores(
    scene: Scene, instances: Sequence[InstanceRecord], noise: NoiseConfig
) -> List[InstanceScores]:
    """
    Simulated instance classifier: per class the best IoU between the
    instance box and that class's objects, plus clamped noise.
    """
    if not instances:
        return []
    boxes = boxes_to_array([i.box for i in instances])
    scores = np.zeros((len(instances), scene.num_classes), dtype=np.float64)
    for c in range(scene.num_classes):
        gts = scene.boxes_of(c)
        if gts:
            scores[:, c] = iou_matrix(boxes, boxes_to_array(gts)).max(axis=1)
    if noise.score_noise > 0:
        scores += _rng(noise, scene, "instance_scores").normal(0.0, noise.score_noise, scores.shape)
    np.clip(scores, 0.0, 1.0, out=scores)
    return [InstanceScores(i.instance_id, tuple(row)) for i, row in zip(instances, scores)]


def _outlier_vector(
    rng: np.random.Generator, dim: int, num_classes: int, lambda_d: float
) -> np.ndarray:
    # unit vector whose coordinate on every centroid axis is <= target,
    # i.e. at distance >= 2 * lambda_d from each centroid when feasible
    target = 1.0 - 2.0 * lambda_d ** 2
    alpha_min = max(0.0, -target * math.sqrt(num_classes))
    alpha = min(1.0, alpha_min * 1.01) if alpha_min <= 1.0 else 0.0
    extra = rng.normal(size=dim - num_classes)
    extra /= np.linalg.norm(extra)
    vector = np.concatenate(
        [-alpha * np.ones(num_classes) / math.sqrt(num_classes), math.sqrt(1 - alpha ** 2) * extra]
    )
    return vector / np.linalg.norm(vector)


def embedding_dim(noise: NoiseConfig, num_classes: int) -> int:
    return max(noise.embedding_dim, num_classes + 1)


def render_embeddings(
    instances: Sequence[InstanceRecord],
    scene: Scene,
    noise: NoiseConfig,
    lambda_d: float = 0.8,
) -> Tuple[List[Tuple[float, ...]], List[bool]]:
    """
    Simulated metric-learning embeddings.

    Inliers scatter around their class centroid (a coordinate axis); with
    probability ``outlier_rate`` an instance is replaced by a unit vector
    far from every centroid.

    Returns:
        Unit-norm embeddings and planted-outlier flags, aligned with instances.
    """
    dim = embedding_dim(noise, scene.num_classes)
    rng = _rng(noise, scene, "embeddings")
    vectors, flags = [], []
    for instance in instances:
        planted = bool(rng.random() < noise.outlier_rate)
        if planted:
            vector = _outlier_vector(rng, dim, scene.num_classes, lambda_d)
        else:
            vector = np.zeros(dim)
            vector[instance.class_id] = 1.0
            if noise.embedding_noise > 0:
                vector += rng.normal(0.0, noise.embedding_noise / math.sqrt(dim), dim)
            vector /= np.linalg.norm(vector)
        vectors.append(tuple(float(v) for v in vector))
        flags.append(planted)
    return vectors, flags


def render_image(scene: Scene, anchors: AnchorConfig, noise: NoiseConfig) -> SyntheticImage:
    """Anchor proposals scored against the scene plus its global attention."""
    proposals = render_proposal_scores(scene, generate_anchors(scene.width, scene.height, anchors), noise)
    attention, _ = render_attention(scene, noise)
    return SyntheticImage(scene=scene, proposals=proposals, attention=attention)


def generate_dataset(cfg: SynthConfig, seed: int = 0) -> List[Scene]:
    """Scenes image_0000 ... with seeds derived from ``seed``."""
    return [
        generate_scene(
            seed=seed * 100003 + index,
            num_classes=cfg.num_classes,
            width=cfg.width,
            height=cfg.height,
            object_count=(cfg.min_objects, cfg.max_objects),
            size_range=(cfg.min_size, cfg.max_size),
            max_overlap=cfg.max_overlap,
            distinct_classes=cfg.distinct_classes,
            image_id=f"image_{index:04d}",
        )
        for index in range(cfg.num_images)
    ]


def build_dataset(
    cfg: SynthConfig, seed: int = 0, anchors: Optional[AnchorConfig] = None
) -> List[SyntheticImage]:
    """Scenes of ``generate_dataset`` rendered with anchor proposals and attention."""
    anchors = anchors or AnchorConfig()
    images = [render_image(scene, anchors, cfg.noise) for scene in generate_dataset(cfg, seed)]
    logger.info(f"Rendered {len(images)} synthetic images with {sum(len(i.proposals) for i in images)} proposals")
    return images
