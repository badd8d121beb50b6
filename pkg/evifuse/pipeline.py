"""
Stage driver: reads the run directory layout, runs one module operation per
stage and writes the stage outputs plus report.json.
"""
import logging
import multiprocessing as mp
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from evifuse.anchors import AnchorConfig, generate_anchors
from evifuse.config import PipelineConfig, PixelConfig
from evifuse.embedfilter import compose_triplet_batches, attach_embeddings, filter_instances
from evifuse.errors import InputMissingError, ValidationError
from evifuse.fusion import FusionThresholds, fuse_image
from evifuse.heatmap import accumulate_heatmaps, background_channel, mask_absent, normalize_heatmaps
from evifuse.instance import InstanceRecord
from evifuse.metrics import (
    Detection,
    GroundTruth,
    MetricsReport,
    boxes_from_labelmap,
    corloc,
    harvest_detections,
    miou_dataset,
    multilabel_prf,
    voc_map,
)
from evifuse.pixelfusion import (
    LocalAttentionPatch,
    combine_attention,
    instance_attention,
    label_with_uncertainty,
    probability_map,
)
from evifuse.records import (
    ImageInfo,
    atomic_write,
    box_record,
    embedding_record,
    embeddings_from_records,
    proposal_from_record,
    proposal_record,
    read_jsonl,
    triplet_batch_record,
    write_json,
    write_jsonl,
    write_preview,
)
from evifuse.relabel import InstanceScores, relabel_filter
from evifuse.synth import (
    NoiseConfig,
    Scene,
    generate_dataset,
    render_embeddings,
    render_image,
    render_instance_scores,
    render_local_attention,
)
from evifuse.tensor_io import read_label_map, read_stack, write_label_map, write_stack, write_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
T = TypeVar("T")

STAGES = ("anchors", "synth", "heatmap", "fuse", "cluster", "relabel", "pixels", "harvest", "eval", "all")
CHAINED_STAGES = ("heatmap", "fuse", "cluster", "relabel", "pixels", "harvest")

IMAGES = "images.jsonl"
GROUND_TRUTH = "ground_truth.jsonl"
INSTANCES = "instances.jsonl"
EMBEDDINGS = "embeddings.jsonl"
CLUSTERED = "clustered.jsonl"
OUTLIERS = "outliers.jsonl"
TRIPLET_BATCHES = "triplet_batches.jsonl"
INSTANCE_SCORES = "instance_scores.jsonl"
RELABELED = "relabeled.jsonl"
DISCARDED = "discarded.jsonl"
LOCAL_ATTENTION = "local_attention.jsonl"
HARVESTED = "harvested.jsonl"
HARVEST_SCORES = "harvest_scores.jsonl"
IMAGE_SCORES = "image_scores.jsonl"
REPORT = "report.json"


class Workspace:
    """
    Input and output directories of a run. Inputs are looked up in the
    output directory first so stages chain in one directory.
    """

    def __init__(self, in_dir: Optional[PathLike], out_dir: PathLike) -> None:
        self.in_dir = Path(in_dir) if in_dir is not None else None
        self.out_dir = Path(out_dir)

    def optional(self, relative: str) -> Optional[Path]:
        for root in (self.out_dir, self.in_dir):
            if root is not None and (root / relative).is_file():
                return root / relative
        return None

    def find(self, relative: str) -> Path:
        path = self.optional(relative)
        if path is None:
            missing = (self.in_dir or self.out_dir) / relative
            logger.error(f"Required input {missing} not found")
            raise InputMissingError(f"Required input {missing} not found", missing)
        return path

    def output(self, relative: str) -> Path:
        path = self.out_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def images(self) -> List[ImageInfo]:
        images = [ImageInfo.from_record(r) for r in read_jsonl(self.find(IMAGES), "image")]
        ids = [info.image_id for info in images]
        if len(set(ids)) != len(ids):
            raise ValidationError("Duplicate image ids in images.jsonl", self.find(IMAGES))
        return images

    def scenes(self) -> Dict[str, Scene]:
        return {
            scene.image_id: scene
            for scene in (Scene.from_record(r) for r in read_jsonl(self.find(GROUND_TRUTH), "ground_truth"))
        }

    def instances(self, relative: str) -> List[InstanceRecord]:
        return [InstanceRecord.from_record(r) for r in read_jsonl(self.find(relative), "instance")]


@dataclass
class StageReport:
    stage: str
    counts: Dict[str, Any] = field(default_factory=dict)
    warnings: Counter = field(default_factory=Counter)
    seconds: float = 0.0

    def to_dict(self, timings: bool = False) -> Dict[str, Any]:
        record = {
            "stage": self.stage,
            "counts": self.counts,
            "warnings": dict(sorted(self.warnings.items())),
        }
        if timings:
            record["seconds"] = round(self.seconds, 3)
        return record


@dataclass
class RunReport:
    """Reports of every stage a command ran."""

    command: str
    stages: List[StageReport] = field(default_factory=list)
    status: str = "ok"

    @property
    def dropped_instances(self) -> int:
        """Re-labeling discards plus fused boxes lost to fusion warnings."""
        dropped = 0
        for stage in self.stages:
            dropped += int(stage.counts.get("discarded", 0))
            if stage.stage == "fuse":
                dropped += sum(stage.warnings.values())
        return dropped

    def to_dict(self, timings: bool = False) -> Dict[str, Any]:
        return {
            "schema": "report",
            "command": self.command,
            "status": self.status,
            "dropped_instances": self.dropped_instances,
            "stages": [s.to_dict(timings) for s in self.stages],
        }


def resolve_workers(workers: int) -> int:
    """0 means all but two CPUs, at least one."""
    if workers == 0:
        return max(1, mp.cpu_count() - 2)
    return workers


def parallel_map(func: Callable[[Any], T], tasks: Sequence[Any], workers: int) -> List[T]:
    """
    Map ``func`` over per-image tasks, in a process pool when more than one
    worker is configured. Results keep the task order.
    """
    processes = min(resolve_workers(workers), len(tasks))
    if processes <= 1:
        return [func(task) for task in tasks]
    pool = mp.Pool(processes)
    logger.info(f"Initializing the MP pool with {processes} CPUs")
    try:
        return pool.map(func, tasks)
    except Exception as e:
        logging.exception("A worker failed: %s", e)
        raise
    finally:
        pool.close()
        pool.join()
        logger.info(f"Releasing {processes} CPUs from the MP pool")


def _by_image(instances: Sequence[InstanceRecord]) -> Dict[str, List[InstanceRecord]]:
    groups: Dict[str, List[InstanceRecord]] = defaultdict(list)
    for instance in instances:
        groups[instance.image_id].append(instance)
    return groups


def _scene(scenes: Dict[str, Scene], image_id: str) -> Scene:
    if image_id not in scenes:
        raise ValidationError(f"No ground truth scene for image {image_id}")
    return scenes[image_id]


def _noise(cfg: PipelineConfig) -> NoiseConfig:
    return cfg.synth.noise


# synth


def _synth_task(args: Tuple[Scene, AnchorConfig, NoiseConfig, str]) -> int:
    scene, anchors, noise, out_dir = args
    image = render_image(scene, anchors, noise)
    out = Path(out_dir)
    write_jsonl(out / "proposals" / f"{scene.image_id}.jsonl", [proposal_record(p) for p in image.proposals])
    write_stack(out / "attention" / f"{scene.image_id}.evt", image.attention)
    write_tensor(out / "gt" / f"{scene.image_id}.evt", scene.gt_map())
    return len(image.proposals)


def run_synth(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    scenes = generate_dataset(cfg.synth, cfg.seed)
    tasks = [(scene, cfg.anchors, cfg.synth.noise, str(ws.out_dir)) for scene in scenes]
    proposals = parallel_map(_synth_task, tasks, cfg.workers)
    write_jsonl(
        ws.output(IMAGES),
        [ImageInfo(s.image_id, s.width, s.height, s.labels).to_record() for s in scenes],
    )
    write_jsonl(ws.output(GROUND_TRUTH), [s.to_record() for s in scenes])
    report.counts.update(
        images=len(scenes),
        objects=sum(len(s.objects) for s in scenes),
        proposals=int(sum(proposals)),
    )


# anchors


def run_anchors(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    total = 0
    for info in ws.images():
        anchors = generate_anchors(info.width, info.height, cfg.anchors)
        write_jsonl(ws.output(f"anchors/{info.image_id}.jsonl"), [box_record(b) for b in anchors])
        total += len(anchors)
    report.counts.update(anchors=total)


# heatmap


def _heatmap_task(args: Tuple[ImageInfo, Path, Path]) -> int:
    info, proposals_path, out_path = args
    proposals = [proposal_from_record(r) for r in read_jsonl(proposals_path, "scored_proposal")]
    raw = accumulate_heatmaps(proposals, info.labels.num_classes, info.width, info.height)
    write_stack(out_path, normalize_heatmaps(raw, info.labels))
    return len(proposals)


def run_heatmap(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    images = ws.images()
    tasks = [
        (info, ws.find(f"proposals/{info.image_id}.jsonl"), ws.output(f"heatmaps/{info.image_id}.evt"))
        for info in images
    ]
    counts = parallel_map(_heatmap_task, tasks, cfg.workers)
    report.counts.update(images=len(images), proposals=int(sum(counts)))


# fuse


def _read_attention(path: Path, info: ImageInfo):
    attention = read_stack(path)
    expected = (info.labels.num_classes, info.height, info.width)
    if attention.data.shape != expected:
        raise ValidationError(
            f"Attention of {info.image_id} has shape {attention.data.shape}, expected {expected}", path
        )
    return mask_absent(attention, info.labels)


def _fuse_task(args: Tuple[ImageInfo, Path, Path, FusionThresholds]) -> Tuple[List[InstanceRecord], Dict[str, int]]:
    info, heat_path, att_path, thresholds = args
    info.labels.require_present()
    warnings: Counter = Counter()
    instances = fuse_image(
        read_stack(heat_path), _read_attention(att_path, info), info.labels, thresholds, info.image_id, warnings
    )
    return instances, dict(warnings)


def run_fuse(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    images = ws.images()
    tasks = [
        (info, ws.find(f"heatmaps/{info.image_id}.evt"), ws.find(f"attention/{info.image_id}.evt"), cfg.fusion)
        for info in images
    ]
    instances = []
    for fused, warnings in parallel_map(_fuse_task, tasks, cfg.workers):
        instances.extend(fused)
        report.warnings.update(warnings)
    write_jsonl(ws.output(INSTANCES), [i.to_record() for i in instances])
    report.counts.update(images=len(images), instances=len(instances))
    logger.info(f"Fused {len(instances)} instances from {len(images)} images")


# cluster


def _synthetic_embeddings(
    ws: Workspace, cfg: PipelineConfig, instances: Sequence[InstanceRecord]
) -> Tuple[Dict[str, List[float]], set]:
    scenes = ws.scenes()
    records, vectors, planted = [], {}, set()
    for image_id, group in _by_image(instances).items():
        embs, flags = render_embeddings(group, _scene(scenes, image_id), _noise(cfg), cfg.cluster.lambda_d)
        for instance, vector, flag in zip(group, embs, flags):
            vectors[instance.instance_id] = list(vector)
            record = embedding_record(instance.instance_id, vector)
            if flag:
                record["planted_outlier"] = True
                planted.add(instance.instance_id)
            records.append(record)
    write_jsonl(ws.output(EMBEDDINGS), records)
    return vectors, planted


def run_cluster(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    instances = ws.instances(INSTANCES)
    planted = None
    if cfg.evidence == "synthetic":
        vectors, planted = _synthetic_embeddings(ws, cfg, instances)
    else:
        vectors = embeddings_from_records(read_jsonl(ws.find(EMBEDDINGS), "embedding"))
    kept, removed = filter_instances(attach_embeddings(instances, vectors), cfg.cluster.lambda_d)
    write_jsonl(ws.output(CLUSTERED), [i.to_record() for i in kept])
    write_jsonl(ws.output(OUTLIERS), [i.to_record() for i in removed])

    if planted is not None:
        report.counts["planted_outliers"] = len(planted)
        report.counts["planted_outliers_removed"] = sum(i.instance_id in planted for i in removed)

    batches = []
    if len({i.class_id for i in kept}) >= cfg.cluster.triplet.b:
        batches = compose_triplet_batches(kept, replace(cfg.cluster.triplet, seed=cfg.seed))
    else:
        logger.warning(f"Fewer than {cfg.cluster.triplet.b} classes survive clustering, no triplet batches")
        report.warnings["triplet_batches_skipped"] += 1
    write_jsonl(
        ws.output(TRIPLET_BATCHES),
        [triplet_batch_record(k, [kept[i].instance_id for i in batch]) for k, batch in enumerate(batches)],
    )
    report.counts.update(instances=len(instances), kept=len(kept), outliers=len(removed), triplet_batches=len(batches))


# relabel


def _synthetic_scores(
    ws: Workspace, cfg: PipelineConfig, instances: Sequence[InstanceRecord], relative: str
) -> List[InstanceScores]:
    scenes = ws.scenes()
    scores = []
    for image_id, group in _by_image(instances).items():
        scores.extend(render_instance_scores(_scene(scenes, image_id), group, _noise(cfg)))
    write_jsonl(ws.output(relative), [s.to_record() for s in scores])
    return scores


def _attach_scores(instances: Sequence[InstanceRecord], scores: Sequence[InstanceScores]) -> List[InstanceRecord]:
    by_id = {s.instance_id: s.scores for s in scores}
    return [replace(i, scores=by_id[i.instance_id]) for i in instances]


def run_relabel(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    # every fused instance is re-labeled, cluster survivors only train the classifier
    instances = ws.instances(INSTANCES)
    if cfg.evidence == "synthetic":
        scores = _synthetic_scores(ws, cfg, instances, INSTANCE_SCORES)
    else:
        scores = [InstanceScores.from_record(r) for r in read_jsonl(ws.find(INSTANCE_SCORES), "instance_scores")]
    kept, discarded = relabel_filter(instances, scores)
    write_jsonl(ws.output(RELABELED), [i.to_record() for i in _attach_scores(kept, scores)])
    write_jsonl(ws.output(DISCARDED), [i.to_record() for i in _attach_scores(discarded, scores)])
    report.counts.update(instances=len(instances), kept=len(kept), discarded=len(discarded))


# pixels


def _pixels_task(
    args: Tuple[ImageInfo, Path, Path, List[LocalAttentionPatch], PixelConfig, Path, Path, Optional[Path]]
) -> int:
    info, heat_path, att_path, patches, pixel_cfg, prob_path, labels_path, preview_path = args
    labels = info.labels
    heatmaps = read_stack(heat_path)
    attention = _read_attention(att_path, info)
    if pixel_cfg.use_instance_attention:
        local = instance_attention(patches, labels.num_classes, info.width, info.height, labels)
        attention = combine_attention(local, attention)
    P = probability_map(background_channel(heatmaps, labels), background_channel(attention, labels), labels)
    label_map = label_with_uncertainty(P, pixel_cfg.tau_u, labels, pixel_cfg.label_all_pixels)
    write_stack(prob_path, P)
    write_label_map(labels_path, label_map)
    if preview_path is not None:
        write_preview(preview_path, label_map)
    return label_map.uncertain_count()


def run_pixels(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    images = ws.images()
    pixel_cfg = replace(
        cfg.pixels, use_instance_attention=cfg.pixels.use_instance_attention and cfg.instance_stages
    )
    patches_by_image: Dict[str, List[LocalAttentionPatch]] = defaultdict(list)
    if pixel_cfg.use_instance_attention:
        instances = ws.instances(RELABELED)
        if cfg.evidence == "synthetic":
            scenes = ws.scenes()
            patches = []
            for image_id, group in _by_image(instances).items():
                patches.extend(render_local_attention(_scene(scenes, image_id), group, _noise(cfg)))
            write_jsonl(ws.output(LOCAL_ATTENTION), [p.to_record() for p in patches])
        else:
            wanted = {i.instance_id for i in instances}
            patches = [
                p
                for p in (LocalAttentionPatch.from_record(r) for r in read_jsonl(ws.find(LOCAL_ATTENTION), "local_attention"))
                if p.instance_id in wanted
            ]
        image_of = {i.instance_id: i.image_id for i in instances}
        for p in patches:
            patches_by_image[image_of[p.instance_id]].append(p)

    tasks = [
        (
            info,
            ws.find(f"heatmaps/{info.image_id}.evt"),
            ws.find(f"attention/{info.image_id}.evt"),
            patches_by_image.get(info.image_id, []),
            pixel_cfg,
            ws.output(f"probability/{info.image_id}.evt"),
            ws.output(f"labels/{info.image_id}.evt"),
            ws.output(f"previews/{info.image_id}.png") if cfg.write_previews else None,
        )
        for info in images
    ]
    uncertain = parallel_map(_pixels_task, tasks, cfg.workers)
    total = sum(info.width * info.height for info in images)
    report.counts.update(images=len(images), pixels=total, uncertain_pixels=int(sum(uncertain)))
    logger.info(f"{int(sum(uncertain))}/{total} pixels left uncertain at tau_u={cfg.pixels.tau_u}")


# harvest


def _harvest_task(args: Tuple[ImageInfo, Path, Path]) -> Tuple[List[InstanceRecord], List[float]]:
    info, labels_path, prob_path = args
    label_map = read_label_map(labels_path, info.labels.num_classes)
    probability = read_stack(prob_path, has_background=True)
    instances = boxes_from_labelmap(label_map, info.image_id)
    detections = harvest_detections(label_map, probability, info.image_id)
    return instances, [d.confidence for d in detections]


def run_harvest(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    images = ws.images()
    tasks = [
        (info, ws.find(f"labels/{info.image_id}.evt"), ws.find(f"probability/{info.image_id}.evt"))
        for info in images
    ]
    instances, confidence = [], {}
    for found, confidences in parallel_map(_harvest_task, tasks, cfg.workers):
        instances.extend(found)
        confidence.update((i.instance_id, c) for i, c in zip(found, confidences))

    scores = None
    if cfg.evidence == "synthetic":
        scores = _synthetic_scores(ws, cfg, instances, HARVEST_SCORES)
    elif ws.optional(HARVEST_SCORES) is not None:
        scores = [InstanceScores.from_record(r) for r in read_jsonl(ws.find(HARVEST_SCORES), "instance_scores")]
    discarded: List[InstanceRecord] = []
    if scores is not None:
        instances, discarded = relabel_filter(instances, scores)
        instances = _attach_scores(instances, scores)

    records = []
    for instance in instances:
        record = instance.to_record()
        record["confidence"] = confidence[instance.instance_id]
        records.append(record)
    write_jsonl(ws.output(HARVESTED), records)
    report.counts.update(images=len(images), harvested=len(instances), harvest_discarded=len(discarded))


# eval


def _detections(instances: Sequence[InstanceRecord]) -> List[Detection]:
    return [
        Detection(i.image_id, i.box, i.class_id, i.scores[i.class_id] if i.scores else 1.0)
        for i in instances
    ]


def _image_scores(ws: Workspace, images: Sequence[ImageInfo], detections: Sequence[Detection]) -> np.ndarray:
    index = {info.image_id: k for k, info in enumerate(images)}
    num_classes = images[0].labels.num_classes
    scores = np.zeros((len(images), num_classes))
    path = ws.optional(IMAGE_SCORES)
    if path is not None:
        for record in read_jsonl(path, "image_scores"):
            if record.get("image_id") not in index:
                raise ValidationError(f"Image scores for unknown image {record.get('image_id')!r}", path)
            scores[index[record["image_id"]]] = record["scores"]
        return scores
    for d in detections:
        row = index[d.image_id]
        scores[row, d.class_id] = max(scores[row, d.class_id], d.confidence)
    return scores


def run_eval(ws: Workspace, cfg: PipelineConfig, report: StageReport) -> None:
    images = ws.images()
    if not images:
        raise ValidationError("Nothing to evaluate: images.jsonl is empty")
    scenes = ws.scenes()
    num_classes = images[0].labels.num_classes
    gt = GroundTruth()
    for info in images:
        scene = _scene(scenes, info.image_id)
        gt.boxes[info.image_id] = [(o.box, o.class_id) for o in scene.objects]
        gt_path = ws.optional(f"gt/{info.image_id}.evt")
        gt.pixel_maps[info.image_id] = (
            read_label_map(gt_path, num_classes).data if gt_path is not None else scene.gt_map()
        )

    segmentation = None
    if all(ws.optional(f"labels/{info.image_id}.evt") for info in images):
        segmentation = miou_dataset(
            (
                (read_label_map(ws.find(f"labels/{info.image_id}.evt"), num_classes), gt.pixel_maps[info.image_id])
                for info in images
            ),
            num_classes,
            cfg.eval.exclude_uncertain,
        )
    else:
        logger.warning("Label maps missing, skipping mIoU")
        report.warnings["miou_skipped"] += 1

    localization = detection = None
    detections: List[Detection] = []
    source = RELABELED if cfg.instance_stages else INSTANCES
    if ws.optional(source) is not None:
        detections = _detections(ws.instances(source))
        localization = corloc(detections, gt, cfg.eval.iou_thresh)
        detection = voc_map(detections, gt, cfg.eval.iou_thresh, cfg.eval.interpolation)

    harvest_localization = harvest_detection = None
    if ws.optional(HARVESTED) is not None:
        harvested = [
            Detection(r["image_id"], InstanceRecord.from_record(r).box, int(r["class_id"]), float(r.get("confidence", 1.0)))
            for r in read_jsonl(ws.find(HARVESTED), "instance")
        ]
        harvest_localization = corloc(harvested, gt, cfg.eval.iou_thresh)
        harvest_detection = voc_map(harvested, gt, cfg.eval.iou_thresh, cfg.eval.interpolation)

    scores = _image_scores(ws, images, detections)
    truth = [info.labels.y for info in images]
    metrics = MetricsReport(
        num_classes=num_classes,
        segmentation=segmentation,
        localization=localization,
        detection=detection,
        harvest_localization=harvest_localization,
        harvest_detection=harvest_detection,
        multilabel=multilabel_prf(scores, truth, cfg.eval.conf_thresh),
        multilabel_top3=multilabel_prf(scores, truth, cfg.eval.conf_thresh, topk=cfg.eval.topk),
        class_names=cfg.class_names or None,
    )
    atomic_write(ws.output("metrics.json"), metrics.to_json() + "\n")
    atomic_write(ws.output("metrics.tsv"), metrics.to_tsv())
    report.counts.update(images=len(images), **{k: (None if np.isnan(v) else round(v, 6)) for k, v in metrics.summary().items()})


RUNNERS: Dict[str, Callable[[Workspace, PipelineConfig, StageReport], None]] = {
    "anchors": run_anchors,
    "synth": run_synth,
    "heatmap": run_heatmap,
    "fuse": run_fuse,
    "cluster": run_cluster,
    "relabel": run_relabel,
    "pixels": run_pixels,
    "harvest": run_harvest,
    "eval": run_eval,
}


def stage_plan(stage: str, ws: Workspace, cfg: Optional[PipelineConfig] = None) -> List[str]:
    """
    Stages a command runs. `all` leaves out the instance-level stages the
    config switches off and ends with eval when ground truth exists.
    """
    if stage not in STAGES:
        raise ValidationError(f"Unknown stage {stage!r}, expected one of {STAGES}")
    if stage != "all":
        return [stage]
    cfg = cfg or PipelineConfig()
    skipped = set()
    if not cfg.instance_stages:
        skipped.update(("cluster", "relabel"))
    elif not cfg.cluster.enabled:
        skipped.add("cluster")
    if skipped:
        logger.info(f"Skipping switched-off stages: {sorted(skipped)}")
    plan = [name for name in CHAINED_STAGES if name not in skipped]
    if ws.optional(GROUND_TRUTH) is not None:
        plan.append("eval")
    return plan


def run_stage(
    stage: str,
    cfg: PipelineConfig,
    in_dir: Optional[PathLike],
    out_dir: PathLike,
    timings: bool = False,
) -> RunReport:
    """
    Run one stage (or the ``all`` chain) and write report.json.

    Args:
        stage: Stage name.
        cfg: Pipeline configuration.
        in_dir: Directory holding external inputs, may be None.
        out_dir: Directory receiving outputs; also searched for inputs first.
        timings: Include wall-clock seconds in the report.

    Returns:
        The run report, also written to ``<out>/report.json``.
    """
    ws = Workspace(in_dir, out_dir)
    ws.out_dir.mkdir(parents=True, exist_ok=True)
    run = RunReport(command=stage)
    try:
        for name in stage_plan(stage, ws, cfg):
            report = StageReport(name)
            run.stages.append(report)
            logger.info(f"Running stage {name}")
            start = time.perf_counter()
            RUNNERS[name](ws, cfg, report)
            report.seconds = time.perf_counter() - start
            logger.info(f"Stage {name} done: {report.counts}")
    except Exception:
        run.status = "error"
        raise
    finally:
        write_json(ws.output(REPORT), run.to_dict(timings))
    return run
