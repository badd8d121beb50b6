"""
Pipeline configuration: a tree of dataclasses stored as a JSON document.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

from evifuse.anchors import AnchorConfig
from evifuse.embedfilter import DEFAULT_LAMBDA_D, TripletBatchConfig
from evifuse.errors import ValidationError
from evifuse.fusion import FusionThresholds
from evifuse.pixelfusion import DEFAULT_TAU_U
from evifuse.records import read_json, write_json
from evifuse.synth import NoiseConfig, SynthConfig

logger = logging.getLogger(__name__)

EVIDENCE_SOURCES = ("files", "synthetic")
INTERPOLATIONS = ("continuous", "11point")

T = TypeVar("T")


@dataclass(frozen=True)
class ClusterConfig:
    """
    Embedding clustering settings.

    Attributes:
        enabled: Run outlier clustering; when off the `all` chain skips the
            cluster stage and no triplet batches are composed.
        lambda_d: Distance cut-off.
        triplet: Triplet mini-batch shape and count.
    """

    enabled: bool = True
    lambda_d: float = DEFAULT_LAMBDA_D
    triplet: TripletBatchConfig = field(default_factory=TripletBatchConfig)

    def __post_init__(self) -> None:
        if self.lambda_d <= 0:
            raise ValidationError(f"lambda_d must be > 0, got {self.lambda_d}")


@dataclass(frozen=True)
class PixelConfig:
    """
    Pixel-level fusion settings.

    Attributes:
        tau_u: Confidence threshold below which pixels become uncertain.
        use_instance_attention: Combine instance attention with the global
            attention; when off, A equals the global attention alone.
        label_all_pixels: Label every pixel with its argmax, no uncertainty.
    """

    tau_u: float = DEFAULT_TAU_U
    use_instance_attention: bool = True
    label_all_pixels: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.tau_u <= 1:
            raise ValidationError(f"tau_u must lie in [0, 1], got {self.tau_u}")


@dataclass(frozen=True)
class EvalConfig:
    interpolation: str = "continuous"
    iou_thresh: float = 0.5
    conf_thresh: float = 0.5
    topk: int = 3
    exclude_uncertain: bool = True

    def __post_init__(self) -> None:
        if self.interpolation not in INTERPOLATIONS:
            raise ValidationError(
                f"interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}"
            )
        if not 0 < self.iou_thresh <= 1:
            raise ValidationError(f"iou_thresh must lie in (0, 1], got {self.iou_thresh}")
        if self.topk < 1:
            raise ValidationError(f"topk must be >= 1, got {self.topk}")


@dataclass(frozen=True)
class PipelineConfig:
    """
    Every setting of a pipeline run. Defaults are the standard fusion
    thresholds.

    ``instance_stages`` off removes every instance-level step: the `all`
    chain skips cluster and relabel, pixels use the global attention alone
    and eval scores the fused instances.
    """

    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    fusion: FusionThresholds = field(default_factory=FusionThresholds)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    pixels: PixelConfig = field(default_factory=PixelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    workers: int = 1
    evidence: str = "files"
    write_previews: bool = False
    instance_stages: bool = True
    class_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if self.workers < 0:
            raise ValidationError(f"workers must be >= 0, got {self.workers}")
        if self.evidence not in EVIDENCE_SOURCES:
            raise ValidationError(
                f"evidence must be one of {EVIDENCE_SOURCES}, got {self.evidence!r}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        """
        Build a config from a plain dictionary; missing keys keep their
        defaults, unknown keys raise ValidationError naming the dotted key.
        """
        return _build(cls, data, "")

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        return self if seed is None else dataclasses.replace(self, seed=seed)


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _check_scalar(expected: Any, value: Any, key: str) -> None:
    if expected is bool and not isinstance(value, bool):
        raise ValidationError(f"Config key {key} expects true or false, got {value!r}")
    if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ValidationError(f"Config key {key} expects an integer, got {value!r}")
    if expected is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ValidationError(f"Config key {key} expects a number, got {value!r}")
    if expected is str and not isinstance(value, str):
        raise ValidationError(f"Config key {key} expects a string, got {value!r}")


def _build(cls: Type[T], data: Any, prefix: str) -> T:
    if not isinstance(data, dict):
        raise ValidationError(f"Config section {prefix or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        key = f"{prefix}{unknown[0]}"
        logger.error(f"Unknown config key {key}")
        raise ValidationError(f"Unknown config key {key}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}{name}"
        kind = fields[name].type
        if dataclasses.is_dataclass(kind):
            kwargs[name] = _build(kind, value, f"{key}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            _check_scalar(kind, value, key)
            kwargs[name] = float(value) if kind is float else value
    return cls(**kwargs)


def load_config(path: Union[str, Path, None]) -> PipelineConfig:
    """Read a JSON config document; None gives the defaults."""
    if path is None:
        return PipelineConfig()
    cfg = PipelineConfig.from_dict(read_json(path))
    logger.info(f"Loaded configuration from {path}")
    return cfg


def save_config(path: Union[str, Path], cfg: PipelineConfig) -> None:
    write_json(path, cfg.to_dict())


__all__ = [
    "AnchorConfig",
    "ClusterConfig",
    "EvalConfig",
    "FusionThresholds",
    "NoiseConfig",
    "PipelineConfig",
    "PixelConfig",
    "SynthConfig",
    "TripletBatchConfig",
    "load_config",
    "save_config",
]
