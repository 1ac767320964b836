"""Experiment configuration files and the ablation presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augmentation import AugmentationPolicy
from .errors import ConfigError
from .metrics import BINARY_MAPPING
from .synthetic import SyntheticSpec
from .training import ModelConfig, TrainingConfig

PRESETS = ("four_class", "binary", "scratch", "none")
DATASET_SOURCES = ("annotation_file", "manifest_path", "synthetic")
BINARY_CLASSES = ("battery", "other")


@dataclass(frozen=True)
class DatasetSource:
    annotation_file: str | None = None
    manifest_path: str | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        set_ = [k for k in DATASET_SOURCES if getattr(self, k) is not None]
        if len(set_) != 1:
            raise ConfigError(f"dataset needs exactly one of {DATASET_SOURCES}, got {set_ or 'none'}")

    def to_dict(self) -> dict:
        if self.synthetic is not None:
            return {"synthetic": self.synthetic.to_dict()}
        key = "annotation_file" if self.annotation_file is not None else "manifest_path"
        return {key: getattr(self, key)}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetSource
    split_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    preset: str = "none"
    class_mapping: dict[str, str] | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if not self.name or "/" in self.name:
            raise ConfigError(f"invalid experiment name {self.name!r}")

    @property
    def classes(self) -> list[str] | None:
        """Label set after the class mapping, or None to use the manifest's own."""
        if self.class_mapping is None:
            return None
        return list(dict.fromkeys(self.class_mapping.values()))

    @property
    def run_id(self) -> str:
        return f"{self.name}_{self.preset}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "split_seed": self.split_seed,
            "model": asdict(self.model),
            "training": asdict(self.training),
            "augmentation": self.augmentation.to_dict(),
            "preset": self.preset,
            "class_mapping": dict(self.class_mapping) if self.class_mapping is not None else None,
        }


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    ds = data.get("dataset")
    if not isinstance(ds, dict):
        raise ConfigError("config needs a 'dataset' object")
    kwargs = {}
    for key in ("annotation_file", "manifest_path"):
        if ds.get(key) is not None:
            p = Path(ds[key])
            kwargs[key] = str(p if p.is_absolute() or base_dir is None else base_dir / p)
    if ds.get("synthetic") is not None:
        try:
            kwargs["synthetic"] = SyntheticSpec.from_dict(ds["synthetic"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from None
    extra = set(ds) - set(DATASET_SOURCES)
    if extra:
        raise ConfigError(f"dataset: unknown keys {sorted(extra)}")
    try:
        return ExperimentConfig(
            name=data.get("name", "experiment"),
            dataset=DatasetSource(**kwargs),
            split_seed=int(data.get("split_seed", 0)),
            model=_build(ModelConfig, data.get("model"), "model"),
            training=_build(TrainingConfig, data.get("training"), "training"),
            augmentation=_build(AugmentationPolicy, data.get("augmentation"), "augmentation"),
            preset=data.get("preset", "none"),
            class_mapping=data.get("class_mapping"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> tuple[ExperimentConfig, bytes]:
    """Parse a config file; also return its raw bytes for run snapshots."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data, path.parent), raw


def apply_preset(config: ExperimentConfig, preset: str) -> ExperimentConfig:
    """Overlay one ablation preset; each touches only its documented fields.

    four_class  4-way head, no label collapse
    scratch     as four_class but randomly initialized weights
    binary      2-way head with pcb/glass/metal_piece collapsed into "other"
    none        leave the config as written
    """
    if preset == "none":
        return replace(config, preset="none")
    if preset == "four_class":
        return replace(config, preset=preset, model=replace(config.model, num_classes=4),
                       class_mapping=None)
    if preset == "scratch":
        return replace(config, preset=preset,
                       model=replace(config.model, num_classes=4, pretrained=False),
                       class_mapping=None)
    if preset == "binary":
        return replace(config, preset=preset, model=replace(config.model, num_classes=2),
                       class_mapping=dict(BINARY_MAPPING))
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "class_mapping":
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> set[str]:
    fa, fb = flatten(a.to_dict()), flatten(b.to_dict())
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}
