"""Experiment configuration: one JSON file, schema-validated, hashable.

Every run artifact embeds the config hash (sha256 of the canonical JSON) plus
the seeds, so reports can refuse to mix runs from different datasets or
settings. Command lines may override any key with dotted paths
(``--set train.lr=1e-4``); values parse as JSON with a string fallback.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .data.protocol import ProtocolSpec
from .detector import ModelConfig
from .evaluation import EvalOptions
from .matching import CostWeights
from .queries import TdqiConfig
from .schedule import EtopConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    root: str = "dataset"
    class_groups: tuple = ((0, 1), (2, 3), (4, 5))
    train_scenes: int = 600
    val_scenes: int = 100
    test_scenes: int = 200
    master_seed: int = 7
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 5
    min_size: float = 10.0
    max_size: float = 22.0
    noise_level: float = 0.1
    max_overlap_iou: float = 0.3


@dataclass(frozen=True)
class ObjectnessSection:
    momentum: float = 0.1
    cov_reg: float = 1e-6
    diagonal: bool = False
    ema_source_layer: int = 0     # 0 = the schedule's effective stop layer
    warmup_updates: int = 20      # EMA updates before the objectness loss engages


@dataclass(frozen=True)
class TrainSection:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    lr_drop: int = 15
    finetune_epochs: int = 10
    finetune_lr_drop: int = 7
    exemplars_per_class: int = 25
    grad_clip: float = 0.1
    seed: int = 0
    threads: int = 1
    keep_epoch_checkpoints: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    tdqi: TdqiConfig = field(default_factory=TdqiConfig)
    etop: EtopConfig = field(default_factory=EtopConfig)
    loss: CostWeights = field(default_factory=CostWeights)
    objectness: ObjectnessSection = field(default_factory=ObjectnessSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalOptions = field(default_factory=EvalOptions)
    run_root: str = "runs"

    # -- structured views ----------------------------------------------------

    def protocol(self) -> ProtocolSpec:
        d = self.dataset
        return ProtocolSpec(
            class_groups=tuple(tuple(g) for g in d.class_groups),
            train_scenes=d.train_scenes, val_scenes=d.val_scenes, test_scenes=d.test_scenes,
            master_seed=d.master_seed, image_size=d.image_size,
            min_objects=d.min_objects, max_objects=d.max_objects,
            min_size=d.min_size, max_size=d.max_size,
            noise_level=d.noise_level, max_overlap_iou=d.max_overlap_iou,
        )

    def validate(self):
        try:
            self.protocol().validate()
            self.model.validate()
            self.tdqi.validate()
            self.etop.validate()
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.etop.total_layers != self.model.num_decoder_layers:
            raise ConfigError("etop.total_layers must equal model.num_decoder_layers")
        if self.model.num_classes != self.protocol().num_classes:
            raise ConfigError("model.num_classes must cover every protocol class")
        if self.model.image_size != self.dataset.image_size:
            raise ConfigError("model.image_size must equal dataset.image_size")
        if not self.tdqi.enabled and self.tdqi.n_qs != 0:
            raise ConfigError("bypassed query selection requires tdqi.n_qs = 0")
        if not (0 < self.objectness.momentum <= 1):
            raise ConfigError("objectness.momentum must be in (0, 1]")
        if self.objectness.ema_source_layer < 0 or \
                self.objectness.ema_source_layer > self.model.num_decoder_layers:
            raise ConfigError("objectness.ema_source_layer outside decoder range")
        return self

    def to_dict(self) -> dict:
        out = {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "tdqi": asdict(self.tdqi),
            "etop": asdict(self.etop),
            "loss": asdict(self.loss),
            "objectness": asdict(self.objectness),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "run_root": self.run_root,
        }
        out["dataset"]["class_groups"] = [list(g) for g in self.dataset.class_groups]
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict()["dataset"], sort_keys=True).encode()).hexdigest()[:16]


def _schema() -> dict:
    with resources.files("shapeworld_owod").joinpath("schema.json").open() as fh:
        return json.load(fh)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a raw dict against the schema and build the typed config."""
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"config schema violation at {pointer or '/'}: {exc.message}") from None

    base = ExperimentConfig()
    merged = base.to_dict()
    for section, value in data.items():
        if isinstance(value, dict):
            merged[section].update(value)
        else:
            merged[section] = value

    ds = dict(merged["dataset"])
    ds["class_groups"] = tuple(tuple(g) for g in ds["class_groups"])
    cfg = ExperimentConfig(
        dataset=DatasetSection(**ds),
        model=ModelConfig(**merged["model"]),
        tdqi=TdqiConfig(**merged["tdqi"]),
        etop=EtopConfig(**merged["etop"]),
        loss=CostWeights(**merged["loss"]),
        objectness=ObjectnessSection(**merged["objectness"]),
        train=TrainSection(**merged["train"]),
        eval=EvalOptions(**merged["eval"]),
        run_root=merged["run_root"],
    )
    return cfg.validate()


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form path.key=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or ():
        path, value = parse_override(item)
        keys = path.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object value")
        node[keys[-1]] = value
    return data


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(apply_overrides(data, overrides))
