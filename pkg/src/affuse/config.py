"""JSON run configuration. Unknown keys are rejected at every level."""
import json
from dataclasses import asdict, dataclass, field, fields

from affuse.data import DIMENSIONS, WindowSpec
from affuse.model import FusionConfig
from affuse.trainer import TrainerConfig

MODALITY_CHOICES = ("unimodal", "multimodal")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    manifest: str = ""
    prepared: str = ""
    folds: str = ""
    out: str = "runs"


@dataclass
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    model: FusionConfig = field(default_factory=FusionConfig)
    modality: str = "multimodal"
    dimension: str = "valence"
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    num_folds: int = 6

    def __post_init__(self):
        if self.modality not in MODALITY_CHOICES:
            raise ConfigError(f"modality must be one of {MODALITY_CHOICES}")
        if self.dimension not in DIMENSIONS:
            raise ConfigError(f"dimension must be one of {DIMENSIONS}")
        if self.model.kind != self.modality:
            self.model = FusionConfig(**{**asdict(self.model), "kind": self.modality})

    def to_dict(self):
        return asdict(self)


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(doc):
    doc = dict(doc)
    nested = {"trainer": TrainerConfig, "window": WindowSpec, "model": FusionConfig, "paths": Paths}
    for key, cls in nested.items():
        if key in doc:
            doc[key] = _strict(cls, doc[key], key)
    if "model" in doc and "modality" not in doc:
        doc["modality"] = doc["model"].kind
    return _strict(RunConfig, doc, "config")


def load_config(path):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)
