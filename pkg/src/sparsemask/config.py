"""Run configuration (JSON) and its digest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .searchspace import GATE_PARAMS, EncoderSpec
from .tasks import SyntheticTaskSpec

# Reference protocol values; desk runs rescale the learning rates with ``lr_scale``.
DEFAULT_LR_ENCODER = 0.005
DEFAULT_LR_DECODER = 0.05
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 4e-5
DEFAULT_LAMBDA = 0.01
DEFAULT_SIGMA = 0.001

DEFAULT_ENCODER = {"name": "toy4", "stages": [
    {"channels": 16, "stride": 2}, {"channels": 32, "stride": 4},
    {"channels": 64, "stride": 8}, {"channels": 96, "stride": 16},
]}


@dataclass
class SearchSection:
    epochs: int = 30
    batch: int = 8
    lr_encoder: float = DEFAULT_LR_ENCODER
    lr_decoder: float = DEFAULT_LR_DECODER
    lr_scale: float = 1.0
    gate_lr_scale: float = 1.0
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    poly_power: float = 0.9
    # "lambda" in JSON
    lam: float = DEFAULT_LAMBDA
    sigma: float = DEFAULT_SIGMA
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 30
    batch: int = 8
    lr_encoder: float = DEFAULT_LR_ENCODER
    lr_decoder: float = DEFAULT_LR_DECODER
    lr_scale: float = 1.0
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    poly_power: float = 0.9
    seed: int = 0


@dataclass
class RunConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec.from_dict(DEFAULT_ENCODER))
    decoder_channels: int = 32
    search: SearchSection = field(default_factory=SearchSection)
    train: TrainSection = field(default_factory=TrainSection)
    regularizer: str = "sparse"
    activation: str = "relu"
    pointwise: bool = False
    gate_param: str = "direct"
    flip: bool = True
    scale_jitter: tuple[float, float] | None = None

    def __post_init__(self):
        if self.regularizer not in ("sparse", "l1"):
            raise ConfigError(f"regularizer must be 'sparse' or 'l1', got {self.regularizer!r}")
        if self.decoder_channels < 1:
            raise ConfigError("decoder_channels must be >= 1")
        if self.gate_param not in GATE_PARAMS:
            raise ConfigError(f"gate_param must be one of {GATE_PARAMS}, got {self.gate_param!r}")
        if self.activation not in ("relu", "none", "identity"):
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.task.image_size % self.encoder.max_stride:
            raise ConfigError(f"task.image_size {self.task.image_size} must be a multiple of "
                              f"the encoder stride {self.encoder.max_stride}")
        for name, sec in (("search", self.search), ("train", self.train)):
            if sec.epochs < 1 or sec.batch < 1:
                raise ConfigError(f"{name}.epochs and {name}.batch must be >= 1")
            if sec.batch < 2:
                raise ConfigError(f"{name}.batch must be >= 2 for batch statistics")
        if not 0 < self.search.sigma < 1:
            raise ConfigError("search.sigma must lie in (0, 1)")
        if self.search.lam < 0:
            raise ConfigError("search.lambda must be non-negative")

    def to_dict(self) -> dict:
        search = asdict(self.search)
        search["lambda"] = search.pop("lam")
        return {
            "task": self.task.to_dict(),
            "encoder": self.encoder.to_dict(),
            "decoder_channels": self.decoder_channels,
            "search": search,
            "train": asdict(self.train),
            "regularizer": self.regularizer,
            "activation": self.activation,
            "pointwise": self.pointwise,
            "gate_param": self.gate_param,
            "flip": self.flip,
            "scale_jitter": list(self.scale_jitter) if self.scale_jitter else None,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        try:
            if "task" in doc:
                kw["task"] = SyntheticTaskSpec.from_dict(doc["task"])
            if "encoder" in doc:
                kw["encoder"] = EncoderSpec.from_dict(doc["encoder"])
            if "search" in doc:
                s = dict(doc["search"])
                if "lambda" in s:
                    s["lam"] = s.pop("lambda")
                kw["search"] = _section(SearchSection, s, "search")
            if "train" in doc:
                kw["train"] = _section(TrainSection, doc["train"], "train")
            for key in ("decoder_channels", "regularizer", "activation", "pointwise", "gate_param", "flip"):
                if key in doc:
                    kw[key] = doc[key]
            if doc.get("scale_jitter") is not None:
                kw["scale_jitter"] = tuple(doc["scale_jitter"])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None


def _section(cls, d: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(doc)
