"""Run configuration: corpus, model, optimizer, and ablation settings in one
JSON-serializable dataclass. A config file is a JSON object with the same
field names; CLI flags override individual fields."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .fusion import FUSION_MODES
from .synthdata import CorpusConfig


class RunConfigError(ValueError):
    """A run configuration field is out of its valid range."""


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    d_model: int = 32
    d_latent: int = 32
    slots_video: int = 64
    slots_query: int = 64
    head_hidden: int = 32
    memory_enabled: bool = True
    memory_shared: bool = True
    fusion_enabled: bool = True
    fusion_mode: str = "full"
    calibration_swapped: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    lambda_boundary: float = 1.0
    lambda_confidence: float = 1.0
    lambda_overlap: float = 1.0
    top_n: int = 5
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.corpus, dict):
            self.corpus = CorpusConfig(**self.corpus)
        if self.epochs < 1:
            raise RunConfigError(f"epochs must be >= 1, got {self.epochs}")
        if min(self.d_model, self.d_latent, self.slots_video, self.slots_query,
               self.head_hidden, self.batch_size, self.top_n) < 1:
            raise RunConfigError("dimensions, batch size, and top_n must be positive")
        if min(self.lambda_boundary, self.lambda_confidence, self.lambda_overlap) < 0:
            raise RunConfigError("loss weights must be nonnegative")
        if self.learning_rate < 0:
            raise RunConfigError("learning rate must be nonnegative")
        if self.fusion_mode not in FUSION_MODES:
            raise RunConfigError(f"unknown fusion mode {self.fusion_mode!r}")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda_boundary, self.lambda_confidence, self.lambda_overlap)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise RunConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def model_config(self):
        from .model import ModelConfig
        return ModelConfig(
            d_model=self.d_model, d_latent=self.d_latent,
            d_raw=self.corpus.d_raw, vocab_size=self.corpus.vocab_size,
            slots_video=self.slots_video, slots_query=self.slots_query,
            head_hidden=self.head_hidden, memory_enabled=self.memory_enabled,
            memory_shared=self.memory_shared, fusion_enabled=self.fusion_enabled,
            fusion_mode=self.fusion_mode,
            calibration_swapped=self.calibration_swapped,
            lambdas=self.lambdas, seed=self.seed)
