import json
import math
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from kbvqa.errors import ConfigurationError

load_dotenv()

DEFAULTS_PATH = Path(__file__).with_name("defaults.yaml")

with open(DEFAULTS_PATH, "r") as f:
    DEFAULTS = yaml.safe_load(f)
    if not DEFAULTS:
        raise RuntimeError("defaults.yaml is empty or malformed!")


def default(section, key):
    return DEFAULTS[section][key]


class ToyEncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dim: int = Field(default=default("encoder", "dim"), ge=2)
    tokens_per_word: int = Field(default=default("encoder", "tokens_per_word"), ge=1)
    seed: int = default("encoder", "seed")
    salt: int = default("encoder", "salt")


class HeadConfig(BaseModel):
    hidden_ratio: float = Field(default=default("head", "hidden_ratio"), gt=0)
    output_ratio: float = Field(default=default("head", "output_ratio"), gt=0, lt=1)
    normalize_output: bool = default("head", "normalize_output")
    init_scale: float = Field(default=default("head", "init_scale"), gt=0)

    def dims(self, h):
        """Hidden width m and output width h' for input width h."""
        m = max(1, int(round(h * self.hidden_ratio)))
        out = max(1, min(h - 1, int(h * self.output_ratio)))
        return m, out


class TrainConfig(BaseModel):
    steps: int = Field(default=default("train", "steps"), ge=0)
    batch_size: int = Field(default=default("train", "batch_size"), ge=2)
    learning_rate: float = Field(default=default("train", "learning_rate"), ge=0)
    seed: int = default("train", "seed")
    log_every: int = Field(default=default("train", "log_every"), ge=1)


class IndexConfig(BaseModel):
    num_centroids: int = Field(default=default("index", "num_centroids"), ge=1)
    kmeans_iters: int = Field(default=default("index", "kmeans_iters"), ge=1)
    n_probe: int = Field(default=default("index", "n_probe"), ge=1)
    seed: int = default("index", "seed")

    @model_validator(mode="after")
    def _probe_within_centroids(self):
        if self.n_probe > self.num_centroids:
            raise ValueError(f"n_probe={self.n_probe} exceeds num_centroids={self.num_centroids}")
        return self


class ReflectiveTrainConfig(BaseModel):
    total_steps: int = Field(ge=1)
    join_step: Optional[int] = Field(default=None, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _default_join(self):
        if self.join_step is None:
            self.join_step = math.ceil(default("reflection", "join_fraction") * self.total_steps)
        return self

    def joined(self, step):
        return step >= self.join_step


class RemoteGeneratorConfig(BaseModel):
    endpoint: str
    timeout_ms: int = Field(default=default("remote", "timeout_ms"), gt=0)
    retries: int = Field(default=default("remote", "retries"), ge=0)
    backoff_ms: int = Field(default=default("remote", "backoff_ms"), ge=0)
    max_in_flight: int = Field(default=default("remote", "max_in_flight"), ge=1)
    auth_token: Optional[str] = Field(default_factory=lambda: os.getenv("KBVQA_GENERATOR_TOKEN"))


class GeneratorSelection(BaseModel):
    mock_table: Optional[str] = None
    remote: Optional[RemoteGeneratorConfig] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.mock_table is None) == (self.remote is None):
            raise ValueError("choose exactly one of mock_table or remote")
        return self


class ExperimentConfig(BaseModel):
    dataset_path: str
    kb_path: str
    output_dir: str
    generator: GeneratorSelection
    embeddings_dir: Optional[str] = None
    encoder: ToyEncoderConfig = Field(default_factory=ToyEncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    head_path: Optional[str] = None
    train: Optional[TrainConfig] = None
    index: IndexConfig = Field(default_factory=IndexConfig)
    index_dir: Optional[str] = None
    k: int = Field(default=default("retrieval", "k"), ge=1)
    prr_ks: list[int] = Field(default_factory=lambda: list(default("retrieval", "prr_ks")))
    threshold: float = Field(default=default("reflection", "threshold"), ge=0, le=1)
    mode: Literal["reflective", "always_retrieve", "never_retrieve"] = "reflective"
    seed: int = 0
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _positive_ks(self):
        if not self.prr_ks or min(self.prr_ks) < 1:
            raise ValueError("prr_ks must be a non-empty list of K >= 1")
        return self


def _merge(base, overrides):
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_experiment_config(path=None, overrides=None) -> ExperimentConfig:
    """Read a JSON experiment config and apply flag overrides on top of it."""
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
    data = _merge(data, overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config: {e}") from e
