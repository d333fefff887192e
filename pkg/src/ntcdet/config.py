"""Configuration dataclasses and strict JSON loading (unknown keys rejected)."""

import dataclasses
import json
from dataclasses import dataclass, field

from .synthvid import ClipConfig


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; known keys: {sorted(names)}")
    return data


@dataclass
class HeadConfig:
    """Model shape and the desk-scale stand-ins for the detector hyper-parameters."""

    layers: int = 2          # stacked context-fusion + relation layers
    t_prev: int = 15         # previous frames in the window
    t_ctxt: int = 2          # context frames sampled from the previous frames
    proposals: int = 16
    feature_dim: int = 64
    heads: int = 4
    flow_stride: int = 4
    ntca_enabled: bool = True
    aggregation: str = "roi"      # roi | feature | both
    iof_align: bool = True        # False: contexts from undeformed grids (zero flow)
    temp_agg: bool = True         # False: temporal average instead of attention fusion
    channels: int = 32
    grid: int = 7
    anchor_size: float = 16.0
    aux_loss: bool = True
    flow_provider: str = "ground_truth"   # ground_truth | block_matching | zero
    block_size: int = 9
    search_radius: int = 2

    def __post_init__(self):
        if not (1 <= self.t_ctxt <= self.t_prev):
            raise ConfigError(f"need 1 <= t_ctxt <= t_prev, got t_ctxt={self.t_ctxt} t_prev={self.t_prev}")
        if self.layers < 1 or self.proposals < 1:
            raise ConfigError("layers and proposals must be >= 1")
        if self.feature_dim % self.heads != 0:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")
        if self.aggregation not in ("roi", "feature", "both"):
            raise ConfigError(f"aggregation must be roi|feature|both, got {self.aggregation!r}")
        if self.flow_provider not in ("ground_truth", "block_matching", "zero"):
            raise ConfigError(f"flow_provider must be ground_truth|block_matching|zero, got {self.flow_provider!r}")
        if self.flow_stride != 4:
            raise ConfigError("flow_stride is tied to the backbone stride (4)")

    @classmethod
    def from_dict(cls, data, path="model"):
        return cls(**_from_dict(cls, data, path))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 2e-4
    betas: tuple = (0.9, 0.99)
    weight_decay: float = 1e-4
    decay_at: tuple = (0.6, 0.8)   # step-decay x0.1 at these fractions of the run
    log_interval: int = 50
    checkpoint_interval: int = 500
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.betas = tuple(self.betas)
        self.decay_at = tuple(self.decay_at)
        self.seeds = tuple(int(s) for s in self.seeds)

    @classmethod
    def from_dict(cls, data, path="train"):
        return cls(**_from_dict(cls, data, path))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class DataConfig:
    n_train: int = 200
    n_test: int = 40
    clip: ClipConfig = field(default_factory=ClipConfig)

    @classmethod
    def from_dict(cls, data, path="data"):
        d = dict(_from_dict(cls, data, path))
        if "clip" in d:
            try:
                d["clip"] = ClipConfig.from_dict(d["clip"])
            except TypeError as exc:
                raise ConfigError(f"{path}.clip: {exc}") from exc
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ExperimentConfig:
    dataset: str = "dataset"
    out_dir: str = "runs"
    model: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, data, path="config"):
        d = dict(_from_dict(cls, data, path))
        if "model" in d:
            d["model"] = HeadConfig.from_dict(d["model"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)
