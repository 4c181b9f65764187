"""Model and run configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


@dataclass
class ModelConfig:
    D: int = 16               # object vector length (2 + 3 + 3 + shape code)
    M: int = 12               # object slots per scene
    f: int = 8                # shape code length
    D_omega: int = 16         # entity embedding width
    J: int = 2                # graph reasoning steps
    sketch_size: int = 64
    patch: int = 8
    sketch_width: int = 32
    sketch_blocks: int = 2
    sketch_heads: int = 2
    heads: int = 4
    encoder_blocks: int = 2
    bandwidth: float = 0.25
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    positions: bool = True
    use_sketch: bool = True
    use_knowledge: bool = True
    use_spectrum_filter: bool = True
    width: int = 64           # denoiser token width; equal to D means no in/out projections
    input_skip: bool = True   # precondition the head output with O_t (see denoiser)
    data_var: float = 0.08    # per-entry second moment of encoded scenes, for the skip

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"heads={self.heads} must divide width={self.width}")
        if self.data_var <= 0:
            raise ConfigError("data_var must be positive")
        if self.sketch_width % self.sketch_heads:
            raise ConfigError("sketch_heads must divide sketch_width")
        if self.sketch_size % self.patch:
            raise ConfigError(f"patch {self.patch} must divide raster size {self.sketch_size}")
        if not 0 < self.bandwidth <= 1:
            raise ConfigError("bandwidth must lie in (0, 1]")
        if self.J < 1:
            raise ConfigError("J must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


ABLATIONS = {
    "full": {},
    "sketch-only": {"use_knowledge": False},
    "knowledge-only": {"use_sketch": False},
    "no-sf": {"use_spectrum_filter": False},
}


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    batch_size: int = 32
    steps: int = 10000

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"invalid optimizer settings {asdict(self)}")


@dataclass
class RunConfig:
    """Everything ``train`` and ``ablate`` need, loaded from one JSON file.

    ``model`` holds :class:`ModelConfig` fields (dims, schedule, ablation
    flags); ``ablation`` names a preset from :data:`ABLATIONS` applied on
    top of it.
    """

    data: str
    kb: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: str = "full"
    seed: int = 0
    output_dir: str = "run"
    canonical_order: bool = True

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")

    def effective_model(self) -> ModelConfig:
        return ModelConfig(**{**self.model.to_dict(), **ABLATIONS[self.ablation]})

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config fields: {sorted(unknown)}")
        if "data" not in d:
            raise ConfigError("run config needs a 'data' path")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "optimizer" in d:
            opt = dict(d["optimizer"])
            bad = set(opt) - {f.name for f in fields(OptimizerConfig)}
            if bad:
                raise ConfigError(f"unknown optimizer fields: {sorted(bad)}")
            d["optimizer"] = OptimizerConfig(**opt)
        return cls(**d)
