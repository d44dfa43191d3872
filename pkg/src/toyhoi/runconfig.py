"""The complete, hashable configuration of a run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .archive import canonical_json
from .backbone import DenoiserConfig
from .diffusion import T_INFER
from .inversion import TrainConfig


@dataclass
class SamplerConfig:
    method: str = "ddim"  # or "ddpm"
    steps: int = T_INFER
    clip: bool = True
    guidance_scale: float = 1.0  # 1.0 disables classifier-free guidance

    def __post_init__(self):
        if self.method not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "sampler": asdict(self.sampler),
                "denoiser": self.denoiser.to_dict()}

    def hash(self) -> str:
        """Short sha256 of the canonical (key-sorted) JSON form."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(TrainConfig.from_dict(d.get("train", {})), SamplerConfig(**d.get("sampler", {})),
                   DenoiserConfig(**d.get("denoiser", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
