"""Training configuration and the stage -> trainable-group table."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import FrozenSet, Optional, Tuple

from ..minicore import OptimizerConfig

STAGES = ("align_vision", "align_audio", "finetune")

# groups updated in each stage; the encoders are never trainable
STAGE_TRAINABLE = {
    "align_vision": frozenset({"vision_projector", "special_tokens"}),
    "align_audio": frozenset({"audio_projector", "special_tokens"}),
    "finetune": frozenset({"lm", "special_tokens", "vision_projector", "audio_projector"}),
}

ALL_GROUPS = frozenset({"encoders", "lm", "special_tokens", "vision_projector", "audio_projector"})


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training stage.

    ``freeze`` defaults to everything the stage does not train. A caller may
    pass it explicitly, but it has to agree with the stage.
    """

    stage: str = "finetune"
    batch_size: int = 12
    lr: float = 2e-5
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    n_devices: int = 1
    steps: int = 100
    seed: int = 0
    max_seq: int = 1024
    lang_policy: str = "en"
    placeholders: bool = True
    workers: int = 1
    freeze: Optional[FrozenSet[str]] = field(default=None)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size <= 0 or self.n_devices <= 0 or self.steps < 0 or self.workers <= 0:
            raise ValueError("batch_size, n_devices and workers must be positive and steps non-negative")
        if self.batch_size % self.n_devices:
            raise ValueError(f"batch_size={self.batch_size} is not divisible by n_devices={self.n_devices}")
        if self.max_seq <= 0:
            raise ValueError("max_seq must be positive")
        if self.lang_policy not in ("en", "ms", "mixed"):
            raise ValueError(f"unknown lang_policy {self.lang_policy!r}")
        OptimizerConfig(self.optimizer, self.lr, tuple(self.betas), self.eps)
        expected = ALL_GROUPS - STAGE_TRAINABLE[self.stage]
        if self.freeze is None:
            object.__setattr__(self, "freeze", expected)
        else:
            given = frozenset(self.freeze)
            unknown = given - ALL_GROUPS
            if unknown:
                raise ValueError(f"unknown groups in freeze: {sorted(unknown)}")
            if given != expected:
                raise ValueError(
                    f"freeze set {sorted(given)} does not match stage {self.stage!r} (expected {sorted(expected)})"
                )
            object.__setattr__(self, "freeze", given)

    @property
    def trainable_groups(self) -> FrozenSet[str]:
        return STAGE_TRAINABLE[self.stage]

    @property
    def per_device(self) -> int:
        return self.batch_size // self.n_devices

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr, tuple(self.betas), self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["freeze"] = sorted(self.freeze)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        if d.get("freeze") is not None:
            d["freeze"] = frozenset(d["freeze"])
        return cls(**d)
