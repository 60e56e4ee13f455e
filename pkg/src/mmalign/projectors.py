"""Adapters from frozen encoder features into the LM embedding space.

Vision: LLaVA-style two-matrix MLP, linear -> GELU -> linear, one output row per
image position.

Audio: a strided conv shortens the encoder sequence, then GELU, then a
per-position linear map. With the default K=40, S=3 and no padding, 1500
encoder frames become floor((1500 - 40) / 3) + 1 = 487 rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .encoders import FeatureMatrix
from .minicore import DimensionError, Tensor, add, conv1d, conv_output_length, gelu, matmul, transpose
from .minicore.module import Module


@dataclass(frozen=True)
class ProjectorConfig:
    d_vision: int = 32
    d_audio: int = 16
    d_model: int = 64
    hidden: Optional[int] = None  # defaults to d_model
    conv_channels: Optional[int] = None  # defaults to d_model
    kernel: int = 40
    stride: int = 3
    pad_left: int = 0
    pad_right: int = 0
    audio_len: int = 1500
    init_scale: float = 1.0

    def __post_init__(self):
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError("kernel and stride must be positive")
        if self.pad_left < 0 or self.pad_right < 0:
            raise ValueError("padding must be non-negative")
        for name in ("d_vision", "d_audio", "d_model", "audio_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")
        # raises if the kernel cannot fit
        conv_output_length(self.audio_len, self.kernel, self.stride, self.pad_left, self.pad_right)

    @property
    def hidden_dim(self) -> int:
        return self.hidden or self.d_model

    @property
    def channels(self) -> int:
        return self.conv_channels or self.d_model

    @property
    def audio_out_len(self) -> int:
        return conv_output_length(self.audio_len, self.kernel, self.stride, self.pad_left, self.pad_right)


def _uniform(rng: np.random.Generator, shape, fan_in: int, init_scale: float) -> np.ndarray:
    bound = init_scale / math.sqrt(fan_in)
    if bound == 0.0:
        return np.zeros(shape)
    return rng.uniform(-bound, bound, size=shape)


class VisionProjector(Module):
    def __init__(self, cfg: ProjectorConfig, rng: np.random.Generator):
        super().__init__("vision")
        self.cfg = cfg
        h = cfg.hidden_dim
        s = cfg.init_scale
        self.W1 = self.register_parameter("W1", _uniform(rng, (cfg.d_vision, h), cfg.d_vision, s))
        self.b1 = self.register_parameter("b1", _uniform(rng, (h,), cfg.d_vision, s))
        self.W2 = self.register_parameter("W2", _uniform(rng, (h, cfg.d_model), h, s))
        self.b2 = self.register_parameter("b2", _uniform(rng, (cfg.d_model,), h, s))

    def fan_in(self, name: str) -> int:
        return self.cfg.d_vision if name.endswith(("W1", "b1")) else self.cfg.hidden_dim

    def __call__(self, feat) -> Tensor:
        return vision_project(feat, self)


class AudioProjector(Module):
    def __init__(self, cfg: ProjectorConfig, rng: np.random.Generator):
        super().__init__("audio")
        self.cfg = cfg
        c = cfg.channels
        s = cfg.init_scale
        fan_conv = cfg.d_audio * cfg.kernel
        self.conv_w = self.register_parameter("conv_w", _uniform(rng, (c, cfg.d_audio, cfg.kernel), fan_conv, s))
        self.conv_b = self.register_parameter("conv_b", _uniform(rng, (c,), fan_conv, s))
        self.lin_W = self.register_parameter("lin_W", _uniform(rng, (c, cfg.d_model), c, s))
        self.lin_b = self.register_parameter("lin_b", _uniform(rng, (cfg.d_model,), c, s))

    def fan_in(self, name: str) -> int:
        return self.cfg.d_audio * self.cfg.kernel if "conv" in name else self.cfg.channels

    def __call__(self, feat) -> Tensor:
        return audio_project(feat, self, self.cfg)


def _as_input(feat) -> Tensor:
    return feat.as_tensor() if isinstance(feat, FeatureMatrix) else feat


def vision_project(feat, params: VisionProjector) -> Tensor:
    """P x D_v features -> P x D_model rows."""
    x = _as_input(feat)
    if x.data.ndim != 2 or x.shape[1] != params.cfg.d_vision:
        raise DimensionError(f"vision_project: features {x.shape} do not have D_v={params.cfg.d_vision} columns")
    h = gelu(add(matmul(x, params.W1), params.b1))
    return add(matmul(h, params.W2), params.b2)


def audio_project(feat, params: AudioProjector, cfg: ProjectorConfig) -> Tensor:
    """L_a x D_a features -> L' x D_model rows (conv -> GELU -> linear)."""
    x = _as_input(feat)
    if x.data.ndim != 2 or x.shape[0] != cfg.audio_len:
        raise DimensionError(f"audio_project: expected {cfg.audio_len} feature rows, got shape {x.shape}")
    if x.shape[1] != cfg.d_audio:
        raise DimensionError(f"audio_project: features {x.shape} do not have D_a={cfg.d_audio} columns")
    y = conv1d(transpose(x), params.conv_w, params.conv_b, cfg.stride, cfg.pad_left, cfg.pad_right)
    y = gelu(y)
    return add(matmul(transpose(y), params.lin_W), params.lin_b)


def init_projectors(cfg: ProjectorConfig, rng_seed: int = 0) -> Tuple[VisionProjector, AudioProjector]:
    rng = np.random.default_rng(rng_seed)
    return VisionProjector(cfg, rng), AudioProjector(cfg, rng)
