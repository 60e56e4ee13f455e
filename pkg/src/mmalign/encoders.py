"""Frozen feature sources and the feature-file format.

The mock encoders stand in for a SigLIP image tower and a Whisper audio
encoder. Each produces a deterministic pseudo-random matrix keyed by the file
contents, so the rest of the pipeline sees stable, content-dependent inputs.

Note for users who supply real features: features taken from a hidden layer
(the penultimate one in LLaVA-style setups) tend to behave better downstream
than the tower's final output, which has been linked to more hallucinated
answers after instruction tuning. The mock has a single output, so this only
matters for real features written with :func:`save_features`.

Feature file layout (little-endian)::

    offset 0   b"MMMF"
    offset 4   u8 version (1)
    offset 5   u8 dtype   (0 = float32)
    offset 6   u8 ndim    (2 for a feature matrix)
    offset 7   u8 reserved (0)
    offset 8   ndim x u32 dims
    then       row-major float32 payload, nothing after it
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .minicore import Tensor

MAGIC = b"MMMF"
VERSION = 1
DTYPE_F32 = 0
_MAX_ELEMENTS = 1 << 31


class FeatureFormatError(ValueError):
    """Malformed feature file; ``offset`` is where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MediaRef:
    path: str
    kind: str  # "image" | "audio"
    placeholder: bool = False

    def __post_init__(self):
        if self.kind not in ("image", "audio"):
            raise ValueError(f"media kind must be 'image' or 'audio', got {self.kind!r}")


@dataclass(frozen=True)
class EncoderConfig:
    image_positions: int = 16
    image_dim: int = 32
    audio_positions: int = 1500
    audio_dim: int = 16
    content_seed_salt: str = "mmalign"

    def __post_init__(self):
        for name in ("image_positions", "image_dim", "audio_positions", "audio_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def shape_for(self, kind: str) -> tuple:
        if kind == "image":
            return (self.image_positions, self.image_dim)
        return (self.audio_positions, self.audio_dim)


class FeatureMatrix:
    """Read-only float32 matrix of encoder outputs (positions x feature dim)."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float32)
        if arr.ndim != 2 or 0 in arr.shape:
            raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self) -> tuple:
        return self._values.shape

    @property
    def rows(self) -> int:
        return self._values.shape[0]

    @property
    def cols(self) -> int:
        return self._values.shape[1]

    @property
    def frozen(self) -> bool:
        return True

    def as_tensor(self) -> Tensor:
        """Constant graph input; can never be made trainable."""
        return Tensor(self._values, frozen=True, op="leaf")

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureMatrix) and self.shape == other.shape and np.array_equal(
            self._values.view(np.uint32), other._values.view(np.uint32)
        )

    def __hash__(self):
        return hash((self.shape, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"FeatureMatrix(shape={self.shape})"

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "FeatureMatrix":
        return cls(np.zeros((rows, cols), dtype=np.float32))


def content_hash(data: bytes, salt: str, kind: str) -> int:
    """Stable 64-bit hash of (salt, kind, bytes)."""
    h = hashlib.blake2b(digest_size=8, person=b"mmalign-enc")
    h.update(salt.encode("utf-8"))
    h.update(b"\x00")
    h.update(kind.encode("ascii"))
    h.update(b"\x00")
    h.update(data)
    return int.from_bytes(h.digest(), "little")


def _pseudo_features(key: int, rows: int, cols: int) -> FeatureMatrix:
    # Philox is counter-based: the stream depends only on the key, on every platform
    gen = np.random.Generator(np.random.Philox(key=key))
    return FeatureMatrix(gen.random((rows, cols)) * 2.0 - 1.0)


def _read(media: MediaRef) -> bytes:
    try:
        return Path(media.path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read media file {media.path!r}: {e.strerror or e}") from e


def mock_encode_image(media: MediaRef, cfg: EncoderConfig) -> FeatureMatrix:
    rows, cols = cfg.shape_for("image")
    return _pseudo_features(content_hash(_read(media), cfg.content_seed_salt, "image"), rows, cols)


def mock_encode_audio(media: MediaRef, cfg: EncoderConfig) -> FeatureMatrix:
    rows, cols = cfg.shape_for("audio")
    return _pseudo_features(content_hash(_read(media), cfg.content_seed_salt, "audio"), rows, cols)


def encode(media: MediaRef, cfg: EncoderConfig) -> FeatureMatrix:
    """Features for ``media``: zeros for placeholders, a feature file if the
    path ends in ``.mmmf``, the mock encoder otherwise."""
    if media.placeholder:
        return FeatureMatrix.zeros(*cfg.shape_for(media.kind))
    if media.path.endswith(".mmmf"):
        m = load_features(media.path)
        if m.shape != cfg.shape_for(media.kind):
            raise ValueError(f"{media.path}: feature shape {m.shape} does not match config {cfg.shape_for(media.kind)}")
        return m
    if media.kind == "image":
        return mock_encode_image(media, cfg)
    return mock_encode_audio(media, cfg)


def features_to_bytes(m: FeatureMatrix) -> bytes:
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F32, 2, 0) + struct.pack("<2I", *m.shape)
    return header + m.values.astype("<f4").tobytes(order="C")


def features_from_bytes(buf: bytes) -> FeatureMatrix:
    if len(buf) < 8:
        raise FeatureFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise FeatureFormatError(f"bad magic {buf[:4]!r}", 0)
    version, dtype, ndim, _reserved = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise FeatureFormatError(f"unsupported dtype code {dtype}", 5)
    if ndim != 2:
        raise FeatureFormatError(f"feature matrix needs ndim=2, got {ndim}", 6)
    dims_end = 8 + 4 * ndim
    if len(buf) < dims_end:
        raise FeatureFormatError("truncated dimension table", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise FeatureFormatError("zero-length dimension", 8 + 4 * i)
        count *= d
        if count > _MAX_ELEMENTS:
            raise FeatureFormatError("dimension overflow", 8 + 4 * i)
    expected = dims_end + 4 * count
    if len(buf) < expected:
        raise FeatureFormatError(f"truncated payload: need {4 * count} bytes, have {len(buf) - dims_end}", len(buf))
    if len(buf) > expected:
        raise FeatureFormatError(f"{len(buf) - expected} trailing bytes", expected)
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end).reshape(dims)
    return FeatureMatrix(values)


def save_features(m: FeatureMatrix, path: Union[str, Path]) -> None:
    Path(path).write_bytes(features_to_bytes(m))


def load_features(path: Union[str, Path]) -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes())
