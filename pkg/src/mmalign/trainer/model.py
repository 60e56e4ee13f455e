"""Tiny causal decoder plus the bundle that wires projectors into it."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..encoders import EncoderConfig, FeatureMatrix, MediaRef, encode
from ..fusion import (
    IGNORE_ID,
    FusedBatch,
    FusedSequence,
    RawExample,
    SpecialTokens,
    add_empty_placeholders,
    attention_bias,
    collate,
    extend_vocab,
    splice,
    strip_placeholders,
)
from ..minicore import (
    DimensionError,
    Tensor,
    add,
    columns,
    concat,
    cross_entropy_ignore,
    embedding_lookup,
    gelu,
    layernorm,
    masked_softmax,
    matmul,
    scale,
    transpose,
)
from ..minicore.module import Module
from ..projectors import ProjectorConfig, init_projectors


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_seq: int = 1024
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.max_seq) <= 0:
            raise ValueError("LM dimensions must be positive")


class TinyDecoderLM(Module):
    """Pre-LN causal transformer with learned positions."""

    def __init__(self, base_vocab_size: int, cfg: LMConfig, seed: int = 0):
        super().__init__("lm")
        self.cfg = cfg
        self.base_vocab_size = base_vocab_size
        self.special_tokens: Optional[SpecialTokens] = None
        self._rng = np.random.default_rng(seed)
        d = cfg.d_model
        r = self._rng
        self.embed = self.register_parameter("embed.base", r.normal(0.0, 1.0, size=(base_vocab_size, d)))
        self.special_embed: Optional[Tensor] = None
        self.pos = self.register_parameter("pos", r.normal(0.0, 0.1, size=(cfg.max_seq, d)))
        self.blocks = []
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            blk = {
                "ln1_g": self.register_parameter(p + "ln1.g", np.ones(d)),
                "ln1_b": self.register_parameter(p + "ln1.b", np.zeros(d)),
                "Wq": self.register_parameter(p + "attn.Wq", r.normal(0.0, 1 / math.sqrt(d), size=(d, d))),
                "Wk": self.register_parameter(p + "attn.Wk", r.normal(0.0, 1 / math.sqrt(d), size=(d, d))),
                "Wv": self.register_parameter(p + "attn.Wv", r.normal(0.0, 1 / math.sqrt(d), size=(d, d))),
                "Wo": self.register_parameter(p + "attn.Wo", r.normal(0.0, 1 / math.sqrt(d), size=(d, d))),
                "ln2_g": self.register_parameter(p + "ln2.g", np.ones(d)),
                "ln2_b": self.register_parameter(p + "ln2.b", np.zeros(d)),
                "W1": self.register_parameter(p + "mlp.W1", r.normal(0.0, 1 / math.sqrt(d), size=(d, cfg.ffn_mult * d))),
                "b1": self.register_parameter(p + "mlp.b1", np.zeros(cfg.ffn_mult * d)),
                "W2": self.register_parameter(
                    p + "mlp.W2", r.normal(0.0, 1 / math.sqrt(cfg.ffn_mult * d), size=(cfg.ffn_mult * d, d))
                ),
                "b2": self.register_parameter(p + "mlp.b2", np.zeros(d)),
            }
            self.blocks.append(blk)
        self.lnf_g = self.register_parameter("ln_f.g", np.ones(d))
        self.lnf_b = self.register_parameter("ln_f.b", np.zeros(d))
        self.head_W = self.register_parameter("head.W", r.normal(0.0, 1 / math.sqrt(d), size=(d, base_vocab_size)))
        self.head_b = self.register_parameter("head.b", np.zeros(base_vocab_size))

    @property
    def vocab_size(self) -> int:
        extra = 0 if self.special_embed is None else self.special_embed.shape[0]
        return self.base_vocab_size + extra

    def grow_embeddings(self, n: int) -> Tensor:
        rows = self._rng.normal(0.0, 1.0, size=(n, self.cfg.d_model))
        self.special_embed = self.register_parameter("embed.special", rows)
        return self.special_embed

    def embed_table(self) -> Tensor:
        if self.special_embed is None:
            return self.embed
        return concat([self.embed, self.special_embed], axis=0)

    def _attention(self, x: Tensor, blk: dict, bias: np.ndarray) -> Tensor:
        cfg = self.cfg
        dh = cfg.d_model // cfg.n_heads
        q = matmul(x, blk["Wq"])
        k = matmul(x, blk["Wk"])
        v = matmul(x, blk["Wv"])
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            scores = scale(matmul(columns(q, lo, hi), transpose(columns(k, lo, hi))), 1.0 / math.sqrt(dh))
            heads.append(matmul(masked_softmax(scores, bias), columns(v, lo, hi)))
        out = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return matmul(out, blk["Wo"])

    def forward(self, embeddings: Tensor, attention_mask: Sequence[int]) -> Tensor:
        """Token embeddings (T x D) and a 0/1 key mask -> logits (T x V_base)."""
        t = embeddings.shape[0]
        if t > self.cfg.max_seq:
            raise DimensionError(f"sequence length {t} exceeds max_seq={self.cfg.max_seq}")
        bias = attention_bias(np.asarray(attention_mask))
        x = add(embeddings, embedding_lookup(self.pos, range(t)))
        eps = self.cfg.ln_eps
        for blk in self.blocks:
            x = add(x, self._attention(layernorm(x, blk["ln1_g"], blk["ln1_b"], eps), blk, bias))
            h = layernorm(x, blk["ln2_g"], blk["ln2_b"], eps)
            h = add(matmul(gelu(add(matmul(h, blk["W1"]), blk["b1"])), blk["W2"]), blk["b2"])
            x = add(x, h)
        x = layernorm(x, self.lnf_g, self.lnf_b, eps)
        return add(matmul(x, self.head_W), self.head_b)


@dataclass
class Sample:
    """A rendered example together with one feature matrix per attachment."""

    example: RawExample
    features: List[FeatureMatrix]

    def __post_init__(self):
        if len(self.features) != len(self.example.attachments):
            raise ValueError(
                f"{len(self.features)} feature matrices for {len(self.example.attachments)} attachments"
            )


GROUPS = ("lm", "special_tokens", "vision_projector", "audio_projector")


class MultimodalModel:
    """Tiny LM + vision/audio projectors + marker tokens."""

    def __init__(
        self,
        base_vocab_size: int,
        lm_cfg: LMConfig = LMConfig(),
        proj_cfg: Optional[ProjectorConfig] = None,
        enc_cfg: EncoderConfig = EncoderConfig(),
        seed: int = 0,
    ):
        if proj_cfg is None:
            proj_cfg = ProjectorConfig(
                d_vision=enc_cfg.image_dim,
                d_audio=enc_cfg.audio_dim,
                d_model=lm_cfg.d_model,
                audio_len=enc_cfg.audio_positions,
            )
        if proj_cfg.d_model != lm_cfg.d_model:
            raise ValueError("projector d_model must match the LM")
        if (proj_cfg.d_vision, proj_cfg.d_audio, proj_cfg.audio_len) != (
            enc_cfg.image_dim,
            enc_cfg.audio_dim,
            enc_cfg.audio_positions,
        ):
            raise ValueError("projector input dims must match the encoder config")
        self.lm_cfg, self.proj_cfg, self.enc_cfg, self.seed = lm_cfg, proj_cfg, enc_cfg, seed
        self.lm = TinyDecoderLM(base_vocab_size, lm_cfg, seed)
        self.special = extend_vocab(self.lm)
        self.vision, self.audio = init_projectors(proj_cfg, seed + 1)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        return {**self.lm.named_parameters(), **self.vision.named_parameters(), **self.audio.named_parameters()}

    def groups(self) -> Dict[str, List[str]]:
        lm_names = [n for n in self.lm.named_parameters() if n != "lm.embed.special"]
        return {
            "lm": lm_names,
            "special_tokens": ["lm.embed.special"],
            "vision_projector": list(self.vision.named_parameters()),
            "audio_projector": list(self.audio.named_parameters()),
        }

    def set_trainable(self, groups) -> List[str]:
        """Make exactly the listed groups trainable; returns their parameter names."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        names = []
        params = self.named_parameters()
        for g, members in self.groups().items():
            on = g in groups
            for n in members:
                params[n].requires_grad = on
                if on:
                    names.append(n)
        return names

    def trainable(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def config_dict(self) -> dict:
        return {
            "base_vocab_size": self.lm.base_vocab_size,
            "lm": asdict(self.lm_cfg),
            "projector": asdict(self.proj_cfg),
            "encoder": asdict(self.enc_cfg),
            "seed": self.seed,
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "MultimodalModel":
        return cls(
            d["base_vocab_size"],
            LMConfig(**d["lm"]),
            ProjectorConfig(**d["projector"]),
            EncoderConfig(**d["encoder"]),
            d["seed"],
        )

    # -- forward ------------------------------------------------------------

    def project(self, kind: str, feat: FeatureMatrix) -> Tensor:
        if kind == "image":
            return self.vision(feat)
        return self.audio(feat)

    def fuse(self, sample: Sample) -> FusedSequence:
        ex = sample.example
        projected = [self.project(a.kind, f) for a, f in zip(ex.attachments, sample.features)]
        return splice(ex, projected, self.lm.embed_table(), self.special, IGNORE_ID)

    def batch_loss(self, samples: Sequence[Sample]) -> tuple:
        """Mean next-token loss over every supervised position in ``samples``.

        Returns (loss tensor, number of supervised positions).
        """
        batch = collate([self.fuse(s) for s in samples])
        return self.fused_batch_loss(batch)

    def fused_batch_loss(self, batch: FusedBatch) -> tuple:
        rows = []
        labels: List[int] = []
        for seq in batch.sequences:
            logits = self.lm.forward(seq.embeddings, seq.attention_mask)
            t = len(seq)
            if t < 2:
                continue
            rows.append(embedding_lookup(logits, range(t - 1)))
            labels.extend(int(v) for v in seq.labels[1:])
        if not rows:
            raise ValueError("batch has no sequence long enough to score")
        stacked = rows[0] if len(rows) == 1 else concat(rows, axis=0)
        loss = cross_entropy_ignore(stacked, labels, IGNORE_ID)
        return loss, sum(1 for v in labels if v != IGNORE_ID)

    # -- placeholders -------------------------------------------------------

    def with_placeholders(self, sample: Sample) -> Sample:
        ex = add_empty_placeholders(sample.example, self.special)
        if ex is sample.example:
            return sample
        feats = list(sample.features)
        for att in ex.attachments[len(sample.features) :]:
            feats.append(encode(att, self.enc_cfg))
        return Sample(ex, feats)

    def without_placeholders(self, sample: Sample) -> Sample:
        ex = strip_placeholders(sample.example, self.special)
        if ex is sample.example:
            return sample
        feats = [f for a, f in zip(sample.example.attachments, sample.features) if not a.placeholder]
        return Sample(ex, feats)


class FeatureStore:
    """Resolves media references to features, caching by path."""

    def __init__(self, enc_cfg: EncoderConfig, root: Optional[str] = None):
        self.enc_cfg = enc_cfg
        self.root = root
        self._cache: Dict[tuple, FeatureMatrix] = {}

    def resolve(self, ref: MediaRef) -> MediaRef:
        if ref.placeholder or self.root is None or ref.path.startswith("/"):
            return ref
        import os

        return MediaRef(os.path.join(self.root, ref.path), ref.kind, ref.placeholder)

    def __call__(self, ref: MediaRef) -> FeatureMatrix:
        key = (ref.path, ref.kind, ref.placeholder)
        if key not in self._cache:
            self._cache[key] = encode(self.resolve(ref), self.enc_cfg)
        return self._cache[key]

    def snapshot(self) -> Dict[tuple, bytes]:
        return {k: v.values.tobytes() for k, v in self._cache.items()}
