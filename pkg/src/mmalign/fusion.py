"""Marker tokens, span fill-in, placeholders and batch collation.

A raw example carries adjacent marker pairs (``<image></image>``,
``<audio></audio>``) in its token stream. :func:`splice` keeps both marker
embeddings and inserts the projected feature rows strictly between them.

Labels are position-aligned: ``labels[t]`` is the token at fused position
``t`` when that token is assistant content, else :data:`IGNORE_ID`. The LM
loss does the one-step shift (logits at ``t`` score ``labels[t + 1]``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .encoders import MediaRef
from .minicore import NEG_INF, ContractError, DimensionError, Tensor, concat, embedding_lookup

#: label sentinel; negative so it can never collide with a vocabulary id
IGNORE_ID = -100

N_SPECIAL = 4


class MalformedExampleError(ContractError):
    """Marker tokens that do not form adjacent open/close pairs."""


class VocabularyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpecialTokens:
    image_open_id: int
    image_close_id: int
    audio_open_id: int
    audio_close_id: int

    @classmethod
    def after(cls, base_size: int) -> "SpecialTokens":
        """Ids base_size..base_size+3 in the fixed order image/audio, open/close."""
        if base_size < 1:
            raise ValueError("base vocabulary size must be at least 1")
        return cls(base_size, base_size + 1, base_size + 2, base_size + 3)

    def pair(self, kind: str) -> Tuple[int, int]:
        if kind == "image":
            return self.image_open_id, self.image_close_id
        if kind == "audio":
            return self.audio_open_id, self.audio_close_id
        raise ValueError(f"unknown modality {kind!r}")

    @property
    def ids(self) -> Tuple[int, int, int, int]:
        return (self.image_open_id, self.image_close_id, self.audio_open_id, self.audio_close_id)

    def to_dict(self) -> Dict[str, int]:
        return {
            "image_open_id": self.image_open_id,
            "image_close_id": self.image_close_id,
            "audio_open_id": self.audio_open_id,
            "audio_close_id": self.audio_close_id,
        }


def extend_vocab(model) -> SpecialTokens:
    """Give ``model`` four trainable marker rows after its base vocabulary.

    ``model`` must expose ``base_vocab_size``, ``special_tokens`` (None until
    extended) and ``grow_embeddings(n)``. Extending twice is an error.
    """
    if getattr(model, "special_tokens", None) is not None:
        raise VocabularyError("vocabulary already extended with modality markers")
    special = SpecialTokens.after(model.base_vocab_size)
    model.grow_embeddings(N_SPECIAL)
    model.special_tokens = special
    return special


@dataclass
class RawExample:
    token_ids: List[int]
    attachments: List[MediaRef] = field(default_factory=list)
    assistant_spans: List[Tuple[int, int]] = field(default_factory=list)  # half-open [start, end)

    def marker_pairs(self, special: SpecialTokens) -> List[Tuple[int, str]]:
        """(open position, kind) for every marker pair, in order."""
        opens = {special.image_open_id: "image", special.audio_open_id: "audio"}
        closes = {special.image_close_id: "image", special.audio_close_id: "audio"}
        pairs = []
        ids = self.token_ids
        i = 0
        while i < len(ids):
            tok = ids[i]
            if tok in opens:
                kind = opens[tok]
                if i + 1 >= len(ids) or closes.get(ids[i + 1]) != kind:
                    raise MalformedExampleError(f"<{kind}> at position {i} is not immediately followed by </{kind}>")
                pairs.append((i, kind))
                i += 2
                continue
            if tok in closes:
                raise MalformedExampleError(f"</{closes[tok]}> at position {i} has no opening marker")
            i += 1
        return pairs

    def validate(self, special: SpecialTokens) -> List[Tuple[int, str]]:
        pairs = self.marker_pairs(special)
        marker_kinds = [k for _, k in pairs]
        attach_kinds = [a.kind for a in self.attachments]
        if marker_kinds != attach_kinds:
            raise ContractError(
                "marker/attachment mismatch: "
                f"{marker_kinds.count('image')} image + {marker_kinds.count('audio')} audio markers "
                f"vs {attach_kinds.count('image')} image + {attach_kinds.count('audio')} audio attachments"
                + ("" if sorted(marker_kinds) != sorted(attach_kinds) else " (order differs)")
            )
        n = len(self.token_ids)
        marker_pos = {p for p, _ in pairs} | {p + 1 for p, _ in pairs}
        for s, e in self.assistant_spans:
            if not 0 <= s <= e <= n:
                raise ContractError(f"assistant span ({s}, {e}) outside [0, {n}]")
            if any(s <= p < e for p in marker_pos):
                raise ContractError(f"assistant span ({s}, {e}) overlaps a marker pair")
        return pairs

    def supervised_positions(self) -> List[int]:
        out = set()
        for s, e in self.assistant_spans:
            out.update(range(s, e))
        return sorted(out)

    def has_kind(self, kind: str, include_placeholders: bool = False) -> bool:
        return any(a.kind == kind and (include_placeholders or not a.placeholder) for a in self.attachments)


class Origin(NamedTuple):
    """Where a fused position came from."""

    source: str  # "text" | "attachment" | "pad"
    index: int  # token index, attachment index, or -1 for pad
    offset: int  # row within the attachment / pad run; 0 for text


@dataclass
class FusedSequence:
    embeddings: Tensor
    attention_mask: np.ndarray
    labels: np.ndarray
    position_map: List[Origin]
    placeholder: np.ndarray  # bool per position

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_supervised(self) -> int:
        """Positions that are scored by the shifted LM loss."""
        return int(np.count_nonzero(self.labels[1:] != IGNORE_ID))

    def index_of(self, origin: Origin) -> int:
        return self._inverse()[origin]

    def _inverse(self) -> Dict[Origin, int]:
        return {o: i for i, o in enumerate(self.position_map)}


def fused_length(ex: RawExample, lengths: Sequence[int]) -> int:
    return len(ex.token_ids) + sum(lengths)


def splice(
    ex: RawExample,
    projected: Sequence[Tensor],
    embed_table: Tensor,
    special: SpecialTokens,
    ignore_id: int = IGNORE_ID,
) -> FusedSequence:
    """Fill every marker pair with its projected rows.

    Placeholder attachments (and their two marker tokens) get attention mask
    0; everything else gets 1. Only assistant-span text is supervised.
    """
    pairs = ex.validate(special)
    if len(projected) != len(pairs):
        raise ContractError(f"marker/attachment mismatch: {len(pairs)} marker pairs but {len(projected)} projections")
    d = embed_table.shape[1]
    for j, p in enumerate(projected):
        if p.data.ndim != 2 or p.shape[1] != d:
            raise DimensionError(f"projection {j} has shape {p.shape}, expected rows x {d}")

    text = embedding_lookup(embed_table, ex.token_ids)
    n_text = len(ex.token_ids)
    # source rows: text rows first, then each projection in order
    bases = np.cumsum([n_text] + [p.shape[0] for p in projected])
    supervised = set(ex.supervised_positions())
    close_at = {p + 1: j for j, (p, _) in enumerate(pairs)}

    order: List[int] = []
    origins: List[Origin] = []
    labels: List[int] = []
    mask: List[int] = []
    ph: List[bool] = []
    for i, tok in enumerate(ex.token_ids):
        j = close_at.get(i)
        if j is not None:
            is_ph = ex.attachments[j].placeholder
            # the open marker was emitted on the previous iteration
            if is_ph:
                mask[-1] = 0
                ph[-1] = True
            for off in range(projected[j].shape[0]):
                order.append(int(bases[j]) + off)
                origins.append(Origin("attachment", j, off))
                labels.append(ignore_id)
                mask.append(0 if is_ph else 1)
                ph.append(is_ph)
            order.append(i)
            origins.append(Origin("text", i, 0))
            labels.append(ignore_id)
            mask.append(0 if is_ph else 1)
            ph.append(is_ph)
            continue
        order.append(i)
        origins.append(Origin("text", i, 0))
        labels.append(tok if i in supervised else ignore_id)
        mask.append(1)
        ph.append(False)

    stacked = concat([text, *projected], axis=0) if projected else text
    embeddings = embedding_lookup(stacked, order)
    return FusedSequence(
        embeddings=embeddings,
        attention_mask=np.asarray(mask, dtype=np.int8),
        labels=np.asarray(labels, dtype=np.int64),
        position_map=origins,
        placeholder=np.asarray(ph, dtype=bool),
    )


def add_empty_placeholders(
    ex: RawExample, special: SpecialTokens, kinds: Sequence[str] = ("image", "audio")
) -> RawExample:
    """Append a zero-feature span for every modality the example lacks.

    Spans go at the very end so real positions keep their indices and, under
    causal attention, never see them. Feature rows for a placeholder are zeros
    but still pass through the projector, which keeps every projector
    parameter inside every loss graph.
    """
    tokens = list(ex.token_ids)
    attachments = list(ex.attachments)
    for kind in kinds:
        if ex.has_kind(kind, include_placeholders=True):
            continue
        tokens.extend(special.pair(kind))
        attachments.append(MediaRef("", kind, placeholder=True))
    if len(tokens) == len(ex.token_ids):
        return ex
    return replace(ex, token_ids=tokens, attachments=attachments, assistant_spans=list(ex.assistant_spans))


def strip_placeholders(ex: RawExample, special: SpecialTokens) -> RawExample:
    """Inverse of :func:`add_empty_placeholders`; used for inference."""
    pairs = ex.marker_pairs(special)
    drop = set()
    keep_att = []
    for (pos, _), att in zip(pairs, ex.attachments):
        if att.placeholder:
            drop.update((pos, pos + 1))
        else:
            keep_att.append(att)
    if not drop:
        return ex
    tokens = [t for i, t in enumerate(ex.token_ids) if i not in drop]
    return replace(ex, token_ids=tokens, attachments=keep_att, assistant_spans=list(ex.assistant_spans))


@dataclass
class FusedBatch:
    sequences: List[FusedSequence]

    @property
    def length(self) -> int:
        return len(self.sequences[0])

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_supervised(self) -> int:
        return sum(s.n_supervised for s in self.sequences)


def pad_sequence(seq: FusedSequence, length: int, ignore_id: int = IGNORE_ID) -> FusedSequence:
    n = len(seq)
    if length < n:
        raise ValueError(f"cannot pad sequence of length {n} down to {length}")
    if length == n:
        return seq
    extra = length - n
    d = seq.embeddings.shape[1]
    return FusedSequence(
        embeddings=concat([seq.embeddings, Tensor(np.zeros((extra, d)))], axis=0),
        attention_mask=np.concatenate([seq.attention_mask, np.zeros(extra, dtype=np.int8)]),
        labels=np.concatenate([seq.labels, np.full(extra, ignore_id, dtype=np.int64)]),
        position_map=seq.position_map + [Origin("pad", -1, k) for k in range(extra)],
        placeholder=np.concatenate([seq.placeholder, np.zeros(extra, dtype=bool)]),
    )


def collate(batch: Sequence[FusedSequence], pad_to_multiple: Optional[int] = None) -> FusedBatch:
    """Right-pad every sequence to the longest (optionally rounded up)."""
    if not batch:
        raise ContractError("collate: empty batch")
    length = max(len(s) for s in batch)
    if pad_to_multiple:
        length = -(-length // pad_to_multiple) * pad_to_multiple
    return FusedBatch([pad_sequence(s, length) for s in batch])


def attention_bias(attention_mask: np.ndarray) -> np.ndarray:
    """Convert a 0/1 key mask into a causal additive T x T bias.

    Query ``i`` keeps key ``j`` when ``j <= i`` and the key is unmasked. The
    diagonal is always kept so no row is empty; a masked query only ever
    sees itself plus earlier real keys, and its output is never supervised.
    """
    m = np.asarray(attention_mask).astype(bool)
    t = m.shape[0]
    keep = np.tril(np.ones((t, t), dtype=bool)) & m[None, :]
    keep[np.arange(t), np.arange(t)] = True
    return np.where(keep, 0.0, NEG_INF)
