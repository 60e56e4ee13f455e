"""Prompt formatting for synthesis and the training chat template.

``format_prompt`` / ``format_user`` reproduce the Mistral ``[INST]`` layout
used to drive the instruction generator, byte for byte.

Training template (token level, reference tokenizer)::

    <s> <|user|> ...user tokens... <|end|> <|assistant|> ...answer tokens... </s> <|user|> ...

Only the answer tokens are supervised. An inline ``<image>`` or ``<audio>`` in
any turn becomes an adjacent open/close marker pair; a close tag written
right after its open tag (``<image></image>`` or ``<image> </image>``) is
folded into the same pair.
"""

from __future__ import annotations

import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

from .encoders import MediaRef
from .fusion import RawExample, SpecialTokens
from .minicore import ContractError

ROLES = ("user", "assistant")

_MARKER_RE = re.compile(r"(<image>\s*</image>|<audio>\s*</audio>|</?image>|</?audio>)")


def format_prompt(message: str, history: Sequence[Tuple[str, str]]) -> str:
    prompt = "<s>"
    for user_prompt, bot_response in history:
        prompt += f"[INST] {user_prompt} [/INST]"
        prompt += f" {bot_response}</s> "
    prompt += f"[INST] {message} [/INST]"
    return prompt


def format_user(history: Sequence[Tuple[str, str]]) -> str:
    """History followed by a bare ``[INST]`` so the model writes the next question."""
    if not history:
        raise ContractError("format_user needs at least one (user, assistant) pair")
    prompt = "<s>"
    for user_prompt, bot_response in history:
        prompt += f"[INST] {user_prompt} [/INST]"
        prompt += f" {bot_response}</s> "
    prompt += "[INST]"
    return prompt


@dataclass
class Turn:
    role: str
    content: str
    content_ms: Optional[str] = None

    def to_dict(self) -> Dict[str, str]:
        d = {"role": self.role, "content": self.content}
        if self.content_ms is not None:
            d["content_ms"] = self.content_ms
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(d["role"], d["content"], d.get("content_ms"))


def count_markers(text: str) -> List[str]:
    """Modality kinds of the inline markers in ``text``, in reading order."""
    kinds = []
    for m in _MARKER_RE.finditer(text):
        tag = m.group(0)
        if tag.startswith("</"):
            continue
        kinds.append("image" if "image" in tag else "audio")
    return kinds


@dataclass
class Conversation:
    turns: List[Turn]
    attachments: List[MediaRef] = field(default_factory=list)

    def validate(self) -> None:
        if not self.turns:
            raise ContractError("conversation has no turns")
        for i, t in enumerate(self.turns):
            expected = ROLES[i % 2]
            if t.role != expected:
                raise ContractError(f"turn {i} has role {t.role!r}, expected {expected!r}")
        kinds = [k for t in self.turns for k in count_markers(t.content)]
        if kinds != [a.kind for a in self.attachments]:
            raise ContractError(
                f"marker/attachment mismatch: {len(kinds)} markers {kinds} vs "
                f"{len(self.attachments)} attachments {[a.kind for a in self.attachments]}"
            )


class Tokenizer(Protocol):
    vocab_size: int

    def encode(self, text: str) -> List[int]: ...

    def token_id(self, token: str) -> int: ...


class WhitespaceTokenizer:
    """Reference tokenizer: whitespace split over a fixed vocabulary.

    Ids 0-6 are reserved (pad, bos, eos, unk and the three role tags); words
    follow in order of descending frequency, ties broken lexicographically.
    """

    RESERVED = ("<pad>", "<s>", "</s>", "<unk>", "<|user|>", "<|assistant|>", "<|end|>")

    def __init__(self, words: Sequence[str] = ()):
        self.itos: List[str] = list(self.RESERVED)
        for w in words:
            if w not in self.RESERVED:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in tokenizer vocabulary")

    @classmethod
    def fit(cls, texts: Iterable[str], max_words: Optional[int] = None) -> "WhitespaceTokenizer":
        counts = Counter()
        for t in texts:
            counts.update(_MARKER_RE.sub(" ", t).split())
        words = sorted((w for w in counts if w not in cls.RESERVED), key=lambda w: (-counts[w], w))
        if max_words is not None:
            words = words[:max_words]
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def unk_id(self) -> int:
        return 3

    def token_id(self, token: str) -> int:
        return self.stoi[token]

    def encode(self, text: str) -> List[int]:
        return [self.stoi.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if 0 <= i < len(self.itos))

    def to_list(self) -> List[str]:
        return list(self.itos[len(self.RESERVED) :])


def _encode_with_markers(text: str, tok: Tokenizer, special: SpecialTokens) -> Tuple[List[int], List[str]]:
    ids: List[int] = []
    kinds: List[str] = []
    pos = 0
    for m in _MARKER_RE.finditer(text):
        ids.extend(tok.encode(text[pos : m.start()]))
        tag = m.group(0)
        if tag.startswith("</"):
            raise ContractError(f"stray closing marker {tag!r} without a matching open marker")
        kind = "image" if "image" in tag else "audio"
        ids.extend(special.pair(kind))
        kinds.append(kind)
        pos = m.end()
    ids.extend(tok.encode(text[pos:]))
    return ids, kinds


def choose_language(turns: Sequence[Turn], policy: str, seed: int = 0) -> List[str]:
    """Pick ``content`` or ``content_ms`` for each turn."""
    if policy == "en":
        return [t.content for t in turns]
    if policy == "ms":
        return [t.content_ms if t.content_ms is not None else t.content for t in turns]
    if policy == "mixed":
        coin = random.Random(seed)
        out = []
        for t in turns:
            use_ms = coin.random() < 0.5
            out.append(t.content_ms if use_ms and t.content_ms is not None else t.content)
        return out
    raise ValueError(f"unknown language policy {policy!r}")


def render_training_example(
    conv: Conversation,
    tok: Tokenizer,
    special: SpecialTokens,
    lang_policy: str = "en",
    seed: int = 0,
) -> RawExample:
    conv.validate()
    texts = choose_language(conv.turns, lang_policy, seed)
    bos, eos = tok.token_id("<s>"), tok.token_id("</s>")
    user_tag, asst_tag, end_tag = tok.token_id("<|user|>"), tok.token_id("<|assistant|>"), tok.token_id("<|end|>")
    ids: List[int] = [bos]
    spans: List[Tuple[int, int]] = []
    kinds: List[str] = []
    for turn, text in zip(conv.turns, texts):
        body, k = _encode_with_markers(text, tok, special)
        kinds.extend(k)
        if turn.role == "user":
            ids.append(user_tag)
            ids.extend(body)
            ids.append(end_tag)
        else:
            if k:
                raise ContractError("markers inside an assistant turn are not supported")
            ids.append(asst_tag)
            start = len(ids)
            ids.extend(body)
            if len(ids) > start:
                spans.append((start, len(ids)))
            ids.append(eos)
    if kinds != [a.kind for a in conv.attachments]:
        raise ContractError(
            f"marker/attachment mismatch after language selection: {len(kinds)} markers vs "
            f"{len(conv.attachments)} attachments"
        )
    return RawExample(ids, list(conv.attachments), spans)
