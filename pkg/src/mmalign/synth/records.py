"""Dataset record types and JSON Lines I/O.

Field names follow the published dataset rows: ``filename``,
``filename_description``, ``instruction``/``answer`` plus their ``_ms`` Malay
twins, and ``conversations`` lists of ``{role, content, content_ms}`` turns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from ..chat import Turn, count_markers


class RecordValidationError(ValueError):
    pass


class JsonlParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class TranscriptRecord:
    filename: str
    text: str
    score: float

    def validate(self) -> None:
        if not self.filename:
            raise RecordValidationError("transcript record has an empty filename")
        if not isinstance(self.score, (int, float)) or not 0.0 <= self.score <= 1.0:
            raise RecordValidationError(f"{self.filename}: score {self.score!r} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {"filename": self.filename, "text": self.text, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptRecord":
        return cls(d["filename"], d["text"], d["score"])


@dataclass
class PairRecord:
    filename: List[str]
    filename_description: List[str]
    instruction: str
    answer: str
    instruction_ms: str
    answer_ms: str

    def validate(self) -> None:
        if len(self.filename) != 2 or len(self.filename_description) != 2:
            raise RecordValidationError(
                f"pair record needs 2 filenames and 2 descriptions, got {len(self.filename)} and "
                f"{len(self.filename_description)}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "filename": list(self.filename),
            "filename_description": list(self.filename_description),
            "instruction": self.instruction,
            "answer": self.answer,
            "instruction_ms": self.instruction_ms,
            "answer_ms": self.answer_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(
            list(d["filename"]),
            list(d["filename_description"]),
            d["instruction"],
            d["answer"],
            d.get("instruction_ms", d["instruction"]),
            d.get("answer_ms", d["answer"]),
        )


@dataclass
class SessionRecord:
    filename: List[str]
    conversations: List[Turn]
    context: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def marker_kinds(self) -> List[str]:
        return [k for t in self.conversations for k in count_markers(t.content)]

    def validate(self) -> None:
        n = len(self.marker_kinds())
        if n != len(self.filename):
            raise RecordValidationError(f"{n} inline markers but {len(self.filename)} filenames")

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "filename": list(self.filename),
            "conversations": [t.to_dict() for t in self.conversations],
        }
        if self.context is not None:
            d["context"] = self.context
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionRecord":
        d = dict(d)
        if "filename" in d:
            fn = d.pop("filename")
        elif "image" in d:
            # single-image visual rows carry their path under "image"
            fn = d.pop("image")
        else:
            raise KeyError("filename")
        files = [fn] if isinstance(fn, str) else list(fn)
        turns = d.pop("conversations") if "conversations" in d else d.pop("chat")
        context = d.pop("context", None)
        return cls(files, [Turn.from_dict(t) for t in turns], context, d)


Record = Union[TranscriptRecord, PairRecord, SessionRecord]


def record_from_dict(d: dict) -> Record:
    if not isinstance(d, dict):
        raise RecordValidationError(f"expected a JSON object, got {type(d).__name__}")
    if "conversations" in d or "chat" in d:
        return SessionRecord.from_dict(d)
    if "instruction" in d:
        return PairRecord.from_dict(d)
    if "score" in d and "text" in d:
        return TranscriptRecord.from_dict(d)
    raise RecordValidationError(f"unrecognised record with keys {sorted(d)}")


def schema_name(rec: Record) -> str:
    return {TranscriptRecord: "transcript", PairRecord: "pair", SessionRecord: "session"}[type(rec)]


def dumps(rec: Record) -> str:
    return json.dumps(rec.to_dict(), ensure_ascii=False)


def write_jsonl(records: Iterable[Record], path: Union[str, Path]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(dumps(rec))
            f.write("\n")
            n += 1
    return n


def iter_jsonl_dicts(path: Union[str, Path]):
    """Yield (line number, parsed object), skipping blank lines."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise JsonlParseError(f"invalid JSON ({e.msg})", lineno) from e


def read_jsonl(path: Union[str, Path]) -> List[Record]:
    out = []
    for lineno, obj in iter_jsonl_dicts(path):
        try:
            out.append(record_from_dict(obj))
        except (KeyError, TypeError, RecordValidationError) as e:
            raise JsonlParseError(f"bad record: {e}", lineno) from e
    return out
