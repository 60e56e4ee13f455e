"""Synthetic conversation generators and the session combiner."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from ..chat import Turn, format_prompt, format_user
from .backends import BackendError, LLMBackend, Translator, identity_translator
from .records import PairRecord, RecordValidationError, SessionRecord, TranscriptRecord

SEED_QUESTION_SUFFIX = "\n\ngenerate questions based on context above"

PAIR_KINDS = ("image-image", "audio-audio", "audio-image")

# (first label, second label, question); the first two lines end in a space
_PAIR_TEMPLATES = {
    "image-image": ("Picture 1", "Picture 2", "What is related between picture 1 and picture 2."),
    "audio-audio": ("Audio 1", "Audio 2", "What is related between audio 1 and audio 2"),
    "audio-image": ("Audio 1", "Picture 1", "What is related between audio 1 and picture 1"),
}


class CapacityError(RuntimeError):
    def __init__(self, message: str, visual_remaining: int, audio_remaining: int):
        super().__init__(f"{message} (remaining: visual={visual_remaining}, audio={audio_remaining})")
        self.visual_remaining = visual_remaining
        self.audio_remaining = audio_remaining


@dataclass(frozen=True)
class SynthConfig:
    n_sessions: int = 100
    turns_min: int = 2
    turns_max: int = 4
    image_branch_threshold: float = 0.4
    n_followups: int = 2
    score_threshold: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.image_branch_threshold <= 1.0:
            raise ValueError("image_branch_threshold must be in [0, 1]")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 1 <= self.turns_min <= self.turns_max:
            raise ValueError("need 1 <= turns_min <= turns_max")
        if self.n_sessions < 0 or self.n_followups < 0:
            raise ValueError("n_sessions and n_followups must be non-negative")


def filter_by_score(records: Iterable[TranscriptRecord], threshold: float) -> List[TranscriptRecord]:
    records = list(records)
    for r in records:
        r.validate()
    return [r for r in records if r.score >= threshold]


def seed_question_prompt(paragraph: str) -> str:
    return f"{paragraph}{SEED_QUESTION_SUFFIX}"


def gen_audio_qa_session(
    context: TranscriptRecord,
    llm: LLMBackend,
    n_followups: int = 2,
    seed: int = 0,
    translator: Translator = identity_translator,
) -> SessionRecord:
    """Multi-turn QA grounded in one transcript.

    The generator proposes seed questions from the transcript (one is picked
    with ``seed``), answers it with the transcript in the prompt, then runs
    ``n_followups`` rounds of follow-up question and answer over the growing
    history. The first user turn carries the ``<audio>`` marker.
    """
    paragraph = context.text
    if not paragraph.strip():
        raise RecordValidationError(f"{context.filename}: empty transcript")
    questions = [q.strip() for q in llm.generate(seed_question_prompt(paragraph)).splitlines() if q.strip()]
    if not questions:
        raise BackendError("backend returned no seed question", seed_question_prompt(paragraph))
    initial_question = random.Random(seed).choice(questions)

    prompt = f"{paragraph}\n{initial_question}"
    answer = llm.generate(format_prompt(prompt, []))
    history: List[Tuple[str, str]] = [(prompt, answer)]
    turns = [
        Turn("user", f"<audio>{initial_question}", translator(f"<audio>{initial_question}")),
        Turn("assistant", answer, translator(answer)),
    ]
    for _ in range(n_followups):
        question = llm.generate(format_user(history))
        answer = llm.generate(format_prompt(question, history))
        history.append((question, answer))
        turns.append(Turn("user", question, translator(question)))
        turns.append(Turn("assistant", answer, translator(answer)))
    return SessionRecord([context.filename], turns, context=paragraph)


def pair_prompt(kind: str, first: str, second: str) -> str:
    if kind not in _PAIR_TEMPLATES:
        raise ValueError(f"pair kind must be one of {PAIR_KINDS}, got {kind!r}")
    a, b, question = _PAIR_TEMPLATES[kind]
    return f"\n{a}: {first} \n{b}: {second}\n{question}\n"


def pair_instruction(kind: str) -> str:
    return _PAIR_TEMPLATES[kind][2].rstrip(".")


def gen_pair_relation(
    a: Tuple[str, str],
    b: Tuple[str, str],
    kind: str,
    llm: LLMBackend,
    translator: Translator = identity_translator,
) -> PairRecord:
    """Ask the backend how two described items relate.

    ``a`` and ``b`` are (filename, description) pairs; for ``audio-image``
    ``a`` is the audio and ``b`` the image.
    """
    if not a[1] or not b[1]:
        raise RecordValidationError("both items need a caption or transcription")
    prompt = pair_prompt(kind, a[1], b[1])
    answer = llm.generate(prompt)
    instruction = pair_instruction(kind)
    return PairRecord(
        filename=[a[0], b[0]],
        filename_description=[a[1], b[1]],
        instruction=instruction,
        answer=answer,
        instruction_ms=translator(instruction),
        answer_ms=translator(answer),
    )


def pair_to_session(rec: PairRecord, kind: str) -> SessionRecord:
    """Turn a pair record into a two-turn session with inline markers."""
    first, second = {"image-image": ("image", "image"), "audio-audio": ("audio", "audio"), "audio-image": ("audio", "image")}[kind]
    content = f"<{first}><{second}>{rec.instruction}"
    content_ms = f"<{first}><{second}>{rec.instruction_ms}"
    return SessionRecord(
        list(rec.filename),
        [Turn("user", content, content_ms), Turn("assistant", rec.answer, rec.answer_ms)],
    )


def combine_sessions(
    visual_pool: Sequence[SessionRecord],
    audio_pool: Sequence[SessionRecord],
    cfg: SynthConfig,
    rng: Optional[random.Random] = None,
) -> List[SessionRecord]:
    """Stitch 2-4 single-source segments into each of ``cfg.n_sessions`` sessions.

    Per segment a uniform draw above ``image_branch_threshold`` picks the
    visual pool, otherwise the audio pool; the record is drawn uniformly from
    the ones not used yet, so no source record appears twice in a run.
    """
    rng = rng if rng is not None else random.Random(cfg.rng_seed)
    visual_left = set(range(len(visual_pool)))
    audio_left = set(range(len(audio_pool)))
    combined = []
    for _ in range(cfg.n_sessions):
        filename: List[str] = []
        conversations: List[Turn] = []
        for _ in range(rng.randint(cfg.turns_min, cfg.turns_max)):
            if rng.random() > cfg.image_branch_threshold:
                if not visual_left:
                    raise CapacityError("visual pool exhausted", len(visual_left), len(audio_left))
                idx = rng.choice(sorted(visual_left))
                visual_left.discard(idx)
                s = visual_pool[idx]
            else:
                if not audio_left:
                    raise CapacityError("audio pool exhausted", len(visual_left), len(audio_left))
                idx = rng.choice(sorted(audio_left))
                audio_left.discard(idx)
                s = audio_pool[idx]
            filename.extend(s.filename)
            conversations.extend(Turn(t.role, t.content, t.content_ms) for t in s.conversations)
        combined.append(SessionRecord(filename, conversations))
    return combined
