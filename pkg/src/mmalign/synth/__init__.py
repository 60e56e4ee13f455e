from .backends import BackendError, LLMBackend, MockBackend, RemoteBackend, identity_translator, make_backend
from .generators import (
    PAIR_KINDS,
    CapacityError,
    SynthConfig,
    combine_sessions,
    filter_by_score,
    gen_audio_qa_session,
    gen_pair_relation,
    pair_prompt,
    pair_to_session,
)
from .records import (
    JsonlParseError,
    PairRecord,
    RecordValidationError,
    SessionRecord,
    TranscriptRecord,
    read_jsonl,
    record_from_dict,
    write_jsonl,
)

__all__ = [
    "PAIR_KINDS",
    "BackendError",
    "CapacityError",
    "JsonlParseError",
    "LLMBackend",
    "MockBackend",
    "PairRecord",
    "RecordValidationError",
    "RemoteBackend",
    "SessionRecord",
    "SynthConfig",
    "TranscriptRecord",
    "combine_sessions",
    "filter_by_score",
    "gen_audio_qa_session",
    "gen_pair_relation",
    "identity_translator",
    "make_backend",
    "pair_prompt",
    "pair_to_session",
    "read_jsonl",
    "record_from_dict",
    "write_jsonl",
]
