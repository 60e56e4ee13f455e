"""Command-line entry point: ``python -m mmalign <command> ...``.

Exit codes: 0 ok, 1 check failure, 2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from typing import Dict, List, Optional, Sequence

from .chat import Conversation, WhitespaceTokenizer
from .encoders import MediaRef
from .fusion import VocabularyError
from .minicore import ContractError
from .minicore.suite import CASES, run_suite
from .runconfig import ConfigError, RunConfig, load_run_config, parse_overrides
from .synth import (
    PAIR_KINDS,
    BackendError,
    CapacityError,
    JsonlParseError,
    RecordValidationError,
    SessionRecord,
    TranscriptRecord,
    combine_sessions,
    filter_by_score,
    gen_audio_qa_session,
    gen_pair_relation,
    make_backend,
    read_jsonl,
    record_from_dict,
    write_jsonl,
)
from .synth.records import PairRecord, iter_jsonl_dicts, schema_name
from .trainer import (
    FeatureStore,
    MultimodalModel,
    TrainResult,
    conversation_samples,
    load_checkpoint,
    make_toy_corpus,
    model_from_checkpoint,
    pretrain_align,
    resume,
    save_checkpoint,
    toy_alignment_data,
    toy_tokenizer,
    train_steps,
)
from .trainer.loops import MODALITY_KIND, MODALITY_STAGE

EXIT_OK, EXIT_CHECK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3
TOY = "toy"


class DatasetError(ValueError):
    pass


# -- helpers -----------------------------------------------------------------


def _require_file(path: str, what: str) -> str:
    if not path:
        raise DatasetError(f"no {what} given")
    if not os.path.isfile(path):
        raise DatasetError(f"{what} not found: {path}")
    return path


def _write_loss_csv(losses: Sequence[float], path: str, start: int = 0) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(losses):
            f.write(f"{start + i},{loss!r}\n")


def _finish_training(result: TrainResult, out_dir: str, start: int = 0) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(result.checkpoint, os.path.join(out_dir, "checkpoint.mmmc"))
    _write_loss_csv(result.losses, os.path.join(out_dir, "loss.csv"), start)
    if result.losses:
        print(f"steps {start}..{start + len(result.losses) - 1}: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")
    else:
        print("0 steps: checkpoint holds the initial parameters")
    print(f"wrote {os.path.join(out_dir, 'checkpoint.mmmc')} and loss.csv")


def _new_model(cfg: RunConfig, vocab_size: int) -> MultimodalModel:
    return MultimodalModel(vocab_size, cfg.lm, cfg.projector, cfg.encoder, seed=cfg.train.seed)


def _description(row: dict) -> str:
    for key in ("description", "caption", "text", "filename_description"):
        if isinstance(row.get(key), str) and row[key]:
            return row[key]
    raise RecordValidationError(f"item {row.get('filename')!r} has no description, caption or text")


def _read_items(path: str) -> List[tuple]:
    items = []
    for lineno, row in iter_jsonl_dicts(path):
        if not isinstance(row, dict) or not isinstance(row.get("filename"), str):
            raise JsonlParseError("item rows need a string 'filename'", lineno)
        items.append((row["filename"], _description(row)))
    return items


def _session_to_conversation(rec: SessionRecord, media_root: str) -> Conversation:
    rec.validate()
    kinds = rec.marker_kinds()
    refs = [MediaRef(os.path.join(media_root, f) if media_root else f, k) for f, k in zip(rec.filename, kinds)]
    return Conversation(list(rec.conversations), refs)


# -- synth -------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    backend = make_backend(args.backend, cfg.synth.rng_seed)
    scfg = cfg.synth
    if args.kind == "audio-qa":
        src = _require_file(args.input or cfg.paths.data, "transcript dataset")
        records = read_jsonl(src)
        bad = [r for r in records if not isinstance(r, TranscriptRecord)]
        if bad:
            raise RecordValidationError(f"{src}: expected transcript rows, found {schema_name(bad[0])}")
        kept = filter_by_score(records, scfg.score_threshold)
        sessions = [
            gen_audio_qa_session(r, backend, scfg.n_followups, seed=scfg.rng_seed + i) for i, r in enumerate(kept)
        ]
        n = write_jsonl(sessions, args.out)
        print(f"transcripts read: {len(records)}  kept (score >= {scfg.score_threshold}): {len(kept)}")
        print(f"sessions written: {n}  turns per session: {2 + 2 * scfg.n_followups}")
        return EXIT_OK

    if args.kind == "pairs":
        src = _require_file(args.input or cfg.paths.data, "item dataset")
        first = _read_items(src)
        if args.second:
            second = _read_items(_require_file(args.second, "second item dataset"))
            pairs = list(zip(first, second))
        else:
            pairs = list(zip(first[0::2], first[1::2]))
        recs = [gen_pair_relation(a, b, args.pair_kind, backend) for a, b in pairs]
        n = write_jsonl(recs, args.out)
        print(f"items read: {len(first)}  pair records written: {n}  kind: {args.pair_kind}")
        return EXIT_OK

    # combine
    vis_path = _require_file(args.visual, "visual session dataset")
    aud_path = _require_file(args.audio, "audio session dataset")
    pools = []
    for p in (vis_path, aud_path):
        recs = read_jsonl(p)
        for r in recs:
            if not isinstance(r, SessionRecord):
                raise RecordValidationError(f"{p}: expected session rows, found {schema_name(r)}")
            r.validate()
        pools.append(recs)
    combined = combine_sessions(pools[0], pools[1], scfg)
    n = write_jsonl(combined, args.out)
    vis_files = {f for r in pools[0] for f in r.filename}
    segments = [f for s in combined for f in s.filename]
    frac = sum(f in vis_files for f in segments) / len(segments) if segments else 0.0
    print(f"sessions written: {n}  segments: {len(segments)}  visual fraction: {frac:.4f}")
    return EXIT_OK


# -- training ----------------------------------------------------------------


def _caption_data(cfg: RunConfig, modality: str, path: str, model: Optional[MultimodalModel], tok):
    rows = []
    for lineno, row in iter_jsonl_dicts(path):
        if not isinstance(row, dict) or not isinstance(row.get("filename"), str):
            raise JsonlParseError("caption rows need 'filename' and 'caption'", lineno)
        rows.append((row["filename"], _description(row)))
    if tok is None:
        tok = WhitespaceTokenizer.fit(c for _, c in rows)
    store = FeatureStore(model.enc_cfg if model else cfg.encoder, cfg.paths.media_root or None)
    kind = MODALITY_KIND[modality]
    data = [(store(MediaRef(f, kind)), tok.encode(c)) for f, c in rows]
    return data, tok


def cmd_pretrain(args, cfg: RunConfig) -> int:
    modality = args.modality
    cfg = cfg.with_stage(MODALITY_STAGE[modality])
    data_path = args.data or cfg.paths.data
    if data_path != TOY:
        _require_file(data_path, "caption dataset")
    init = args.init or cfg.paths.init
    model, tok = None, None
    if init:
        ck = load_checkpoint(_require_file(init, "init checkpoint"))
        model = model_from_checkpoint(ck)
        tok = WhitespaceTokenizer(ck.config.get("vocab", []))
    if data_path == TOY:
        data, toy_tok = toy_alignment_data(modality, model.enc_cfg if model else cfg.encoder, seed=cfg.train.seed)
        tok = tok or toy_tok
        if init:
            data = [(f, tok.encode(toy_tok.decode(c))) for f, c in data]
    else:
        data, tok = _caption_data(cfg, modality, data_path, model, tok)
    if model is None:
        model = _new_model(cfg, tok.vocab_size)
    result = pretrain_align(modality, data, model, cfg.train, vocab=tok.to_list())
    _finish_training(result, args.out or cfg.paths.out)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    cfg = cfg.with_stage("finetune")
    out_dir = args.out or cfg.paths.out
    data_path = args.data or cfg.paths.data
    if data_path == TOY:
        convs = make_toy_corpus(os.path.join(out_dir, "media"), 32, seed=cfg.train.seed)
    else:
        recs = read_jsonl(_require_file(data_path, "conversation dataset"))
        convs = []
        for r in recs:
            if not isinstance(r, SessionRecord):
                raise RecordValidationError(f"{data_path}: expected session rows, found {schema_name(r)}")
            convs.append(_session_to_conversation(r, cfg.paths.media_root))
    resume_from = args.resume or cfg.paths.resume
    init = args.init or cfg.paths.init
    store = FeatureStore(cfg.encoder)

    if resume_from:
        ck = load_checkpoint(_require_file(resume_from, "resume checkpoint"))
        tok = WhitespaceTokenizer(ck.config.get("vocab", []))
        def samples_for(m):
            return conversation_samples(convs, m, tok, FeatureStore(m.enc_cfg), cfg.train.lang_policy, cfg.train.seed)

        _, result = resume(ck, samples_for, cfg.train)
        _finish_training(result, out_dir, ck.step)
        return EXIT_OK

    if init:
        ck = load_checkpoint(_require_file(init, "init checkpoint"))
        model = model_from_checkpoint(ck)
        tok = WhitespaceTokenizer(ck.config.get("vocab", []))
        store = FeatureStore(model.enc_cfg)
    else:
        tok = toy_tokenizer(convs)
        model = _new_model(cfg, tok.vocab_size)
    samples = conversation_samples(convs, model, tok, store, cfg.train.lang_policy, cfg.train.seed)
    result = train_steps(model, samples, cfg.train, vocab=tok.to_list())
    _finish_training(result, out_dir)
    return EXIT_OK


# -- checks ------------------------------------------------------------------


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    names = list(CASES) if args.ops is None else [s for s in (x.strip() for x in args.ops.split(",")) if s]
    if not names:
        print("gradcheck: empty op list, nothing verified", file=sys.stderr)
        return EXIT_VALIDATION
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown ops {unknown}; known: {', '.join(CASES)}")
    report = run_suite(names, cases=args.cases, seed=cfg.train.seed)
    print(report.table())
    print(f"max rel err {report.max_rel_err:.3e} (tol {report.tol:.0e}) in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = args.path
    if not os.path.isfile(path):
        raise DatasetError(f"dataset not found: {path}")
    counts: Counter = Counter()
    problems: List[str] = []
    turns = turns_ms = pairs_ms = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = record_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, RecordValidationError) as e:
                problems.append(f"line {lineno}: malformed record ({e})")
                continue
            kind = schema_name(rec)
            counts[kind] += 1
            try:
                rec.validate()
            except RecordValidationError as e:
                problems.append(f"line {lineno}: {kind} {rec.filename!r}: {e}")
            if isinstance(rec, SessionRecord):
                turns += len(rec.conversations)
                turns_ms += sum(t.content_ms is not None for t in rec.conversations)
            elif isinstance(rec, PairRecord):
                pairs_ms += bool(rec.instruction_ms and rec.answer_ms)
    total = sum(counts.values())
    print(f"records: {total}")
    for name in ("transcript", "pair", "session"):
        print(f"  {name}: {counts.get(name, 0)}")
    if turns:
        print(f"session turns with a Malay field: {turns_ms}/{turns}")
    if counts.get("pair"):
        print(f"pair records with Malay fields: {pairs_ms}/{counts['pair']}")
    for p in problems:
        print(p)
    return EXIT_CHECK if problems else EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="sets synth.rng_seed and train.seed")
    common.add_argument("--out", help="output file (synth) or directory (training)")
    common.add_argument("--steps", type=int, help="sets train.steps")
    common.add_argument("--devices", type=int, help="sets train.n_devices")
    common.add_argument("--backend", choices=("mock", "remote"), default="mock")

    p = argparse.ArgumentParser(prog="mmalign", description="multimodal alignment toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic conversation data")
    s.add_argument("kind", choices=("audio-qa", "pairs", "combine"))
    s.add_argument("--input", help="input JSONL (transcripts or items)")
    s.add_argument("--second", help="second item JSONL for pairs (default: pair consecutive items)")
    s.add_argument("--pair-kind", choices=PAIR_KINDS, default="image-image")
    s.add_argument("--visual", help="visual session JSONL (combine)")
    s.add_argument("--audio", help="audio session JSONL (combine)")

    t = sub.add_parser("pretrain", parents=[common], help="stage-1 projector alignment")
    t.add_argument("modality", choices=("vision", "audio"))
    t.add_argument("--data", help=f"caption JSONL or '{TOY}'")
    t.add_argument("--init", help="start from this checkpoint")

    ft = sub.add_parser("finetune", parents=[common], help="stage-2 finetuning")
    ft.add_argument("--data", help=f"session JSONL or '{TOY}'")
    ft.add_argument("--init", help="start from this checkpoint")
    ft.add_argument("--resume", help="continue an interrupted finetune run")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    g.add_argument("--ops", help="comma-separated op names (default: all)")
    g.add_argument("--cases", type=int, default=100)

    i = sub.add_parser("inspect", parents=[common], help="validate a JSONL dataset")
    i.add_argument("path")
    return p


def resolve_config(args) -> RunConfig:
    overrides: Dict[str, str] = parse_overrides(args.set)
    if args.seed is not None:
        overrides["synth.rng_seed"] = str(args.seed)
        overrides["train.seed"] = str(args.seed)
    if args.steps is not None:
        overrides["train.steps"] = str(args.steps)
    if args.devices is not None:
        overrides["train.n_devices"] = str(args.devices)
    return load_run_config(args.config, overrides)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "synth" and not args.out:
            raise ConfigError("synth needs --out")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DatasetError, RecordValidationError, JsonlParseError, ContractError, VocabularyError, CapacityError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, BackendError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
