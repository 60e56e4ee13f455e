"""Stage-1 alignment, stage-2 finetuning, and the shared step loop."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..chat import Conversation, Turn, WhitespaceTokenizer, render_training_example
from ..encoders import EncoderConfig, FeatureMatrix, MediaRef
from ..fusion import RawExample
from ..minicore import ContractError, OptimizerState, optimizer_step
from .checkpoint import Checkpoint
from .config import TrainConfig
from .model import FeatureStore, LMConfig, MultimodalModel, Sample
from .parallel import simulate_data_parallel_step

MODALITY_STAGE = {"vision": "align_vision", "audio": "align_audio"}
MODALITY_KIND = {"vision": "image", "audio": "audio"}


@dataclass
class TrainResult:
    losses: List[float]
    checkpoint: Checkpoint
    unused_reports: List[List[List[str]]] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> List[int]:
    """Sample indices for ``step``: consecutive slices of per-epoch permutations.

    A pure function of its arguments, so a resumed run sees the same data
    order as an uninterrupted one without saving any RNG state.
    """
    if n <= 0:
        raise ValueError("empty dataset")
    out: List[int] = []
    perms: Dict[int, np.ndarray] = {}
    for p in range(step * batch_size, (step + 1) * batch_size):
        epoch, i = divmod(p, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][i]))
    return out


def checkpoint_config(model: MultimodalModel, cfg: TrainConfig, vocab: Optional[Sequence[str]] = None) -> dict:
    d = {"model": model.config_dict(), "train": cfg.to_dict(), "special_tokens": model.special.to_dict()}
    if vocab is not None:
        d["vocab"] = list(vocab)
    return d


def model_from_checkpoint(ckpt: Checkpoint) -> MultimodalModel:
    model = MultimodalModel.from_config_dict(ckpt.config["model"])
    model.load_state_dict(ckpt.params)
    return model


def train_steps(
    model: MultimodalModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    state: Optional[OptimizerState] = None,
    start_step: int = 0,
    vocab: Optional[Sequence[str]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run steps ``start_step .. cfg.steps - 1`` and return losses plus a checkpoint."""
    if not samples:
        raise ValueError("no training samples")
    if start_step > cfg.steps:
        raise ValueError(f"start_step {start_step} is past cfg.steps {cfg.steps}")
    trainable = model.set_trainable(cfg.trainable_groups)
    params = model.named_parameters()
    frozen = {n: p.data.copy() for n, p in params.items() if n not in trainable}
    opt_cfg = cfg.optimizer_config()
    state = state.copy() if state is not None else OptimizerState()
    mode = "on" if cfg.stage == "finetune" and cfg.placeholders else "off"

    losses: List[float] = []
    reports: List[List[List[str]]] = []
    for step in range(start_step, cfg.steps):
        batch = [samples[i] for i in batch_indices(len(samples), cfg.batch_size, cfg.seed, step)]
        res = simulate_data_parallel_step(batch, model, cfg.n_devices, mode, cfg.workers)
        stray = sorted(set(res.reduced) - set(trainable))
        if stray:
            raise ContractError(f"gradient would be applied to frozen parameters {stray}")
        optimizer_step(params, res.reduced, opt_cfg, state, update=trainable)
        losses.append(res.loss)
        reports.append(res.reports)
        if on_step is not None:
            on_step(step, res.loss)

    changed = [n for n, a in frozen.items() if not np.array_equal(a, params[n].data)]
    if changed:
        raise ContractError(f"frozen parameters changed during training: {changed}")
    ckpt = Checkpoint(model.state_dict(), state.copy(), checkpoint_config(model, cfg, vocab), cfg.steps)
    return TrainResult(losses, ckpt, reports)


def resume(
    ckpt: Checkpoint,
    samples_for: Callable[[MultimodalModel], Sequence[Sample]],
    cfg: TrainConfig,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> Tuple[MultimodalModel, TrainResult]:
    """Continue a run from ``ckpt`` up to ``cfg.steps``."""
    model = model_from_checkpoint(ckpt)
    return model, train_steps(
        model, samples_for(model), cfg, ckpt.optimizer, ckpt.step, ckpt.config.get("vocab"), on_step
    )


# -- stage 1 ---------------------------------------------------------------


def caption_example(kind: str, caption: Sequence[int], model: MultimodalModel, bos: int = 1, eos: int = 2) -> RawExample:
    """``<s> <open> <close> caption </s>`` with the caption supervised."""
    if not caption:
        raise ValueError("empty caption")
    open_id, close_id = model.special.pair(kind)
    tokens = [bos, open_id, close_id, *caption, eos]
    return RawExample(tokens, [MediaRef(f"<{kind}>", kind)], [(3, 3 + len(caption))])


def pretrain_align(
    modality: str,
    data: Sequence[Tuple[FeatureMatrix, Sequence[int]]],
    model: MultimodalModel,
    cfg: TrainConfig,
    vocab: Optional[Sequence[str]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train one projector (and the marker rows) on caption prediction."""
    if modality not in MODALITY_STAGE:
        raise ValueError(f"modality must be 'vision' or 'audio', got {modality!r}")
    if cfg.stage != MODALITY_STAGE[modality]:
        raise ContractError(f"{modality} alignment needs stage {MODALITY_STAGE[modality]!r}, got {cfg.stage!r}")
    kind = MODALITY_KIND[modality]
    samples = [Sample(caption_example(kind, cap, model), [feat]) for feat, cap in data]
    return train_steps(model, samples, cfg, vocab=vocab, on_step=on_step)


# -- stage 2 ---------------------------------------------------------------


def conversation_samples(
    data: Sequence[Conversation],
    model: MultimodalModel,
    tok,
    store: FeatureStore,
    lang_policy: str = "en",
    seed: int = 0,
) -> List[Sample]:
    samples = []
    for i, conv in enumerate(data):
        ex = render_training_example(conv, tok, model.special, lang_policy, seed + i)
        samples.append(Sample(ex, [store(a) for a in ex.attachments]))
    return samples


def finetune(
    data: Sequence[Conversation],
    model: MultimodalModel,
    cfg: TrainConfig,
    tok,
    store: Optional[FeatureStore] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    if cfg.stage != "finetune":
        raise ContractError(f"finetune needs stage 'finetune', got {cfg.stage!r}")
    store = store if store is not None else FeatureStore(model.enc_cfg)
    samples = conversation_samples(data, model, tok, store, cfg.lang_policy, cfg.seed)
    vocab = tok.to_list() if hasattr(tok, "to_list") else None
    return train_steps(model, samples, cfg, vocab=vocab, on_step=on_step)


# -- toy tasks ---------------------------------------------------------------

TOY_BITS = 4


def toy_caption_words(n_bits: int = TOY_BITS) -> List[str]:
    return [f"{s}{c}" for c in range(n_bits) for s in ("pos", "neg")]


def toy_alignment_data(
    modality: str, enc_cfg: EncoderConfig, n: int = 64, seed: int = 0, n_bits: int = TOY_BITS
) -> Tuple[List[Tuple[FeatureMatrix, List[int]]], WhitespaceTokenizer]:
    """Deterministic caption task: word ``c`` says whether feature column ``c`` is positive.

    Columns ``0..n_bits-1`` carry a clean sign (magnitudes in [0.25, 1]); the
    rest are uniform noise.
    """
    kind = MODALITY_KIND[modality]
    rows, cols = enc_cfg.shape_for(kind)
    if cols < n_bits:
        raise ValueError(f"need at least {n_bits} feature columns, have {cols}")
    tok = WhitespaceTokenizer(toy_caption_words(n_bits))
    rng = np.random.default_rng([seed, 7919])
    data = []
    for _ in range(n):
        signs = rng.choice([-1.0, 1.0], size=n_bits)
        values = rng.uniform(-1.0, 1.0, size=(rows, cols))
        values[:, :n_bits] = signs * rng.uniform(0.25, 1.0, size=(rows, n_bits))
        words = [f"{'pos' if s > 0 else 'neg'}{c}" for c, s in enumerate(signs)]
        data.append((FeatureMatrix(values), tok.encode(" ".join(words))))
    return data, tok


_TOY_SUBJECTS = ["cat", "car", "market", "river", "song", "teacher", "phone", "street"]
_TOY_COLOURS = ["red", "blue", "green", "white"]


def make_toy_corpus(root: str, n: int = 32, seed: int = 0) -> List[Conversation]:
    """Write small media files under ``root`` and return matching conversations.

    A third of the conversations are text-only, a third carry an image and a
    third an audio clip, so placeholders matter in every batch.
    """
    rng = np.random.default_rng([seed, 104729])
    os.makedirs(root, exist_ok=True)
    convs = []
    for i in range(n):
        subj = _TOY_SUBJECTS[int(rng.integers(len(_TOY_SUBJECTS)))]
        col = _TOY_COLOURS[int(rng.integers(len(_TOY_COLOURS)))]
        mode = i % 3
        attachments: List[MediaRef] = []
        if mode == 0:
            q, a = f"what colour is the {subj}", f"the {subj} is {col}"
        else:
            kind, ext, marker = ("image", "jpg", "<image>") if mode == 1 else ("audio", "mp3", "<audio>")
            name = f"{kind}{i:03d}.{ext}"
            with open(os.path.join(root, name), "wb") as f:
                f.write(rng.bytes(64))
            attachments.append(MediaRef(os.path.join(root, name), kind))
            q = f"{marker} describe the {subj}"
            a = f"a {col} {subj} is shown"
        turns = [Turn("user", q, q), Turn("assistant", a, a)]
        convs.append(Conversation(turns, attachments))
    return convs


def toy_tokenizer(convs: Sequence[Conversation]) -> WhitespaceTokenizer:
    return WhitespaceTokenizer.fit(t.content for c in convs for t in c.turns)


def default_model(base_vocab: int, enc_cfg: EncoderConfig = EncoderConfig(), max_seq: int = 1024, seed: int = 0) -> MultimodalModel:
    return MultimodalModel(base_vocab, LMConfig(max_seq=max_seq), enc_cfg=enc_cfg, seed=seed)
