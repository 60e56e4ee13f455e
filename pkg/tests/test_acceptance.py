"""Acceptance criteria, one test each.

Every test records a single ``PASS``/``FAIL`` line that the conftest hook
prints at the end of the run. ``python tests/test_acceptance.py`` runs them
without pytest and prints the same lines.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from oracles import naive_conv1d, window_starts  # noqa: E402
from test_fusion import SP, random_example  # noqa: E402

from mmalign.chat import Turn, format_prompt, format_user  # noqa: E402
from mmalign.cli import main as cli_main  # noqa: E402
from mmalign.encoders import EncoderConfig, FeatureMatrix  # noqa: E402
from mmalign.fusion import IGNORE_ID, fused_length, splice  # noqa: E402
from mmalign.minicore import ContractError, Tensor, conv1d, conv_output_length  # noqa: E402
from mmalign.minicore.suite import CASES, run_suite  # noqa: E402
from mmalign.projectors import ProjectorConfig, init_projectors  # noqa: E402
from mmalign.synth import SessionRecord, SynthConfig, combine_sessions  # noqa: E402
from mmalign.trainer import (  # noqa: E402
    FeatureStore,
    TrainConfig,
    conversation_samples,
    full_batch_gradients,
    make_toy_corpus,
    pretrain_align,
    simulate_data_parallel_step,
    toy_alignment_data,
    toy_tokenizer,
)
from mmalign.trainer.loops import default_model  # noqa: E402

RESULTS = []

# stage-1 toy run: learning rate and loss-ratio threshold recorded from the
# reference seeded run (observed ratio 0.11 at lr 3e-3, vision, seed 0)
STAGE1_LR = 3e-3
STAGE1_STEPS = 200
STAGE1_RATIO = 0.5


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-30))


def test_01_gradient_suite():
    report = run_suite(cases=100, seed=0)
    ok = report.passed and report.seconds < 120 and all(r.cases >= 100 for r in report.results)
    ok = ok and {r.op for r in report.results} == set(CASES)
    record(1, ok, f"{len(report.results)} ops x 100 cases, max rel err {report.max_rel_err:.2e} <= 1e-5, {report.seconds:.1f}s < 120s")


def test_02_audio_projector_arithmetic():
    L = conv_output_length(1500, 40, 3, 0, 0)
    starts = window_starts(1500, 40, 3)
    cfg = ProjectorConfig()
    _, aud = init_projectors(cfg, 0)
    out = aud(FeatureMatrix(np.zeros((1500, cfg.d_audio))))
    r = np.random.default_rng(2)
    exact = True
    for _ in range(25):
        c_in, c_out, k, s = (int(v) for v in r.integers(1, 5, size=4))
        length = k + int(r.integers(0, 12))
        x = r.integers(-4, 5, size=(c_in, length)).astype(float)
        w = r.integers(-4, 5, size=(c_out, c_in, k)).astype(float)
        b = r.integers(-4, 5, size=c_out).astype(float)
        exact &= np.array_equal(conv1d(Tensor(x), Tensor(w), Tensor(b), stride=s).data, naive_conv1d(x, w, b, s))
    ok = L == 487 and len(starts) == 487 and out.shape == (487, cfg.d_model) and exact
    record(2, ok, f"L'={L}, window enumeration={len(starts)}, projector rows={out.shape[0]}, 25 small convs exact={exact}")


def test_03_span_fill_in():
    r = np.random.default_rng(3)
    t = Tensor(r.normal(size=(14, 4)), requires_grad=True)
    start = time.perf_counter()
    failures = 0
    for _ in range(1000):
        ex, lengths = random_example(r)
        fs = splice(ex, [Tensor(r.normal(size=(n, 4))) for n in lengths], t, SP)
        good = len(fs) == len(ex.token_ids) + sum(lengths) == fused_length(ex, lengths)
        sup = set(ex.supervised_positions())
        for i, o in enumerate(fs.position_map):
            if fs.labels[i] != IGNORE_ID:
                good &= o.source == "text" and o.index in sup and fs.labels[i] == ex.token_ids[o.index]
            elif o.source == "text":
                good &= o.index not in sup
        good &= len(set(fs.position_map)) == len(fs)
        good &= all(fs.index_of(o) == i for i, o in enumerate(fs.position_map))
        failures += not good
    secs = time.perf_counter() - start
    record(3, failures == 0 and secs < 30, f"1000 random splices, {failures} failures, {secs:.1f}s < 30s")


def _adversarial_batch(samples):
    image = [s for s in samples if s.example.has_kind("image")]
    audio = [s for s in samples if s.example.has_kind("audio")]
    text = [s for s in samples if not s.example.attachments]
    # shard 2 of 4 (three samples) holds image samples only
    return [audio[0], text[0], image[0]] + image[1:4] + [audio[1], text[1], image[4], audio[2], text[2], image[5]]


def test_04_unused_parameter_reproduction(tmp_path):
    convs = make_toy_corpus(str(tmp_path), 32, seed=0)
    tok = toy_tokenizer(convs)
    model = default_model(tok.vocab_size, EncoderConfig())
    model.set_trainable(TrainConfig().trainable_groups)
    batch = _adversarial_batch(conversation_samples(convs, model, tok, FeatureStore(model.enc_cfg)))
    audio_names = set(model.groups()["audio_projector"])
    off = simulate_data_parallel_step(batch, model, 4, "off")
    on = simulate_data_parallel_step(batch, model, 4, "on")
    oracle = full_batch_gradients(batch, model, "on")
    err = max(rel(on.reduced[n], g) for n, g in oracle.grads.items())
    ok = set(off.reports[1]) == audio_names and on.all_used and err <= 1e-6 and not oracle.unused
    record(4, ok, f"off: shard 2 unused={sorted(off.reports[1])}; on: all reports empty={on.all_used}; reduced vs full batch rel err {err:.1e} <= 1e-6")


def test_05_placeholder_soundness(tmp_path):
    convs = make_toy_corpus(str(tmp_path), 32, seed=5)
    tok = toy_tokenizer(convs)
    enc = EncoderConfig()
    worst = 0.0
    for b in range(100):
        model = default_model(tok.vocab_size, enc, seed=b)
        samples = conversation_samples(convs, model, tok, FeatureStore(enc))
        pick = np.random.default_rng([5, b]).choice(len(samples), size=4, replace=False)
        batch = [samples[i] for i in pick]
        with_ph = model.batch_loss([model.with_placeholders(s) for s in batch])[0].item()
        without = model.batch_loss(batch)[0].item()
        worst = max(worst, abs(with_ph - without) / abs(without))
    record(5, worst <= 1e-9, f"100 seeded batches, max relative loss change {worst:.1e} <= 1e-9")


def test_06_frozen_stage_invariance():
    enc = EncoderConfig()
    data, tok = toy_alignment_data("vision", enc, n=64, seed=0)
    model = default_model(tok.vocab_size, enc)
    before = model.state_dict()
    feats = [f.values.tobytes() for f, _ in data]
    cfg = TrainConfig(stage="align_vision", steps=STAGE1_STEPS, lr=STAGE1_LR)
    result = pretrain_align("vision", data, model, cfg)
    after = result.checkpoint.params
    groups = model.groups()
    lm_same = all(np.array_equal(before[n], after[n]) for n in groups["lm"] + groups["audio_projector"])
    enc_same = [f.values.tobytes() for f, _ in data] == feats
    proj_changed = all(not np.array_equal(before[n], after[n]) for n in groups["vision_projector"])
    ratio = result.final_loss / result.initial_loss
    ok = lm_same and enc_same and proj_changed and ratio <= STAGE1_RATIO
    record(6, ok, f"LM frozen={lm_same}, encoder features unchanged={enc_same}, projector changed={proj_changed}, loss {result.initial_loss:.3f} -> {result.final_loss:.3f} (ratio {ratio:.3f} <= {STAGE1_RATIO})")


def test_07_hyperparameter_defaults():
    cfg = TrainConfig()
    ok = cfg.batch_size == 12 and cfg.lr == 2e-5 and cfg.optimizer_config().lr == 2e-5
    record(7, ok, f"TrainConfig() batch_size={cfg.batch_size}, lr={cfg.lr} (constant)")


def test_08_combiner_statistics():
    vis = [SessionRecord([f"v{i}"], [Turn("user", "<image>q"), Turn("assistant", "a")]) for i in range(9000)]
    aud = [SessionRecord([f"a{i}"], [Turn("user", "<audio>q"), Turn("assistant", "a")]) for i in range(7000)]
    sessions = combine_sessions(vis, aud, SynthConfig(n_sessions=3400, rng_seed=0))
    files = [f for s in sessions for f in s.filename]
    frac = sum(f.startswith("v") for f in files) / len(files)
    seg_ok = all(2 <= len(s.filename) <= 4 for s in sessions)
    unique = len(files) == len(set(files))
    ok = len(files) >= 10_000 and 0.55 <= frac <= 0.65 and seg_ok and unique
    record(8, ok, f"{len(files)} draws, image fraction {frac:.4f} in [0.55, 0.65], 2-4 segments={seg_ok}, no reuse={unique}")


def test_09_formatter_goldens():
    para = "anda tahu keuntungan boleh lebih tinggi"
    q1, a1, q2, a2 = "Why invest?", "Higher returns.", "Any risk?", "Yes, volatility."
    cases = [
        (format_prompt(para, []), f"<s>[INST] {para} [/INST]"),
        (format_prompt("next", [(q1, a1)]), f"<s>[INST] {q1} [/INST] {a1}</s> [INST] next [/INST]"),
        (format_prompt("m", [(q1, a1), (q2, a2)]), f"<s>[INST] {q1} [/INST] {a1}</s> [INST] {q2} [/INST] {a2}</s> [INST] m [/INST]"),
        (format_user([(q1, a1)]), f"<s>[INST] {q1} [/INST] {a1}</s> [INST]"),
        (format_user([(q1, a1), (q2, a2)]), f"<s>[INST] {q1} [/INST] {a1}</s> [INST] {q2} [/INST] {a2}</s> [INST]"),
    ]
    exact = sum(got == want for got, want in cases)
    try:
        format_user([])
        empty_user = False
    except ContractError:
        empty_user = True
    record(9, exact == len(cases) and empty_user, f"{exact}/{len(cases)} byte-exact, empty-history format_user rejected={empty_user}")


def _pipeline(root: Path) -> dict:
    import json

    root.mkdir(parents=True, exist_ok=True)
    (root / "t.jsonl").write_text(
        "".join(json.dumps({"filename": f"a{i}.mp3", "text": f"perenggan nombor {i} tentang pasaran", "score": s}) + "\n"
                for i, s in enumerate([0.9, 0.2, 0.7, 0.95])), encoding="utf-8")
    (root / "items.jsonl").write_text(
        "".join(json.dumps({"filename": f"p{i}.jpg", "caption": f"caption {i}"}) + "\n" for i in range(4)), encoding="utf-8")
    (root / "v.jsonl").write_text(
        "".join(json.dumps({"filename": [f"v{i}.jpg"], "conversations": [{"role": "user", "content": f"<image>q{i}"}, {"role": "assistant", "content": "a"}]}) + "\n"
                for i in range(40)), encoding="utf-8")
    steps = [
        ["synth", "audio-qa", "--input", str(root / "t.jsonl"), "--out", str(root / "qa.jsonl"), "--seed", "7"],
        ["synth", "pairs", "--input", str(root / "items.jsonl"), "--out", str(root / "pairs.jsonl"), "--seed", "7"],
        ["synth", "combine", "--visual", str(root / "v.jsonl"), "--audio", str(root / "qa.jsonl"), "--out", str(root / "combined.jsonl"),
         "--seed", "7", "--set", "synth.n_sessions=1"],
        ["pretrain", "vision", "--data", "toy", "--steps", "20", "--seed", "7", "--out", str(root / "pv"), "--set", "train.lr=0.003"],
        ["pretrain", "audio", "--data", "toy", "--steps", "5", "--seed", "7", "--out", str(root / "pa"), "--set", "train.lr=0.003",
         "--set", "encoder.audio_positions=121"],
        ["finetune", "--data", "toy", "--steps", "5", "--devices", "4", "--seed", "7", "--out", str(root / "ft"),
         "--set", "train.lr=0.001", "--set", "encoder.audio_positions=121"],
    ]
    codes = [cli_main(a) for a in steps]
    outputs = {}
    for rel_path in ["qa.jsonl", "pairs.jsonl", "combined.jsonl", "pv/loss.csv", "pv/checkpoint.mmmc",
                     "pa/loss.csv", "pa/checkpoint.mmmc", "ft/loss.csv", "ft/checkpoint.mmmc"]:
        outputs[rel_path] = (root / rel_path).read_bytes()
    return {"codes": codes, "outputs": outputs}


def test_10_end_to_end_determinism(tmp_path):
    a = _pipeline(tmp_path / "run1")
    b = _pipeline(tmp_path / "run2")
    same = [k for k in a["outputs"] if a["outputs"][k] == b["outputs"][k]]
    ok = a["codes"] == b["codes"] == [0] * 6 and len(same) == len(a["outputs"])
    record(10, ok, f"exit codes {a['codes']}; {len(same)}/{len(a['outputs'])} artifacts byte-identical across two runs")


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    failed = 0
    with tempfile.TemporaryDirectory() as d:
        for i, fn in enumerate(tests):
            try:
                if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                    p = Path(d) / f"t{i}"
                    p.mkdir()
                    fn(p)
                else:
                    fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
