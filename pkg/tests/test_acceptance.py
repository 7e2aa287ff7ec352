"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion.  The slowest tests (end-to-end gradient check, overfit run)
stay under their stated runtime budgets on a desktop CPU.
"""

import collections
import itertools
import json
import math
import random

import numpy as np
import pytest

from langlift import autodiff as ad
from langlift.autodiff import Tensor, grad_check
from langlift.checkpoint import load_checkpoint, save_checkpoint
from langlift.data import (
    InstructionExample,
    MixSpec,
    RenderedExample,
    ingest_corpus,
    load_template,
    mix_stream,
    render_sft_example,
)
from langlift.harness import ClassificationTask, compute_metrics, score_options
from langlift.model import (
    ModelConfig,
    attach_lora,
    extend_embeddings,
    forward,
    forward_bound,
    generate,
    init_model,
)
from langlift.preference import Judgment, MockJudge, aggregate, build_preference_batch, judge_with_model
from langlift.recipe import RecipeConfig, run_recipe
from langlift.tokenizer import decode, encode, merge_vocab, render_tokens
from langlift.train import TrainConfig, clm_loss, sft_loss, train_clm, train_sft

from conftest import FIXTURES, make_vocab
from test_tokenizer import BASE_RENDERING, MERGED_RENDERING, SENTENCE


def test_01_table1_reproduction(base_vocab, merged_vocab):
    ids_base = encode(base_vocab, SENTENCE)
    assert len(ids_base) == 21
    assert render_tokens(base_vocab, ids_base) == BASE_RENDERING
    ids_merged = encode(merged_vocab, SENTENCE)
    assert len(ids_merged) == 8
    assert render_tokens(merged_vocab, ids_merged) == MERGED_RENDERING


def test_02_vocabulary_arithmetic():
    base = make_vocab([f"base{i}" for i in range(31740)])
    ext = make_vocab([f"base{i}" for i in range(264)] + [f"ext{i}" for i in range(7478)])
    assert (len(base), len(ext)) == (32000, 8002)
    shared = len(base.surfaces() & ext.surfaces())
    assert shared == 524
    merged, report = merge_vocab(base, ext)
    assert report.merged_size == 39478
    assert report.added == 7478
    assert len(merged) == 39478


def test_03_round_trip_10k_strings(merged_vocab):
    rng = random.Random(20260810)
    hangul = [chr(c) for c in range(0xAC00, 0xD7A4)]
    latin = [chr(c) for c in range(0x20, 0x7F)]
    emoji = ["😀", "🦖", "🍔", "✨", "🌊", "🎈"]
    control_adjacent = ["\n", "\t", "\r", "\x0b", "\x7f", " "]
    pools = [hangul, latin, emoji, control_adjacent, hangul + latin + emoji + control_adjacent]
    for i in range(10000):
        pool = pools[i % len(pools)]
        text = "".join(rng.choice(pool) for _ in range(rng.randint(0, 48)))
        assert decode(merged_vocab, encode(merged_vocab, text)) == text


def test_04_gradient_soundness_end_to_end():
    cfg = ModelConfig(
        n_layers=2, d_model=16, n_heads=2, vocab_size=260, max_seq=8,
        lora_rank=2, lora_alpha=4.0, seed=5,
    )
    state = init_model(cfg, dtype=np.float64)
    state = extend_embeddings(state, 260, 268, seed=6)
    state = attach_lora(state)
    ids = np.array([3, 261, 7, 265, 2, 11])
    mask = np.array([False, False, True, True, True, True])
    names = [n for n, _ in state.tensor_items()]
    arrays = [a for _, a in state.tensor_items()]

    def f_clm(leaves):
        return clm_loss(forward_bound(state.config, dict(zip(names, leaves)), ids), ids)

    def f_sft(leaves):
        return sft_loss(
            forward_bound(state.config, dict(zip(names, leaves)), ids),
            RenderedExample(ids, mask),
        )

    # h=1e-4 keeps the difference quotient above float64 roundoff on the
    # near-zero gradients of an untrained net; truncation stays ~1e-9
    assert grad_check(f_clm, arrays, h=1e-4) < 1e-4
    assert grad_check(f_sft, arrays, h=1e-4) < 1e-4


def test_05_embedding_extension():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab_size=300, max_seq=8, seed=1)
    state = init_model(cfg)
    extended = extend_embeddings(state, 300, 400, seed=2)
    for name in ("tok_emb", "out_proj"):
        assert extended.params[name][:300].tobytes() == state.params[name].tobytes()
        new_block = extended.params[name][300:]
        assert new_block.size >= 1000
        old_std = float(state.params[name].std())
        assert abs(float(new_block.std()) - old_std) / old_std < 0.10


def test_06_lora_neutrality():
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, vocab_size=300, max_seq=16, seed=3)
    state = init_model(cfg)
    ids = np.array([5, 100, 250, 7, 60])
    before = forward(state, ids).data
    after = forward(attach_lora(state), ids).data
    assert np.max(np.abs(before - after)) == 0.0


def test_07_freeze_soundness(merged_vocab, fixtures_dir):
    cfg = ModelConfig(
        n_layers=2, d_model=16, n_heads=2, vocab_size=365, max_seq=128,
        lora_rank=2, lora_alpha=4.0, seed=7,
    )
    state = attach_lora(extend_embeddings(init_model(cfg), 365, len(merged_vocab), seed=2))
    template = load_template(str(fixtures_dir / "template_alpaca.txt"))
    examples = [
        render_sft_example(
            merged_vocab,
            InstructionExample("공룡은 무엇을 먹나요?", "", "공룡은 햄버거를 먹는다.", "ko"),
            template, 128,
        ),
        render_sft_example(
            merged_vocab,
            InstructionExample("인사말을 해 보세요.", "", "안녕하세요 공룡님.", "ko"),
            template, 128,
        ),
    ]
    before = {name: arr.copy() for name, arr in state.tensor_items()}
    train_cfg = TrainConfig("sft", batch_size=2, lr=0.1, steps=100, seed=0)
    train_sft(state, examples, train_cfg, "/tmp/acceptance_freeze_metrics.csv")
    changed_adapter = changed_new_row = False
    for name, arr in state.tensor_items():
        mask = state.mask.mask_for(name, arr.shape)
        assert arr[~mask].tobytes() == before[name][~mask].tobytes(), f"frozen scalar moved in {name}"
        if name.startswith("lora.") and arr.tobytes() != before[name].tobytes():
            changed_adapter = True
        if name in ("tok_emb", "out_proj") and arr[365:].tobytes() != before[name][365:].tobytes():
            changed_new_row = True
    assert changed_adapter
    assert changed_new_row


def test_08_sft_degenerates_to_clm():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(6, 9))
    ids = rng.integers(0, 9, size=6)
    all_true = RenderedExample(ids, np.ones(6, dtype=bool))
    assert sft_loss(Tensor(logits), all_true).item() == clm_loss(Tensor(logits), ids).item()
    v = 39478
    uniform = clm_loss(Tensor(np.zeros((2, v))), np.array([0, 1]))
    assert abs(uniform.item() - math.log(v)) < 1e-3


def test_09_overfit_capability(merged_vocab, fixtures_dir):
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=2, vocab_size=len(merged_vocab), max_seq=32, seed=9)
    state = init_model(cfg)
    shards = ingest_corpus(str(fixtures_dir / "corpus_tiny"))
    stream = mix_stream(shards, merged_vocab, MixSpec(1, 0, block_size=32, seed=4))
    train_cfg = TrainConfig("pretrain", batch_size=8, lr=0.5, steps=300, seed=0)
    train_clm(state, stream, train_cfg, "/tmp/acceptance_overfit_metrics.csv")
    rows = open("/tmp/acceptance_overfit_metrics.csv").read().strip().splitlines()
    final_loss = float(rows[-1].split(",")[2])
    assert final_loss < 0.5
    out = generate(state, merged_vocab, "공룡은 햄버거를 먹는다. 안녕하세요", max_new=24, temperature=0.0)
    assert out.startswith(" 공룡님. 오늘은 바다가 맑다.")


def test_10_mixing_ratio(merged_vocab, fixtures_dir):
    shards = ingest_corpus(str(fixtures_dir / "corpus"))
    stream = mix_stream(shards, merged_vocab, MixSpec(7, 3, block_size=8, seed=2026))
    langs = [block.language for block in itertools.islice(stream, 10000)]
    ko_fraction = langs.count("ko") / len(langs)
    assert 0.68 <= ko_fraction <= 0.72


def test_11_harness_correctness(merged_vocab):
    tasks = [
        ClassificationTask("질문: 공룡? 정답:", [" 햄버거", " 바다"], gold=0),
        ClassificationTask("질문: 날씨? 정답:", [" 맑다", " 검다"], gold=0),
        ClassificationTask("질문: 맛? 정답:", [" 쓰다", " 맛있다"], gold=1),
    ]
    preds = []
    for task in tasks:
        favored = set(encode(merged_vocab, task.options[task.gold]))

        def fn(ids, favored=favored):
            logits = np.zeros((len(ids), len(merged_vocab)))
            logits[:, list(favored)] = 40.0
            return logits

        preds.append(score_options(fn, merged_vocab, task))
    metrics = compute_metrics(preds, [t.gold for t in tasks], 2)
    assert metrics.accuracy == 1.0

    m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert m.accuracy == 0.75
    assert m.per_class_f1 == (pytest.approx(2 / 3), pytest.approx(4 / 5))
    assert m.macro_f1 == pytest.approx((2 / 3 + 4 / 5) / 2)
    m2 = compute_metrics([1, 1, 1, 1], [0, 1, 0, 1], 2)
    assert m2.accuracy == 0.5
    assert m2.macro_f1 == pytest.approx(1 / 3)


def test_12_preference_pipeline():
    models = [
        ("candidate", lambda p: f"a considered answer to {p}"),
        ("reference", lambda p: f"short reply {p}"),
    ]
    prompts = [f"evaluation question {i}" for i in range(300)]
    pairs = build_preference_batch(models, prompts, seed=77)
    assert len(pairs) == 300

    # seeded fair coin: 3 sigma of Binomial(300, 1/2) is ~0.0866
    a_freq = sum(1 for p in pairs if p.model_a == "candidate") / 300
    assert abs(a_freq - 0.5) <= 3 * math.sqrt(0.25 / 300)

    # blinding: no annotator-facing bytes contain a model name
    for pair in pairs:
        wire = json.dumps(pair.annotator_view(), ensure_ascii=False)
        assert "candidate" not in wire and "reference" not in wire

    judgments = [judge_with_model(pair, MockJudge()) for pair in pairs]
    matrix = aggregate(judgments, pairs)

    tally = collections.Counter()
    for pair, judgment in zip(pairs, judgments):
        if judgment.choice == "A":
            tally[pair.model_a] += 1
        elif judgment.choice == "B":
            tally[pair.model_b] += 1
        else:
            tally["tie"] += 1
    assert matrix.wins_of("candidate", "reference") == tally["candidate"]
    assert matrix.wins_of("reference", "candidate") == tally["reference"]
    assert matrix.ties_of("candidate", "reference") == tally["tie"]
    assert matrix.judgment_count == 300


def _recipe_config(tmp_path, tag, with_pretrain, with_sft):
    out_dir = tmp_path / tag
    return RecipeConfig(
        model=dict(n_layers=1, d_model=16, n_heads=2, max_seq=128, lora_rank=2, lora_alpha=4.0, seed=1),
        paths=dict(
            base_vocab=str(FIXTURES / "llama2_subset.vocab"),
            ext_vocab=str(FIXTURES / "ko_subset.vocab"),
            corpus_root=str(FIXTURES / "corpus"),
            instructions=str(FIXTURES / "instructions_small.jsonl"),
            template=str(FIXTURES / "template_alpaca.txt"),
            out_dir=str(out_dir),
        ),
        mix=dict(ko_weight=7, en_weight=3, block_size=16, seed=11),
        pretrain=dict(batch_size=2, lr=0.05, steps=3, seed=3) if with_pretrain else None,
        sft=dict(batch_size=2, lr=0.05, steps=3, seed=5) if with_sft else None,
    )


def test_13_recipe_ablation_bookkeeping(tmp_path):
    from langlift.recipe import RecipeError

    # tuning-only ablation requires the explicit override, then records it
    cfg = _recipe_config(tmp_path, "sft_only", with_pretrain=False, with_sft=True)
    with pytest.raises(RecipeError):
        run_recipe(cfg)
    state, _, ckpt = run_recipe(cfg, allow_skip=True)
    assert state.stage_history == ["expand", "sft"]
    loaded, _ = load_checkpoint(ckpt)
    assert loaded.stage_history == ["expand", "sft"]

    state, _, ckpt = run_recipe(_recipe_config(tmp_path, "pt_only", True, False))
    assert state.stage_history == ["expand", "pretrain"]

    state, _, ckpt = run_recipe(_recipe_config(tmp_path, "full", True, True))
    assert state.stage_history == ["expand", "pretrain", "sft"]
    loaded, _ = load_checkpoint(ckpt)
    assert loaded.stage_history == ["expand", "pretrain", "sft"]


def test_14_checkpoint_round_trip(merged_vocab, tmp_path):
    cfg = ModelConfig(
        n_layers=2, d_model=16, n_heads=2, vocab_size=365, max_seq=32,
        lora_rank=2, lora_alpha=4.0, seed=21,
    )
    state = attach_lora(extend_embeddings(init_model(cfg), 365, len(merged_vocab), seed=2))
    state.stage_history.extend(["expand", "pretrain", "sft"])
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(state, merged_vocab, path)
    loaded, vocab = load_checkpoint(path)
    assert loaded.config == state.config
    assert loaded.old_vocab_size == state.old_vocab_size
    assert loaded.stage_history == state.stage_history
    originals = dict(state.tensor_items())
    reloaded = dict(loaded.tensor_items())
    assert originals.keys() == reloaded.keys()
    for name in originals:
        assert originals[name].tobytes() == reloaded[name].tobytes(), name
    assert loaded.mask == state.mask
    assert [e.surface for e in vocab.entries] == [e.surface for e in merged_vocab.entries]
