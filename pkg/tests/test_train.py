import itertools
import math

import numpy as np
import pytest

from langlift.autodiff import Tensor
from langlift.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from langlift.data import (
    InstructionExample,
    MixSpec,
    RenderedExample,
    ingest_corpus,
    load_template,
    mix_stream,
    render_sft_example,
)
from langlift.model import attach_lora, extend_embeddings, forward, init_model
from langlift.train import (
    MomentumSGD,
    TrainConfig,
    TrainDivergence,
    TrainError,
    clm_loss,
    sft_loss,
    train_clm,
    train_sft,
)
from test_model import toy_config


def snapshot(state):
    return {name: arr.copy() for name, arr in state.tensor_items()}


def recipe_state(merged_vocab, **cfg_overrides):
    cfg = toy_config(vocab_size=365, **cfg_overrides)
    state = init_model(cfg)
    state = extend_embeddings(state, 365, len(merged_vocab), seed=2)
    return attach_lora(state)


class TestLosses:
    def test_uniform_logits_log_v(self):
        ids = np.array([1, 2, 3, 4])
        loss = clm_loss(Tensor(np.zeros((4, 11))), ids)
        assert loss.item() == pytest.approx(math.log(11), abs=1e-12)

    def test_dominant_target_near_zero(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = 30.0
        loss = clm_loss(Tensor(logits), np.array([0, 3]))
        assert loss.item() < 1e-9

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(5, 11))
        ids = rng.integers(0, 11, size=5)
        expected = 0.0
        for i in range(1, 5):
            p = np.exp(logits[i - 1]) / np.exp(logits[i - 1]).sum()
            expected -= math.log(p[ids[i]])
        expected /= 4
        assert clm_loss(Tensor(logits), ids).item() == pytest.approx(expected, abs=1e-10)

    def test_too_short_rejected(self):
        with pytest.raises(TrainError):
            clm_loss(Tensor(np.zeros((1, 5))), np.array([0]))

    def test_all_true_mask_equals_clm_bitwise(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(6, 9))
        ids = rng.integers(0, 9, size=6)
        rendered = RenderedExample(ids, np.ones(6, dtype=bool))
        assert sft_loss(Tensor(logits), rendered).item() == clm_loss(Tensor(logits), ids).item()

    def test_final_eos_only_mask(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(5, 7))
        ids = rng.integers(0, 7, size=5)
        mask = np.zeros(5, dtype=bool)
        mask[-1] = True
        rendered = RenderedExample(ids, mask)
        row = logits[3] - logits[3].max()
        expected = -(row[ids[4]] - math.log(np.exp(row).sum()))
        assert sft_loss(Tensor(logits), rendered).item() == pytest.approx(expected, abs=1e-12)

    def test_no_scored_positions_rejected(self):
        # true only at position 0: nothing remains after the shift
        ids = np.array([1, 2, 3])
        mask = np.array([True, False, False])
        with pytest.raises(Exception, match="no scored positions"):
            sft_loss(Tensor(np.zeros((3, 5))), RenderedExample(ids, mask))

    def test_prompt_rows_get_zero_gradient(self):
        from langlift.autodiff import Graph

        g = Graph()
        rng = np.random.default_rng(2)
        logits = g.leaf(rng.normal(size=(6, 8)))
        mask = np.array([False, False, False, True, True, True])
        rendered = RenderedExample(rng.integers(0, 8, size=6), mask)
        grads = g.backward(sft_loss(logits, rendered))
        # rows whose next token is unscored contribute nothing
        scored_rows = np.concatenate([mask[1:], [False]])
        for i in range(6):
            if not scored_rows[i]:
                assert np.all(grads[logits][i] == 0.0)


class TestTrainClm:
    def make_stream(self, merged_vocab, fixtures_dir, block_size=16):
        shards = ingest_corpus(str(fixtures_dir / "corpus_tiny"))
        return mix_stream(shards, merged_vocab, MixSpec(1, 0, block_size=block_size, seed=3))

    def test_zero_lr_is_noop(self, merged_vocab, fixtures_dir, tmp_path):
        state = recipe_state(merged_vocab)
        before = snapshot(state)
        cfg = TrainConfig("pretrain", batch_size=2, lr=0.0, steps=3, seed=0)
        train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))
        after = snapshot(state)
        assert all(before[n].tobytes() == after[n].tobytes() for n in before)

    def test_loss_decreases_on_tiny_corpus(self, merged_vocab, fixtures_dir, tmp_path):
        state = init_model(toy_config(vocab_size=len(merged_vocab)))
        cfg = TrainConfig("pretrain", batch_size=4, lr=0.3, steps=30, seed=0)
        train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))
        rows = (tmp_path / "m.csv").read_text().strip().splitlines()
        first = float(rows[1].split(",")[2])
        last = float(rows[-1].split(",")[2])
        assert last < first

    def test_metrics_line_count_equals_steps(self, merged_vocab, fixtures_dir, tmp_path):
        state = recipe_state(merged_vocab)
        cfg = TrainConfig("pretrain", batch_size=2, lr=0.01, steps=7, seed=0)
        train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))
        rows = (tmp_path / "m.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 7  # header + one line per step

    def test_same_seed_same_curve(self, merged_vocab, fixtures_dir, tmp_path):
        def run(tag):
            state = recipe_state(merged_vocab)
            cfg = TrainConfig("pretrain", batch_size=2, lr=0.05, steps=5, seed=1)
            path = tmp_path / f"{tag}.csv"
            train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(path))
            return path.read_text()

        assert run("a") == run("b")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_step(self, merged_vocab, fixtures_dir, tmp_path):
        state = init_model(toy_config(vocab_size=len(merged_vocab)))
        cfg = TrainConfig("pretrain", batch_size=2, lr=1e9, steps=50, grad_clip=0.0, seed=0)
        with pytest.raises(TrainDivergence, match="step"):
            train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))

    def test_stage_recorded(self, merged_vocab, fixtures_dir, tmp_path):
        state = recipe_state(merged_vocab)
        cfg = TrainConfig("pretrain", batch_size=2, lr=0.01, steps=2, seed=0)
        train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))
        assert state.stage_history == ["pretrain"]

    def test_wrong_stage_rejected(self, merged_vocab, fixtures_dir, tmp_path):
        state = recipe_state(merged_vocab)
        cfg = TrainConfig("sft", batch_size=2, lr=0.01, steps=2, seed=0)
        with pytest.raises(TrainError):
            train_clm(state, self.make_stream(merged_vocab, fixtures_dir), cfg, str(tmp_path / "m.csv"))


class TestFreezeSoundness:
    def test_frozen_scalars_bit_identical_after_sft(self, merged_vocab, fixtures_dir, tmp_path):
        state = recipe_state(merged_vocab, max_seq=128)
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        ex = InstructionExample("공룡은 무엇을 먹나요?", "", "공룡은 햄버거를 먹는다.", "ko")
        rendered = [render_sft_example(merged_vocab, ex, template, 128)]
        before = snapshot(state)
        cfg = TrainConfig("sft", batch_size=1, lr=0.1, steps=10, seed=0)
        train_sft(state, rendered, cfg, str(tmp_path / "m.csv"))
        changed_adapter = changed_new_row = False
        for name, arr in state.tensor_items():
            mask = state.mask.mask_for(name, arr.shape)
            frozen_equal = arr[~mask].tobytes() == before[name][~mask].tobytes()
            assert frozen_equal, f"frozen scalars moved in {name}"
            if name.startswith("lora.") and arr.tobytes() != before[name].tobytes():
                changed_adapter = True
            if name == "tok_emb" and arr[365:].tobytes() != before[name][365:].tobytes():
                changed_new_row = True
        assert changed_adapter
        assert changed_new_row


class TestOverfitRecite:
    def test_single_example_memorized(self, merged_vocab, fixtures_dir, tmp_path):
        from langlift.model import generate

        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        ex = InstructionExample("공룡은 무엇을 먹나요?", "", "공룡은 햄버거를 먹는다.", "ko")
        state = init_model(toy_config(vocab_size=len(merged_vocab), max_seq=128, seed=3))
        rendered = [render_sft_example(merged_vocab, ex, template, 128)]
        cfg = TrainConfig("sft", batch_size=1, lr=0.3, steps=200, seed=0)
        train_sft(state, rendered, cfg, str(tmp_path / "m.csv"))
        prompt = template.render(ex.instruction, ex.input)
        out = generate(state, merged_vocab, prompt, max_new=40, temperature=0.0)
        assert out == ex.output

    def test_empty_dataset_rejected(self, merged_vocab, tmp_path):
        state = recipe_state(merged_vocab)
        cfg = TrainConfig("sft", batch_size=1, lr=0.1, steps=1, seed=0)
        with pytest.raises(TrainError, match="no instruction examples"):
            train_sft(state, [], cfg, str(tmp_path / "m.csv"))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, merged_vocab, tmp_path):
        state = recipe_state(merged_vocab)
        state.stage_history.extend(["expand", "pretrain"])
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, merged_vocab, path)
        loaded, vocab2 = load_checkpoint(path)
        assert loaded.config == state.config
        assert loaded.stage_history == state.stage_history
        assert loaded.old_vocab_size == 365
        for (n1, a1), (n2, a2) in zip(
            sorted(state.tensor_items()), sorted(loaded.tensor_items())
        ):
            assert n1 == n2
            assert a1.tobytes() == a2.tobytes()
        assert len(vocab2) == len(merged_vocab)
        assert loaded.mask == state.mask

    def test_corrupt_payload_detected(self, merged_vocab, tmp_path):
        state = recipe_state(merged_vocab)
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, merged_vocab, str(path))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(str(path))

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 100)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(path))

    def test_freeze_mask_reconstruction(self, merged_vocab, tmp_path):
        state = recipe_state(merged_vocab)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, merged_vocab, path)
        loaded, _ = load_checkpoint(path)
        assert loaded.mask == state.mask
        assert loaded.mask.rows["tok_emb"][:365].sum() == 0
        assert loaded.mask.rows["tok_emb"][365:].all()


class TestOptimizer:
    def test_never_writes_frozen(self, merged_vocab):
        state = recipe_state(merged_vocab)
        cfg = TrainConfig("sft", batch_size=1, lr=0.5, steps=1, seed=0)
        opt = MomentumSGD(state, cfg)
        grads = {name: np.ones_like(arr) for name, arr in state.tensor_items()}
        before = snapshot(state)
        opt.step(grads)
        for name, arr in state.tensor_items():
            mask = state.mask.mask_for(name, arr.shape)
            assert arr[~mask].tobytes() == before[name][~mask].tobytes()
            if mask.any():
                assert arr[mask].tobytes() != before[name][mask].tobytes()
