import itertools
import json
import logging

import numpy as np
import pytest

from langlift.data import (
    DataError,
    InstructionExample,
    MixSpec,
    OverlongExampleError,
    PromptTemplate,
    ingest_corpus,
    instruction_counts,
    language_totals,
    load_instructions,
    load_template,
    masked_output_text,
    mix_stream,
    render_sft_example,
)
from langlift.tokenizer import decode, encode


class TestIngest:
    def test_fixture_tree(self, fixtures_dir):
        shards = ingest_corpus(str(fixtures_dir / "corpus"))
        assert len(shards) == 3
        assert sorted(s.language for s in shards) == ["en", "ko", "ko"]
        for s in shards:
            assert s.byte_size > 0

    def test_empty_root_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            shards = ingest_corpus(str(tmp_path))
        assert shards == []
        assert any("no" in r.message for r in caplog.records)

    def test_shards_sorted_by_path(self, fixtures_dir):
        shards = ingest_corpus(str(fixtures_dir / "corpus"))
        assert [s.path for s in shards] == sorted(s.path for s in shards)

    def test_reported_size_mirror(self, tmp_path):
        # desk-scale mirror of the corpus composition: 22.41 / 0.76 / 9.92 (KB)
        (tmp_path / "ko").mkdir()
        (tmp_path / "en").mkdir()
        (tmp_path / "ko" / "public.txt").write_bytes(b"a" * 22410)
        (tmp_path / "ko" / "wiki.txt").write_bytes(b"b" * 760)
        (tmp_path / "en" / "wiki.txt").write_bytes(b"c" * 9920)
        totals = language_totals(ingest_corpus(str(tmp_path)))
        ko_fraction = totals["ko"] / (totals["ko"] + totals["en"])
        assert abs(ko_fraction - 0.70) < 0.01


class TestMixStream:
    def test_monolingual_weights(self, fixtures_dir, merged_vocab):
        shards = ingest_corpus(str(fixtures_dir / "corpus"))
        stream = mix_stream(shards, merged_vocab, MixSpec(1, 0, block_size=16, seed=1))
        blocks = list(itertools.islice(stream, 50))
        assert all(b.language == "ko" for b in blocks)
        assert all(b.ids.shape == (16,) for b in blocks)

    def test_deterministic_per_seed(self, fixtures_dir, merged_vocab):
        shards = ingest_corpus(str(fixtures_dir / "corpus"))

        def take():
            stream = mix_stream(shards, merged_vocab, MixSpec(7, 3, block_size=8, seed=42))
            return [(b.language, b.ids.tobytes()) for b in itertools.islice(stream, 40)]

        assert take() == take()

    def test_missing_language_rejected(self, tmp_path, merged_vocab):
        (tmp_path / "ko").mkdir()
        (tmp_path / "ko" / "a.txt").write_text("안녕", encoding="utf-8")
        shards = ingest_corpus(str(tmp_path))
        with pytest.raises(DataError, match="no en shards"):
            next(mix_stream(shards, merged_vocab, MixSpec(7, 3, block_size=8, seed=0)))

    def test_blocks_are_single_language_content(self, fixtures_dir, merged_vocab):
        shards = ingest_corpus(str(fixtures_dir / "corpus"))
        stream = mix_stream(shards, merged_vocab, MixSpec(5, 5, block_size=32, seed=9))
        seen = {b.language for b in itertools.islice(stream, 60)}
        assert seen == {"ko", "en"}

    def test_bad_weights_rejected(self):
        with pytest.raises(DataError):
            MixSpec(0, 0, block_size=8)
        with pytest.raises(DataError):
            MixSpec(-1, 2, block_size=8)


class TestInstructions:
    def test_fixture_loads_with_counts(self, fixtures_dir):
        examples = load_instructions(str(fixtures_dir / "instructions_small.jsonl"))
        assert len(examples) == 10
        counts = instruction_counts(examples)
        assert counts["ko"] + counts["en"] == 10

    def test_thousand_record_file_count(self, tmp_path):
        path = tmp_path / "big.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(1030):
                fh.write(json.dumps({"instruction": f"q{i}", "input": "", "output": f"a{i}", "lang": "ko"}) + "\n")
        assert len(load_instructions(str(path))) == 1030

    def test_empty_output_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"instruction": "ok", "input": "", "output": "fine", "lang": "ko"}\n'
            '{"instruction": "x", "input": "", "output": "", "lang": "ko"}\n',
            encoding="utf-8",
        )
        with pytest.raises(DataError, match=":2: empty output"):
            load_instructions(str(path))

    def test_missing_field_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"instruction": "x", "output": "y"}\n', encoding="utf-8")
        with pytest.raises(DataError, match=":1: missing field 'lang'"):
            load_instructions(str(path))

    def test_unknown_lang_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"instruction": "x", "input": "", "output": "y", "lang": "fr"}\n', encoding="utf-8")
        with pytest.raises(DataError, match="unknown lang"):
            load_instructions(str(path))


class TestRender:
    def test_mask_is_trailing_output_plus_eos(self, merged_vocab, fixtures_dir):
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        ex = InstructionExample("질문", "", "안녕하세요", "ko")
        rendered = render_sft_example(merged_vocab, ex, template, max_seq=256)
        q = len(encode(merged_vocab, ex.output))
        assert int(rendered.loss_mask.sum()) == q + 1
        assert rendered.loss_mask[-(q + 1) :].all()
        assert not rendered.loss_mask[: -(q + 1)].any()

    def test_same_output_same_true_count(self, merged_vocab, fixtures_dir):
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        a = render_sft_example(merged_vocab, InstructionExample("짧은 질문", "", "네", "ko"), template, 256)
        b = render_sft_example(merged_vocab, InstructionExample("훨씬 더 긴 질문입니다", "", "네", "ko"), template, 256)
        assert int(a.loss_mask.sum()) == int(b.loss_mask.sum())

    def test_masked_region_decodes_to_output(self, merged_vocab, fixtures_dir):
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        for out_text in ("안녕하세요", "공룡은 햄버거를 먹는다.", "the dinosaur"):
            ex = InstructionExample("질문", "입력", out_text, "ko")
            rendered = render_sft_example(merged_vocab, ex, template, 256)
            assert masked_output_text(merged_vocab, rendered) == out_text
            assert rendered.ids[-1] == merged_vocab.eos_id

    def test_golden_prompt_rendering(self, merged_vocab, fixtures_dir):
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        prompt = template.render("공룡은 무엇을 먹나요?", "")
        assert prompt == "### Instruction:\n공룡은 무엇을 먹나요?\n### Input:\n\n### Response:\n"
        rendered = render_sft_example(
            merged_vocab, InstructionExample("공룡은 무엇을 먹나요?", "", "햄버거", "ko"), template, 256
        )
        p = len(encode(merged_vocab, prompt))
        assert decode(merged_vocab, rendered.ids[:p].tolist()) == prompt.replace("\n", "\n")

    def test_overlong_rejected(self, merged_vocab, fixtures_dir):
        template = load_template(str(fixtures_dir / "template_alpaca.txt"))
        ex = InstructionExample("질문", "", "긴" * 100, "ko")
        with pytest.raises(OverlongExampleError):
            render_sft_example(merged_vocab, ex, template, max_seq=32)

    def test_template_missing_placeholder_rejected(self):
        with pytest.raises(DataError, match="placeholder"):
            PromptTemplate("no slots here")
