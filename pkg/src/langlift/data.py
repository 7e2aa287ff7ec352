"""Corpus ingestion, ratio-controlled bilingual mixing, and SFT rendering.

Pretraining text lives under `root/{ko,en}/*.txt`; instruction data is
JSONL with instruction/input/output/lang fields.  Rendered SFT examples
carry a loss mask that is false over the prompt and true over the output
tokens plus the end-of-sequence separator.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tokenizer import Vocabulary, decode, encode

log = logging.getLogger(__name__)

LANGUAGES = ("ko", "en")


class DataError(ValueError):
    pass


class OverlongExampleError(DataError):
    """Rendered example exceeds the model's sequence budget; callers may skip."""


@dataclass(frozen=True)
class CorpusShard:
    language: str
    path: str
    byte_size: int


@dataclass(frozen=True)
class MixSpec:
    ko_weight: float
    en_weight: float
    block_size: int
    seed: int = 0

    def __post_init__(self):
        if self.ko_weight < 0 or self.en_weight < 0 or self.ko_weight + self.en_weight <= 0:
            raise DataError("language weights must be nonnegative with a positive sum")
        if self.block_size < 2:
            raise DataError("block_size must be at least 2")

    @property
    def ko_fraction(self) -> float:
        return self.ko_weight / (self.ko_weight + self.en_weight)


@dataclass(frozen=True)
class TokenBlock:
    language: str
    ids: np.ndarray  # exactly block_size token ids, single language


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    input: str
    output: str
    lang: str


@dataclass(frozen=True)
class RenderedExample:
    ids: np.ndarray
    loss_mask: np.ndarray  # bool, same length; true over output tokens and EOS

    def __post_init__(self):
        if self.ids.shape != self.loss_mask.shape:
            raise DataError("ids and loss_mask lengths differ")
        if not self.loss_mask.any():
            raise DataError("loss mask has no true positions")


class PromptTemplate:
    """Prompt layout with {instruction}, {input}, {response_marker} slots."""

    REQUIRED = ("{instruction}", "{input}", "{response_marker}")

    def __init__(self, text: str, response_marker: str = "### Response:\n"):
        for slot in self.REQUIRED:
            if slot not in text:
                raise DataError(f"template is missing the {slot} placeholder")
        self.text = text
        self.response_marker = response_marker

    def render(self, instruction: str, input_text: str = "") -> str:
        return self.text.format(
            instruction=instruction,
            input=input_text,
            response_marker=self.response_marker,
        )


def load_template(path: str, response_marker: str = "### Response:\n") -> PromptTemplate:
    with open(path, encoding="utf-8") as fh:
        return PromptTemplate(fh.read(), response_marker)


def ingest_corpus(root: str) -> list[CorpusShard]:
    """One shard per text file, language taken from the parent directory."""
    shards: list[CorpusShard] = []
    for lang in LANGUAGES:
        lang_dir = os.path.join(root, lang)
        if not os.path.isdir(lang_dir):
            log.warning("corpus root %s has no %s/ directory", root, lang)
            continue
        files = sorted(f for f in os.listdir(lang_dir) if f.endswith(".txt"))
        if not files:
            log.warning("no .txt files under %s", lang_dir)
            continue
        for fname in files:
            path = os.path.join(lang_dir, fname)
            if not os.access(path, os.R_OK):
                raise DataError(f"unreadable corpus file: {path}")
            shards.append(CorpusShard(lang, path, os.stat(path).st_size))
    shards.sort(key=lambda s: s.path)
    totals = language_totals(shards)
    if not shards:
        log.warning("corpus root %s yielded no shards", root)
    else:
        log.info("ingested %d shards, bytes per language: %s", len(shards), totals)
    return shards


def language_totals(shards: list[CorpusShard]) -> dict[str, int]:
    totals = {lang: 0 for lang in LANGUAGES}
    for s in shards:
        totals[s.language] += s.byte_size
    return totals


def _shard_tokens(vocab: Vocabulary, shard: CorpusShard) -> list[int]:
    with open(shard.path, encoding="utf-8") as fh:
        text = fh.read()
    return encode(vocab, text) + [vocab.eos_id]


def _language_token_iter(vocab: Vocabulary, shards: list[CorpusShard]) -> Iterator[int]:
    # cycles the shard list forever; files re-tokenized once then cached
    cache: dict[str, list[int]] = {}
    while True:
        for shard in shards:
            if shard.path not in cache:
                cache[shard.path] = _shard_tokens(vocab, shard)
            yield from cache[shard.path]


def corpus_token_count(vocab: Vocabulary, shards: list[CorpusShard]) -> dict[str, int]:
    counts = {lang: 0 for lang in LANGUAGES}
    for shard in shards:
        counts[shard.language] += len(_shard_tokens(vocab, shard))
    return counts


def mix_stream(shards: list[CorpusShard], vocab: Vocabulary, spec: MixSpec) -> Iterator[TokenBlock]:
    """Endless stream of fixed-size single-language blocks.

    The language of each block is a seeded weighted draw, so realized
    fractions converge to the spec weights and are directly measurable.
    """
    by_lang = {lang: [s for s in shards if s.language == lang] for lang in LANGUAGES}
    weights = {"ko": spec.ko_weight, "en": spec.en_weight}
    for lang in LANGUAGES:
        if weights[lang] > 0 and not by_lang[lang]:
            raise DataError(f"mix weight for {lang!r} is positive but no {lang} shards exist")
    rng = np.random.default_rng(spec.seed)
    p_ko = spec.ko_fraction
    iters = {lang: _language_token_iter(vocab, by_lang[lang]) for lang in LANGUAGES if by_lang[lang]}
    while True:
        lang = "ko" if rng.random() < p_ko else "en"
        block = np.fromiter(iters[lang], dtype=np.int64, count=spec.block_size)
        yield TokenBlock(lang, block)


def load_instructions(path: str) -> list[InstructionExample]:
    """Validated instruction records from JSONL; input may be absent or empty."""
    examples: list[InstructionExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for field_name in ("instruction", "output", "lang"):
                if field_name not in rec:
                    raise DataError(f"{path}:{lineno}: missing field {field_name!r}")
            if not rec["instruction"]:
                raise DataError(f"{path}:{lineno}: empty instruction")
            if not rec["output"]:
                raise DataError(f"{path}:{lineno}: empty output")
            if rec["lang"] not in LANGUAGES:
                raise DataError(f"{path}:{lineno}: unknown lang {rec['lang']!r}")
            examples.append(
                InstructionExample(
                    instruction=rec["instruction"],
                    input=rec.get("input", ""),
                    output=rec["output"],
                    lang=rec["lang"],
                )
            )
    counts = instruction_counts(examples)
    log.info("loaded %d instruction examples (%s)", len(examples), counts)
    return examples


def instruction_counts(examples: list[InstructionExample]) -> dict[str, int]:
    counts = {lang: 0 for lang in LANGUAGES}
    for ex in examples:
        counts[ex.lang] += 1
    return counts


def render_sft_example(
    vocab: Vocabulary,
    ex: InstructionExample,
    template: PromptTemplate,
    max_seq: int,
) -> RenderedExample:
    """Tokenize prompt and output separately so the mask boundary is exact.

    Decoding the masked subsequence reproduces ex.output; the EOS separator
    is part of the scored region so the model learns to stop.
    """
    prompt_ids = encode(vocab, template.render(ex.instruction, ex.input))
    output_ids = encode(vocab, ex.output)
    ids = prompt_ids + output_ids + [vocab.eos_id]
    if len(ids) > max_seq:
        raise OverlongExampleError(
            f"rendered example is {len(ids)} tokens, exceeding max_seq {max_seq}"
        )
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prompt_ids) :] = True
    return RenderedExample(np.asarray(ids, dtype=np.int64), mask)


def masked_output_text(vocab: Vocabulary, rendered: RenderedExample) -> str:
    """Decode the scored region minus EOS; equals the original output text."""
    scored = rendered.ids[rendered.loss_mask][:-1]
    return decode(vocab, scored)
