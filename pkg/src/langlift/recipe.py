"""Three-stage adaptation recipe: expand vocabulary, pretrain, instruction-tune.

Driven by a TOML run config; every stage appends to the checkpoint's stage
history so ablations (skip pretraining, skip tuning) remain auditable.
Instruction tuning on a model that was never pretrained is refused unless
explicitly allowed.
"""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .checkpoint import save_checkpoint
from .data import (
    MixSpec,
    OverlongExampleError,
    corpus_token_count,
    ingest_corpus,
    load_instructions,
    load_template,
    mix_stream,
    render_sft_example,
)
from .model import ModelConfig, ModelState, attach_lora, extend_embeddings, init_model
from .tokenizer import Vocabulary, load_vocab, merge_vocab, save_vocab
from .train import TrainConfig, steps_for_epochs, train_clm, train_sft
from .util import atomic_write_json

log = logging.getLogger(__name__)


class RecipeError(ValueError):
    pass


@dataclass
class RecipeConfig:
    model: dict
    paths: dict
    mix: dict | None
    pretrain: dict | None
    sft: dict | None

    @classmethod
    def from_toml(cls, path: str) -> "RecipeConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        for section in ("model", "paths"):
            if section not in raw:
                raise RecipeError(f"run config is missing the [{section}] section")
        return cls(
            model=raw["model"],
            paths=raw["paths"],
            mix=raw.get("mix"),
            pretrain=raw.get("pretrain"),
            sft=raw.get("sft"),
        )


def _train_config(section: dict, stage: str, seed_override: int | None) -> TrainConfig:
    kwargs = dict(section)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return TrainConfig(stage=stage, **kwargs)


def run_recipe(
    cfg: RecipeConfig,
    allow_skip: bool = False,
    seed_override: int | None = None,
) -> tuple[ModelState, Vocabulary, str]:
    """Execute the configured stages; returns final state and checkpoint path."""
    paths = cfg.paths
    for key in ("base_vocab", "ext_vocab", "out_dir"):
        if key not in paths:
            raise RecipeError(f"[paths] is missing {key!r}")
    out_dir = paths["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    base = load_vocab(paths["base_vocab"])
    ext = load_vocab(paths["ext_vocab"])
    merged, report = merge_vocab(base, ext)
    save_vocab(merged, os.path.join(out_dir, "merged.vocab"))
    atomic_write_json(os.path.join(out_dir, "merge_report.json"), report.as_dict())
    log.info("merged vocabulary: %s", report.as_dict())

    model_kwargs = dict(cfg.model)
    if seed_override is not None:
        model_kwargs["seed"] = seed_override
    config = ModelConfig(vocab_size=len(base), **model_kwargs)
    state = init_model(config)
    state = extend_embeddings(state, len(base), len(merged), seed=config.seed + 1)
    state = attach_lora(state)
    state.stage_history.append("expand")

    if cfg.pretrain is not None:
        if cfg.mix is None:
            raise RecipeError("[pretrain] requires a [mix] section")
        if "corpus_root" not in paths:
            raise RecipeError("[paths] is missing 'corpus_root' for pretraining")
        mix = MixSpec(**cfg.mix)
        shards = ingest_corpus(paths["corpus_root"])
        if not shards:
            raise RecipeError(f"no corpus shards under {paths['corpus_root']}")
        train_cfg = _train_config(cfg.pretrain, "pretrain", seed_override)
        steps_per_epoch = None
        if train_cfg.epochs is not None:
            totals = corpus_token_count(merged, shards)
            steps_per_epoch = steps_for_epochs(1, sum(totals.values()), mix.block_size, train_cfg.batch_size)
        stream = mix_stream(shards, merged, mix)
        state = train_clm(state, stream, train_cfg, os.path.join(out_dir, "metrics_pretrain.csv"), steps_per_epoch)

    if cfg.sft is not None:
        if "pretrain" not in state.stage_history and not allow_skip:
            raise RecipeError(
                "refusing to instruction-tune a model with no pretraining stage; "
                "pass --allow-skip to run the ablation"
            )
        for key in ("instructions", "template"):
            if key not in paths:
                raise RecipeError(f"[paths] is missing {key!r} for instruction tuning")
        template = load_template(paths["template"])
        examples = load_instructions(paths["instructions"])
        rendered = []
        for i, ex in enumerate(examples):
            try:
                rendered.append(render_sft_example(merged, ex, template, config.max_seq))
            except OverlongExampleError as exc:
                log.warning("skipping instruction example %d: %s", i, exc)
        train_cfg = _train_config(cfg.sft, "sft", seed_override)
        state = train_sft(state, rendered, train_cfg, os.path.join(out_dir, "metrics_sft.csv"))

    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(state, merged, ckpt_path)
    log.info("stage history: %s -> %s", state.stage_history, ckpt_path)
    return state, merged, ckpt_path
