"""Single entry point for the whole pipeline.

Subcommand groups mirror the stages: vocabulary work, tokenization,
training recipes, checkpoint inspection, and evaluation (classification
harness plus the pairwise preference study).  Report paths write their
delimited output and render a matplotlib figure next to it.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys

import click

from . import checkpoint as ckpt_io
from . import plots
from .harness import compute_metrics, load_tasks, score_options
from .model import generate, logits_fn
from .preference import (
    HttpJudge,
    JudgeProtocolError,
    MockJudge,
    aggregate,
    build_preference_batch,
    judge_with_model,
    load_judgments,
    load_pairs,
    save_pairs,
)
from .recipe import RecipeConfig, RecipeError, run_recipe
from .service import AnnotationStore, serve
from .tokenizer import (
    encode,
    fertility_report,
    iter_corpus_lines,
    load_vocab,
    merge_vocab,
    render_tokens,
    save_vocab,
)
from .util import atomic_write_json, atomic_write_text


@click.group()
def main():
    """Adapt a multilingual causal LM to a new language and evaluate it."""


# ---------------------------------------------------------------- vocab


@main.group()
def vocab():
    """Vocabulary merging and tokenization-quality reports."""


@vocab.command("merge")
@click.option("--base", "base_path", required=True, type=click.Path(exists=True), help="Base vocab file.")
@click.option("--ext", "ext_path", required=True, type=click.Path(exists=True), help="Extension vocab file.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Merged vocab output.")
@click.option("--report", "report_path", type=click.Path(), help="Merge report JSON output.")
def vocab_merge(base_path, ext_path, out_path, report_path):
    """Append the extension's novel entries to the base vocabulary."""
    merged, report = merge_vocab(load_vocab(base_path), load_vocab(ext_path))
    save_vocab(merged, out_path)
    if report_path:
        atomic_write_json(report_path, report.as_dict())
    click.echo(
        f"merged {report.base_size} + {report.extension_size} entries "
        f"-> {report.merged_size} ({report.added} added, {report.duplicates_skipped} duplicates skipped)"
    )


@vocab.command("report")
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True), help="Text file to analyze.")
@click.option("--out-csv", type=click.Path(), help="Stats CSV (default: <corpus>.fertility.csv).")
@click.option("--out-fig", type=click.Path(), help="Figure PNG (default: <corpus>.fertility.png).")
def vocab_report(vocab_path, corpus_path, out_csv, out_fig):
    """Fertility and byte-fallback statistics for a corpus under a vocab."""
    v = load_vocab(vocab_path)
    stats = fertility_report(v, iter_corpus_lines(corpus_path))
    out_csv = out_csv or corpus_path + ".fertility.csv"
    out_fig = out_fig or corpus_path + ".fertility.png"
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "value"])
    for key, value in stats.as_dict().items():
        writer.writerow([key, value])
    atomic_write_text(out_csv, buf.getvalue())
    plots.plot_fertility(stats, out_fig, label=os.path.basename(vocab_path))
    click.echo(
        f"tokens/char {stats.tokens_per_char:.3f}, byte fraction {stats.byte_token_fraction:.3f}, "
        f"{stats.byte_dup_chars} chars with shared byte tokens -> {out_csv}, {out_fig}"
    )


@main.command()
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True))
@click.option("--text", required=True, help="Text to tokenize.")
@click.option("--ids", "show_ids", is_flag=True, help="Print token ids instead of pieces.")
def tokenize(vocab_path, text, show_ids):
    """Tokenize text and print the pieces (or ids)."""
    v = load_vocab(vocab_path)
    token_ids = encode(v, text)
    if show_ids:
        click.echo(" ".join(str(i) for i in token_ids))
    else:
        click.echo(" ".join(render_tokens(v, token_ids)))


# ---------------------------------------------------------------- training


@main.group()
def recipe():
    """Multi-stage training recipes."""


@recipe.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Run config TOML.")
@click.option("--allow-skip", is_flag=True, help="Permit instruction tuning without a pretraining stage.")
@click.option("--seed", type=int, default=None, help="Override every stage seed.")
def recipe_run(config_path, allow_skip, seed):
    """Run expand -> pretrain -> instruction-tune as configured."""
    cfg = RecipeConfig.from_toml(config_path)
    state, _, path = run_recipe(cfg, allow_skip=allow_skip, seed_override=seed)
    _render_stage_figures(cfg.paths["out_dir"])
    click.echo(f"stages {state.stage_history} -> {path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
def pretrain(config_path, seed):
    """Run the recipe through pretraining only (no instruction tuning)."""
    cfg = RecipeConfig.from_toml(config_path)
    if cfg.pretrain is None:
        raise RecipeError("run config has no [pretrain] section")
    cfg.sft = None
    state, _, path = run_recipe(cfg, seed_override=seed)
    _render_stage_figures(cfg.paths["out_dir"])
    click.echo(f"stages {state.stage_history} -> {path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), help="Continue from this checkpoint.")
@click.option("--allow-skip", is_flag=True, help="Permit tuning a model that was never pretrained.")
@click.option("--seed", type=int, default=None)
def sft(config_path, ckpt_path, allow_skip, seed):
    """Instruction-tune, either from scratch or from a checkpoint."""
    cfg = RecipeConfig.from_toml(config_path)
    if cfg.sft is None:
        raise RecipeError("run config has no [sft] section")
    if ckpt_path is None:
        cfg.pretrain = None
        state, _, path = run_recipe(cfg, allow_skip=allow_skip, seed_override=seed)
    else:
        state, _, path = _sft_from_checkpoint(cfg, ckpt_path, allow_skip, seed)
    _render_stage_figures(cfg.paths["out_dir"])
    click.echo(f"stages {state.stage_history} -> {path}")


def _sft_from_checkpoint(cfg, ckpt_path, allow_skip, seed):
    from .data import OverlongExampleError, load_instructions, load_template, render_sft_example
    from .recipe import _train_config
    from .train import train_sft

    state, vocab = ckpt_io.load_checkpoint(ckpt_path)
    if "pretrain" not in state.stage_history and not allow_skip:
        raise RecipeError(
            "checkpoint has no pretraining stage; pass --allow-skip to tune anyway"
        )
    out_dir = cfg.paths["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    template = load_template(cfg.paths["template"])
    examples = load_instructions(cfg.paths["instructions"])
    rendered = []
    for ex in examples:
        try:
            rendered.append(render_sft_example(vocab, ex, template, state.config.max_seq))
        except OverlongExampleError:
            continue
    state = train_sft(state, rendered, _train_config(cfg.sft, "sft", seed), os.path.join(out_dir, "metrics_sft.csv"))
    path = os.path.join(out_dir, "model.ckpt")
    ckpt_io.save_checkpoint(state, vocab, path)
    return state, vocab, path


def _render_stage_figures(out_dir: str) -> None:
    for stage in ("pretrain", "sft"):
        metrics = os.path.join(out_dir, f"metrics_{stage}.csv")
        if os.path.exists(metrics):
            plots.plot_loss_curve(metrics, os.path.join(out_dir, f"loss_{stage}.png"))


@main.group()
def ckpt():
    """Checkpoint utilities."""


@ckpt.command("inspect")
@click.argument("path", type=click.Path(exists=True))
def ckpt_inspect(path):
    """Print a checkpoint's header summary."""
    click.echo(json.dumps(ckpt_io.describe(path), indent=2))


# ---------------------------------------------------------------- evaluation


@main.group(name="eval")
def eval_group():
    """Quantitative harness and preference evaluation."""


@eval_group.command("classify")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--tasks", "tasks_path", required=True, type=click.Path(exists=True), help="Task JSONL.")
@click.option("--out", "out_path", default="metrics.csv", type=click.Path(), show_default=True)
@click.option("--length-normalize", is_flag=True, help="Divide option log-probs by token count.")
def eval_classify(ckpt_path, tasks_path, out_path, length_normalize):
    """Score option-classification tasks by log-likelihood."""
    state, vocab = ckpt_io.load_checkpoint(ckpt_path)
    tasks = load_tasks(tasks_path)
    fn = logits_fn(state)
    preds = [
        score_options(fn, vocab, t, length_normalize=length_normalize, max_seq=state.config.max_seq)
        for t in tasks
    ]
    metrics = compute_metrics(preds, [t.gold for t in tasks], max(len(t.options) for t in tasks))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "value"])
    writer.writerow(["n_tasks", len(tasks)])
    writer.writerow(["accuracy", f"{metrics.accuracy:.6f}"])
    writer.writerow(["macro_f1", f"{metrics.macro_f1:.6f}"])
    atomic_write_text(out_path, buf.getvalue())
    preds_path = os.path.splitext(out_path)[0] + "_predictions.csv"
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["task", "pred", "gold"])
    for i, (p, t) in enumerate(zip(preds, tasks)):
        writer.writerow([i, p, t.gold])
    atomic_write_text(preds_path, buf.getvalue())
    click.echo(f"accuracy {metrics.accuracy:.4f}, macro-F1 {metrics.macro_f1:.4f} -> {out_path}")


@eval_group.group()
def pref():
    """Blinded pairwise preference pipeline."""


@pref.command("build")
@click.option("--model", "models", multiple=True, required=True, help="NAME=CHECKPOINT, repeatable (>= 2).")
@click.option("--prompts", "prompts_path", required=True, type=click.Path(exists=True), help="One prompt per line.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--max-new", default=32, show_default=True, type=int)
@click.option("--temperature", default=0.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def pref_build(models, prompts_path, out_path, max_new, temperature, seed):
    """Generate blinded response pairs for every model pair and prompt."""
    handles = []
    for spec in models:
        if "=" not in spec:
            raise click.UsageError(f"--model must be NAME=CHECKPOINT, got {spec!r}")
        name, path = spec.split("=", 1)
        state, vocab = ckpt_io.load_checkpoint(path)

        def gen(prompt, _state=state, _vocab=vocab):
            return generate(_state, _vocab, prompt, max_new=max_new, temperature=temperature, seed=seed)

        handles.append((name, gen))
    with open(prompts_path, encoding="utf-8") as fh:
        prompts = [line.rstrip("\n") for line in fh if line.strip()]
    pairs = build_preference_batch(handles, prompts, seed=seed)
    save_pairs(pairs, out_path)
    click.echo(f"{len(pairs)} pairs -> {out_path}")


@pref.command("judge")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(), help="Judgment JSONL (appended).")
@click.option("--judge", "judge_kind", type=click.Choice(["mock", "http"]), default="mock", show_default=True)
@click.option("--endpoint", help="Judge service URL (http judge).")
@click.option("--timeout", default=30.0, show_default=True, type=float)
@click.option("--retries", default=3, show_default=True, type=int)
def pref_judge(pairs_path, out_path, judge_kind, endpoint, timeout, retries):
    """Run the model judge over every pair; protocol errors leave pairs unjudged."""
    from .preference import append_judgment

    if judge_kind == "http":
        if not endpoint:
            raise click.UsageError("--endpoint is required for the http judge")
        judge = HttpJudge(endpoint, token=os.environ.get("JUDGE_API_TOKEN"), timeout=timeout)
    else:
        judge = MockJudge()
    pairs = load_pairs(pairs_path)
    judged = errors = 0
    for pair in pairs:
        try:
            judgment = judge_with_model(pair, judge, max_retries=retries)
        except JudgeProtocolError as exc:
            click.echo(f"protocol error: {exc}", err=True)
            errors += 1
            continue
        append_judgment(judgment, out_path)
        judged += 1
    click.echo(f"{judged} judged, {errors} protocol errors -> {out_path}")


@pref.command("serve")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--judgments", "judgments_path", required=True, type=click.Path(), help="Append-only log.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int, help="Per-annotator task order seed.")
@click.option("--exclusive", is_flag=True, help="Never hand one pair to two annotators at once.")
@click.option("--static", "static_dir", type=click.Path(exists=True), help="Static UI directory to serve at /.")
def pref_serve(pairs_path, judgments_path, host, port, seed, exclusive, static_dir):
    """Run the annotation service until interrupted."""
    store = AnnotationStore(load_pairs(pairs_path), judgments_path, seed=seed, exclusive=exclusive)
    serve(store, host, port, static_dir)


@pref.command("report")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--judgments", "judgments_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", "out_dir", default=".", show_default=True, type=click.Path())
@click.option("--focal", help="Model whose won-both / lost-both counts to highlight.")
def pref_report(pairs_path, judgments_path, out_dir, focal):
    """Aggregate judgments into a win matrix: JSON + CSV + bar chart."""
    pairs = load_pairs(pairs_path)
    judgments = load_judgments(judgments_path)
    matrix = aggregate(judgments, pairs, focal)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_json(os.path.join(out_dir, "results.json"), matrix.as_dict())
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["model_a", "model_b", "a_wins", "ties", "b_wins"])
    for row in matrix.as_dict()["pairs"]:
        writer.writerow([row["model_a"], row["model_b"], row["a_wins"], row["ties"], row["b_wins"]])
    atomic_write_text(os.path.join(out_dir, "results.csv"), buf.getvalue())
    plots.plot_win_matrix(matrix, os.path.join(out_dir, "results.png"))
    for m, count in matrix.won_both.items():
        click.echo(f"{m}: won against all baselines on {count} prompts, lost on {matrix.lost_both[m]}")
    click.echo(f"results -> {out_dir}/results.json, results.csv, results.png")


def entrypoint():
    try:
        main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(130)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
