"""Log-likelihood option scoring and classification metrics.

A task is a prompt with enumerated answer options; the model's pick is the
option whose tokens are most likely under the prompt.  Scoring sums token
log-probabilities by default; length normalization is an explicit switch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tokenizer import Vocabulary, encode

LogitsFn = Callable[[Sequence[int]], np.ndarray]


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class ClassificationTask:
    prompt: str
    options: list[str]
    gold: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise HarnessError("a task needs at least 2 options")
        if not 0 <= self.gold < len(self.options):
            raise HarnessError(f"gold index {self.gold} out of range")


def load_tasks(path: str) -> list[ClassificationTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tasks.append(ClassificationTask(rec["prompt"], list(rec["options"]), int(rec["gold"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise HarnessError(f"{path}:{lineno}: bad task record ({exc})") from None
    return tasks


def option_logprob(logits_fn: LogitsFn, vocab: Vocabulary, prompt: str, option: str) -> tuple[float, int]:
    """Sum of option-token log-probabilities conditioned on the prompt."""
    prompt_ids = encode(vocab, prompt)
    option_ids = encode(vocab, option)
    if not prompt_ids or not option_ids:
        raise HarnessError("prompt and option must tokenize to at least one token each")
    ids = prompt_ids + option_ids
    logits = np.asarray(logits_fn(ids), dtype=np.float64)
    total = 0.0
    for pos in range(len(prompt_ids), len(ids)):
        row = logits[pos - 1]
        row = row - row.max()
        total += row[ids[pos]] - np.log(np.exp(row).sum())
    return total, len(option_ids)


def score_options(
    logits_fn: LogitsFn,
    vocab: Vocabulary,
    task: ClassificationTask,
    length_normalize: bool = False,
    max_seq: int | None = None,
) -> int:
    """Argmax option under the model; ties break to the lowest index."""
    if max_seq is not None:
        for opt in task.options:
            if len(encode(vocab, task.prompt)) + len(encode(vocab, opt)) > max_seq:
                raise HarnessError("prompt plus option exceeds the model's max_seq")
    best_idx = 0
    best_score = -np.inf
    for idx, option in enumerate(task.options):
        score, n_tokens = option_logprob(logits_fn, vocab, task.prompt, option)
        if length_normalize:
            score /= n_tokens
        if score > best_score:
            best_idx, best_score = idx, score
    return best_idx


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
        }


def compute_metrics(preds: Sequence[int], golds: Sequence[int], n_classes: int) -> Metrics:
    """Accuracy and unweighted mean of per-class F1 (absent classes score 0)."""
    if len(preds) != len(golds):
        raise HarnessError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not preds:
        raise HarnessError("no predictions")
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    acc = float((preds == golds).mean())
    f1s = []
    for c in range(n_classes):
        tp = int(((preds == c) & (golds == c)).sum())
        fp = int(((preds == c) & (golds != c)).sum())
        fn = int(((preds != c) & (golds == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return Metrics(acc, float(np.mean(f1s)), tuple(f1s))
