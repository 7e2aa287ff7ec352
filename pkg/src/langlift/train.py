"""Causal-LM pretraining and output-masked instruction tuning.

Both stages share one shifted cross-entropy path: position i is scored on
predicting token i+1, and instruction tuning simply restricts the scored
set to output positions.  Updates are momentum SGD applied only where the
freeze mask allows; frozen scalars stay bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .data import RenderedExample, TokenBlock
from .model import ModelState, bind, forward_bound

STAGES = ("pretrain", "sft")


class TrainError(ValueError):
    pass


class TrainDivergence(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    batch_size: int
    lr: float
    steps: int | None = None
    epochs: int | None = None
    grad_clip: float = 1.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}")
        if self.lr < 0 or self.batch_size <= 0:
            raise TrainError("learning rate must be nonnegative and batch size positive")
        if (self.steps is None) == (self.epochs is None):
            raise TrainError("exactly one of steps/epochs must be set")
        if (self.steps is not None and self.steps <= 0) or (self.epochs is not None and self.epochs <= 0):
            raise TrainError("steps/epochs must be positive")


def clm_loss(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over the whole sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] < 2:
        raise TrainError("causal LM loss needs at least 2 tokens")
    return sft_loss(logits, RenderedExample(ids, np.ones(ids.shape[0], dtype=bool)))


def sft_loss(logits: Tensor, rendered: RenderedExample) -> Tensor:
    """Shifted cross-entropy restricted to positions whose mask is true.

    An all-true mask makes this identical to clm_loss (same code path).
    """
    ids = rendered.ids
    n = ids.shape[0]
    if logits.shape[0] != n:
        raise TrainError(f"logits rows {logits.shape[0]} != sequence length {n}")
    # row i predicts token i+1; the final row has no target
    targets = np.concatenate([ids[1:], [0]])
    scored = np.concatenate([rendered.loss_mask[1:], [False]])
    return ad.softmax_cross_entropy(logits, targets, scored)


class MomentumSGD:
    """Velocity update with global-norm clipping; writes only trainable scalars."""

    def __init__(self, state: ModelState, cfg: TrainConfig):
        self.state = state
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(arr) for name, arr in state.tensor_items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        masked = {}
        sq_norm = 0.0
        for name, arr in self.state.tensor_items():
            m = self.state.mask.mask_for(name, arr.shape)
            g = np.where(m, grads[name], 0.0).astype(arr.dtype)
            masked[name] = g
            sq_norm += float(np.square(g, dtype=np.float64).sum())
        norm = math.sqrt(sq_norm)
        scale = self.cfg.grad_clip / norm if 0 < self.cfg.grad_clip < norm else 1.0
        for name, arr in self.state.tensor_items():
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += masked[name] * arr.dtype.type(scale)
            m = self.state.mask.mask_for(name, arr.shape)
            arr[m] -= arr.dtype.type(self.cfg.lr) * v[m]


class MetricsWriter:
    """CSV log `step,stage,loss,lr,tokens_seen`, flushed per row."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["step", "stage", "loss", "lr", "tokens_seen"])
        self._fh.flush()

    def log(self, step: int, stage: str, loss: float, lr: float, tokens_seen: int) -> None:
        self._writer.writerow([step, stage, f"{loss:.6f}", f"{lr:g}", tokens_seen])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _grads_by_name(graph: Graph, loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = graph.backward(loss)
    return {name: grads[leaf] for name, leaf in leaves.items()}


def steps_for_epochs(epochs: int, total_tokens: int, block_size: int, batch_size: int) -> int:
    """One epoch = enough steps to consume the corpus once at this batch shape."""
    return max(1, math.ceil(total_tokens / (block_size * batch_size))) * epochs


def train_clm(
    state: ModelState,
    stream: Iterator[TokenBlock],
    cfg: TrainConfig,
    metrics_path: str,
    steps_per_epoch: int | None = None,
) -> ModelState:
    """Pretraining loop over mixed-language token blocks."""
    if cfg.stage != "pretrain":
        raise TrainError(f"train_clm requires stage=pretrain, got {cfg.stage!r}")
    if cfg.steps is not None:
        total_steps = cfg.steps
    else:
        if steps_per_epoch is None:
            raise TrainError("epochs given but steps_per_epoch unknown")
        total_steps = cfg.epochs * steps_per_epoch
    optimizer = MomentumSGD(state, cfg)
    tokens_seen = 0
    with MetricsWriter(metrics_path) as metrics:
        for step in range(total_steps):
            graph = Graph()
            leaves = bind(state, graph)
            loss = None
            try:
                for _ in range(cfg.batch_size):
                    block = next(stream)
                    part = clm_loss(forward_bound(state.config, leaves, block.ids), block.ids)
                    loss = part if loss is None else ad.add(loss, part)
                    tokens_seen += int(block.ids.shape[0])
                loss = ad.scale(loss, 1.0 / cfg.batch_size)
            except ad.NumericsError as exc:
                raise TrainDivergence(step, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainDivergence(step, f"loss={value}")
            optimizer.step(_grads_by_name(graph, loss, leaves))
            metrics.log(step, "pretrain", value, cfg.lr, tokens_seen)
    state.stage_history.append("pretrain")
    return state


def train_sft(
    state: ModelState,
    examples: list[RenderedExample],
    cfg: TrainConfig,
    metrics_path: str,
) -> ModelState:
    """Instruction tuning over rendered examples, reshuffled each epoch."""
    if cfg.stage != "sft":
        raise TrainError(f"train_sft requires stage=sft, got {cfg.stage!r}")
    if not examples:
        raise TrainError("no instruction examples to train on")
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(examples))
    cursor = 0
    optimizer = MomentumSGD(state, cfg)
    tokens_seen = 0
    with MetricsWriter(metrics_path) as metrics:
        for step in range(total_steps):
            graph = Graph()
            leaves = bind(state, graph)
            loss = None
            taken = 0
            try:
                while taken < cfg.batch_size:
                    if cursor >= len(order):
                        order = rng.permutation(len(examples))
                        cursor = 0
                    ex = examples[int(order[cursor])]
                    cursor += 1
                    taken += 1
                    part = sft_loss(forward_bound(state.config, leaves, ex.ids), ex)
                    loss = part if loss is None else ad.add(loss, part)
                    tokens_seen += int(ex.ids.shape[0])
                loss = ad.scale(loss, 1.0 / cfg.batch_size)
            except ad.NumericsError as exc:
                raise TrainDivergence(step, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainDivergence(step, f"loss={value}")
            optimizer.step(_grads_by_name(graph, loss, leaves))
            metrics.log(step, "sft", value, cfg.lr, tokens_seen)
    state.stage_history.append("sft")
    return state
