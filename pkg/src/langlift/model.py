"""Decoder-only toy transformer with an extensible embedding table.

The adaptation recipe this models: keep the pretrained weights frozen,
append rows to the embedding and output tables for newly added vocabulary
(only those rows train), and attach low-rank adapters to the attention
query/key/value projections.  Architecture details (RMS norm, gated MLP,
learned positions) are fixed here and orthogonal to the recipe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .tokenizer import Vocabulary, decode, encode

LORA_TARGETS = ("q", "k", "v")
INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    max_seq: int
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.lora_rank < 1:
            raise ModelError("lora_rank must be >= 1")
        if self.vocab_size < 260:
            raise ModelError("vocab_size must cover byte and control entries (>= 260)")
        if min(self.n_layers, self.d_model, self.max_seq) < 1:
            raise ModelError("n_layers, d_model, max_seq must be positive")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass
class LoRAAdapter:
    layer: int
    target: str  # one of q/k/v
    A: np.ndarray  # (d_model, rank)
    B: np.ndarray  # (rank, d_model), zero at init so attach is a no-op
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.A.shape[1]

    def tensor_items(self):
        prefix = f"lora.{self.layer}.{self.target}"
        yield f"{prefix}.A", self.A
        yield f"{prefix}.B", self.B


class FreezeMask:
    """Per-tensor trainable flags, with per-row flags for the two vocab tables."""

    def __init__(self, tensors: dict[str, bool], rows: dict[str, np.ndarray] | None = None):
        self.tensors = dict(tensors)
        self.rows = {k: np.asarray(v, dtype=bool) for k, v in (rows or {}).items()}

    def mask_for(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name in self.rows:
            return np.broadcast_to(self.rows[name][:, None], shape)
        return np.broadcast_to(np.asarray(self.tensors.get(name, False)), shape)

    def trainable_scalars(self, name: str, shape: tuple[int, ...]) -> int:
        return int(self.mask_for(name, shape).sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FreezeMask):
            return NotImplemented
        if self.tensors != other.tensors or self.rows.keys() != other.rows.keys():
            return False
        return all(np.array_equal(self.rows[k], other.rows[k]) for k in self.rows)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    mask: FreezeMask
    adapters: list[LoRAAdapter] = field(default_factory=list)
    old_vocab_size: int = 0
    stage_history: list[str] = field(default_factory=list)

    def tensor_items(self):
        yield from self.params.items()
        for adapter in self.adapters:
            yield from adapter.tensor_items()


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        shapes[f"layers.{i}.wq"] = (d, d)
        shapes[f"layers.{i}.wk"] = (d, d)
        shapes[f"layers.{i}.wv"] = (d, d)
        shapes[f"layers.{i}.wo"] = (d, d)
        shapes[f"layers.{i}.w_gate"] = (d, ff)
        shapes[f"layers.{i}.w_up"] = (d, ff)
        shapes[f"layers.{i}.w_down"] = (ff, d)
        shapes[f"layers.{i}.attn_norm"] = (d,)
        shapes[f"layers.{i}.mlp_norm"] = (d,)
    shapes["final_norm"] = (d,)
    shapes["out_proj"] = (v, d)  # one row per vocab id, logits = x @ out_proj.T
    return shapes


def init_model(config: ModelConfig, dtype=np.float32) -> ModelState:
    """Seeded init: N(0, 0.02) weights, unit norm gains (zero offset)."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("_norm"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
    mask = FreezeMask({name: True for name in params})
    return ModelState(
        config=config,
        params=params,
        mask=mask,
        old_vocab_size=config.vocab_size,
    )


def parameter_count(state: ModelState) -> int:
    return sum(arr.size for _, arr in state.tensor_items())


def extend_embeddings(state: ModelState, old_vocab: int, new_vocab: int, seed: int) -> ModelState:
    """Grow the vocab tables; new rows drawn at the old rows' empirical std.

    Existing rows are preserved bit-identically.  The freeze mask is updated
    so that within the two tables only the appended rows are trainable.
    """
    if state.config.vocab_size != old_vocab:
        raise ModelError(f"model vocab size {state.config.vocab_size} != stated old_vocab {old_vocab}")
    if new_vocab <= old_vocab:
        raise ModelError(f"new_vocab {new_vocab} must exceed old_vocab {old_vocab}")
    rng = np.random.default_rng(seed)
    params = dict(state.params)
    n_new = new_vocab - old_vocab
    for name in ("tok_emb", "out_proj"):
        old = state.params[name]
        std = float(old.std())
        fresh = rng.normal(0.0, std, size=(n_new, old.shape[1])).astype(old.dtype)
        params[name] = np.concatenate([old, fresh], axis=0)
    row_mask = np.zeros(new_vocab, dtype=bool)
    row_mask[old_vocab:] = True
    mask = FreezeMask(state.mask.tensors, {"tok_emb": row_mask, "out_proj": row_mask.copy()})
    config = replace(state.config, vocab_size=new_vocab)
    return ModelState(
        config=config,
        params={k: (v if k in ("tok_emb", "out_proj") else v.copy()) for k, v in params.items()},
        mask=mask,
        adapters=[LoRAAdapter(a.layer, a.target, a.A.copy(), a.B.copy(), a.alpha) for a in state.adapters],
        old_vocab_size=old_vocab,
        stage_history=list(state.stage_history),
    )


def recipe_mask(config: ModelConfig, params: dict[str, np.ndarray], old_vocab_size: int) -> FreezeMask:
    """Freeze everything pretrained; train adapters plus appended vocab rows."""
    tensors = {name: False for name in params}
    for layer in range(config.n_layers):
        for target in LORA_TARGETS:
            tensors[f"lora.{layer}.{target}.A"] = True
            tensors[f"lora.{layer}.{target}.B"] = True
    new_rows = np.zeros(config.vocab_size, dtype=bool)
    new_rows[old_vocab_size:] = True
    return FreezeMask(tensors, {"tok_emb": new_rows, "out_proj": new_rows.copy()})


def attach_lora(state: ModelState, seed: int | None = None) -> ModelState:
    """Attach rank-decomposition adapters on q/k/v of every layer.

    B starts at zero, so forward output is unchanged until training moves it.
    """
    if state.adapters:
        raise ModelError("adapters already attached")
    cfg = state.config
    rng = np.random.default_rng(cfg.seed + 101 if seed is None else seed)
    dtype = state.params["tok_emb"].dtype
    adapters = []
    for layer in range(cfg.n_layers):
        for target in LORA_TARGETS:
            A = rng.normal(0.0, INIT_STD, size=(cfg.d_model, cfg.lora_rank)).astype(dtype)
            B = np.zeros((cfg.lora_rank, cfg.d_model), dtype=dtype)
            adapters.append(LoRAAdapter(layer, target, A, B, cfg.lora_alpha))
    mask = recipe_mask(cfg, state.params, state.old_vocab_size)
    return ModelState(
        config=cfg,
        params={k: v.copy() for k, v in state.params.items()},
        mask=mask,
        adapters=adapters,
        old_vocab_size=state.old_vocab_size,
        stage_history=list(state.stage_history),
    )


def trainable_fraction(state: ModelState) -> float:
    trainable = 0
    total = 0
    for name, arr in state.tensor_items():
        total += arr.size
        trainable += state.mask.trainable_scalars(name, arr.shape)
    return trainable / total if total else 0.0


def bind(state: ModelState, graph: Graph | None = None) -> dict[str, Tensor]:
    """Leaf tensors for every parameter; shared across a step's sequences."""
    if graph is None:
        return {name: Tensor(arr) for name, arr in state.tensor_items()}
    return {name: graph.leaf(arr) for name, arr in state.tensor_items()}


def causal_mask(n: int, dtype) -> np.ndarray:
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = dtype.type(-1e9)
    return m


def forward_bound(config: ModelConfig, leaves: dict[str, Tensor], ids) -> Tensor:
    """Logits [len, vocab] for one sequence under bound parameter leaves."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    if n == 0:
        raise ModelError("empty input sequence")
    if n > config.max_seq:
        raise ModelError(f"sequence length {n} exceeds max_seq {config.max_seq}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ModelError("token id out of range")
    dtype = leaves["tok_emb"].dtype
    d, heads = config.d_model, config.n_heads
    dh = d // heads
    attn_mask = causal_mask(n, dtype)
    adapters = {
        (int(name.split(".")[1]), name.split(".")[2]): name.rsplit(".", 1)[0]
        for name in leaves
        if name.startswith("lora.")
    }

    def project(h: Tensor, layer: int, target: str) -> Tensor:
        out = ad.matmul(h, leaves[f"layers.{layer}.w{target}"])
        key = (layer, target)
        if key in adapters:
            prefix = adapters[key]
            a, b = leaves[f"{prefix}.A"], leaves[f"{prefix}.B"]
            alpha_over_r = config.lora_alpha / config.lora_rank
            out = ad.add(out, ad.scale(ad.matmul(ad.matmul(h, a), b), alpha_over_r))
        return out

    x = ad.add(ad.embedding(leaves["tok_emb"], ids), ad.embedding(leaves["pos_emb"], np.arange(n)))
    for layer in range(config.n_layers):
        h = ad.rmsnorm(x, leaves[f"layers.{layer}.attn_norm"])
        q = project(h, layer, "q")
        k = project(h, layer, "k")
        v = project(h, layer, "v")
        head_outs = []
        for hh in range(heads):
            j0, j1 = hh * dh, (hh + 1) * dh
            qh, kh, vh = (ad.slice_cols(t, j0, j1) for t in (q, k, v))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
            attn = ad.softmax_rows(ad.add_const(scores, attn_mask))
            head_outs.append(ad.matmul(attn, vh))
        o = head_outs[0] if heads == 1 else ad.concat_cols(head_outs)
        x = ad.add(x, ad.matmul(o, leaves[f"layers.{layer}.wo"]))
        h2 = ad.rmsnorm(x, leaves[f"layers.{layer}.mlp_norm"])
        gated = ad.mul(ad.silu(ad.matmul(h2, leaves[f"layers.{layer}.w_gate"])), ad.matmul(h2, leaves[f"layers.{layer}.w_up"]))
        x = ad.add(x, ad.matmul(gated, leaves[f"layers.{layer}.w_down"]))
    x = ad.rmsnorm(x, leaves["final_norm"])
    return ad.matmul(x, ad.transpose(leaves["out_proj"]))


def forward(state: ModelState, ids, graph: Graph | None = None) -> Tensor:
    return forward_bound(state.config, bind(state, graph), ids)


def logits_fn(state: ModelState):
    """ids -> logits ndarray closure, the scoring interface of the eval harness."""

    def fn(ids) -> np.ndarray:
        return forward(state, ids).data

    return fn


def generate(
    state: ModelState,
    vocab: Vocabulary,
    prompt: str,
    max_new: int,
    temperature: float = 0.0,
    seed: int = 0,
) -> str:
    """Autoregressive continuation; temperature 0 decodes greedily.

    Stops at the end-of-sequence control token or after max_new tokens and
    returns the decoded continuation only.
    """
    if max_new <= 0:
        raise ModelError("max_new must be positive")
    ids = encode(vocab, prompt)
    if not ids:
        raise ModelError("prompt produced no tokens")
    if len(vocab) != state.config.vocab_size:
        raise ModelError("vocabulary size does not match model")
    rng = np.random.default_rng(seed)
    eos = vocab.eos_id
    context = list(ids)
    for _ in range(max_new):
        window = context[-state.config.max_seq :]
        logits = forward(state, np.asarray(window)).data[-1]
        if temperature <= 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits.astype(np.float64) / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        if nxt == eos:
            break
        context.append(nxt)
    # decode prompt and continuation together, then cut the prompt text:
    # a continuation that begins with a word boundary keeps its space this
    # way (decoding the new ids alone would drop a leading marker)
    return decode(vocab, context)[len(prompt):]
