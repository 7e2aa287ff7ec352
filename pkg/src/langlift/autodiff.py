"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Eager tape: every op computed with numpy records its output, parents, and
a backward closure on the owning Graph.  Ops called on graph-free tensors
run unrecorded (inference mode).  Forward results must stay finite; a
NaN/Inf output raises immediately rather than propagating.

Precision is carried by the arrays themselves: float32 for training,
float64 wherever a finite-difference oracle needs headroom.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NumericsError(RuntimeError):
    pass


class Tensor:
    """Array plus optional tape membership. Hashable by identity."""

    __slots__ = ("data", "graph")

    def __init__(self, data: np.ndarray, graph: "Graph | None" = None):
        self.data = data
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Graph:
    """Recording tape. Single-owner during recording; backward walks the
    tape once in reverse order, which is reverse-topological by construction."""

    def __init__(self):
        self._tape: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._recorded: list[Tensor] = []

    def leaf(self, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data), self)
        self._recorded.append(t)
        return t

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._tape.append((out, parents, backward_fn))
        self._recorded.append(out)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a recorded scalar w.r.t. every recorded tensor.

        Tensors not on a path to the loss keep zero gradients.
        """
        if loss.graph is not self:
            raise NumericsError("loss was not recorded on this graph")
        if loss.data.size != 1:
            raise NumericsError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict[Tensor, np.ndarray] = {
            t: np.zeros_like(t.data) for t in self._recorded
        }
        grads[loss] = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._tape):
            gout = grads[out]
            for parent, gin in zip(parents, backward_fn(gout)):
                if parent in grads:  # graph-less parents are constants
                    grads[parent] = grads[parent] + gin
        return grads


def backward(graph: Graph, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return graph.backward(loss)


def _graph_of(*tensors: Tensor) -> Graph | None:
    g = None
    for t in tensors:
        if t.graph is not None:
            if g is not None and t.graph is not g:
                raise NumericsError("operands belong to different graphs")
            g = t.graph
    return g


def _finite(name: str, data: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {name}")
    return data


def _make(name: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    g = _graph_of(*parents)
    out = Tensor(_finite(name, data), g)
    if g is not None:
        g._record(out, parents, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise NumericsError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[n, d] + bias[d], broadcast over the leading dimension only."""
    if x.data.ndim != 2 or bias.data.shape != (x.data.shape[1],):
        raise NumericsError(f"add_bias shape mismatch: {x.data.shape} + {bias.data.shape}")
    return _make("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise NumericsError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * x.data.dtype.type(c),))


def add_const(x: Tensor, c: np.ndarray | float) -> Tensor:
    """Add a non-differentiable constant (e.g. an additive attention mask)."""
    return _make("add_const", x.data + c, (x,), lambda g: (g,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise NumericsError("embedding id out of range")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make("embedding", table.data[ids], (table,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        outs = []
        j = 0
        for w in widths:
            outs.append(g[:, j : j + w])
            j += w
        return tuple(outs)

    return _make("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, j0:j1] = g
        return (gx,)

    return _make("slice_cols", x.data[:, j0:j1].copy(), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _make("silu", x.data * sig, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last dimension."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise NumericsError(f"rmsnorm gain shape {gain.data.shape} does not match last dim {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + x.data.dtype.type(eps))
    normed = x.data * inv

    def bwd(g):
        gg = g * gain.data
        # d/dx of x_j * inv: inv on the diagonal, minus x_j * x_k * inv^3 / d
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        gx = gg * inv - x.data * (inv ** 3) * dot / d
        ggain = np.sum(g * normed, axis=tuple(range(g.ndim - 1)))
        return (gx.astype(x.data.dtype, copy=False), ggain.astype(gain.data.dtype, copy=False))

    return _make("rmsnorm", normed * gain.data, (x, gain), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make("softmax", p, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax.

    Stabilized by max subtraction; positions with mask False contribute
    nothing, including exactly-zero gradient on their logits row.
    """
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise NumericsError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise NumericsError("target id out of range")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n_scored = int(mask.sum())
    if n_scored == 0:
        raise NumericsError("no scored positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    logp = z[np.arange(n), targets] - logz
    loss = -(logp[mask].sum() / n_scored)

    def bwd(g):
        p = np.exp(z - logz[:, None])
        p[np.arange(n), targets] -= 1.0
        p *= (mask.astype(logits.data.dtype) / n_scored)[:, None]
        return (p * g,)

    return _make("softmax_cross_entropy", np.asarray(loss, dtype=logits.data.dtype).reshape(()), (logits,), bwd)


def grad_check(f: Callable[[list[Tensor]], Tensor], params: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f must be a pure scalar-valued function of its parameter list; params
    should be float64 for the differences to resolve below 1e-4.
    """
    g = Graph()
    leaves = [g.leaf(p) for p in params]
    loss = f(leaves)
    grads = g.backward(loss)
    analytic = [grads[leaf] for leaf in leaves]

    def value() -> float:
        return float(f([Tensor(p) for p in params]).data)

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        aflat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value()
            flat[j] = orig - h
            fm = value()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[j] - numeric) / (abs(aflat[j]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
