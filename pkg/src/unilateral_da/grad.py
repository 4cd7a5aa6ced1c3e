"""Small define-by-run reverse-mode differentiation engine.

Only the operations the networks and losses in this package need are
provided. Every op records a node on the :class:`Graph` shared by its inputs;
:func:`backward` walks the record in reverse and returns a gradient map keyed
by node id.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class GradError(ValueError):
    """Raised when an op or a backward pass is given inconsistent input."""


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    # maps upstream gradient -> one gradient per parent (None = no contribution)
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Tensor:
    """A float64 array living on a graph."""

    __slots__ = ("data", "graph", "id", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, graph: "Graph", node_id: int, requires_grad: bool):
        self.data = data
        self.graph = graph
        self.id = node_id
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def _add(self, data: np.ndarray, node: Node, requires_grad: bool) -> Tensor:
        data = np.asarray(data, dtype=DTYPE)
        if data.ndim == 0:
            data = data.reshape(())
        t = Tensor(data, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self.tensors.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self._add(np.asarray(value, dtype=DTYPE), Node("const", (), None), False)

    def leaf(self, value) -> Tensor:
        """A differentiable input that is not tied to a parameter key."""
        return self._add(np.array(value, dtype=DTYPE), Node("leaf", (), None), True)

    def param(self, key, value: np.ndarray, trainable: bool = True) -> Tensor:
        """Register a parameter once per graph; later calls with the same key reuse it."""
        t = self.params.get(key)
        if t is None:
            t = self._add(np.asarray(value, dtype=DTYPE), Node("param", (), None), trainable)
            self.params[key] = t
        return t

    def op(self, name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
        for p in parents:
            if p.graph is not self:
                raise GradError(f"{name}: inputs belong to different graphs")
        requires = any(p.requires_grad for p in parents)
        node = Node(name, tuple(p.id for p in parents), backward_fn if requires else None)
        return self._add(data, node, requires)


def _graph_of(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise GradError("inputs belong to different graphs")
    return g


# ---------------------------------------------------------------- layer ops

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise GradError(f"affine expects x[B,I], W[I,O], b[O]; got x{x.shape}, W{W.shape}, b{b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise GradError(f"affine shape mismatch: x{x.shape} @ W{W.shape} + b{b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    need_x = x.requires_grad

    def back(g):
        return (g @ Wd.T if need_x else None), xd.T @ g, g.sum(axis=0)

    return _graph_of(x, W, b).op("affine", out, (x, W, b), back)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation with length-3 kernels."""
    if x.data.ndim != 3:
        raise GradError(f"conv1d expects x[B,C_in,L], got {x.shape}")
    B, C_in, L = x.shape
    if kernels.data.ndim != 3 or kernels.shape[1] != C_in or kernels.shape[2] != 3:
        raise GradError(f"conv1d kernels must be [C_out,{C_in},3], got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise GradError(f"conv1d bias must be [{kernels.shape[0]}], got {bias.shape}")
    if L < 3:
        raise GradError(f"conv1d needs length >= 3, got {L}")
    C_out = kernels.shape[0]
    Lo = L - 2
    xd, Kd = x.data, kernels.data
    # cols[b, i, c*3 + j] = x[b, c, i + j]
    cols = np.lib.stride_tricks.sliding_window_view(xd, 3, axis=2)  # B, C_in, Lo, 3
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B, Lo, C_in * 3)
    Kmat = Kd.reshape(C_out, C_in * 3)
    out = (cols @ Kmat.T).transpose(0, 2, 1) + bias.data[None, :, None]

    need_x = x.requires_grad

    def back(g):
        gt = g.transpose(0, 2, 1)  # B, Lo, C_out
        dK = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(C_out, C_in, 3)
        if not need_x:
            return None, dK, g.sum(axis=(0, 2))
        dcols = (gt @ Kmat).reshape(B, Lo, C_in, 3)
        dx = np.zeros_like(xd)
        for j in range(3):
            dx[:, :, j:j + Lo] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx, dK, g.sum(axis=(0, 2))

    return _graph_of(x, kernels, bias).op("conv1d", out, (x, kernels, bias), back)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return x.graph.op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout. A precomputed ``mask`` (already scaled) may be supplied to freeze it."""
    if not 0.0 <= rate < 1.0:
        raise GradError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or (rate == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise GradError("dropout in train mode needs an rng")
        mask = dropout_mask(x.shape, rate, rng)
    return x.graph.op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep.astype(DTYPE) / (1.0 - rate)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return x.graph.op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the batch axis."""
    g0 = _graph_of(*parts)
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return g0.op("concat", out, parts, back)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the batch axis; the gradient is scattered back."""
    n = x.shape[0]
    if not 0 <= start <= stop <= n:
        raise GradError(f"row range {start}:{stop} outside batch of {n}")

    def back(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return x.graph.op("take_rows", x.data[start:stop].copy(), (x,), back)


def grad_reverse(x: Tensor, lambda_d: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lambda_d`` backward."""
    if lambda_d < 0:
        raise GradError(f"lambda_d must be non-negative, got {lambda_d}")
    factor = -float(lambda_d)
    return x.graph.op("grad_reverse", x.data, (x,), lambda g: (factor * g,))


# ----------------------------------------------------------- scalar reductions

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise GradError(f"logits must be [B,C], got {logits.shape}")
    B, C = logits.shape
    if B < 1:
        raise GradError("empty batch")
    if labels.shape != (B,):
        raise GradError(f"labels must have shape ({B},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise GradError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= C:
        raise GradError(f"label out of range [0, {C}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return logits.graph.op("softmax_ce", np.array(loss), (logits,), back)


def _check_same(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise GradError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def l1_mean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over every element (batch and feature axes)."""
    _check_same(a, b, "l1_mean_distance")
    d = a.data - b.data
    n = d.size
    s = np.sign(d)  # sign(0) == 0

    def back(g):
        ga = s * (g / n)
        return ga, -ga

    return _graph_of(a, b).op("l1_mean", np.array(np.abs(d).sum() / n), (a, b), back)


def l2_mean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over every element."""
    _check_same(a, b, "l2_mean_distance")
    d = a.data - b.data
    n = d.size

    def back(g):
        ga = d * (2.0 * g / n)
        return ga, -ga

    return _graph_of(a, b).op("l2_mean", np.array((d * d).sum() / n), (a, b), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.graph.op("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return x.graph.op("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _graph_of(a, b).op("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.graph.op("scale", x.data * c, (x,), lambda g: (g * c,))


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``; returns ``{node_id: gradient}``.

    Only nodes that require gradients and are reachable from ``loss`` appear in
    the map. Gradients are also stored on ``Tensor.grad``.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for nid in range(loss.id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.backward_fn is None:
            continue
        contribs = node.backward_fn(g)
        for pid, pg in zip(node.parents, contribs):
            if pid >= nid:
                raise GradError(f"cycle detected: node {nid} has parent {pid}")
            if pg is None or not graph.tensors[pid].requires_grad:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for nid, g in grads.items():
        t = graph.tensors[nid]
        if t.requires_grad:
            t.grad = g
            out[nid] = g
    return out


def finite_diff_check(f: Callable[[Graph, Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
                      reverse_lambda: Optional[float] = None) -> float:
    """Max relative error between backward() and central differences of ``f``.

    ``f`` builds a scalar on the graph it is given from a leaf holding ``x``;
    it must be deterministic (dropout off or with a frozen mask). When every
    path from ``x`` passes one ``grad_reverse(., reverse_lambda)``, pass that
    coefficient so the numeric side is scaled by ``-reverse_lambda`` to match.
    """
    if eps <= 0:
        raise GradError("eps must be positive")
    x = np.array(x, dtype=DTYPE)
    g = Graph()
    leaf = g.leaf(x)
    loss = f(g, leaf)
    analytic = backward(loss).get(leaf.id, np.zeros_like(x))

    def value(v):
        gg = Graph()
        return float(f(gg, gg.leaf(v)).data)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value(x)
        flat[i] = orig - eps
        down = value(x)
        flat[i] = orig
        num_flat[i] = (up - down) / (2 * eps)
    if reverse_lambda is not None:
        numeric = -reverse_lambda * numeric
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
