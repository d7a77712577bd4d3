"""Dense reverse-mode differentiation over a closed operator set, plus Adam.

Values are plain 2-D numpy arrays (scalars are 0-d). A :class:`Tape` records
every operation it performs; :meth:`Tape.backward` walks the record in reverse
and returns gradients for every parameter leaf.

Only the primitives the coordinate MLPs and the sparse autoencoder need are
provided: matmul, bias broadcast, add, subtract, scale, square, mean, sin,
relu and a TopK mask.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


def rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``.

    String keys are mapped through CRC32 so that streams are named and stable
    across platforms, e.g. ``rng(seed, "layer", 3)`` or ``rng(seed, "head", j)``.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode("utf-8")))
        else:
            words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(eq=False)
class Node:
    value: np.ndarray
    index: int
    requires_grad: bool
    parents: tuple[Node, ...] = ()
    # maps upstream gradient -> gradients for each parent (None where not needed)
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    is_param: bool = False

    @property
    def shape(self):
        return self.value.shape


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def _push(self, value, parents=(), grad_fn=None, *, param=False, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(value, len(self.nodes), requires_grad, tuple(parents),
                    grad_fn if requires_grad else None, param)
        self.nodes.append(node)
        return node

    # leaves ---------------------------------------------------------------

    def param(self, value: np.ndarray) -> Node:
        """Leaf whose gradient is reported by :meth:`backward`."""
        return self._push(value, param=True, requires_grad=True)

    def const(self, value: np.ndarray) -> Node:
        return self._push(np.asarray(value), requires_grad=False)

    # primitives -----------------------------------------------------------

    def matmul(self, a: Node, b: Node, trans_b: bool = False) -> Node:
        """``a @ b`` or, with ``trans_b``, ``a @ b.T``."""
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
        inner = bv.shape[1] if trans_b else bv.shape[0]
        if av.shape[1] != inner:
            raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}{'^T' if trans_b else ''}")
        out = av @ bv.T if trans_b else av @ bv

        def grad_fn(g):
            ga = gb = None
            if a.requires_grad:
                ga = g @ bv if trans_b else g @ bv.T
            if b.requires_grad:
                gb = g.T @ av if trans_b else av.T @ g
            return ga, gb

        return self._push(out, (a, b), grad_fn)

    def add_bias(self, x: Node, b: Node) -> Node:
        """Broadcast a length-``cols`` vector over the rows of ``x``."""
        if b.value.ndim != 1 or x.value.ndim != 2 or b.value.shape[0] != x.value.shape[1]:
            raise ShapeError(f"bias {b.value.shape} does not fit {x.value.shape}")
        return self._push(x.value + b.value, (x, b),
                          lambda g: (g if x.requires_grad else None,
                                     g.sum(axis=0) if b.requires_grad else None))

    def add(self, a: Node, b: Node) -> Node:
        _same_shape(a, b, "add")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape(a, b, "sub")
        return self._push(a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, x: Node, c: float) -> Node:
        return self._push(x.value * c, (x,), lambda g: (g * c,))

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._push(xv * xv, (x,), lambda g: (2.0 * xv * g,))

    def mean(self, x: Node) -> Node:
        xv = x.value
        n = xv.size
        return self._push(np.asarray(xv.mean()), (x,),
                          lambda g: (np.full_like(xv, g / n),))

    def sin(self, x: Node) -> Node:
        xv = x.value
        return self._push(np.sin(xv), (x,), lambda g: (g * np.cos(xv),))

    def relu(self, x: Node) -> Node:
        xv = x.value
        return self._push(np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),))

    def topk(self, x: Node, k: int) -> Node:
        """Keep the ``k`` largest entries per row (lowest index wins ties)."""
        mask = topk_mask(x.value, k)
        return self._push(np.where(mask, x.value, 0), (x,), lambda g: (g * mask,))

    # reverse sweep --------------------------------------------------------

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Gradients of the scalar ``loss`` for every parameter leaf on this tape."""
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for node in self.nodes:
            if node.is_param:
                g = grads[node.index] if node.index <= loss.index else None
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op} shape mismatch: {a.value.shape} vs {b.value.shape}")


def topk_mask(x: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries in each row of ``x``.

    Ties at the k-th value are broken toward the lowest column index.
    """
    x = np.atleast_2d(x)
    n = x.shape[1]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    if k == n:
        return np.ones(x.shape, dtype=bool)
    kth = np.partition(x, n - k, axis=1)[:, n - k: n - k + 1]
    above = x > kth
    need = k - above.sum(axis=1, keepdims=True)
    at = x == kth
    return above | (at & (np.cumsum(at, axis=1) <= need))


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)
