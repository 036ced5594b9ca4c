"""Tape-based reverse-mode autodiff over numpy arrays.

Only the handful of operators the toy VLM needs are provided. Every operator
records a node on the :class:`Graph` that created it; :meth:`Graph.backward`
walks the nodes in reverse construction order.

Leading-axis broadcasting is supported in ``add``/``matmul``/``embedding`` so a
parameter may either be shared across the batch (shape ``(d, e)``) or stacked
per sample (shape ``(B, d, e)``). The attack module relies on the stacked form
to give every trigger its own private parameter copy.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

GROUPS = ("vision", "projector", "embedding", "attention", "mlp", "head")


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Graph:
    """Records operations and replays them backwards exactly once."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._consumed = False

    # -- construction -----------------------------------------------------
    def leaf(self, data, requires_grad: bool = False, name: str | None = None) -> Tensor:
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=requires_grad, name=name)
        self.leaves.append(t)
        return t

    def _emit(self, op, inputs, out, backward) -> Tensor:
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite output from {op}")
        needs = any(t.requires_grad for t in inputs)
        t = Tensor(out)
        if needs:
            t.requires_grad = True
            self.nodes.append(Node(op, tuple(inputs), t, backward))
        return t

    # -- operators ----------------------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data + b.data
        sa, sb = a.shape, b.shape
        return self._emit("add", (a, b), out,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        """``x[..., m] + b``; a stacked bias ``(B, m)`` is matched to x's batch axis."""
        if b.data.ndim == 1:
            bd = b.data
        else:
            bd = b.data.reshape(b.shape[0], *([1] * (x.data.ndim - 2)), b.shape[-1])
        out = x.data + bd
        sx, sb = x.shape, b.shape

        def back(g):
            gb = _unbroadcast(g, bd.shape).reshape(sb)
            return g, gb

        return self._emit("add_bias", (x, b), out, back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data * b.data
        ad, bd = a.data, b.data
        return self._emit("mul", (a, b), out,
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (a,), a.data * c, lambda g: (g * c,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        out = np.matmul(ad, bd)

        def back(g):
            if bd.ndim == 2:
                ga = np.matmul(g, bd.T)
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        return self._emit("matmul", (a, b), out, back)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0
        return self._emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))

    def gelu(self, x: Tensor) -> Tensor:
        # tanh approximation
        c = math.sqrt(2.0 / math.pi)
        xd = x.data
        x2 = xd * xd
        th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
        out = 0.5 * xd * (1.0 + th)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
            return (g * d,)

        return self._emit("gelu", (x,), out, back)

    def softmax(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; ``mask`` False entries get probability 0."""
        z = x.data if mask is None else np.where(mask, x.data, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", (x,), y, back)

    def layer_norm(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        xd = x.data
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
        y = xc * inv

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gym),)

        return self._emit("layer_norm", (x,), y, back)

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """Row lookup. ``table`` is ``(V, d)`` or stacked ``(B, V, d)`` with ids ``(B, T)``."""
        ids = np.asarray(ids, dtype=np.int64)
        td = table.data
        stacked = td.ndim == 3
        if stacked:
            rows = np.arange(ids.shape[0])[:, None]
            out = td[rows, ids]
        else:
            out = td[ids]

        def back(g):
            V = td.shape[-2]
            if stacked:
                onehot = (ids[..., None] == np.arange(V)).astype(g.dtype)
                return (np.matmul(np.swapaxes(onehot, -1, -2), g),)
            flat = ids.reshape(-1)
            onehot = (flat[:, None] == np.arange(V)).astype(g.dtype)
            return (onehot.T @ g.reshape(flat.size, -1),)

        return self._emit("embedding", (table,), out, back)

    def reshape(self, x: Tensor, shape) -> Tensor:
        s = x.shape
        return self._emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(s),))

    def transpose(self, x: Tensor, axes) -> Tensor:
        inv = np.argsort(axes)
        return self._emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))

    def concat(self, xs: Iterable[Tensor], axis: int) -> Tensor:
        xs = tuple(xs)
        sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
        out = np.concatenate([t.data for t in xs], axis=axis)
        return self._emit("concat", xs, out, lambda g: tuple(np.split(g, sizes, axis=axis)))

    def cross_entropy(self, logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
        """Per-row weighted mean token cross-entropy.

        ``logits`` is ``(B, T, V)``; ``targets`` and ``weights`` are ``(B, T)``.
        Returns a ``(B,)`` tensor: sum_t w_t * nll_t / sum_t w_t.
        """
        targets = np.asarray(targets, dtype=np.int64)
        w = np.asarray(weights, dtype=logits.data.dtype)
        denom = w.sum(axis=1)
        if np.any(denom <= 0):
            raise ValueError("every row needs at least one weighted target position")
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        out = (nll * w).sum(axis=1) / denom

        def back(g):
            p = np.exp(logp)
            np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
            return (p * (w / denom[:, None] * g[:, None])[..., None],)

        return self._emit("cross_entropy", (logits,), out, back)

    def sum(self, x: Tensor) -> Tensor:
        s = x.shape
        return self._emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, s).copy(),))

    def mean(self, x: Tensor) -> Tensor:
        s, n = x.shape, x.data.size
        return self._emit("mean", (x,), np.asarray(x.data.mean()),
                          lambda g: (np.broadcast_to(g / n, s).copy(),))

    # -- reverse pass --------------------------------------------------------
    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        if self._consumed:
            raise GraphError("graph already consumed by a backward pass; rebuild it")
        if root.data.size != 1 or root.data.ndim != 0:
            raise GraphError(f"backward root must be a scalar, got shape {root.shape}")
        if not root.requires_grad:
            # constant w.r.t. every leaf
            self._consumed = True
            return self._leaf_grads()
        if all(n.output is not root for n in self.nodes):
            raise GraphError("root was not produced by this graph")
        self._consumed = True
        root.grad = np.ones((), dtype=root.data.dtype)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
            node.output.grad = None  # intermediates are not needed after propagation
        return self._leaf_grads()

    def _leaf_grads(self) -> dict[str, np.ndarray]:
        for t in self.leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        return {t.name: t.grad for t in self.leaves if t.requires_grad and t.name}


def backprop(graph: Graph, root: Tensor) -> dict[str, np.ndarray]:
    return graph.backward(root)


@dataclass
class ParamStore:
    """Named parameter arrays, each tagged with a group label."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, group: str) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        self.entries[name] = np.asarray(value, dtype=float)
        self.groups[name] = group

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self, groups: Iterable[str] | None = None) -> list[str]:
        if groups is None:
            return list(self.entries)
        groups = set(groups)
        return [n for n in self.entries if self.groups[n] in groups]

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()}, dict(self.groups))

    def stacked(self, n: int) -> "ParamStore":
        """``n`` independent copies along a new leading axis."""
        return ParamStore({k: np.repeat(v[None], n, axis=0) for k, v in self.entries.items()},
                          dict(self.groups))

    def unstack(self, i: int) -> "ParamStore":
        return ParamStore({k: v[i].copy() for k, v in self.entries.items()}, dict(self.groups))

    def num_params(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.entries):
            v = np.ascontiguousarray(self.entries[name], dtype="<f8")
            h.update(name.encode())
            h.update(self.groups[name].encode())
            h.update(repr(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def leaves(self, graph: Graph, requires_grad: bool | Iterable[str] = False) -> dict[str, Tensor]:
        """Register every entry as a graph leaf.

        ``requires_grad`` is a bool for all entries or an iterable of names.
        """
        if isinstance(requires_grad, bool):
            want = set(self.entries) if requires_grad else set()
        else:
            want = set(requires_grad)
        return {k: graph.leaf(v, requires_grad=k in want, name=k) for k, v in self.entries.items()}


def apply_update(params: ParamStore, deltas: Mapping[str, np.ndarray], scale: float) -> ParamStore:
    """In place: ``params[k] += scale * deltas[k]``. Validates everything before mutating."""
    for k, d in deltas.items():
        if k not in params.entries:
            raise KeyError(f"unknown parameter {k!r}")
        if np.shape(d) != params.entries[k].shape:
            raise ValueError(f"shape mismatch for {k!r}: {np.shape(d)} vs {params.entries[k].shape}")
    if scale == 0:
        return params
    for k, d in deltas.items():
        params.entries[k] += scale * np.asarray(d)
    return params


def finite_difference_gradient(f: Callable[[ParamStore], float], params: ParamStore,
                               step: float = 1e-4, names: Iterable[str] | None = None
                               ) -> dict[str, np.ndarray]:
    """Central differences ``(f(θ+h) - f(θ-h)) / 2h`` for every coordinate.

    ``params`` is restored exactly after each probe.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = {}
    for name in (names if names is not None else list(params.entries)):
        arr = params.entries[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params)
            flat[i] = orig - step
            fm = f(params)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                idx = ", ".join(str(int(j)) for j in np.unravel_index(i, arr.shape))
                raise FloatingPointError(f"non-finite objective at {name}[{idx}]")
            gflat[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out
