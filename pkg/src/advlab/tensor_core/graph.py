"""Recorded compute graphs over float32 arrays with reverse-mode gradients.

A graph is an immutable, topologically ordered tuple of nodes.  Build one with
:class:`GraphBuilder`, then evaluate it with :func:`forward` or differentiate
it with :func:`gradient`.  Values are plain ``numpy.ndarray`` objects of dtype
float32; there is no broadcasting other than scalar-times-tensor.

Reductions that act "over the last axis" (softmax, l2norm, normalize, cosine,
cross_entropy) leave the leading axes intact, so a batch of row vectors maps to
a batch of per-row results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

Tensor = np.ndarray

_EPS = 1e-12


class GraphError(ValueError):
    """Base class for graph construction and evaluation failures."""


class UnboundNameError(GraphError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


def tensor(data: Any, name: str = "value") -> Tensor:
    """Return ``data`` as a finite float32 array (copy when dtype differs)."""
    arr = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    operands: tuple[int, ...] = ()
    name: str | None = None
    attrs: tuple = ()


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[Node, ...]
    output: int

    def names(self, op: str | None = None) -> list[str]:
        return [n.name for n in self.nodes if n.name is not None and (op is None or n.op == op)]


@dataclass(frozen=True)
class Ref:
    """Handle to a node under construction; supports ``+ - * @``."""

    builder: "GraphBuilder" = field(repr=False, compare=False)
    id: int

    def __add__(self, other: "Ref") -> "Ref":
        return self.builder.add(self, other)

    def __sub__(self, other: "Ref") -> "Ref":
        return self.builder.sub(self, other)

    def __mul__(self, other: "Ref | float") -> "Ref":
        if isinstance(other, Ref):
            return self.builder.mul(self, other)
        return self.builder.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Ref":
        return self.builder.scale(self, -1.0)

    def __matmul__(self, other: "Ref") -> "Ref":
        return self.builder.matmul(self, other)


class GraphBuilder:
    """Append-only recorder; nodes can only reference earlier nodes, so the
    node list is always in topological order."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._named: dict[str, int] = {}

    def _push(self, op: str, operands: Iterable[Ref] = (), name: str | None = None, attrs: tuple = ()) -> Ref:
        ids = []
        for r in operands:
            if not isinstance(r, Ref) or r.builder is not self:
                raise GraphError(f"{op}: operand does not belong to this builder")
            ids.append(r.id)
        node = Node(len(self._nodes), op, tuple(ids), name, attrs)
        self._nodes.append(node)
        return Ref(self, node.id)

    def _leaf(self, op: str, name: str) -> Ref:
        if name in self._named:
            prev = self._nodes[self._named[name]]
            if prev.op != op:
                raise GraphError(f"name {name!r} already used for a {prev.op} node")
            return Ref(self, prev.id)
        ref = self._push(op, name=name)
        self._named[name] = ref.id
        return ref

    def input(self, name: str) -> Ref:
        return self._leaf("input", name)

    def parameter(self, name: str) -> Ref:
        return self._leaf("parameter", name)

    def constant(self, value: Any) -> Ref:
        return self._push("constant", attrs=(tensor(value, "constant"),))

    def add(self, a: Ref, b: Ref) -> Ref:
        return self._push("add", (a, b))

    def sub(self, a: Ref, b: Ref) -> Ref:
        return self._push("sub", (a, b))

    def mul(self, a: Ref, b: Ref) -> Ref:
        return self._push("mul", (a, b))

    def scale(self, a: Ref, c: float) -> Ref:
        if not np.isfinite(c):
            raise NonFiniteError("scale: factor must be finite")
        return self._push("scale", (a,), attrs=(float(c),))

    def matmul(self, a: Ref, b: Ref) -> Ref:
        return self._push("matmul", (a, b))

    def relu(self, a: Ref) -> Ref:
        return self._push("relu", (a,))

    def tanh(self, a: Ref) -> Ref:
        return self._push("tanh", (a,))

    def softmax(self, a: Ref) -> Ref:
        return self._push("softmax", (a,))

    def sum(self, a: Ref) -> Ref:
        return self._push("sum", (a,))

    def mean(self, a: Ref) -> Ref:
        return self._push("mean", (a,))

    def l2norm(self, a: Ref) -> Ref:
        return self._push("l2norm", (a,))

    def normalize(self, a: Ref) -> Ref:
        return self._push("normalize", (a,))

    def cosine(self, a: Ref, b: Ref) -> Ref:
        return self._push("cosine", (a, b))

    def mse(self, a: Ref, b: Ref) -> Ref:
        return self._push("mse", (a, b))

    def cross_entropy(self, logits: Ref, target: Ref) -> Ref:
        """Per-row ``-sum(target * log_softmax(logits))`` over the last axis."""
        return self._push("cross_entropy", (logits, target))

    def clamp(self, a: Ref, lo: float, hi: float) -> Ref:
        if not lo <= hi:
            raise GraphError(f"clamp: lo={lo} exceeds hi={hi}")
        return self._push("clamp", (a,), attrs=(float(lo), float(hi)))

    def build(self, output: Ref) -> ComputeGraph:
        if output.builder is not self:
            raise GraphError("output does not belong to this builder")
        return ComputeGraph(tuple(self._nodes), output.id)


# --------------------------------------------------------------------------
# shape rules


def _shape_error(node: Node, msg: str, *shapes) -> ShapeError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"node {node.id} ({node.op}): {msg}; operand shapes {shown}")


def _check_shapes(node: Node, vals: list[Tensor]) -> None:
    op = node.op
    shapes = [v.shape for v in vals]
    if op in ("add", "sub", "cosine", "mse", "cross_entropy"):
        if shapes[0] != shapes[1]:
            raise _shape_error(node, "operands must have identical shapes", *shapes)
        if op in ("cosine", "cross_entropy") and len(shapes[0]) == 0:
            raise _shape_error(node, "needs at least one axis", *shapes)
    elif op == "mul":
        if shapes[0] != shapes[1] and shapes[0] != () and shapes[1] != ():
            raise _shape_error(node, "shapes must match or one operand must be a scalar", *shapes)
    elif op == "matmul":
        a, b = shapes
        if not (1 <= len(a) <= 2 and 1 <= len(b) <= 2):
            raise _shape_error(node, "matmul takes 1-D or 2-D operands", *shapes)
        if a[-1] != b[0]:
            raise _shape_error(node, "inner dimensions differ", *shapes)
    elif op in ("softmax", "l2norm", "normalize"):
        if len(shapes[0]) == 0:
            raise _shape_error(node, "needs at least one axis", *shapes)


# --------------------------------------------------------------------------
# evaluation


def _log_softmax(z: Tensor) -> Tensor:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _eval_node(node: Node, vals: list[Tensor]) -> Tensor:
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "scale":
        return vals[0] * np.float32(node.attrs[0])
    if op == "matmul":
        return np.matmul(vals[0], vals[1])
    if op == "relu":
        return np.maximum(vals[0], np.float32(0))
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "softmax":
        return np.exp(_log_softmax(vals[0]))
    if op == "sum":
        return np.asarray(np.sum(vals[0]), dtype=vals[0].dtype)
    if op == "mean":
        return np.asarray(np.mean(vals[0]), dtype=vals[0].dtype)
    if op == "l2norm":
        return np.sqrt(np.sum(vals[0] * vals[0], axis=-1))
    if op == "normalize":
        n = np.sqrt(np.sum(vals[0] * vals[0], axis=-1, keepdims=True))
        if np.any(n <= _EPS):
            raise GraphError(f"node {node.id} (normalize): zero-norm vector")
        return vals[0] / n
    if op == "cosine":
        a, b = vals
        na = np.sqrt(np.sum(a * a, axis=-1))
        nb = np.sqrt(np.sum(b * b, axis=-1))
        if np.any(na <= _EPS) or np.any(nb <= _EPS):
            raise GraphError(f"node {node.id} (cosine): zero-norm vector")
        return np.sum(a * b, axis=-1) / (na * nb)
    if op == "mse":
        d = vals[0] - vals[1]
        return np.asarray(np.mean(d * d), dtype=d.dtype)
    if op == "cross_entropy":
        return -np.sum(vals[1] * _log_softmax(vals[0]), axis=-1)
    if op == "clamp":
        lo, hi = node.attrs
        return np.clip(vals[0], lo, hi).astype(vals[0].dtype, copy=False)
    raise GraphError(f"node {node.id}: unknown op {op!r}")


def _run(graph: ComputeGraph, bindings: Mapping[str, Any], dtype) -> list[Tensor]:
    vals: list[Tensor | None] = [None] * len(graph.nodes)
    needed = _ancestors(graph, [graph.output])
    for node in graph.nodes:
        if node.id not in needed:
            continue
        if node.op in ("input", "parameter"):
            if node.name not in bindings:
                raise UnboundNameError(f"node {node.id}: {node.op} {node.name!r} is not bound")
            arr = np.asarray(bindings[node.name], dtype=dtype)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"binding {node.name!r} contains NaN or Inf")
            vals[node.id] = arr
        elif node.op == "constant":
            vals[node.id] = node.attrs[0].astype(dtype, copy=False)
        else:
            args = [vals[i] for i in node.operands]
            _check_shapes(node, args)
            vals[node.id] = np.asarray(_eval_node(node, args), dtype=dtype)
    return vals


def _ancestors(graph: ComputeGraph, roots: Iterable[int]) -> set[int]:
    seen: set[int] = set()
    stack = list(roots)
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(graph.nodes[i].operands)
    return seen


def forward(graph: ComputeGraph, bindings: Mapping[str, Any], *, dtype=np.float32) -> Tensor:
    """Evaluate the graph's output node.

    ``dtype`` exists so that finite-difference checks can run the same graph
    in float64; everything else uses the float32 default.
    """
    return _run(graph, bindings, dtype)[graph.output]


def value_and_gradient(graph: ComputeGraph, bindings: Mapping[str, Any], wrt: Iterable[str],
                       *, cotangent: Any = None, dtype=np.float32) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward value plus reverse-mode gradients of the output.

    With ``cotangent=None`` the output must be a scalar.  Otherwise the
    returned gradients are those of ``sum(cotangent * output)``, which lets a
    per-sample loss vector be evaluated and differentiated in one pass.
    """
    wrt = list(wrt)
    by_name = {n.name: n.id for n in graph.nodes if n.op in ("input", "parameter")}
    for name in wrt:
        if name not in by_name:
            raise UnboundNameError(f"gradient requested for unknown name {name!r}")
    vals = _run(graph, bindings, dtype)
    out = vals[graph.output]
    if cotangent is None:
        if out.ndim != 0:
            raise ShapeError(f"gradient needs a scalar output; node {graph.output} has shape {out.shape}")
        seed = np.ones((), dtype=dtype)
    else:
        seed = np.asarray(cotangent, dtype=dtype)
        if seed.shape != out.shape:
            raise ShapeError(f"cotangent shape {seed.shape} differs from output shape {out.shape}")

    # only propagate through nodes that lie between a wrt leaf and the output
    live = _ancestors(graph, [graph.output])
    targets = {by_name[n] for n in wrt}
    reach: set[int] = set()
    for node in graph.nodes:
        if node.id in targets or any(o in reach for o in node.operands):
            reach.add(node.id)
    active = live & reach

    adj: dict[int, Tensor] = {graph.output: seed}
    for node in reversed(graph.nodes):
        if node.id not in active or node.id not in adj or not node.operands:
            continue
        g = adj.pop(node.id)
        args = [vals[i] for i in node.operands]
        for slot, contrib in _backward(node, args, vals[node.id], g):
            dst = node.operands[slot]
            if dst not in active or contrib is None:
                continue
            contrib = np.asarray(contrib, dtype=dtype)
            adj[dst] = adj[dst] + contrib if dst in adj else contrib
    grads = {}
    for name in wrt:
        i = by_name[name]
        grads[name] = adj.get(i, np.zeros_like(vals[i]) if vals[i] is not None
                              else np.zeros_like(np.asarray(bindings[name], dtype=dtype)))
    return out, grads


def gradient(graph: ComputeGraph, bindings: Mapping[str, Any], wrt: Iterable[str], *, dtype=np.float32) -> dict[str, Tensor]:
    """Return d(output)/d(name) for every name in ``wrt``."""
    return value_and_gradient(graph, bindings, wrt, dtype=dtype)[1]


def _unbroadcast_scalar(g: Tensor, shape: tuple) -> Tensor:
    return np.asarray(np.sum(g), dtype=g.dtype) if shape == () and g.shape != () else g


def _backward(node: Node, args: list[Tensor], out: Tensor, g: Tensor):
    op = node.op
    if op == "add":
        return [(0, g), (1, g)]
    if op == "sub":
        return [(0, g), (1, -g)]
    if op == "mul":
        a, b = args
        return [(0, _unbroadcast_scalar(g * b, a.shape)), (1, _unbroadcast_scalar(g * a, b.shape))]
    if op == "scale":
        return [(0, g * np.float32(node.attrs[0]))]
    if op == "matmul":
        a, b = args
        if a.ndim == 2 and b.ndim == 2:
            return [(0, g @ b.T), (1, a.T @ g)]
        if a.ndim == 2 and b.ndim == 1:
            return [(0, np.outer(g, b)), (1, a.T @ g)]
        if a.ndim == 1 and b.ndim == 2:
            return [(0, b @ g), (1, np.outer(a, g))]
        return [(0, g * b), (1, g * a)]
    if op == "relu":
        return [(0, g * (args[0] > 0))]
    if op == "tanh":
        return [(0, g * (1 - out * out))]
    if op == "softmax":
        return [(0, out * (g - np.sum(g * out, axis=-1, keepdims=True)))]
    if op == "sum":
        return [(0, np.broadcast_to(g, args[0].shape).copy())]
    if op == "mean":
        return [(0, np.broadcast_to(g / args[0].size, args[0].shape).copy())]
    if op == "l2norm":
        x = args[0]
        n = out[..., None]
        safe = np.where(n > _EPS, n, 1)
        return [(0, np.where(n > _EPS, g[..., None] * x / safe, 0))]
    if op == "normalize":
        x = args[0]
        n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        return [(0, (g - out * np.sum(g * out, axis=-1, keepdims=True)) / n)]
    if op == "cosine":
        a, b = args
        na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        nb = np.sqrt(np.sum(b * b, axis=-1, keepdims=True))
        c = out[..., None]
        gg = g[..., None]
        da = gg * (b / (na * nb) - c * a / (na * na))
        db = gg * (a / (na * nb) - c * b / (nb * nb))
        return [(0, da), (1, db)]
    if op == "mse":
        a, b = args
        d = (a - b) * (2 * g / a.size)
        return [(0, d), (1, -d)]
    if op == "cross_entropy":
        z, t = args
        logp = _log_softmax(z)
        p = np.exp(logp)
        gg = g[..., None]
        dz = gg * (p * np.sum(t, axis=-1, keepdims=True) - t)
        return [(0, dz), (1, -gg * logp)]
    if op == "clamp":
        lo, hi = node.attrs
        x = args[0]
        return [(0, g * ((x >= lo) & (x <= hi)))]
    raise GraphError(f"node {node.id}: no backward rule for {op!r}")
