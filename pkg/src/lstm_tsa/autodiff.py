"""Dense float64 tensors with a small reverse-mode autodiff graph.

Tensors are plain ``numpy.ndarray`` objects (float64).  A :class:`Graph` is
built symbolically, node by node, and then evaluated against a binding of
input and parameter names.  :class:`Eager` exposes the same op vocabulary
but computes immediately on arrays, so model code can be written once and
run either way.

Shapes are 1-D ``(n,)`` or 2-D ``(m, n)``; scalars are ``(1,)``.  The only
broadcast allowed is a matrix plus (or times) a row vector.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class GraphError(ValueError):
    """Shape, binding or evaluation-order problem in a graph."""


@dataclass(eq=False)
class Node:
    index: int
    op: str
    args: tuple
    shape: tuple
    name: str | None = None
    attrs: dict = field(default_factory=dict)

    def __repr__(self):
        label = self.name or f"%{self.index}"
        return f"<{self.op} {label} {self.shape}>"


def _label(node):
    return node.name or f"{node.op}#{node.index}"


def _row_broadcast(op, a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    if len(a_shape) == 2 and len(b_shape) == 1 and a_shape[1] == b_shape[0]:
        return a_shape
    if len(b_shape) == 2 and len(a_shape) == 1 and b_shape[1] == a_shape[0]:
        return b_shape
    return None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0)


def _matmul_shape(a, b, trans_b):
    bs = b if not trans_b else (b[::-1] if len(b) == 2 else b)
    if len(a) == 2 and len(bs) == 2 and a[1] == bs[0]:
        return (a[0], bs[1])
    if len(a) == 2 and len(bs) == 1 and a[1] == bs[0] and not trans_b:
        return (a[0],)
    if len(a) == 1 and len(bs) == 2 and a[0] == bs[0]:
        return (bs[1],)
    if len(a) == 1 and len(bs) == 1 and a[0] == bs[0] and not trans_b:
        return (1,)
    return None


class Graph:
    """Symbolic computation graph with named inputs, parameters and outputs.

    Nodes are appended in construction order, which is also a valid
    topological order since every op only refers to existing nodes.

    >>> g = Graph()
    >>> x = g.input("x", (3,))
    >>> y = g.output("y", g.sigmoid(x))
    >>> g.evaluate({"x": np.zeros(3)})["y"]
    array([0.5, 0.5, 0.5])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._values: list | None = None

    # -- construction ---------------------------------------------------

    def _add(self, op, args, shape, name=None, **attrs):
        node = Node(len(self.nodes), op, tuple(args), tuple(shape), name, attrs)
        for a in node.args:
            if not isinstance(a, Node) or a.index >= node.index or self.nodes[a.index] is not a:
                raise GraphError(f"{op}: operand {a!r} does not belong to this graph")
        self.nodes.append(node)
        return node

    def _fail(self, op, *nodes):
        shapes = " vs ".join(f"{_label(n)} {n.shape}" for n in nodes)
        raise GraphError(f"shape mismatch in {op}: {shapes}")

    def input(self, name, shape):
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate name {name!r}")
        node = self._add("input", (), shape, name)
        self.inputs[name] = node
        return node

    def param(self, name, shape):
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        node = self._add("param", (), shape, name)
        self.params[name] = node
        return node

    def constant(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1)
        return self._add("const", (), value.shape, value=value)

    def output(self, name, node):
        self.outputs[name] = node
        return node

    def matmul(self, a, b, trans_b=False):
        shape = _matmul_shape(a.shape, b.shape, trans_b)
        if shape is None:
            self._fail("matmul", a, b)
        return self._add("matmul", (a, b), shape, trans_b=trans_b)

    def add(self, a, b):
        shape = _row_broadcast("add", a.shape, b.shape)
        if shape is None:
            self._fail("add", a, b)
        return self._add("add", (a, b), shape)

    def sub(self, a, b):
        shape = _row_broadcast("sub", a.shape, b.shape)
        if shape is None:
            self._fail("sub", a, b)
        return self._add("sub", (a, b), shape)

    def mul(self, a, b):
        shape = _row_broadcast("mul", a.shape, b.shape)
        if shape is None:
            self._fail("mul", a, b)
        return self._add("mul", (a, b), shape)

    def affine(self, a, scale, shift=0.0):
        """Elementwise ``a * scale + shift`` with scalar constants."""
        return self._add("affine", (a,), a.shape, scale=float(scale), shift=float(shift))

    def sigmoid(self, a):
        return self._add("sigmoid", (a,), a.shape)

    def tanh(self, a):
        return self._add("tanh", (a,), a.shape)

    def exp(self, a):
        return self._add("exp", (a,), a.shape)

    def log(self, a):
        return self._add("log", (a,), a.shape)

    def clip(self, a, lo, hi):
        return self._add("clip", (a,), a.shape, lo=float(lo), hi=float(hi))

    def softmax(self, a):
        return self._add("softmax", (a,), a.shape)

    def log_softmax(self, a):
        return self._add("log_softmax", (a,), a.shape)

    def concat(self, parts):
        parts = list(parts)
        first = parts[0].shape
        if any(len(p.shape) != len(first) or p.shape[:-1] != first[:-1] for p in parts):
            self._fail("concat", *parts)
        width = sum(p.shape[-1] for p in parts)
        return self._add("concat", parts, first[:-1] + (width,))

    def slice(self, a, start, stop):
        """Columns ``start:stop`` along the last axis."""
        if not 0 <= start < stop <= a.shape[-1]:
            raise GraphError(f"slice [{start}:{stop}] out of range for {_label(a)} {a.shape}")
        return self._add("slice", (a,), a.shape[:-1] + (stop - start,), start=start, stop=stop)

    def sum(self, a, axis=None):
        if axis is None:
            shape = (1,)
        elif len(a.shape) == 2 and axis in (0, 1):
            shape = (a.shape[1 - axis],)
        elif len(a.shape) == 1 and axis == 0:
            shape = (1,)
        else:
            raise GraphError(f"sum: bad axis {axis} for {_label(a)} {a.shape}")
        return self._add("sum", (a,), shape, axis=axis)

    def mean(self, a, axis=None):
        count = math.prod(a.shape) if axis is None else a.shape[axis]
        return self.affine(self.sum(a, axis), 1.0 / count)

    # -- evaluation -----------------------------------------------------

    def evaluate(self, bindings: Mapping[str, Tensor]) -> dict[str, Tensor]:
        """Run the forward pass; returns every registered output by name.

        ``bindings`` must supply a value for every input and parameter.
        """
        values: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op in ("input", "param"):
                if node.name not in bindings:
                    raise GraphError(f"unbound {node.op} {node.name!r}")
                v = np.asarray(bindings[node.name], dtype=np.float64)
                if v.shape != node.shape:
                    raise GraphError(
                        f"shape mismatch binding {node.name!r}: declared {node.shape}, got {v.shape}"
                    )
                values[node.index] = v
            else:
                values[node.index] = _FORWARD[node.op](node, *(values[a.index] for a in node.args))
        self._values = values
        return {name: values[n.index] for name, n in self.outputs.items()}

    def value(self, node):
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        return self._values[node.index]

    def backward(self, output, wrt: str = "params") -> dict[str, Tensor]:
        """Gradient of a scalar node with respect to every parameter.

        ``output`` is a node or the name of a registered output.  Pass
        ``wrt="inputs"`` to get input gradients as well.
        """
        if isinstance(output, str):
            output = self.outputs[output]
        if output.shape != (1,):
            raise GraphError(f"backward needs a scalar output, {_label(output)} has shape {output.shape}")
        if self._values is None:
            raise GraphError("backward called before evaluate")
        values = self._values
        grads: list = [None] * len(self.nodes)
        grads[output.index] = np.ones(1)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or not node.args:
                continue
            parts = _BACKWARD[node.op](node, g, values[node.index], *(values[a.index] for a in node.args))
            for arg, ga in zip(node.args, parts):
                if ga is None:
                    continue
                if grads[arg.index] is None:
                    grads[arg.index] = ga
                else:
                    grads[arg.index] = grads[arg.index] + ga
        result = {}
        targets = dict(self.params)
        if wrt == "inputs":
            targets.update(self.inputs)
        for name, node in targets.items():
            g = grads[node.index]
            result[name] = np.zeros(node.shape) if g is None else g
        return result


# -- op kernels ---------------------------------------------------------


_SIGMOID_LO = float(np.nextafter(0.0, 1.0))
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))


def _sigmoid(x):
    # saturated values are held at the nearest doubles inside (0, 1)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(x):
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _mm(a, b, trans_b):
    if trans_b and b.ndim == 2:
        b = b.T
    out = a @ b
    return out.reshape(1) if out.ndim == 0 else out


def _sum(x, axis):
    if axis is None or x.ndim == 1:
        return np.array([x.sum()])
    return x.sum(axis=axis)


_FORWARD: dict[str, Callable] = {
    "const": lambda n: n.attrs["value"],
    "matmul": lambda n, a, b: _mm(a, b, n.attrs["trans_b"]),
    "add": lambda n, a, b: a + b,
    "sub": lambda n, a, b: a - b,
    "mul": lambda n, a, b: a * b,
    "affine": lambda n, a: a * n.attrs["scale"] + n.attrs["shift"],
    "sigmoid": lambda n, a: _sigmoid(a),
    "tanh": lambda n, a: np.tanh(a),
    "exp": lambda n, a: np.exp(a),
    "log": lambda n, a: np.log(a),
    "clip": lambda n, a: np.clip(a, n.attrs["lo"], n.attrs["hi"]),
    "softmax": lambda n, a: _softmax(a),
    "log_softmax": lambda n, a: _log_softmax(a),
    "concat": lambda n, *parts: np.concatenate(parts, axis=-1),
    "slice": lambda n, a: a[..., n.attrs["start"] : n.attrs["stop"]],
    "sum": lambda n, a: _sum(a, n.attrs["axis"]),
}


def _matmul_grad(n, g, out, a, b):
    trans_b = n.attrs["trans_b"]
    bm = b.T if trans_b and b.ndim == 2 else b
    if a.ndim == 1 and bm.ndim == 1:
        return g[0] * bm, g[0] * a
    if a.ndim == 2 and bm.ndim == 1:
        return np.outer(g, bm), a.T @ g
    if a.ndim == 1:
        ga, gb = bm @ g, np.outer(a, g)
    else:
        ga, gb = g @ bm.T, a.T @ g
    return ga, (gb.T if trans_b else gb)


def _concat_grad(n, g, out, *parts):
    grads, start = [], 0
    for p in parts:
        stop = start + p.shape[-1]
        grads.append(g[..., start:stop])
        start = stop
    return grads


def _slice_grad(n, g, out, a):
    ga = np.zeros_like(a)
    ga[..., n.attrs["start"] : n.attrs["stop"]] = g
    return (ga,)


def _sum_grad(n, g, out, a):
    axis = n.attrs["axis"]
    if axis is None or a.ndim == 1:
        return (np.full_like(a, g[0]),)
    if axis == 0:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(g[:, None], a.shape).copy(),)


def _softmax_grad(n, g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_grad(n, g, out, a):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


_BACKWARD: dict[str, Callable] = {
    "matmul": _matmul_grad,
    "add": lambda n, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda n, g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    "mul": lambda n, g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "affine": lambda n, g, out, a: (g * n.attrs["scale"],),
    "sigmoid": lambda n, g, out, a: (g * out * (1.0 - out),),
    "tanh": lambda n, g, out, a: (g * (1.0 - out * out),),
    "exp": lambda n, g, out, a: (g * out,),
    "log": lambda n, g, out, a: (g / a,),
    "clip": lambda n, g, out, a: (g * ((a >= n.attrs["lo"]) & (a <= n.attrs["hi"])),),
    "softmax": _softmax_grad,
    "log_softmax": _log_softmax_grad,
    "concat": _concat_grad,
    "slice": _slice_grad,
    "sum": _sum_grad,
}


class Eager:
    """Immediate-mode twin of :class:`Graph`: same op names, numpy values."""

    @staticmethod
    def matmul(a, b, trans_b=False):
        return _mm(a, b, trans_b)

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)

    @staticmethod
    def affine(a, scale, shift=0.0):
        return a * scale + shift

    sigmoid = staticmethod(_sigmoid)
    tanh = staticmethod(np.tanh)
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    softmax = staticmethod(_softmax)
    log_softmax = staticmethod(_log_softmax)

    @staticmethod
    def clip(a, lo, hi):
        return np.clip(a, lo, hi)

    @staticmethod
    def concat(parts):
        return np.concatenate(list(parts), axis=-1)

    @staticmethod
    def slice(a, start, stop):
        return a[..., start:stop]

    @staticmethod
    def sum(a, axis=None):
        return _sum(a, axis)

    @staticmethod
    def mean(a, axis=None):
        count = a.size if axis is None else a.shape[axis]
        return _sum(a, axis) / count

    @staticmethod
    def constant(value):
        return np.asarray(value, dtype=np.float64)


# -- training utilities -------------------------------------------------


def finite_difference_gradient(loss_fn, params: Mapping[str, Tensor], epsilon=1e-5) -> dict[str, Tensor]:
    """Central-difference gradient of ``loss_fn(params) -> float``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn(work))
            flat[i] = orig - epsilon
            down = float(loss_fn(work))
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"loss is not finite when perturbing {name}[{i}]")
            gflat[i] = (up - down) / (2 * epsilon)
        grads[name] = g
    return grads


def relative_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``, reduced by max."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], learning_rate) -> dict[str, Tensor]:
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    if params.keys() != grads.keys():
        raise ValueError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        out[name] = p - learning_rate * g
    return out


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm) -> dict[str, Tensor]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator so shared names initialize identically across models."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def glorot_uniform(shape: Sequence[int], seed: int, name: str) -> Tensor:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return param_rng(seed, name).uniform(-r, r, size=tuple(shape))
