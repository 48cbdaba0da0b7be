"""Dense tensors and a recording op graph with reverse-mode differentiation.

An :class:`OpGraph` is a tape: every op called through it appends one node,
so list order is a topological order and :func:`backward` simply walks the
list in reverse.  Tensors carry float32 data during training; float64 data
("double mode") is used for gradient checks, and an op keeps whatever dtype
its inputs share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import kernels
from .kernels import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class GraphError(RuntimeError):
    """Raised for misuse of an OpGraph (e.g. backward without a cached forward)."""


class Tensor:
    """N-dimensional float array; ``name`` marks it as a differentiable leaf."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _same_dtype(*arrays):
    dtypes = {a.dtype for a in arrays if a is not None}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}; cast explicitly")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any] = field(default_factory=dict)
    cache: Any = None


class OpGraph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[Tensor] = []
        self._index: dict[int, int] = {}

    def _id(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._index:
            self._index[key] = len(self.values)
            self.values.append(t)
        return self._index[key]

    def _record(self, kind, inputs, out_data, attrs=None, cache=None) -> Tensor:
        ids = tuple(self._id(t) for t in inputs if t is not None)
        out = Tensor(out_data)
        self.nodes.append(Node(kind, ids, self._id(out), attrs or {}, cache))
        return out

    @property
    def output(self) -> Tensor:
        if not self.nodes:
            raise GraphError("graph is empty; run a forward pass first")
        return self.values[self.nodes[-1].output]

    # -- ops -----------------------------------------------------------------

    def conv3d(self, x, weight, bias=None, stride=1, padding=0, dilation=1):
        _same_dtype(x.data, weight.data, None if bias is None else bias.data)
        y = kernels.conv3d_forward(
            x.data, weight.data, None if bias is None else bias.data, stride, padding, dilation
        )
        attrs = dict(stride=stride, padding=padding, dilation=dilation, has_bias=bias is not None)
        return self._record("conv3d", (x, weight, bias), y, attrs)

    def transposed_conv3d(self, x, weight, bias=None, stride=2):
        _same_dtype(x.data, weight.data, None if bias is None else bias.data)
        y = kernels.transposed_conv3d_forward(
            x.data, weight.data, None if bias is None else bias.data, stride
        )
        attrs = dict(stride=stride, has_bias=bias is not None)
        return self._record("transposed_conv3d", (x, weight, bias), y, attrs)

    def maxpool3d(self, x, window=2):
        y, idx = kernels.maxpool3d_forward(x.data, window)
        return self._record("maxpool3d", (x,), y, dict(window=window), cache=idx)

    def relu(self, x):
        return self._record("relu", (x,), np.maximum(x.data, 0))

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        _same_dtype(a.data, b.data)
        return self._record("add", (a, b), a.data + b.data)

    def concat_channels(self, a, b):
        _check_concat(a, b)
        return self._record(
            "concat", (a, b), np.concatenate([a.data, b.data], axis=1), dict(split=a.shape[1])
        )

    def softmax_channels(self, x):
        _check_softmax(x)
        return self._record("softmax", (x,), kernels.softmax_forward(x.data, axis=1))


def _check_concat(a, b):
    if a.data.ndim != b.data.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ, {a.shape} vs {b.shape}")
    _same_dtype(a.data, b.data)


def _check_softmax(x):
    if x.data.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels on axis 1, got {x.shape}")


def _node_backward(node: Node, values: list[Tensor], gy: np.ndarray):
    """Return gradients for node.inputs, in order."""
    ins = [values[i].data for i in node.inputs]
    a = node.attrs
    if node.kind == "conv3d":
        gx, gw, gb = kernels.conv3d_backward(
            gy, ins[0], ins[1], a["stride"], a["padding"], a["dilation"], a["has_bias"]
        )
        return (gx, gw, gb) if a["has_bias"] else (gx, gw)
    if node.kind == "transposed_conv3d":
        gx, gw, gb = kernels.transposed_conv3d_backward(gy, ins[0], ins[1], a["stride"], a["has_bias"])
        return (gx, gw, gb) if a["has_bias"] else (gx, gw)
    if node.kind == "maxpool3d":
        return (kernels.maxpool3d_backward(gy, node.cache, ins[0].shape, a["window"]),)
    if node.kind == "relu":
        # subgradient 0 at x == 0
        return (gy * (ins[0] > 0),)
    if node.kind == "add":
        return gy, gy
    if node.kind == "concat":
        s = a["split"]
        return gy[:, :s], gy[:, s:]
    if node.kind == "softmax":
        return (kernels.softmax_backward(gy, values[node.output].data, axis=1),)
    raise GraphError(f"no backward rule for op {node.kind!r}")


def backward(graph: OpGraph, loss_grad) -> dict[str, np.ndarray]:
    """Propagate ``loss_grad`` (gradient w.r.t. the graph output) to every named leaf.

    Gradients accumulate when a tensor feeds several consumers.
    """
    out = graph.output
    loss_grad = np.asarray(loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad)
    if loss_grad.shape != out.shape:
        raise GraphError(f"loss_grad shape {loss_grad.shape} does not match output {out.shape}")
    grads: dict[int, np.ndarray] = {graph.nodes[-1].output: loss_grad.astype(out.dtype, copy=False)}
    for node in reversed(graph.nodes):
        gy = grads.pop(node.output, None)
        if gy is None:
            continue
        for idx, g in zip(node.inputs, _node_backward(node, graph.values, gy)):
            if idx in grads:
                grads[idx] = grads[idx] + g
            else:
                grads[idx] = g
    result = {}
    for idx, t in enumerate(graph.values):
        if t.name is not None:
            g = grads.get(idx)
            result[t.name] = np.zeros_like(t.data) if g is None else np.ascontiguousarray(g)
    return result


# -- graph-free functional forms ------------------------------------------------


def conv3d(input, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    return OpGraph().conv3d(input, weight, bias, stride, padding, dilation)


def transposed_conv3d(input, weight, stride=2, bias=None) -> Tensor:
    return OpGraph().transposed_conv3d(input, weight, bias, stride)


def maxpool3d(input, window=2) -> Tensor:
    return OpGraph().maxpool3d(input, window)


def relu(input) -> Tensor:
    return Tensor(np.maximum(input.data, 0))


def softmax_channels(input) -> Tensor:
    _check_softmax(input)
    return Tensor(kernels.softmax_forward(input.data, axis=1))


def concat_channels(a, b) -> Tensor:
    _check_concat(a, b)
    return Tensor(np.concatenate([a.data, b.data], axis=1))
