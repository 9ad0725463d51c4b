"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every learned operation in the model goes through :func:`record`, which looks
up an op kind in :data:`OPS`, runs its forward rule and (when any input lives
on a :class:`Graph`) appends a node holding what the backward rule needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot combine."""


class Tensor:
    """A float64 array, optionally bound to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Graph | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return record("add", [self, _as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return record("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return record("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        return record("mul", [self, _as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return record("scale", [self], c=-1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: list[int | None]
    saved: dict
    attrs: dict
    shape: tuple[int, ...]


@dataclass
class Graph:
    """Append-only tape. Node ``k`` only ever references nodes ``< k``."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, array, name: str | None = None) -> Tensor:
        node = Node("leaf", [], {}, {"name": name}, np.shape(array))
        self.nodes.append(node)
        return Tensor(array, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return d(loss)/d(node) for every node on a path to ``loss``."""
        if loss.graph is not self or loss.node_id is None:
            raise ValueError("loss is not a node of this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for k in range(loss.node_id, -1, -1):
            g = grads.get(k)
            if g is None:
                continue
            node = self.nodes[k]
            if node.kind == "leaf":
                continue
            in_grads = OPS[node.kind].backward(g, node.saved, node.attrs)
            for idx, ig in zip(node.inputs, in_grads):
                if idx is None or ig is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + ig
                else:
                    grads[idx] = ig
        return grads


def backward(loss: Tensor, graph: Graph | None = None) -> dict[int, np.ndarray]:
    graph = graph or loss.graph
    if graph is None:
        raise ValueError("loss is not attached to a graph")
    return graph.backward(loss)


@dataclass(frozen=True)
class OpDef:
    forward: Callable  # (datas, attrs) -> (out, saved)
    backward: Callable  # (gout, saved, attrs) -> list of input grads


OPS: dict[str, OpDef] = {}


def _op(name):
    def register(cls):
        OPS[name] = OpDef(cls.forward, cls.backward)
        return cls

    return register


def record(kind: str, inputs: list[Tensor], **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs`` and tape it if any input is on a graph."""
    if kind not in OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    inputs = [_as_tensor(t) for t in inputs]
    out, saved = OPS[kind].forward([t.data for t in inputs], attrs)
    graph = next((t.graph for t in inputs if t.graph is not None), None)
    if graph is None:
        return Tensor(out)
    for t in inputs:
        if t.graph is not None and t.graph is not graph:
            raise ValueError("inputs belong to different graphs")
    graph.nodes.append(Node(kind, [t.node_id for t in inputs], saved, attrs, out.shape))
    return Tensor(out, graph, len(graph.nodes) - 1)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


@_op("add")
class _Add:
    @staticmethod
    def forward(d, attrs):
        _broadcast_shape("add", d[0], d[1])
        return d[0] + d[1], {"shapes": (d[0].shape, d[1].shape)}

    @staticmethod
    def backward(g, s, attrs):
        return [_unbroadcast(g, s["shapes"][0]), _unbroadcast(g, s["shapes"][1])]


@_op("sub")
class _Sub:
    @staticmethod
    def forward(d, attrs):
        _broadcast_shape("sub", d[0], d[1])
        return d[0] - d[1], {"shapes": (d[0].shape, d[1].shape)}

    @staticmethod
    def backward(g, s, attrs):
        return [_unbroadcast(g, s["shapes"][0]), _unbroadcast(-g, s["shapes"][1])]


@_op("mul")
class _Mul:
    @staticmethod
    def forward(d, attrs):
        _broadcast_shape("mul", d[0], d[1])
        return d[0] * d[1], {"a": d[0], "b": d[1]}

    @staticmethod
    def backward(g, s, attrs):
        a, b = s["a"], s["b"]
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@_op("scale")
class _Scale:
    @staticmethod
    def forward(d, attrs):
        return d[0] * attrs["c"], {}

    @staticmethod
    def backward(g, s, attrs):
        return [g * attrs["c"]]


@_op("relu")
class _Relu:
    @staticmethod
    def forward(d, attrs):
        pos = d[0] > 0
        return np.where(pos, d[0], 0.0), {"pos": pos}

    @staticmethod
    def backward(g, s, attrs):
        return [np.where(s["pos"], g, 0.0)]


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(d, attrs):
        y = _sigmoid(d[0])
        return y, {"y": y}

    @staticmethod
    def backward(g, s, attrs):
        y = s["y"]
        return [g * y * (1.0 - y)]


@_op("softmax")
class _Softmax:
    @staticmethod
    def forward(d, attrs):
        x = d[0]
        axis = attrs.get("axis", -1)
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        y = z / z.sum(axis=axis, keepdims=True)
        return y, {"y": y}

    @staticmethod
    def backward(g, s, attrs):
        y = s["y"]
        axis = attrs.get("axis", -1)
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]


@_op("dropout")
class _Dropout:
    @staticmethod
    def forward(d, attrs):
        keep = attrs["keep"]
        if not attrs.get("train", False) or keep >= 1.0:
            return d[0].copy(), {"mask": None}
        rng = attrs["rng"]
        mask = (rng.random(d[0].shape) < keep) / keep
        return d[0] * mask, {"mask": mask}

    @staticmethod
    def backward(g, s, attrs):
        return [g if s["mask"] is None else g * s["mask"]]


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


@_op("sum")
class _Sum:
    @staticmethod
    def forward(d, attrs):
        axes = _norm_axes(attrs.get("axis"), d[0].ndim)
        keep = attrs.get("keepdims", False)
        return d[0].sum(axis=axes, keepdims=keep), {"shape": d[0].shape, "axes": axes}

    @staticmethod
    def backward(g, s, attrs):
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, s["axes"])
        return [np.broadcast_to(g, s["shape"]).copy()]


@_op("mean")
class _Mean:
    @staticmethod
    def forward(d, attrs):
        axes = _norm_axes(attrs.get("axis"), d[0].ndim)
        keep = attrs.get("keepdims", False)
        n = int(np.prod([d[0].shape[a] for a in axes]))
        return d[0].mean(axis=axes, keepdims=keep), {"shape": d[0].shape, "axes": axes, "n": n}

    @staticmethod
    def backward(g, s, attrs):
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, s["axes"])
        return [np.broadcast_to(g / s["n"], s["shape"]).copy()]


@_op("max")
class _Max:
    """Max over one axis; gradient goes to the first maximal entry."""

    @staticmethod
    def forward(d, attrs):
        axis = attrs["axis"] % d[0].ndim
        idx = np.argmax(d[0], axis=axis)
        out = np.take_along_axis(d[0], np.expand_dims(idx, axis), axis)
        if not attrs.get("keepdims", False):
            out = out.squeeze(axis)
        return out, {"idx": idx, "shape": d[0].shape, "axis": axis}

    @staticmethod
    def backward(g, s, attrs):
        axis = s["axis"]
        if attrs.get("keepdims", False):
            g = g.squeeze(axis)
        out = np.zeros(s["shape"])
        np.put_along_axis(out, np.expand_dims(s["idx"], axis), np.expand_dims(g, axis), axis)
        return [out]


@_op("reshape")
class _Reshape:
    @staticmethod
    def forward(d, attrs):
        try:
            return d[0].reshape(attrs["shape"]), {"shape": d[0].shape}
        except ValueError:
            raise ShapeError(f"reshape: {d[0].shape} -> {attrs['shape']}") from None

    @staticmethod
    def backward(g, s, attrs):
        return [g.reshape(s["shape"])]


@_op("index")
class _Index:
    @staticmethod
    def forward(d, attrs):
        return d[0][attrs["key"]], {"shape": d[0].shape}

    @staticmethod
    def backward(g, s, attrs):
        out = np.zeros(s["shape"])
        np.add.at(out, attrs["key"], g)
        return [out]


@_op("concat")
class _Concat:
    @staticmethod
    def forward(d, attrs):
        axis = attrs.get("axis", 0)
        try:
            out = np.concatenate(d, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: shapes {[x.shape for x in d]} on axis {axis}") from None
        return out, {"sizes": [x.shape[axis] for x in d]}

    @staticmethod
    def backward(g, s, attrs):
        cuts = np.cumsum(s["sizes"])[:-1]
        return np.split(g, cuts, axis=attrs.get("axis", 0))


# ---------------------------------------------------------------- linear algebra


@_op("linear")
class _Linear:
    """``x @ W.T + b`` for x of shape (..., in), W (out, in), b (out,)."""

    @staticmethod
    def forward(d, attrs):
        x, w, b = d
        if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"linear: x {x.shape}, W {w.shape}, b {b.shape}")
        return x @ w.T + b, {"x": x, "w": w}

    @staticmethod
    def backward(g, s, attrs):
        x, w = s["x"], s["w"]
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        return [g @ w, g2.T @ x2, g2.sum(axis=0)]


@_op("conv3d")
class _Conv3d:
    """Cross-correlation over (N, C, H, W, D) with a cubic kernel."""

    @staticmethod
    def forward(d, attrs):
        x, w, b = d
        stride = attrs.get("stride", 1)
        pad = attrs.get("padding", 0)
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: x {x.shape}, W {w.shape}, b {b.shape}")
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
        if min(xp.shape[2:]) < k:
            raise ShapeError(f"conv3d: kernel {k} larger than padded input {xp.shape}")
        win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::stride, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out = np.moveaxis(out, 4, 1) + b[None, :, None, None, None]
        return np.ascontiguousarray(out), {"win": win, "w": w, "xshape": xp.shape}

    @staticmethod
    def backward(g, s, attrs):
        win, w = s["win"], s["w"]
        stride = attrs.get("stride", 1)
        pad = attrs.get("padding", 0)
        k = w.shape[2]
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = g.sum(axis=(0, 2, 3, 4))
        # gcol[n, ho, wo, do, c, a, b, e] = sum_o g[n, o, ...] * w[o, c, a, b, e]
        gcol = np.tensordot(g, w, axes=([1], [0]))
        gx = np.zeros(s["xshape"])
        ho, wo, do = g.shape[2:]
        for a in range(k):
            for bb in range(k):
                for e in range(k):
                    gx[
                        :,
                        :,
                        a : a + stride * ho : stride,
                        bb : bb + stride * wo : stride,
                        e : e + stride * do : stride,
                    ] += np.moveaxis(gcol[..., a, bb, e], 4, 1)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad, pad:-pad]
        return [gx, gw, gb]


# ---------------------------------------------------------------- losses


@_op("squared_error")
class _SquaredError:
    @staticmethod
    def forward(d, attrs):
        _broadcast_shape("squared_error", d[0], d[1])
        diff = d[0] - d[1]
        return diff * diff, {"diff": diff, "shapes": (d[0].shape, d[1].shape)}

    @staticmethod
    def backward(g, s, attrs):
        gd = 2.0 * g * s["diff"]
        return [_unbroadcast(gd, s["shapes"][0]), _unbroadcast(-gd, s["shapes"][1])]


@_op("bce")
class _BCE:
    """Elementwise binary cross-entropy on probabilities clamped to [eps, 1-eps]."""

    @staticmethod
    def forward(d, attrs):
        p, y = d
        _broadcast_shape("bce", p, y)
        pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        out = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        return out, {"pc": pc, "y": y, "inside": inside, "shapes": (p.shape, y.shape)}

    @staticmethod
    def backward(g, s, attrs):
        pc, y = s["pc"], s["y"]
        gp = g * (pc - y) / (pc * (1.0 - pc))
        gp = np.where(s["inside"], gp, 0.0)
        gy = g * (np.log1p(-pc) - np.log(pc))
        return [_unbroadcast(gp, s["shapes"][0]), _unbroadcast(gy, s["shapes"][1])]


# ---------------------------------------------------------------- functional API


def add(a, b):
    return record("add", [a, b])


def sub(a, b):
    return record("sub", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def linear(x, w, b):
    return record("linear", [x, w, b])


def conv3d(x, w, b, stride=1, padding=0):
    return record("conv3d", [x, w, b], stride=stride, padding=padding)


def relu(x):
    return record("relu", [x])


def sigmoid(x):
    return record("sigmoid", [x])


def softmax(x, axis=-1):
    return record("softmax", [x], axis=axis)


def dropout(x, keep: float, train: bool, rng: np.random.Generator | None = None):
    return record("dropout", [x], keep=keep, train=train, rng=rng)


def scale(x, c: float):
    return record("scale", [x], c=float(c))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return record("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return record("mean", [x], axis=axis, keepdims=keepdims)


def max(x, axis, keepdims=False):  # noqa: A001
    return record("max", [x], axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return record("reshape", [x], shape=tuple(shape))


def index(x, key):
    return record("index", [x], key=key)


def concat(xs, axis=0):
    return record("concat", list(xs), axis=axis)


def squared_error(a, b):
    return record("squared_error", [a, b])


def bce(p, y):
    return record("bce", [p, y])


# ---------------------------------------------------------------- gradient checking


class NonFiniteError(FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value at coordinate {i}", index=i)
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], params, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a parameter tensor (a graph leaf) to a scalar tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    g = Graph()
    leaf = g.leaf(x0.copy())
    loss = f(leaf)
    analytic = g.backward(loss).get(leaf.node_id, np.zeros_like(x0))
    numeric = numeric_grad(lambda x: f(Tensor(x)).item(), x0, h)
    err = relative_error(analytic, numeric)
    return float(err.max()) if err.size else 0.0
