"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation records its parents and a backward closure on the output
``Tensor``.  Gradients are accumulated into a dictionary local to a single
``grad`` call, so recorded values are never mutated and a graph may be
differentiated any number of times.

Conventions:
    * relu'(0) is 0.
    * 2-D convolutions use NHWC activations and OIHW weights.
    * ``softmax_cross_entropy`` takes integer labels and reduces with
      ``"mean"`` or ``"sum"``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches and bad gradient requests."""


class Tensor:
    """An immutable array plus the record of the operation that produced it."""

    __slots__ = ("data", "parents", "backward_fn", "op", "name")

    def __init__(self, data, parents: tuple = (), backward_fn=None, op: str = "leaf", name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}{label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return Tensor(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return Tensor(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return Tensor(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = a.dtype.type(c)

    def backward(g, needs):
        return (g * c,)

    return Tensor(a.data * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.dtype.type(0))

    def backward(g, needs):
        return (g * (a.data > 0),)

    return Tensor(out, (a,), backward, "relu")


# ---------------------------------------------------------------------------
# shape and reductions

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise GraphError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g, needs):
        return (g.reshape(a.shape),)

    return Tensor(out, (a,), backward, "reshape")


def sum_all(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor(a.data.sum(dtype=a.dtype), (a,), backward, "sum")


def global_avg_pool(a: Tensor) -> Tensor:
    """Average over the spatial axes of an NHWC tensor, giving (N, C)."""
    if a.data.ndim != 4:
        raise GraphError(f"global_avg_pool: expected NHWC input, got shape {a.shape}")
    n, h, w, c = a.shape
    inv = a.dtype.type(1.0 / (h * w))

    def backward(g, needs):
        return (np.broadcast_to((g * inv)[:, None, None, :], a.shape).copy(),)

    return Tensor(a.data.mean(axis=(1, 2), dtype=a.dtype), (a,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    a2, b2 = a.data.ndim == 2, b.data.ndim == 2

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            if a2:
                ga = g @ b.data.T if b2 else np.outer(g, b.data)
            else:
                ga = b.data @ g if b2 else g * b.data
        if needs[1]:
            if a2:
                gb = a.data.T @ g
            else:
                gb = np.outer(a.data, g) if b2 else g * a.data
        return ga, gb

    return Tensor(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for a (N, in) batch and an (out, in) weight."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise GraphError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g, needs):
        gx = g @ w.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward, "linear")


def _pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if not (top or bottom or left or right):
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + top + bottom, w + left + right, c), dtype=x.dtype)
    out[:, top:top + h, left:left + w] = x
    return out


def _gather(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Offset-major im2col: (N, Hp, Wp, C) -> (kh * kw, N * ho * wo, C)."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((kh * kw, n, ho, wo, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i * kw + j] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(kh * kw, n * ho * wo, c)


def _contract(cols: np.ndarray, wk: np.ndarray) -> np.ndarray:
    # (K, M, C) x (K, C, O) -> (M, O) summed over kernel offsets
    k, m, c = cols.shape
    if c < 8:
        return cols.transpose(1, 0, 2).reshape(m, k * c) @ wk.reshape(k * c, -1)
    acc = cols[0] @ wk[0]
    for i in range(1, k):
        acc += cols[i] @ wk[i]
    return acc


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Activations are NHWC, weights OIHW.  The input gradient is computed as a
    stride-1 correlation of the dilated, padded output gradient with the
    spatially flipped kernel.
    """
    if stride not in (1, 2):
        raise GraphError(f"conv2d: unsupported stride {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[1]:
        raise GraphError(f"conv2d: NHWC input {x.shape} does not match OIHW weight {w.shape}")
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise GraphError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = _pad_hw(x.data, padding, padding, padding, padding)
    cols = _gather(xp, kh, kw, stride, ho, wo)
    out = _contract(cols, np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(kh * kw, c, o))
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o)

    def backward(g, needs):
        gmat = g.reshape(n * ho * wo, o)
        gx = gw = gb = None
        if needs[0]:
            if stride == 1:
                gd = g
            else:
                gd = np.zeros((n, stride * (ho - 1) + 1, stride * (wo - 1) + 1, o), dtype=g.dtype)
                gd[:, ::stride, ::stride] = g
            ph, pw = kh - 1 - padding, kw - 1 - padding
            extra_h = (h + 2 * padding - kh) % stride
            extra_w = (wd + 2 * padding - kw) % stride
            gp = _pad_hw(gd, ph, ph + extra_h, pw, pw + extra_w)
            flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(kh * kw, o, c)
            gx = _contract(_gather(gp, kh, kw, 1, h, wd), flipped).reshape(n, h, wd, c)
        if needs[1]:
            gw = np.matmul(cols.transpose(0, 2, 1), gmat).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if b is not None and needs[2]:
            gb = gmat.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward, "conv2d")


def to_channels_last(a: Tensor) -> Tensor:
    """NCHW -> NHWC."""
    if a.data.ndim != 4:
        raise GraphError(f"to_channels_last: expected a 4-D tensor, got {a.shape}")

    def backward(g, needs):
        return (g.transpose(0, 3, 1, 2),)

    return Tensor(np.ascontiguousarray(a.data.transpose(0, 2, 3, 1)), (a,), backward, "to_channels_last")


# ---------------------------------------------------------------------------
# losses

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_per_sample(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    return -log_softmax(logits)[np.arange(logits.shape[0]), labels]


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + negative log likelihood over a (N, K) batch."""
    if logits.data.ndim != 2:
        raise GraphError(f"softmax_cross_entropy: expected (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise GraphError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise GraphError(f"softmax_cross_entropy: label out of range [0, {k})")
    if reduction not in ("mean", "sum"):
        raise GraphError(f"softmax_cross_entropy: unknown reduction {reduction!r}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    total = losses.sum(dtype=logits.dtype)
    if reduction == "mean":
        total = total / logits.dtype.type(n)

    def backward(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1
        if reduction == "mean":
            d /= n
        return (d * g,)

    return Tensor(np.asarray(total, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# differentiation

def topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.data.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    order = topological_order(output)
    targets = {id(t) for t in wrt}
    needs: dict[int, bool] = {}
    for node in order:
        needs[id(node)] = id(node) in targets or any(needs[id(p)] for p in node.parents)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=output.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or not node.parents or not needs[id(node)]:
            continue
        mask = [needs[id(p)] for p in node.parents]
        for p, gp, need in zip(node.parents, node.backward_fn(g, mask), mask):
            if not need or gp is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return [np.asarray(grads[id(t)], dtype=t.dtype).reshape(t.shape) if id(t) in grads
            else np.zeros(t.shape, dtype=t.dtype) for t in wrt]


class ComputeGraph:
    """A graph over named leaves, rebuilt by ``build`` on every evaluation.

    ``leaf_shapes`` maps each leaf name to its declared shape; ``None`` in a
    dimension accepts any size (typically the batch axis), and a shape of
    ``None`` accepts any array.
    """

    def __init__(self, build: Callable[..., Tensor], leaf_shapes: Mapping[str, tuple | None]):
        self.build = build
        self.leaf_shapes = dict(leaf_shapes)
        self.leaves: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []
        self.output: Tensor | None = None


def _check_leaf(name: str, declared, arr: np.ndarray) -> None:
    if declared is None:
        return
    ok = len(declared) == arr.ndim and all(d is None or d == s for d, s in zip(declared, arr.shape))
    if not ok:
        raise GraphError(f"leaf {name!r}: expected shape {tuple(declared)}, got {arr.shape}")


def forward_eval(graph: ComputeGraph, inputs: Mapping[str, object]) -> Tensor:
    """Bind ``inputs`` to the graph leaves, evaluate, and return the output."""
    missing = set(graph.leaf_shapes) - set(inputs)
    extra = set(inputs) - set(graph.leaf_shapes)
    if missing or extra:
        raise GraphError(f"leaf mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    leaves = {}
    for name, value in inputs.items():
        t = value if isinstance(value, Tensor) else Tensor(value)
        _check_leaf(name, graph.leaf_shapes[name], t.data)
        if t.parents:
            raise GraphError(f"leaf {name!r} is not a leaf tensor")
        if t.name is None:
            t.name = name
        leaves[name] = t
    try:
        out = graph.build(**leaves)
    except GraphError as exc:
        raise GraphError(f"while evaluating graph: {exc}") from None
    graph.leaves = leaves
    graph.output = out
    graph.nodes = topological_order(out)
    return out


def backward(graph: ComputeGraph, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    if graph.output is None:
        raise GraphError("backward called before forward_eval")
    names = list(wrt)
    unknown = [n for n in names if n not in graph.leaves]
    if unknown:
        raise GraphError(f"unknown leaf name(s): {unknown}")
    grads = grad(graph.output, [graph.leaves[n] for n in names])
    return dict(zip(names, grads))
