"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation below computes its value
eagerly and, when at least one operand requires a gradient, records a
closure that pushes the output gradient back to its operands.  Calling
:func:`backward` on a scalar node walks the recorded graph in reverse
topological order.

The op inventory is deliberately small: exactly what the captioner and
translator need.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    """A node in the computation graph.

    ``value`` holds the data, ``grad`` is filled in by :func:`backward` for
    nodes that require gradients.  Leaves are created directly; inner nodes
    are produced by the op functions in this module.
    """

    __slots__ = ("id", "op", "value", "grad", "requires_grad", "_inputs", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.id = next(_ids)
        self.op = op
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def inputs(self) -> list[int]:
        return [t.id for t in self._inputs]

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value, op=op)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (covers broadcast-add)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, "mul", (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _node(y, "tanh", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _node(y, "sigmoid", (a,), bw)


def log(a: Tensor) -> Tensor:
    x = a.value

    def bw(g):
        _accumulate(a, g / x)

    return _node(np.log(x), "log", (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)

    def bw(g):
        _accumulate(a, g * y)

    return _node(y, "exp", (a,), bw)


# ---------------------------------------------------------------- reductions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, "softmax", (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """``log(softmax(a))`` computed stably in one node."""
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, "log_softmax", (a,), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(y, "sum", (a,), bw)


def masked_sum(a: Tensor, mask, axis=None) -> Tensor:
    """Sum of ``a * mask`` where ``mask`` is a constant 0/1 array."""
    mask = np.asarray(mask, dtype=DTYPE)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError("masked_sum", a.shape, mask.shape) from None
    y = (a.value * mask).sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, _unbroadcast(np.broadcast_to(g, np.broadcast_shapes(a.shape, mask.shape)) * mask, a.shape))

    return _node(y, "masked_sum", (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of rank >= 1 and ``b`` of rank 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    y = a.value @ b.value

    def bw(g):
        if a.requires_grad:
            ga = np.multiply.outer(g, b.value) if b.ndim == 1 else g @ b.value.T
            _accumulate(a, ga)
        if b.requires_grad:
            if b.ndim == 1:
                gb = np.tensordot(a.value, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            else:
                a2 = a.value.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            _accumulate(b, gb)

    return _node(y, "matmul", (a, b), bw)


# ---------------------------------------------------------------- indexing


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range [0, {table.shape[0]})")
    y = table.value[ids]

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _node(y, "embedding", (table,), bw)


def pick(a: Tensor, ids) -> Tensor:
    """Select ``a[i, ids[i]]`` along the last axis of a rank-2 tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, ids.shape)
    rows = np.arange(a.shape[0])
    y = a.value[rows, ids]

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[rows, ids] = g
        _accumulate(a, ga)

    return _node(y, "pick", (a,), bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing."""
    y = a.value[key]

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[key] = g
        _accumulate(a, ga)

    return _node(y, "getitem", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    y = a.value.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(y, "reshape", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _node(y, "concat", tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(y, "stack", tensors, bw)


# ---------------------------------------------------------------- graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for inp in node._inputs:
            if inp.id not in seen:
                stack_.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Fill ``.grad`` of every gradient-requiring node reachable from ``root``.

    Gradients accumulate additively into leaves that already hold one.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def evaluate(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray]) -> Tensor:
    """Bind ``inputs`` as leaves and run the define-by-run graph ``fn``."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    return fn(**leaves)


def grad(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Value of the scalar ``fn(**inputs)`` and its gradient wrt each input."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = fn(**leaves)
    backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}
    return out.item(), grads


def numerical_grad(fn: Callable[[dict[str, np.ndarray]], float], inputs: Mapping[str, np.ndarray],
                   eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays."""
    point = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in inputs.items()}
    out = {}
    for name, arr in point.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(point)
            flat[i] = orig - eps
            fm = fn(point)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest coordinatewise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named float64 parameter arrays for one agent, plus the seed that made them."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, rng_seed: int = 0):
        self.entries: dict[str, np.ndarray] = {}
        self.rng_seed = int(rng_seed)
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.entries[name] = np.array(value, dtype=DTYPE, copy=True)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def num_params(self) -> int:
        return int(np.sum([v.size for v in self.entries.values()]))

    def copy(self) -> ParamStore:
        return ParamStore(self.entries, self.rng_seed)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.entries.items()}

    def constants(self) -> dict[str, Tensor]:
        return self.leaves(requires_grad=False)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.entries.items()}

    def apply_update(self, grads: Mapping[str, np.ndarray], step: float) -> ParamStore:
        """Return ``self + step * grads`` (gradient ascent when ``step`` > 0)."""
        out = ParamStore(rng_seed=self.rng_seed)
        for k, v in self.entries.items():
            g = grads.get(k)
            out.entries[k] = v + step * g if g is not None else v.copy()
        return out

    def equals(self, other: ParamStore) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.entries.keys() != other.entries.keys():
            return False
        return all(np.array_equal(v, other.entries[k]) and v.shape == other.entries[k].shape
                   for k, v in self.entries.items())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.entries.values())

    # Text checkpoint: a header line, then one line per parameter:
    #   name <TAB> comma-separated shape <TAB> space-separated values
    # Values are written with repr(float) so load(save(p)) is value-exact.

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# commgame-params v1 rng_seed={self.rng_seed}\n")
            for name, v in self.entries.items():
                shape = ",".join(str(n) for n in v.shape)
                values = " ".join(repr(float(x)) for x in v.reshape(-1))
                f.write(f"{name}\t{shape}\t{values}\n")

    @classmethod
    def load(cls, path) -> ParamStore:
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip()
            if not header.startswith("# commgame-params v1"):
                raise ValueError(f"{path}: not a parameter checkpoint")
            seed = int(header.split("rng_seed=")[1])
            store = cls(rng_seed=seed)
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                name, shape_s, values_s = line.split("\t")
                shape = tuple(int(n) for n in shape_s.split(",")) if shape_s else ()
                values = np.array([float(x) for x in values_s.split()], dtype=DTYPE)
                if values.size != math.prod(shape):
                    raise ValueError(f"{path}: {name} has {values.size} values for shape {shape}")
                store.entries[name] = values.reshape(shape)
        return store


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.vdot(g, g) for g in grads])))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads.values())
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
