"""Dense float64 arrays with a small explicit reverse-mode tape.

Every value is a :class:`Mat`. A ``Mat`` is tracked when it carries a tape
handle; operations on tracked inputs append a node to that tape holding the
vector-Jacobian products for each tracked parent. ``backward`` walks the tape
once in reverse.

Shapes never broadcast implicitly. Elementwise operations require identical
shapes; use :func:`broadcast_to` or :func:`reshape` to make shape changes
explicit. Leading batch axes are allowed (a ``Mat`` may be 1-D, 2-D or
higher); ``matmul`` contracts the last two axes and requires identical batch
axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError

__all__ = [
    "Mat",
    "Tape",
    "const",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "sum",
    "mean",
    "logsumexp",
    "softmax_rows",
    "l2norm_rows",
    "broadcast_to",
    "reshape",
    "transpose",
    "take",
    "take_along_axis",
    "concat",
    "detach",
    "backward",
    "finite_diff_grad",
]

Vjp = Callable[[np.ndarray], np.ndarray]


class Mat:
    """Immutable float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("_value", "tape", "node_id")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.array(value, dtype=np.float64)  # always a private copy
        arr.flags.writeable = False
        self._value = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    @property
    def ndim(self) -> int:
        return self._value.ndim

    @property
    def rows(self) -> int:
        return self._value.shape[-2] if self._value.ndim >= 2 else 1

    @property
    def cols(self) -> int:
        return self._value.shape[-1] if self._value.ndim >= 1 else 1

    @property
    def data(self) -> tuple[float, ...]:
        """Entries in row-major order."""
        return tuple(self._value.ravel().tolist())

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self._value.copy()

    def item(self) -> float:
        if self._value.size != 1:
            raise DimensionError(f"item() needs a single entry, got shape {self.shape}")
        return float(self._value.reshape(()))

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, node_id=None) -> "Mat":
        # fresh op outputs are owned by the Mat; skip the defensive copy
        m = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        m._value = arr
        m.tape = tape
        m.node_id = node_id
        return m

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Mat(shape={self.shape}{tag})"


class Tape:
    """Records operations in execution order (which is a topological order)."""

    def __init__(self):
        # node i: list of (parent node id, vjp) pairs; empty for leaves
        self.nodes: list[list[tuple[int, Vjp]]] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaf_ids: list[int] = []

    def leaf(self, value) -> Mat:
        """Register a parameter and return it as a tracked ``Mat``."""
        arr = np.asarray(value, dtype=np.float64)
        _check_finite(arr, "leaf")
        node_id = len(self.nodes)
        self.nodes.append([])
        self.shapes.append(arr.shape)
        self.leaf_ids.append(node_id)
        return Mat(arr, self, node_id)

    def _record(self, value: np.ndarray, parents: list[tuple[int, Vjp]]) -> Mat:
        node_id = len(self.nodes)
        self.nodes.append(parents)
        self.shapes.append(value.shape)
        return Mat._wrap(value, self, node_id)

    def __len__(self):
        return len(self.nodes)


def const(value) -> Mat:
    """Wrap a value as an untracked ``Mat``."""
    return value if isinstance(value, Mat) else Mat(value)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where} produced non-finite values")


def _emit(value: np.ndarray, name: str, inputs: Sequence[Mat], vjps: Sequence[Vjp]) -> Mat:
    _check_finite(value, name)
    tape = None
    for m in inputs:
        if m.tape is not None:
            if tape is not None and m.tape is not tape:
                raise ContractError(f"{name}: inputs recorded on different tapes")
            tape = m.tape
    if tape is None:
        return Mat._wrap(value)
    parents = [(m.node_id, f) for m, f in zip(inputs, vjps) if m.tape is not None]
    return tape._record(value, parents)


def _same_shape(a: Mat, b: Mat, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Mat, b: Mat) -> Mat:
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _emit(
        av @ bv,
        "matmul",
        (a, b),
        (lambda g: g @ _swap(bv), lambda g: _swap(av) @ g),
    )


def add(a: Mat, b: Mat) -> Mat:
    a, b = const(a), const(b)
    _same_shape(a, b, "add")
    return _emit(a.value + b.value, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a: Mat, b: Mat) -> Mat:
    a, b = const(a), const(b)
    _same_shape(a, b, "sub")
    return _emit(a.value - b.value, "sub", (a, b), (lambda g: g, lambda g: -g))


def mul(a: Mat, b: Mat) -> Mat:
    a, b = const(a), const(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(av * bv, "mul", (a, b), (lambda g: g * bv, lambda g: g * av))


def neg(a: Mat) -> Mat:
    return scale(a, -1.0)


def scale(a: Mat, c: float) -> Mat:
    a = const(a)
    c = float(c)
    return _emit(a.value * c, "scale", (a,), (lambda g: g * c,))


def add_scalar(a: Mat, c: float) -> Mat:
    a = const(a)
    return _emit(a.value + float(c), "add_scalar", (a,), (lambda g: g,))


def exp(a: Mat) -> Mat:
    a = const(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.value)
    return _emit(out, "exp", (a,), (lambda g: g * out,))


def log(a: Mat) -> Mat:
    a = const(a)
    av = a.value
    if np.any(av <= 0):
        raise DegenerateInputError("log of a nonpositive entry")
    return _emit(np.log(av), "log", (a,), (lambda g: g / av,))


def sum(a: Mat, axis: int | None = None, keepdims: bool = False) -> Mat:  # noqa: A001
    a = const(a)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit(np.asarray(out, dtype=np.float64), "sum", (a,), (vjp,))


def mean(a: Mat, axis: int | None = None, keepdims: bool = False) -> Mat:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Mat, axis: int = -1) -> Mat:
    """Stable log-sum-exp over one axis (the axis is removed)."""
    a = const(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    weights = shifted / s
    return _emit(out, "logsumexp", (a,), (lambda g: np.expand_dims(g, axis) * weights,))


def softmin_dual(d: Mat, cost: Mat, eps: float, axis: int) -> Mat:
    """``-eps * logsumexp((d - cost) / eps)`` reduced over ``axis`` of ``cost``.

    ``cost`` is ``(..., K, N)``. For ``axis=-1`` the dual ``d`` is ``(..., N)``
    and is repeated over rows; for ``axis=-2`` it is ``(..., K)`` and is
    repeated over columns. One fused node for a Sinkhorn dual update.
    """
    d, cost = const(d), const(cost)
    if axis not in (-1, -2):
        raise ContractError(f"softmin_dual: axis must be -1 or -2, got {axis}")
    other = -2 if axis == -1 else -1
    want = cost.shape[:-2] + (cost.shape[axis],)
    if d.shape != want:
        raise DimensionError(f"softmin_dual: dual {d.shape} vs cost {cost.shape} on axis {axis}")
    x = (np.expand_dims(d.value, other) - cost.value) / eps
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = -eps * np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def vjp_cost(g):
        return np.expand_dims(g, axis) * w

    def vjp_d(g):
        return -np.sum(np.expand_dims(g, axis) * w, axis=other)

    return _emit(out, "softmin_dual", (d, cost), (vjp_d, vjp_cost))


def softmax_rows(x: Mat) -> Mat:
    """Softmax along the last axis, with per-row max subtraction."""
    x = const(x)
    xv = x.value
    e = np.exp(xv - np.max(xv, axis=-1, keepdims=True))
    y = e / np.sum(e, axis=-1, keepdims=True)
    return _emit(y, "softmax_rows", (x,), (lambda g: y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def l2norm_rows(x: Mat) -> Mat:
    """Scale every row (last axis) to unit Euclidean norm."""
    x = const(x)
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("l2norm_rows: zero-norm row")
    y = xv / n
    return _emit(y, "l2norm_rows", (x,), (lambda g: (g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,))


def broadcast_to(a: Mat, shape: Sequence[int]) -> Mat:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = const(a)
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape):
        raise DimensionError(f"broadcast_to: rank {len(src)} -> {len(shape)}; reshape first")
    for s, t in zip(src, shape):
        if s != t and s != 1:
            raise DimensionError(f"broadcast_to: cannot expand {src} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s != t)
    out = np.broadcast_to(a.value, shape).copy()
    return _emit(out, "broadcast_to", (a,), (lambda g: np.sum(g, axis=axes, keepdims=True),))


def reshape(a: Mat, shape: Sequence[int]) -> Mat:
    a = const(a)
    src = a.shape
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}") from exc
    return _emit(out, "reshape", (a,), (lambda g: g.reshape(src),))


def transpose(a: Mat, axes: Sequence[int] | None = None) -> Mat:
    a = const(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.value, axes), "transpose", (a,), (lambda g: np.transpose(g, inv),))


def take(a: Mat, indices, axis: int = 0) -> Mat:
    """Select entries along ``axis`` by a 1-D integer index list."""
    a = const(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take: indices must be 1-D")
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {a.shape[axis]}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return out

    return _emit(np.take(a.value, idx, axis=axis), "take", (a,), (vjp,))


def take_along_axis(a: Mat, indices, axis: int) -> Mat:
    """``np.take_along_axis`` with a scatter-add gradient."""
    a = const(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != a.ndim:
        raise DimensionError("take_along_axis: index rank must equal operand rank")
    shape = a.shape
    axis = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        grids = list(np.ix_(*[np.arange(s) for s in idx.shape]))
        grids[axis] = idx
        np.add.at(out, tuple(grids), g)
        return out

    return _emit(np.take_along_axis(a.value, idx, axis=axis), "take_along_axis", (a,), (vjp,))


def concat(mats: Sequence[Mat], axis: int = 0) -> Mat:
    mats = [const(m) for m in mats]
    try:
        out = np.concatenate([m.value for m in mats], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[m.shape for m in mats]}") from exc
    bounds = np.cumsum([0] + [m.shape[axis] for m in mats])

    def piece(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _emit(out, "concat", mats, [piece(i) for i in range(len(mats))])


def detach(a: Mat) -> Mat:
    """Same values, no tape."""
    return Mat(const(a).value)


def backward(loss: Mat, tape: Tape) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{leaf node_id: gradient}`` for every leaf on ``tape``; leaves the
    loss does not depend on get zero arrays.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("backward: loss is not tracked on this tape")
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        for parent, vjp in tape.nodes[node_id]:
            contrib = vjp(g)
            if parent in grads:
                grads[parent] = grads[parent] + contrib
            else:
                grads[parent] = contrib
    out = {}
    for leaf in tape.leaf_ids:
        out[leaf] = np.asarray(grads.get(leaf, np.zeros(tape.shapes[leaf])), dtype=np.float64).reshape(tape.shapes[leaf])
    return out


def finite_diff_grad(
    f: Callable[[list[np.ndarray]], float],
    leaves: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each array in ``leaves``."""
    if not h > 0:
        raise ContractError("finite_diff_grad: step must be positive")
    params = [np.array(x, dtype=np.float64) for x in leaves]
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
