"""Dense float64 tensors with a reverse-mode tape and a plain SGD stepper.

Values flowing through a forward pass are :class:`Var` nodes recorded on a
:class:`Tape` in creation order, which is already a topological order, so
:func:`backward` is a single reverse sweep over the node list.

Leading-axis batching is supported explicitly (``add_bias``, ``mul_rows``,
``stack_rows``); there is no general broadcasting.
"""

from __future__ import annotations

import uuid
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UsageError, VocabularyError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Var",
    "backward",
    "sgd_step",
    "zero_grad",
    "uniform_init",
    "matmul",
    "affine",
    "gru_cell",
    "transpose",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "one_minus",
    "mul_rows",
    "sigmoid",
    "tanh",
    "relu",
    "concat_cols",
    "slice_cols",
    "stack_rows",
    "gather_rows",
    "take_rows",
    "merge_rows",
    "column",
    "softmax_temperature",
    "softmax_np",
    "cross_entropy",
    "log_clamped",
    "total",
    "mean",
    "masked_mean",
]


class Tensor:
    """Immutable dense array of finite float64 values."""

    __slots__ = ("_data",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape)) != arr.size:
                raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ParameterError("tensor values must be finite")
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def values(self) -> list:
        return self._data.ravel().tolist()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __reduce__(self):
        return (Tensor, (np.array(self._data),))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter:
    """A trainable tensor plus its accumulated gradient."""

    __slots__ = ("id", "name", "tensor", "grad")

    def __init__(self, tensor: Tensor, name: str = ""):
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.id = uuid.uuid4().hex
        self.name = name
        self.tensor = tensor
        self.grad = np.zeros(tensor.shape)

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    def copy(self, name: str | None = None) -> "Parameter":
        # Tensors are immutable, so sharing the value object is safe.
        return Parameter(self.tensor, self.name if name is None else name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


class Var:
    __slots__ = ("tape", "value", "grad", "parents", "vjp", "requires_grad", "param", "index")

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False, param=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.param = param
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._leaves: dict[int, Var] = {}

    def constant(self, value) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        return Var(self, arr)

    def watch(self, param: Parameter, requires_grad: bool = True) -> Var:
        """Bind ``param`` to this tape; repeated calls return the same leaf."""
        leaf = self._leaves.get(id(param))
        if leaf is None:
            leaf = Var(self, param.tensor.data, requires_grad=requires_grad, param=param)
            self._leaves[id(param)] = leaf
        return leaf

    def leaves(self) -> list[Var]:
        return list(self._leaves.values())


def _record(value, parents, vjp) -> Var:
    tape = parents[0].tape
    requires = False
    for p in parents:
        if p.tape is not tape:
            raise UsageError("operands recorded on different tapes")
        requires = requires or p.requires_grad
    return Var(tape, value, parents, vjp if requires else None, requires)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(param) into every watched Parameter reachable from ``loss``."""
    if not isinstance(loss, Var) or loss.value.size != 1 or loss.value.ndim > 1:
        raise UsageError("backward() needs a scalar output of a recorded tape")
    tape = loss.tape
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.index + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for leaf in tape.leaves():
        if leaf.requires_grad and leaf.grad is not None:
            leaf.param.grad = leaf.param.grad + leaf.grad


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros(p.shape)


def sgd_step(params: Sequence[Parameter], lr: float, clip_norm: float | None = None) -> None:
    """``tensor <- tensor - lr * grad`` for each parameter, then zero the grads.

    With ``clip_norm`` set, the joint gradient norm over ``params`` is capped first.
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    factor = 1.0
    if clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
        if norm > clip_norm:
            factor = clip_norm / norm
    for p in params:
        step = lr * p.grad if factor == 1.0 else (lr * factor) * p.grad
        p.tensor = Tensor(p.tensor.data - step)
        p.grad = np.zeros(p.shape)


# ---------------------------------------------------------------- primitives


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _record(a.value.T, (a,), lambda g: (g.T,))


def _same_shape(a: Var, b: Var, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes differ {a.value.shape} vs {b.value.shape}")


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def one_minus(a: Var) -> Var:
    return _record(1.0 - a.value, (a,), lambda g: (-g,))


def add_bias(a: Var, b: Var) -> Var:
    """Add a vector ``b`` to every row of ``a`` (or to a vector ``a`` of equal length)."""
    if b.value.ndim != 1 or a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"add_bias shape mismatch {a.value.shape} + {b.value.shape}")
    if a.value.ndim == 1:
        return _record(a.value + b.value, (a, b), lambda g: (g, g))
    return _record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))


def mul_rows(a: Var, s: Var) -> Var:
    """Scale row ``i`` of ``a`` by ``s[i]``."""
    if s.value.ndim != 1 or a.value.ndim != 2 or a.value.shape[0] != s.value.shape[0]:
        raise ShapeError(f"mul_rows shape mismatch {a.value.shape} by {s.value.shape}")
    av, sv = a.value, s.value
    return _record(av * sv[:, None], (a, s), lambda g: (g * sv[:, None], (g * av).sum(axis=1)))


def sigmoid(a: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def affine(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` with ``b`` added to every row."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or b.value.shape != (wv.shape[1],):
        raise ShapeError(f"affine shape mismatch {xv.shape} x {wv.shape} + {b.value.shape}")
    return _record(xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def gru_cell(x: Var, h: Var, wx: Var, wh: Var, bx: Var, bh: Var) -> Var:
    """Gated recurrent update for a batch of rows, as a single tape node.

    Gate blocks of ``wx``/``wh`` are ordered update ``z``, reset ``r``,
    candidate ``n``::

        z = sigmoid(x wx_z + bx_z + h wh_z + bh_z)
        r = sigmoid(x wx_r + bx_r + h wh_r + bh_r)
        n = tanh(x wx_n + bx_n + r * (h wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """
    xv, hv, wxv, whv = x.value, h.value, wx.value, wh.value
    d = hv.shape[1]
    if wxv.shape != (xv.shape[1], 3 * d) or whv.shape != (d, 3 * d) or xv.shape[0] != hv.shape[0]:
        raise ShapeError(f"gru_cell shape mismatch x{xv.shape} h{hv.shape} wx{wxv.shape} wh{whv.shape}")
    gx = xv @ wxv + bx.value
    gh = hv @ whv + bh.value
    z = 0.5 * (1.0 + np.tanh(0.5 * (gx[:, :d] + gh[:, :d])))
    r = 0.5 * (1.0 + np.tanh(0.5 * (gx[:, d : 2 * d] + gh[:, d : 2 * d])))
    hn = gh[:, 2 * d :]
    n = np.tanh(gx[:, 2 * d :] + r * hn)
    out = n + z * (hv - n)

    def vjp(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (hv - n) * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        dgx = np.concatenate([dz, dr, dn], axis=1)
        dgh = np.concatenate([dz, dr, dn * r], axis=1)
        return (
            dgx @ wxv.T,
            g * z + dgh @ whv.T,
            xv.T @ dgx,
            hv.T @ dgh,
            dgx.sum(axis=0),
            dgh.sum(axis=0),
        )

    return _record(out, (x, h, wx, wh, bx, bh), vjp)


def concat_cols(parts: Sequence[Var]) -> Var:
    widths = [p.value.shape[-1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=-1)
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(value, tuple(parts), vjp)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    width = a.value.shape[-1]

    def vjp(g):
        full = np.zeros(a.value.shape)
        full[..., start:stop] = g
        return (full,)

    if not 0 <= start < stop <= width:
        raise ShapeError(f"bad column slice [{start}:{stop}] of width {width}")
    return _record(a.value[..., start:stop], (a,), vjp)


def stack_rows(parts: Sequence[Var]) -> Var:
    """Vertically concatenate equal-width matrices."""
    heights = [p.value.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)
    value = np.concatenate([p.value for p in parts], axis=0)

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(value, tuple(parts), vjp)


def gather_rows(table: Var, ids) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise VocabularyError(f"row id outside [0, {rows})")

    def vjp(g):
        out = np.zeros(table.value.shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.value[ids], (table,), vjp)


def take_rows(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros(a.value.shape)
        out[idx] = g
        return (out,)

    return _record(a.value[idx], (a,), vjp)


def merge_rows(a: Var | None, b: Var | None, mask) -> Var:
    """Rows where ``mask`` is true come from ``a`` (in order), the rest from ``b``."""
    mask = np.asarray(mask, dtype=bool)
    src = a if a is not None else b
    width = src.value.shape[1:]
    value = np.empty((mask.shape[0],) + width)
    parents = []
    if a is not None:
        value[mask] = a.value
        parents.append(a)
    if b is not None:
        value[~mask] = b.value
        parents.append(b)

    def vjp(g):
        out = []
        if a is not None:
            out.append(g[mask])
        if b is not None:
            out.append(g[~mask])
        return tuple(out)

    return _record(value, tuple(parents), vjp)


def column(a: Var, j: int) -> Var:
    """Column ``j`` of a matrix as a vector (or element ``j`` of a vector)."""

    def vjp(g):
        out = np.zeros(a.value.shape)
        out[..., j] = g
        return (out,)

    return _record(a.value[..., j].copy(), (a,), vjp)


def softmax_np(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temperature(logits: Var, tau: float) -> Var:
    """``exp(l_i / tau) / sum_j exp(l_j / tau)`` along the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    out = softmax_np(logits.value, tau)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / tau,)

    return _record(out, (logits,), vjp)


def cross_entropy(logits: Var, labels) -> Var:
    """Negative log-softmax at ``labels``: a scalar for 1-D logits, per-row losses for 2-D."""
    lv = logits.value
    k = lv.shape[-1]
    single = lv.ndim == 1
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    mat = lv[None, :] if single else lv
    if lab.shape[0] != mat.shape[0]:
        raise ShapeError("one label per row required")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise IndexError(f"label outside [0, {k})")
    shifted = mat - mat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(mat.shape[0])
    losses = logz - shifted[rows, lab]
    probs = np.exp(shifted - logz[:, None])

    def vjp(g):
        d = probs.copy()
        d[rows, lab] -= 1.0
        d = d * np.atleast_1d(g)[:, None]
        return (d[0] if single else d,)

    value = np.asarray(losses[0]) if single else losses
    return _record(value, (logits,), vjp)


def log_clamped(a: Var, floor: float = 1e-12) -> Var:
    """Elementwise ``log(max(a, floor))``; zero gradient where clamped."""
    av = a.value
    live = av > floor
    safe = np.where(live, av, floor)
    return _record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def total(a: Var) -> Var:
    shape = a.value.shape
    return _record(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Var) -> Var:
    shape = a.value.shape
    n = a.value.size
    return _record(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def masked_mean(a: Var, mask) -> Var:
    """Mean of ``a`` over positions where ``mask`` is 1."""
    w = np.asarray(mask, dtype=np.float64)
    if w.shape != a.value.shape:
        raise ShapeError("mask must match the operand shape")
    count = w.sum()
    if count <= 0:
        raise ShapeError("masked_mean over an empty mask")
    w = w / count
    return _record(np.asarray((a.value * w).sum()), (a,), lambda g: (float(g) * w,))
