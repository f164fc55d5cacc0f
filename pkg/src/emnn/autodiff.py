"""Dense tensors with reverse-mode differentiation.

Define-by-run engine: each primitive computes its value eagerly and, while
a tape is active, records a node whose backward rule maps the output
gradient onto the parents. Tapes are rebuilt for every forward pass, so
shapes are free to change between meshes (no padding, no static graph).

Every forward result is checked for NaN and fails fast; shape mismatches
raise :class:`ShapeError` naming the primitive and the offending shapes.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64

_LOCAL = threading.local()


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class GradientError(RuntimeError):
    """Backward-pass misuse (consumed tape, non-scalar loss, ...)."""


def _tape_stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


class Tensor:
    """Dense array participating in the differentiation graph.

    ``grad`` is populated by :func:`backward`; for recorded tensors it has
    the same shape as ``data``. Constants (``requires_grad=False`` and not
    produced by a recorded op) carry no tape node.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad=False, dtype=None, name=None):
    """Wrap ``data`` in a :class:`Tensor` (constant unless requires_grad)."""
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, name=None, dtype=None):
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


class Tape:
    """Ordered record of primitive applications.

    Recording order is the topological order; :meth:`backward` traverses it
    in exact reverse, accumulating gradients additively at fan-out points.
    A tape can be consumed by backward() once; ``reset()`` clears it.
    """

    def __init__(self):
        self._nodes = []
        self._produced = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()
        return False

    @staticmethod
    def current():
        stack = _tape_stack()
        return stack[-1] if stack else None

    def __len__(self):
        return len(self._nodes)

    def is_tracked(self, t):
        return t.requires_grad or id(t) in self._produced

    def _append(self, out, parents, backward_fn):
        self._nodes.append((out, parents, backward_fn))
        self._produced.add(id(out))
        out._tape = self

    def reset(self):
        for out, _, _ in self._nodes:
            out._tape = None
        self._nodes.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss):
        """Populate ``grad`` for every tensor reachable from ``loss``.

        Returns a map from each requires_grad leaf tensor to its gradient.
        """
        if self._consumed:
            raise GradientError(
                "backward() was already called on this tape; call reset() first")
        if loss.shape != ():
            raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
        if not self._nodes:
            raise GradientError("tape is empty; nothing was recorded")
        self._consumed = True

        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        tensors = {id(loss): loss}
        for out, parents, backward_fn in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not self.is_tracked(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    tensors[key] = parent

        leaf_grads = {}
        for key, g in grads.items():
            t = tensors[key]
            t.grad = np.asarray(g, dtype=t.dtype)
            if t.requires_grad:
                leaf_grads[t] = t.grad
        return leaf_grads


def backward(loss):
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None:
        raise GradientError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_nan(arr, op):
    if np.isnan(arr).any():
        raise FloatingPointError(f"{op}: NaN produced in forward pass")
    return arr


def _emit(op, data, parents, backward_fn):
    out = Tensor(_check_nan(data, op))
    tape = Tape.current()
    if tape is not None and any(tape.is_tracked(p) for p in parents):
        tape._append(out, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _require_broadcastable(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_broadcastable("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_broadcastable("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_broadcastable("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] \
            or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward_fn(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _emit("matmul", a.data @ b.data, (a, b), backward_fn)


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError(
            "concat: leading dims differ: " + ", ".join(str(t.shape) for t in tensors))
    sizes = [t.shape[-1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=-1),
                 tuple(tensors), backward_fn)


def silu(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("silu", x.data * s, (x,),
                 lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def relu(x):
    x = _as_tensor(x)
    return _emit("relu", np.maximum(x.data, 0.0), (x,),
                 lambda g: (g * (x.data > 0),))


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    g = np.asarray(g)
    if g.ndim != len(shape):  # keepdims=False
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis).astype(x.dtype),))


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return _emit("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis) / count,))


def max(x, axis, keepdims=False):  # noqa: A001
    """Max along ``axis``; the backward routes gradients to the argmax
    entries only (first occurrence on ties)."""
    x = _as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward_fn(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), g, axis=axis)
        return (gx,)

    return _emit("max", out, (x,), backward_fn)


def gather(x, index):
    """Select rows ``x[index]`` along axis 0."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"gather: index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather: index out of range for {x.shape[0]} rows")

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        kernels.scatter_add(gx, index, np.ascontiguousarray(g))
        return (gx,)

    return _emit("gather", x.data[index], (x,), backward_fn)


def _check_segments(op, values, ids, num_segments):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise ShapeError(f"{op}: ids shape {ids.shape} does not match "
                         f"values shape {values.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"{op}: segment id out of range [0, {num_segments})")
    return ids


def segment_sum(values, ids, num_segments):
    """out[s] = sum of values rows with ids == s (zeros for empty segments)."""
    values = _as_tensor(values)
    ids = _check_segments("segment_sum", values, ids, num_segments)
    return _emit("segment_sum", kernels.segment_sum(values.data, ids, num_segments),
                 (values,), lambda g: (g[ids],))


def segment_max(values, ids, num_segments):
    """Elementwise max per segment; gradient flows to argmax entries only."""
    values = _as_tensor(values)
    ids = _check_segments("segment_max", values, ids, num_segments)
    out, arg = kernels.segment_max(values.data, ids, num_segments)

    def backward_fn(g):
        gi = np.zeros_like(values.data).reshape(values.shape[0], -1)
        g2 = np.asarray(g).reshape(out.shape[0], -1)
        arg2 = arg.reshape(out.shape[0], -1)
        seg, col = np.nonzero(arg2 >= 0)
        # each value row belongs to one segment, so targets are unique
        gi[arg2[seg, col], col] = g2[seg, col]
        return (gi.reshape(values.shape),)

    return _emit("segment_max", out, (values,), backward_fn)


def row_norm(x, eps=1e-9):
    """Stabilized L2 norm over axis 1: sqrt(sum(x^2, axis=1) + eps).

    For (m, d) inputs this is the per-row norm; for (m, 3, c) stacks it is
    the per-channel norm of each 3-vector. The epsilon keeps the gradient
    finite at zero rows.
    """
    x = _as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"row_norm: expected 2-D or 3-D input, got {x.shape}")
    out = np.sqrt(np.sum(x.data * x.data, axis=1) + eps)

    def backward_fn(g):
        scale = np.expand_dims(g / out, 1)
        return (x.data * scale,)

    return _emit("row_norm", out, (x,), backward_fn)


def cross_rows(a, b):
    """Rowwise cross product: C[i] = A[i] x B[i] along axis 1.

    Accepts (m, 3) rows or (m, 3, c) channel stacks (crossed per channel).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim not in (2, 3) or a.shape[1] != 3:
        raise ShapeError(f"cross_rows: shapes {a.shape} and {b.shape} must match "
                         "with axis 1 of size 3")
    kw = dict(axisa=1, axisb=1, axisc=1)

    def backward_fn(g):
        return (np.cross(b.data, g, **kw), np.cross(g, a.data, **kw))

    return _emit("cross_rows", np.cross(a.data, b.data, **kw), (a, b), backward_fn)


def reshape(x, shape):
    x = _as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy (fused for numerical stability).

    ``logits``: (batch, classes); ``labels``: int array (batch,).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[np.arange(n), labels])

    def backward_fn(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _emit("cross_entropy", np.asarray(loss), (logits,), backward_fn)


def finite_difference_check(f, x, step=1e-6, sample=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor ``x`` to a scalar tensor and must be deterministic
    and differentiable at ``x`` (exact max ties make the comparison
    unreliable; perturb the input in that case). When ``sample`` is given,
    only that many coordinates (chosen by a seeded rng) are probed.
    """
    if not x.requires_grad:
        raise GradientError("finite_difference_check: x must require gradients")
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    # tensors the loss never consumes have an identically zero gradient
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel()

    flat = x.data.ravel()
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(
            flat.size, size=sample, replace=False))

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x).item()
        flat[i] = orig - step
        f_minus = f(x).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-12)
        if err > worst:
            worst = err
    return worst
