"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op records a closure that maps the
upstream gradient to gradients for its inputs, and :meth:`Tensor.backward`
replays those closures in reverse topological order.  ``numpy`` arrays hold
the values; float32 is the default dtype, float64 is used on verification
paths (finite-difference checks need the extra precision).

Broadcasting is restricted to two cases so backward rules stay auditable:
exact shape match, or one operand's shape being a suffix of the other's
(i.e. broadcasting over leading batch dimensions only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "GELU_COEFF",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gelu",
    "tanh",
    "abs_",
    "square",
    "sum_",
    "mean",
    "layer_norm",
    "softmax_rows",
    "mse",
    "grad_check",
    "GradCheckReport",
]

# cubic coefficient of the tanh approximation to GELU
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-6


class Tensor:
    """n-dimensional array node in a differentiable computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
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
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a1, a2):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode -----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        The graph is consumed afterwards; calling ``backward`` a second time
        without rebuilding the graph raises :class:`UsageError`.
        """
        if self._consumed:
            raise UsageError("graph already consumed by a previous backward(); re-run the forward pass")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")

        topo = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._consumed = True
                node.grad = None


def _topological_order(root):
    """Nodes requiring grad, each listed after all of its parents (iterative post-order DFS)."""
    order = []
    done = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            if id(node) not in done:
                done.add(id(node))
                order.append(node)
            continue
        if id(node) in done:
            continue
        if node._consumed:
            raise UsageError("graph already consumed by a previous backward(); re-run the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in done:
                stack.append((p, False))
    return order


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _node(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(
        f"{op}: cannot broadcast shapes {a_shape} and {b_shape} "
        "(only exact match or leading batch dims are allowed)"
    )


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise -------------------------------------------------------------
def add(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(x, c):
    """Multiply by a python scalar ``c``."""
    x = _wrap(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _node(x.data * c, (x,), backward, "scale")


def _gelu_numpy(xd, with_grad):
    # in-place passes; these arrays are the largest activations in the model
    x2 = xd * xd
    u = x2 * (_SQRT_2_OVER_PI * GELU_COEFF)
    u += _SQRT_2_OVER_PI
    u *= xd
    t = np.tanh(u, out=u)
    half = xd * 0.5
    out = t + 1.0
    out *= half
    if not with_grad:
        return out, None
    # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) sqrt(2/pi) (1 + 3 c x^2)
    deriv = t * t
    np.subtract(1.0, deriv, out=deriv)
    deriv *= half
    x2 *= 3.0 * GELU_COEFF * _SQRT_2_OVER_PI
    x2 += _SQRT_2_OVER_PI
    deriv *= x2
    deriv += 0.5
    deriv += 0.5 * t
    return out, deriv


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _wrap(x)
    out, deriv = _gelu_numpy(x.data, x.requires_grad)

    def backward(g):
        return (g * deriv,)

    return _node(out, (x,), backward, "gelu")


def tanh(x):
    x = _wrap(x)
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _node(t, (x,), backward, "tanh")


def abs_(x):
    x = _wrap(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return _node(np.abs(x.data), (x,), backward, "abs")


def square(x):
    x = _wrap(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _node(x.data * x.data, (x,), backward, "square")


# -- linear algebra and shape ----------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading dims) or has exactly
    the same leading dims as ``a``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    shared = b.ndim == 2
    k, n = b.shape[-2], b.shape[-1]
    if shared:
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(x.data, axes), (x,), backward, "transpose")


def reshape(x, shape):
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), backward, "reshape")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward, "concat")


def getitem(x, idx):
    x = _wrap(x)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (x,), backward, "getitem")


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- fused layers -------------------------------------------------------------
def layer_norm(x, gain=None, bias=None, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    x = _wrap(x)
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise DimensionError(f"layer_norm: last dim must be >= 2, got shape {x.shape}")
    for p, name in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {name} shape {p.shape} does not match last dim of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxhat = g * gain.data if gain is not None else g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append(_reduce_to(g * xhat, gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(_reduce_to(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _node(out, parents, backward, "layer_norm")


def softmax_rows(x):
    """Softmax over the last axis, computed after subtracting the row max."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def mse(pred, target):
    """Mean over every element of the squared difference; ``target`` is a constant."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    if target.requires_grad:
        raise UsageError("mse: target must not require grad; detach it first")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        return (g * (2.0 / n) * diff, None)

    return _node(np.asarray((diff * diff).sum() / n, dtype=diff.dtype), (pred, target), backward, "mse")


# -- verification ---------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def grad_check(f, inputs, tol=1e-4, h=1e-5, max_coords=64, floor=1e-6, seed=0, names=None):
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``f`` receives a list of float64 tensors (one per entry of ``inputs``) and
    must return a scalar tensor.  Tensors with more than ``max_coords``
    entries are checked on a random subset of ``max_coords`` coordinates.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    names = list(names) if names is not None else [f"input{i}" for i in range(len(arrays))]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = f(leaves)
    loss.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(values):
        return float(f([Tensor(v) for v in values]).data)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = evaluate(arrays)
            flat[c] = orig - h
            fm = evaluate(arrays)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[k].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            if err > tol:
                report.failures.append((names[k], int(c), float(a), float(numeric), float(err)))
        report.per_input.append((names[k], float(worst), int(len(coords))))
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
