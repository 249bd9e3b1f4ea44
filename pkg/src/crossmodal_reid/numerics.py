"""Dense float64 tensors, a reverse-mode tape and a finite-difference checker.

Every primitive stores a closure mapping the upstream gradient to one
gradient per parent.  ``Tape`` orders the graph reachable from an output
topologically; ``Tensor.backward`` walks it in reverse exactly once.

Only the broadcasting that the losses and encoder need is supported: numpy
rules for the elementwise binary ops, with gradients summed back onto the
operand shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, DomainError, NumericError, ParameterError

COSINE_EPS = 1e-12


def _as_array(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(data):
    # the sum is non-finite iff some element is, barring overflow near 1e308
    if not math.isfinite(data.sum()):
        raise NumericError("operation produced a non-finite value")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- structural ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self, seed=None):
        Tape(self).backward(seed)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, check=False):
    # only ops that can turn finite inputs into inf/nan ask for the check
    if check:
        _check_finite(data)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


class Tape:
    """Topologically ordered record of the graph feeding ``output``.

    ``nodes`` lists every differentiable tensor reachable from the output with
    each node after all of its inputs.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._order(output)

    @staticmethod
    def _order(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, seed=None):
        out = self.output
        if not out.requires_grad:
            return
        if seed is None:
            if out.data.size != 1:
                raise DimensionError("backward without a seed needs a scalar output")
            seed = np.ones_like(out.data)
        grads = {id(out): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), backward, check=True)


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    exponent = float(exponent)
    ad = a.data
    out = ad**exponent
    return _node(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),), check=True)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), check=True)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), check=True)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),), check=True)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_nonneg(x):
    """``[x]_+``.  Returns a float for scalar input, a Tensor otherwise."""
    if isinstance(x, Tensor):
        return relu(x)
    x = float(x)
    if not np.isfinite(x):
        raise NumericError("clamp_nonneg of a non-finite value")
    return x if x > 0 else 0.0


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a):
    """Swap the two trailing axes (batched matrix transpose)."""
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take(a, index):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.asarray(a.data[index]), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def matmul(a, b):
    """``a @ b`` with numpy batch semantics; 1-D operands are not supported."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., n) @ (n, k): fold the batch axes into one GEMM
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _node(out, (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward)


def affine(x, w, b=None, activation=None):
    """``x @ w + b`` over the last axis, optionally followed by ``tanh``.

    One tape node instead of three; ``w`` is ``(n, k)`` and ``b`` is ``(k,)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine shape mismatch {x.shape} @ {w.shape}")
    if activation not in (None, "tanh"):
        raise ParameterError(f"unknown activation {activation!r}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    pre = flat @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias of shape {b.shape} for {w.shape[1]} outputs")
        pre += b.data
        parents = (x, w, b)
    out = np.tanh(pre) if activation == "tanh" else pre
    shape = xd.shape[:-1] + (wd.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        if activation == "tanh":
            g2 = g2 * (1.0 - out * out)
        grads = ((g2 @ wd.T).reshape(xd.shape), flat.T @ g2)
        return grads + (g2.sum(axis=0),) if b is not None else grads

    return _node(out.reshape(shape), parents, backward)


# -- composite primitives with hand-derived gradients ----------------------


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis``.

    Accepts a Tensor (differentiable) or an array-like (returns ndarray).
    """
    if not isinstance(logits, Tensor):
        x = np.asarray(logits, dtype=np.float64)
        if x.size == 0:
            raise DimensionError("softmax of an empty vector")
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)
    x = logits.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (logits,), backward, check=True)


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (logits,), backward, check=True)


def cosine(u, v, eps=COSINE_EPS):
    """Row-wise cosine similarity along the last axis.

    ``u . v / (|u| |v| + eps)``, clipped to [-1, 1].  The clip only trims
    rounding excess so its gradient is passed through unchanged.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine of vectors with lengths {u.shape[-1]} and {v.shape[-1]}")
    ud, vd = u.data, v.data
    dot = (ud * vd).sum(-1)
    nu = np.sqrt((ud * ud).sum(-1))
    nv = np.sqrt((vd * vd).sum(-1))
    denom = nu * nv + eps
    out = np.clip(dot / denom, -1.0, 1.0)

    def backward(g):
        gd = (g / denom)[..., None]
        k = (g * dot / (denom * denom))[..., None]
        unit_u = ud / np.where(nu > 0, nu, 1.0)[..., None]
        unit_v = vd / np.where(nv > 0, nv, 1.0)[..., None]
        gu = gd * vd - k * nv[..., None] * unit_u
        gv = gd * ud - k * nu[..., None] * unit_v
        return _unbroadcast(gu, ud.shape), _unbroadcast(gv, vd.shape)

    return _node(out, (u, v), backward, check=True)


def cosine_sim(u, v):
    """Cosine similarity of two rank-1 vectors as a float."""
    u, v = _as_array(u), _as_array(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError("cosine_sim expects rank-1 vectors")
    if u.shape != v.shape or u.size == 0:
        raise DimensionError(f"cosine_sim of vectors with lengths {u.size} and {v.size}")
    return float(cosine(u, v).data)


def scalar_cosine(a, b, eps=COSINE_EPS):
    """Elementwise one-dimensional cosine ``ab / (|a||b| + eps)``.

    Equals the sign agreement of ``a`` and ``b`` away from zero and decays to
    0 when either factor vanishes.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    prod = ad * bd
    denom = np.abs(prod) + eps
    out = prod / denom

    def backward(g):
        # d/da [ab / (|a||b| + eps)] = b * eps / (|a||b| + eps)^2
        scale = g * eps / (denom * denom)
        return _unbroadcast(scale * bd, ad.shape), _unbroadcast(scale * ad, bd.shape)

    return _node(out, (a, b), backward, check=True)


def gem(x, p):
    """Generalized mean over the last axis, ``mean(x ** p) ** (1 / p)``.

    ``p`` may be a Tensor, in which case it receives a gradient.
    """
    x = as_tensor(x)
    p = as_tensor(p)
    pv = float(p.data)
    if pv < 1.0:
        raise ParameterError(f"GeM exponent must be >= 1, got {pv}")
    xd = x.data
    if np.any(xd < 0):
        raise DomainError("GeM input must be nonnegative")
    n = xd.shape[-1]
    positive_x = xd > 0
    safe_x = np.where(positive_x, xd, 1.0)
    xp = np.where(positive_x, safe_x**pv, 0.0)
    m = xp.mean(-1)
    positive = m > 0
    safe_m = np.where(positive, m, 1.0)
    out = np.where(positive, safe_m ** (1.0 / pv), 0.0)

    def backward(g):
        # dy/dx_i = y x_i^(p-1) / (n m); zero where the whole slice is zero
        safe_out = np.where(positive, out, 1.0)
        coef = np.where(positive, g * safe_out / (n * safe_m), 0.0)
        if pv == 1.0:
            # plain mean: differentiable everywhere, including all-zero slices
            gx = np.broadcast_to((np.asarray(g) / n)[..., None], xd.shape).copy()
        else:
            gx = coef[..., None] * (xp / safe_x)
        xlogx = (xp * np.log(safe_x)).mean(-1)
        dy_dp = np.where(positive, out * (-np.log(safe_m) / pv**2 + xlogx / (pv * safe_m)), 0.0)
        gp = np.sum(g * dy_dp)
        return gx, np.asarray(gp).reshape(p.shape)

    return _node(out, (x, p), backward, check=True)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of comparing tape gradients against central differences."""

    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    rel_error: dict = field(default_factory=dict)
    max_rel_error: float = 0.0
    tol: float = 1e-4
    worst: str | None = None

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _scalar_value(out):
    value = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise NumericError("function value is not finite")
    return value


def grad_check(f, x, h=1e-5, tol=1e-4, grad_fn=None):
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``x`` is a Tensor, an array, or a dict ``name -> Tensor``; dict entries
    are perturbed in place and restored.  ``grad_fn`` replaces the tape
    gradient with a caller-supplied one (used to test the checker itself).
    """
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")
    if isinstance(x, dict):
        params = {k: as_tensor(v) for k, v in x.items()}
        call = lambda: f(params)  # noqa: E731
    else:
        params = {"x": x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))}
        call = lambda: f(params["x"])  # noqa: E731

    for t in params.values():
        # numpy scalars (e.g. 0-d arithmetic results) would be perturbed through a copy
        t.data = np.array(t.data, dtype=np.float64)
        t.requires_grad = True
        t.grad = None
    out = call()
    _scalar_value(out)
    if grad_fn is not None:
        analytic = {k: np.asarray(v, dtype=np.float64) for k, v in grad_fn(params).items()}
    else:
        as_tensor(out).backward()
        analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}

    report = GradReport(tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar_value(call())
            flat[i] = orig - h
            fm = _scalar_value(call())
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        num = num.reshape(t.shape)
        err = relative_error(analytic[name], num)
        report.analytic[name] = analytic[name]
        report.numeric[name] = num
        report.rel_error[name] = err
        worst = float(err.max()) if err.size else 0.0
        if report.worst is None or worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst = name
    return report
