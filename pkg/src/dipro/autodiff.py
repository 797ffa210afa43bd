"""Dense float64 tensors with reverse-mode differentiation.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output adjoint to parent adjoints.  :func:`backward` orders the
graph reachable from a scalar loss topologically and replays the closures in
reverse, visiting every node once.  Leaf tensors with ``requires_grad`` sum
incoming adjoints into ``.grad`` so repeated backward calls accumulate.

Storage is a C-ordered ``numpy.ndarray``; ``Tensor.values`` exposes it as the
flat row-major vector.  Only first-order derivatives are supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from dipro.errors import ContractError, DimensionError, LabelError, NumericError

_grad_enabled = True

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents (frozen forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "flags")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name
        self.flags = None

    # --- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # --- operators ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.flags = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- graph ----------------------------------------------------------------
def graph_of(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = graph_of(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg


# --- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so finite differences agree)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    a = as_tensor(a)
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# --- shape ops ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product.

    ``b`` 2-D: ``a`` may carry any leading batch dims (shared right factor).
    Otherwise both operands must have equal ndim and equal batch dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim >= 1:
        k, n = b.shape
        if a.shape[-1] != k:
            raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

        return _make(a.data @ b.data, (a, b), bw)
    if a.ndim == b.ndim and a.ndim >= 3 and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]:
        def bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
            return ga, gb

        return _make(np.matmul(a.data, b.data), (a, b), bw)
    raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _make(out.copy() if advanced else out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat along axis {axis}: shapes {ts[0].shape} and {t.shape} disagree")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# --- normalizations -------------------------------------------------------
def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis; ``-inf`` logits get exactly zero weight.

    A row whose logits are all ``-inf`` yields an all-zero row and is listed
    in ``out.flags["empty_rows"]`` (boolean array over the leading axes).
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    m = x.data.max(axis=-1, keepdims=True)
    empty = np.isneginf(m)
    if empty.any():
        m = np.where(empty, 0.0, m)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    res = _make(out, (x,), bw)
    if empty.any():
        res.flags = {"empty_rows": empty[..., 0]}
    return res


def layer_norm(x, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm needs a non-empty last dimension, got shape {x.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
    for p in parents[1:]:
        if p.shape != (d,):
            raise DimensionError(f"layer_norm affine shape {p.shape} does not match last dim {d}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


# --- similarities and losses ---------------------------------------------
def cosine_similarity(u, v, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity along the last axis; 1-D inputs give a scalar."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    dot = (u.data * v.data).sum(axis=-1)
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    prod = nu * nv
    clamped = prod <= eps
    den = np.where(clamped, eps, prod)
    out = dot / den

    def bw(g):
        ge = (g / den)[..., None]
        o = out[..., None]
        safe_nu = np.where(clamped, 1.0, nu)[..., None]
        safe_nv = np.where(clamped, 1.0, nv)[..., None]
        c = clamped[..., None]
        gu = ge * (v.data - np.where(c, 0.0, o * prod[..., None] * u.data / safe_nu**2))
        gv = ge * (u.data - np.where(c, 0.0, o * prod[..., None] * v.data / safe_nv**2))
        return gu, gv

    return _make(np.asarray(out), (u, v), bw)


def cross_entropy(logits, target, weights=None) -> Tensor:
    """Negative log-likelihood of integer classes under softmax(logits).

    ``logits`` has shape (..., C) and ``target`` the leading shape.  Without
    ``weights`` the result is the mean over all slots; with ``weights`` it is
    ``sum(weights * nll)``, and slots of weight zero are never range-checked.
    """
    logits = as_tensor(logits)
    c = logits.shape[-1] if logits.ndim else 0
    if c < 2:
        raise ContractError(f"cross_entropy needs at least 2 classes, got logits shape {logits.shape}")
    target = np.asarray(target)
    lead = logits.shape[:-1]
    if target.shape != lead:
        raise DimensionError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
    if weights is None:
        w = np.full(lead, 1.0 / max(1, int(np.prod(lead))))
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), lead)
    active = w != 0
    if not np.issubdtype(target.dtype, np.integer):
        if np.any(active & (target != np.round(target))):
            raise LabelError("cross_entropy targets must be integer class indices")
    tgt = np.where(active, target, 0).astype(np.int64)
    if np.any((tgt < 0) | (tgt >= c)):
        raise LabelError(f"cross_entropy target outside [0, {c})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum()

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return (g * w[..., None] * (p - onehot),)

    return _make(np.asarray(loss), (logits,), bw)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = max(1, diff.size)

    def bw(g):
        gd = g * (2.0 / n) * diff
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _make(np.asarray((diff * diff).sum() / n), (a, b), bw)


# --- gradient checking ----------------------------------------------------
def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    skip: dict[int, np.ndarray] | None = None,
) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over all coordinates.

    ``fn`` rebuilds the scalar loss from the current parameter values.
    ``skip`` maps ``id(param)`` to a boolean mask of coordinates to leave
    unperturbed.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            mask = None if skip is None else skip.get(id(p))
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                if mask is not None and mask.reshape(-1)[i]:
                    continue
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn().data)
                flat[i] = orig - step
                fm = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: perturbed loss is not finite")
                num = (fp - fm) / (2.0 * step)
                worst = max(worst, abs(a.reshape(-1)[i] - num) / max(1.0, abs(num)))
    return worst
