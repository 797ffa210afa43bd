"""Parameter containers and layers built on :mod:`dipro.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from dipro import autodiff as ad
from dipro.autodiff import Tensor
from dipro.errors import ContractError, DimensionError


class Module:
    """Holds parameters (requires_grad tensors) and child modules as attributes.

    Parameter names are dotted attribute paths, discovered in attribute
    insertion order, so two identically constructed modules enumerate their
    parameters identically.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(arr).copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    shape = (fan_in, fan_out) if shape is None else shape
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = glorot(rng, d_in, d_out)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects last dim {self.d_in}, got shape {x.shape}")
        out = ad.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class MLP(Module):
    """Two affine maps with a GELU (and optional dropout) in between."""

    def __init__(
        self,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: np.random.Generator,
        dropout: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
    ):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self.dropout = dropout
        self.dropout_rng = dropout_rng

    @property
    def d_in(self) -> int:
        return self.fc1.d_in

    def __call__(self, x) -> Tensor:
        h = ad.gelu(self.fc1(x))
        h = ad.dropout(h, self.dropout, self.dropout_rng, self.training)
        return self.fc2(h)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = ad.LAYER_NORM_EPS):
        self.gain = ones(d)
        self.bias = zeros(d)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


def attention(q, k, v, bias=None, scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; ``bias`` is added to the logits.

    Returns ``(output, weights)``.  ``bias`` may hold ``-inf`` entries and
    must broadcast against the (..., Lq, Lk) logits.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query dim {q.shape} vs key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    logits = ad.matmul(q, ad.swap_last(k)) * scale
    if bias is not None:
        logits = logits + ad.as_tensor(bias)
    weights = ad.softmax_lastdim(logits)
    return ad.matmul(weights, v), weights


class CrossAttention(Module):
    """Single-head attention with learned query/key/value maps."""

    def __init__(self, d: int, rng: np.random.Generator, d_context: int | None = None):
        d_context = d if d_context is None else d_context
        self.d = d
        self.w_q = glorot(rng, d, d)
        self.w_k = glorot(rng, d_context, d)
        self.w_v = glorot(rng, d_context, d)

    def __call__(self, query, context, bias=None) -> tuple[Tensor, Tensor]:
        q = ad.matmul(query, self.w_q)
        k = ad.matmul(context, self.w_k)
        v = ad.matmul(context, self.w_v)
        return attention(q, k, v, bias=bias)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ContractError(f"model width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.w_q = glorot(rng, d, d)
        self.w_k = glorot(rng, d, d)
        self.w_v = glorot(rng, d, d)
        self.w_o = glorot(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        lead, L = x.shape[:-2], x.shape[-2]
        x = x.reshape(lead + (L, self.heads, self.d // self.heads))
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        lead, L = x.shape[:-2], x.shape[-2]
        q = self._split(ad.matmul(x, self.w_q))
        k = self._split(ad.matmul(x, self.w_k))
        v = self._split(ad.matmul(x, self.w_v))
        out, _ = attention(q, k, v)
        n = len(lead)
        out = ad.transpose(out, tuple(range(n)) + (n + 1, n, n + 2)).reshape(lead + (L, self.d))
        return ad.matmul(out, self.w_o)


class EncoderLayer(Module):
    """Post-norm transformer encoder block: self-attention then feed-forward."""

    def __init__(
        self,
        d: int,
        heads: int,
        d_ff: int,
        rng: np.random.Generator,
        dropout: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
    ):
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff = MLP(d, d_ff, d, rng, dropout, dropout_rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x) -> Tensor:
        h = self.norm1(x + self.attn(x))
        return self.norm2(h + self.ff(h))
