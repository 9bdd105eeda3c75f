"""Small neural-net building blocks shared by the backbone and classifier.

Modules are plain objects holding named parameter tensors; `params()`
returns a flat name -> Tensor dict so optimizers and checkpoints can treat
every model uniformly. Initialization draws from an Rng split per layer, so
a model is a pure function of its seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rng import Rng


def _init(rng: Rng, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(shape, scale), requires_grad=True)


class Linear:
    def __init__(self, rng: Rng, d_in: int, d_out: int, zero: bool = False):
        if zero:
            self.w = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            self.w = _init(rng.split("w"), (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.matmul(x, self.w) + self.b

    def params(self) -> dict:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    """Layer normalization over the last axis with learned affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, axis=-1, eps=self.eps) * self.g + self.b

    def params(self) -> dict:
        return {"g": self.g, "b": self.b}


class MultiheadAttention:
    """Self- or cross-attention over the second-to-last axis.

    x: (..., T, dim); kv (optional): (..., Tk, kv_dim). Leading axes are
    batch. An additive mask, already broadcast to (..., heads, T, Tk), may
    be supplied as a plain array.
    """

    def __init__(self, rng: Rng, dim: int, heads: int, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.dim, self.heads, self.dh = dim, heads, dim // heads
        self.wq = Linear(rng.split("q"), dim, dim)
        self.wk = Linear(rng.split("k"), kv_dim, dim)
        self.wv = Linear(rng.split("v"), kv_dim, dim)
        self.wo = Linear(rng.split("o"), dim, dim)

    def _split_heads(self, t: Tensor) -> Tensor:
        *lead, T, _ = t.shape
        t = nm.reshape(t, (*lead, T, self.heads, self.dh))
        n = t.ndim
        order = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        return nm.transpose(t, order)

    def __call__(self, x: Tensor, kv: Tensor | None = None, additive_mask=None) -> Tensor:
        kv = x if kv is None else kv
        q = self._split_heads(self.wq(x))
        k = self._split_heads(self.wk(kv))
        v = self._split_heads(self.wv(kv))
        out = nm.attention(q, k, v, additive_mask=additive_mask)
        n = out.ndim
        order = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        out = nm.transpose(out, order)
        *lead, T, _, _ = out.shape
        out = nm.reshape(out, (*lead, T, self.dim))
        return self.wo(out)

    def params(self) -> dict:
        return {
            f"{blk}.{k}": v
            for blk, mod in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo))
            for k, v in mod.params().items()
        }


class FeedForward:
    def __init__(self, rng: Rng, dim: int, hidden: int):
        self.fc1 = Linear(rng.split("fc1"), dim, hidden)
        self.fc2 = Linear(rng.split("fc2"), hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.gelu(self.fc1(x)))

    def params(self) -> dict:
        return {f"fc1.{k}": v for k, v in self.fc1.params().items()} | {
            f"fc2.{k}": v for k, v in self.fc2.params().items()
        }


class TransformerBlock:
    """Pre-norm encoder block: x + attn(ln(x)); x + ff(ln(x))."""

    def __init__(self, rng: Rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadAttention(rng.split("attn"), dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng.split("ff"), dim, mlp_ratio * dim)

    def __call__(self, x: Tensor, additive_mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), additive_mask=additive_mask)
        return x + self.ff(self.ln2(x))

    def params(self) -> dict:
        out = {}
        for name, mod in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2), ("ff", self.ff)):
            out.update({f"{name}.{k}": v for k, v in mod.params().items()})
        return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution on (..., H, W, C) via shifted slices and
    one matmul; w is (9*C, C_out)."""
    *_, h_ext, w_ext, _ = x.shape
    n = x.ndim
    pw = [(0, 0)] * (n - 3) + [(1, 1), (1, 1), (0, 0)]
    p = nm.pad(x, pw)
    shifts = []
    for di in range(3):
        for dj in range(3):
            key = (slice(None),) * (n - 3) + (
                slice(di, di + h_ext),
                slice(dj, dj + w_ext),
                slice(None),
            )
            shifts.append(nm.slc(p, key))
    stacked = nm.concat(shifts, axis=-1)
    return nm.matmul(stacked, w) + b


def conv_init(rng: Rng, c_in: int, c_out: int) -> tuple[Tensor, Tensor]:
    w = _init(rng, (9 * c_in, c_out), 1.0 / math.sqrt(9 * c_in))
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return w, b


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class AdamW:
    """Adam with decoupled weight decay. Iterates parameters in sorted name
    order so updates are reproducible."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            new = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                new = new - lr * self.weight_decay * p.data
            p.assign_(new)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def timestep_embedding(t: int, dim: int) -> Tensor:
    """Sinusoidal code for a single diffusion step index."""
    return nm.reshape(nm.sinusoidal_encoding(np.array([t]), dim), (dim,))
