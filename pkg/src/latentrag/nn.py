"""Layer building blocks on top of :mod:`latentrag.tensor`.

Each layer has two code paths over the same parameters:

* ``__call__`` builds an autodiff graph on batched ``(B, T, D)`` tensors
  (BLAS matmuls, used for training).
* ``infer`` works on plain numpy rows and uses ``np.einsum`` so that every
  output row depends only on its own input row. That makes incremental
  (KV-cached) inference bit-identical to recomputing from scratch.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
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
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{k}": v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = f"{prefix}{name}"
            if key not in state:
                raise KeyError(f"missing parameter {key}")
            value = np.asarray(state[key], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise T.ShapeError(f"{key}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def state_hash(self) -> str:
        """sha256 over the serialized parameters."""
        return hashlib.sha256(T.write_archive_bytes(self.state_dict())).hexdigest()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        self.weight = _normal(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def infer(self, x: np.ndarray) -> np.ndarray:
        y = np.einsum("...i,io->...o", x, self.weight.data)
        return y + self.bias.data if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)

    def infer(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * (1.0 / np.sqrt(var + self.eps)) * self.weight.data + self.bias.data


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(T._GELU_C * (x + 0.044715 * x ** 3)))


class FeedForward(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dropout: float = 0.0):
        self.up = Linear(d_in, d_hidden, rng)
        self.down = Linear(d_hidden, d_out, rng)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.up(x))
        return T.dropout(self.down(h), self.dropout, self.rng, self.training)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return self.down.infer(gelu_np(self.up.infer(x)))


class MultiHeadAttention(Module):
    """Multi-head self-attention; causal or bidirectional."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, causal: bool,
                 dropout: float = 0.0):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.causal = causal
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng, std=1.0 / math.sqrt(2 * d_model))
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """``x`` is (B, T, D); ``key_mask`` (B, T) marks real (non-pad) positions."""
        b, t, d = x.shape
        h, dh = self.n_heads, self.d_head
        qkv = self.qkv(x).reshape(b, t, 3, h, dh)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        mask = np.ones((b, 1, t, t), dtype=bool)
        if self.causal:
            mask = mask & np.tril(np.ones((t, t), dtype=bool))[None, None]
        if key_mask is not None:
            mask = mask & np.asarray(key_mask, dtype=bool)[:, None, None, :]
        attn = T.softmax(scores, mask=mask)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return T.dropout(self.out(ctx), self.dropout, self.rng, self.training)

    # -- numpy inference ------------------------------------------------
    def project_qkv(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows (L, D) -> per-head q, k, v each (H, L, dh)."""
        qkv = self.qkv.infer(x).reshape(x.shape[0], 3, self.n_heads, self.d_head)
        qkv = np.ascontiguousarray(qkv.transpose(1, 2, 0, 3))
        return qkv[0], qkv[1], qkv[2]

    def attend_rows(self, q: np.ndarray, keys: np.ndarray, values: np.ndarray, positions) -> np.ndarray:
        """Attend each query row to keys[: pos + 1] (causal) or all keys.

        Rows are handled one at a time so a row's result never depends on
        how many other rows share the call.
        """
        scale = 1.0 / math.sqrt(self.d_head)
        out = np.empty((q.shape[1], self.n_heads * self.d_head))
        for i, pos in enumerate(positions):
            end = pos + 1 if self.causal else keys.shape[1]
            s = np.einsum("hd,hkd->hk", q[:, i], keys[:, :end]) * scale
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            p = e / e.sum(axis=-1, keepdims=True)
            out[i] = np.einsum("hk,hkd->hd", p, values[:, :end]).reshape(-1)
        return out


class TransformerBlock(Module):
    """Pre-LN block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator,
                 causal: bool, dropout: float = 0.0):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, causal, dropout)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, d_model, rng, dropout)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.ffn(self.ln2(x))

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Whole-sequence numpy forward for rows (L, D), no cache."""
        q, k, v = self.attn.project_qkv(self.ln1.infer(x))
        x = x + self.attn.out.infer(self.attn.attend_rows(q, k, v, range(x.shape[0])))
        return x + self.ffn.infer(self.ln2.infer(x))


class Projector(Module):
    """Bidirectional self-attention layer followed by a position-wise FFN.

    Maps a block of rows (n, d_in) to (n, d_out); the sequence length is
    preserved. Shared structure for the retriever projector and the two
    latent-decoding projectors.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, n_heads: int = 4,
                 d_hidden: int | None = None):
        self.ln_in = LayerNorm(d_in)
        self.attn = MultiHeadAttention(d_in, n_heads, rng, causal=False)
        self.ln_mid = LayerNorm(d_in)
        self.ffn = FeedForward(d_in, d_hidden or 2 * d_in, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        """``x`` is (B, n, d_in) -> (B, n, d_out)."""
        if x.ndim == 2:
            return self(x.reshape(1, *x.shape)).reshape(x.shape[0], -1)
        h = x + self.attn(self.ln_in(x))
        return self.ffn(self.ln_mid(h))

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Rows (n, d_in) -> (n, d_out)."""
        ln = self.ln_in.infer(x)
        q, k, v = self.attn.project_qkv(ln)
        ctx = self.attn.attend_rows(q, k, v, range(x.shape[0]))
        h = x + self.attn.out.infer(ctx)
        return self.ffn.infer(self.ln_mid.infer(h))
