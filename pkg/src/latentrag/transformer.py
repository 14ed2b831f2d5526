"""Decoder-only transformer with KV-cached inference and latent slot blocks."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .ledger import AUTOREGRESSIVE, PARALLEL, ForwardPassLedger
from .nn import LayerNorm, Module, TransformerBlock
from .tensor import Tensor
from .vocab import Vocabulary, slot_id_range


class CapacityError(RuntimeError):
    """The context window would overflow."""


class UsageError(ValueError):
    """An API was called with inputs outside its contract."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_context: int = 256
    m: int = 4
    n: int = 16
    dropout: float = 0.1
    init_std: float = 0.05

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


class KVCache:
    """Per-layer key/value buffers for the processed prefix. Append-only."""

    def __init__(self, n_layers: int, n_heads: int, d_head: int, capacity: int):
        self.capacity = capacity
        self.keys = [np.zeros((n_heads, capacity, d_head)) for _ in range(n_layers)]
        self.values = [np.zeros((n_heads, capacity, d_head)) for _ in range(n_layers)]
        self.length = 0

    def copy(self) -> "KVCache":
        other = KVCache.__new__(KVCache)
        other.capacity = self.capacity
        other.keys = [k.copy() for k in self.keys]
        other.values = [v.copy() for v in self.values]
        other.length = self.length
        return other


class DecoderLM(Module):
    """GPT-style LM with learned absolute positions and tied unembedding."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng(seed + 1)  # dropout stream
        d = config.d_model
        self.tok_emb = T.parameter(rng.normal(0.0, config.init_std, (config.vocab_size, d)))
        self.pos_emb = T.parameter(rng.normal(0.0, config.init_std, (config.max_context, d)))
        self.blocks = [TransformerBlock(d, config.n_heads, config.d_ff, rng, causal=True,
                                        dropout=config.dropout) for _ in range(config.n_layers)]
        for blk in self.blocks:
            blk.attn.rng = self.rng
            blk.ffn.rng = self.rng
        self.ln_f = LayerNorm(d)
        self.out_bias = T.parameter(np.zeros(config.vocab_size))
        thought, query = slot_id_range(config.m, config.n)
        self.slot_ids = frozenset(thought) | frozenset(query)

    # ------------------------------------------------------------------
    # autodiff path (batched, training)

    def embed(self, ids) -> Tensor:
        return T.embedding(self.tok_emb, ids)

    def forward_embeds(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Input embeddings (B, T, D) -> last-layer hidden states (B, T, D)."""
        b, t, _ = x.shape
        if t > self.config.max_context:
            raise CapacityError(f"sequence of {t} exceeds context {self.config.max_context}")
        pos = T.embedding(self.pos_emb, np.broadcast_to(np.arange(t), (b, t)))
        h = T.dropout(x + pos, self.config.dropout, self.rng, self.training)
        for blk in self.blocks:
            h = blk(h, key_mask)
        return self.ln_f(h)

    def forward(self, ids, key_mask: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        return self.forward_embeds(self.embed(ids), key_mask)

    def logits(self, hidden: Tensor) -> Tensor:
        return T.add(T.matmul(hidden, T.transpose(self.tok_emb)), self.out_bias)

    # ------------------------------------------------------------------
    # numpy inference path

    def new_cache(self) -> KVCache:
        c = self.config
        return KVCache(c.n_layers, c.n_heads, c.d_model // c.n_heads, c.max_context)

    def embed_np(self, ids: Sequence[int]) -> np.ndarray:
        return self.tok_emb.data[np.asarray(ids, dtype=np.int64)]

    def infer_rows(self, caches: Sequence[KVCache], rows: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Run new input-embedding rows for one or more independent streams.

        Linear layers see all streams' rows stacked together; attention is
        computed per stream against that stream's cache only. Returns the
        last-layer hidden rows per stream.
        """
        counts = [r.shape[0] for r in rows]
        for cache, cnt in zip(caches, counts):
            if cache.length + cnt > cache.capacity:
                raise CapacityError(f"context overflow: {cache.length} + {cnt} > {cache.capacity}")
        if sum(counts) == 0:
            return [np.zeros((0, self.config.d_model)) for _ in rows]
        positions = [np.arange(c.length, c.length + cnt) for c, cnt in zip(caches, counts)]
        x = np.concatenate([r + self.pos_emb.data[p] for r, p in zip(rows, positions)], axis=0)
        splits = np.cumsum(counts)[:-1]
        for li, blk in enumerate(self.blocks):
            q, k, v = blk.attn.project_qkv(blk.ln1.infer(x))
            ctx = np.empty_like(x)
            start = 0
            for cache, pos, cnt in zip(caches, positions, counts):
                if cnt == 0:
                    continue
                end = start + cnt
                lo, hi = cache.length, cache.length + cnt
                cache.keys[li][:, lo:hi] = k[:, start:end]
                cache.values[li][:, lo:hi] = v[:, start:end]
                ctx[start:end] = blk.attn.attend_rows(q[:, start:end], cache.keys[li][:, :hi],
                                                      cache.values[li][:, :hi], pos)
                start = end
            x = x + blk.attn.out.infer(ctx)
            x = x + blk.ffn.infer(blk.ln2.infer(x))
        for cache, cnt in zip(caches, counts):
            cache.length += cnt
        return np.split(self.ln_f.infer(x), splits, axis=0)

    def logits_np(self, hidden: np.ndarray) -> np.ndarray:
        return np.einsum("...d,vd->...v", hidden, self.tok_emb.data) + self.out_bias.data

    def full_forward(self, ids: Sequence[int]) -> np.ndarray:
        """Hidden states for a whole sequence from an empty cache (no ledger)."""
        return self.infer_rows([self.new_cache()], [self.embed_np(ids)])[0]

    # ------------------------------------------------------------------
    # ledger-recording inference API

    def prefill(self, tokens: Sequence[int], cache: KVCache, ledger: ForwardPassLedger | None = None,
                stage: str = "prefill") -> tuple[np.ndarray, KVCache]:
        """Process ``tokens`` in parallel, extending ``cache``; one ledger event."""
        if len(tokens) == 0:
            return np.zeros((0, self.config.d_model)), cache
        start = time.perf_counter()
        hidden = self.infer_rows([cache], [self.embed_np(tokens)])[0]
        if ledger is not None:
            ledger.record(stage, PARALLEL, tokens_in=len(tokens), duration=time.perf_counter() - start)
        return hidden, cache

    def decode_token(self, cache: KVCache, last_hidden: np.ndarray, greedy: bool = True,
                     ledger: ForwardPassLedger | None = None, stage: str = "answer-gen",
                     allowed: Sequence[int] | None = None, rng: np.random.Generator | None = None,
                     started: float | None = None) -> int:
        """Pick the next token from ``last_hidden``; one autoregressive ledger event.

        ``started`` lets a caller fold the preceding single-token forward
        into this event's wall clock.
        """
        if cache.length == 0:
            raise UsageError("decode_token needs a non-empty cache")
        start = time.perf_counter() if started is None else started
        logits = self.logits_np(np.asarray(last_hidden).reshape(-1))
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=np.int64)
            masked = np.full_like(logits, -np.inf)
            masked[allowed] = logits[allowed]
            logits = masked
        if greedy:
            token = int(np.argmax(logits))
        else:
            if rng is None:
                raise UsageError("sampling needs an rng")
            p = np.exp(logits - logits.max())
            token = int(rng.choice(len(p), p=p / p.sum()))
        if ledger is not None:
            ledger.record(stage, AUTOREGRESSIVE, tokens_in=1, tokens_out=1,
                          duration=time.perf_counter() - start)
        return token

    def generate(self, cache: KVCache, first_input: int, max_tokens: int, stop_ids: Sequence[int],
                 ledger: ForwardPassLedger | None = None, stage: str = "answer-gen") -> list[int]:
        """Greedy generation starting by feeding ``first_input``.

        Each emitted token is one ledger event covering the forward of the
        token before it. The final token is never fed back, so A emitted
        tokens cost exactly A model invocations.
        """
        out: list[int] = []
        feed = first_input
        while len(out) < max_tokens and cache.length < cache.capacity:
            started = time.perf_counter()
            hidden = self.infer_rows([cache], [self.embed_np([feed])])[0][-1]
            feed = self.decode_token(cache, hidden, ledger=ledger, stage=stage, started=started)
            out.append(feed)
            if feed in stop_ids:
                break
        return out

    def latent_block(self, cache: KVCache, prefix: Sequence[int], slots: Sequence[int],
                     ledger: ForwardPassLedger | None = None, stage: str = "thought-gen") -> np.ndarray:
        """Hidden states at ``slots`` after pending ``prefix`` tokens, in one forward pass.

        ``prefix`` holds context not yet in the cache (question, retrieved
        block); it is processed in the same invocation and its share of the
        time is booked as prefill.
        """
        if len(slots) == 0 or any(s not in self.slot_ids for s in slots):
            raise UsageError("latent_block slots must be thought or subquery slot tokens")
        if cache.length + len(prefix) + len(slots) > cache.capacity:
            raise CapacityError("context overflow in latent block")
        t0 = time.perf_counter()
        if len(prefix):
            self.infer_rows([cache], [self.embed_np(prefix)])
        t1 = time.perf_counter()
        hidden = self.infer_rows([cache], [self.embed_np(slots)])[0]
        t2 = time.perf_counter()
        if ledger is not None:
            ledger.record(stage, PARALLEL, tokens_in=len(prefix) + len(slots), duration=t2 - t0,
                          prefill_tokens=len(prefix), prefill_duration=t1 - t0)
        return hidden

    def logit_lens(self, hidden: np.ndarray, k: int, vocab: Vocabulary | None = None) -> list[tuple]:
        """Top-k (token, logit) by unembedding logits; ties broken by lower id."""
        logits = self.logits_np(np.asarray(hidden).reshape(-1))
        if k > logits.size:
            raise UsageError(f"k={k} exceeds vocabulary size {logits.size}")
        order = np.lexsort((np.arange(logits.size), -logits))[:k]
        return [((vocab.tokens[i] if vocab else int(i)), float(logits[i])) for i in order]

