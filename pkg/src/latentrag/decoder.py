"""Optional decoding of latent thought/subquery blocks back into text."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .ledger import AUTOREGRESSIVE, ForwardPassLedger
from .nn import Module, Projector
from .records import DataError
from .tensor import ShapeError, Tensor
from .transformer import DecoderLM
from .vocab import Vocabulary

THOUGHT_PROMPT = "decode the thought based on the latent representation :"
SUBQUERY_PROMPT = "decode the subquery based on the latent representation :"

KINDS = ("thought", "subquery")


class LatentDecoder(Module):
    """The two projectors that map latent blocks into the LLM's input space."""

    def __init__(self, d_model: int, rng: np.random.Generator, n_heads: int = 4):
        self.thought_proj = Projector(d_model, d_model, rng, n_heads)
        self.subquery_proj = Projector(d_model, d_model, rng, n_heads)

    def projector(self, kind: str) -> Projector:
        if kind == "thought":
            return self.thought_proj
        if kind == "subquery":
            return self.subquery_proj
        raise ValueError(f"unknown block kind {kind!r}")


def prompt_ids(vocab: Vocabulary, kind: str) -> list[int]:
    return vocab.encode(THOUGHT_PROMPT if kind == "thought" else SUBQUERY_PROMPT)


@dataclass
class DecodeItem:
    block: np.ndarray
    kind: str


def _expected_rows(vocab: Vocabulary, kind: str) -> int:
    if kind not in KINDS:
        raise ValueError(f"unknown block kind {kind!r}")
    return vocab.m if kind == "thought" else vocab.n


def decode_parallel_tokens(llm: DecoderLM, decoder: LatentDecoder, vocab: Vocabulary,
                           items: Sequence[DecodeItem], max_tokens: int = 32,
                           ledger: ForwardPassLedger | None = None) -> list[list[int]]:
    """Greedy-decode every item in lockstep; returns token ids per item (EOS included if emitted).

    Items never attend to each other: each has its own cache. The whole
    batch costs one ledger event per step, i.e. as many as the longest item.
    """
    if not items:
        raise ValueError("empty decode batch")
    for it in items:
        if it.block.shape[0] != _expected_rows(vocab, it.kind):
            raise ShapeError(f"{it.kind} block has {it.block.shape[0]} rows, "
                             f"expected {_expected_rows(vocab, it.kind)}")
    eos = vocab.eos_id
    caches = [llm.new_cache() for _ in items]
    outputs: list[list[int]] = [[] for _ in items]
    active = list(range(len(items)))
    t0 = time.perf_counter()
    pending = []
    prompt_rows = 0
    for it in items:
        prompt = llm.embed_np(prompt_ids(vocab, it.kind))
        prompt_rows += prompt.shape[0]
        pending.append(np.concatenate([prompt, decoder.projector(it.kind).infer(it.block)], axis=0))
    while active:
        tokens_in = sum(p.shape[0] for p in pending)
        hidden = llm.infer_rows([caches[i] for i in active], pending)
        still = []
        for i, h in zip(active, hidden):
            tok = int(np.argmax(llm.logits_np(h[-1])))
            outputs[i].append(tok)
            if tok != eos and len(outputs[i]) < max_tokens:
                still.append(i)
        if ledger is not None:
            ledger.record("latent-decode", AUTOREGRESSIVE, tokens_in=tokens_in, tokens_out=len(active),
                          duration=time.perf_counter() - t0, prefill_tokens=prompt_rows)
        prompt_rows = 0
        t0 = time.perf_counter()
        active = [i for i in still if caches[i].length < caches[i].capacity]
        pending = [llm.embed_np([outputs[i][-1]]) for i in active]
    return outputs


def tokens_to_text(vocab: Vocabulary, tokens: Sequence[int]) -> str:
    toks = list(tokens)
    if toks and toks[-1] == vocab.eos_id:
        toks = toks[:-1]
    return vocab.decode(toks)


def decode_parallel(llm: DecoderLM, decoder: LatentDecoder, vocab: Vocabulary, items: Sequence[DecodeItem],
                    max_tokens: int = 32, ledger: ForwardPassLedger | None = None) -> list[str]:
    return [tokens_to_text(vocab, t) for t in decode_parallel_tokens(llm, decoder, vocab, items, max_tokens, ledger)]


def decode_latent_block(llm: DecoderLM, decoder: LatentDecoder, vocab: Vocabulary, block: np.ndarray,
                        kind: str, max_tokens: int = 32, ledger: ForwardPassLedger | None = None) -> str:
    return decode_parallel(llm, decoder, vocab, [DecodeItem(np.asarray(block), kind)], max_tokens, ledger)[0]


# ---------------------------------------------------------------------------
# training loss

def _kind_loss(llm: DecoderLM, decoder: LatentDecoder, vocab: Vocabulary, blocks: Tensor,
               targets: Sequence[Sequence[int]], kind: str) -> Tensor:
    b, rows, _ = blocks.shape
    if rows != _expected_rows(vocab, kind):
        raise ShapeError(f"{kind} blocks have {rows} rows")
    if len(targets) != b:
        raise ShapeError("one target per block required")
    if any(len(t) == 0 for t in targets):
        raise DataError("empty decode target")
    prompt = prompt_ids(vocab, kind)
    p = len(prompt)
    width = max(len(t) for t in targets)
    tgt_in = np.full((b, width), vocab.pad_id, dtype=np.int64)
    key_mask = np.zeros((b, p + rows + width), dtype=bool)
    bi, pos, labels = [], [], []
    for i, tgt in enumerate(targets):
        tgt_in[i, :len(tgt)] = tgt
        key_mask[i, :p + rows + len(tgt)] = True
        seq = list(tgt) + [vocab.eos_id]
        for j, tok in enumerate(seq):
            bi.append(i)
            pos.append(p + rows - 1 + j)
            labels.append(tok)
    x = T.concat([llm.embed(np.broadcast_to(np.array(prompt), (b, p))),
                  decoder.projector(kind)(blocks),
                  llm.embed(tgt_in)], axis=1)
    hidden = llm.forward_embeds(x, key_mask)
    picked = hidden[np.array(bi), np.array(pos)]
    return T.cross_entropy(llm.logits(picked), labels)


def decoding_loss(llm: DecoderLM, decoder: LatentDecoder, vocab: Vocabulary,
                  thought_blocks: Tensor | None, thought_targets: Sequence[Sequence[int]],
                  subquery_blocks: Tensor | None, subquery_targets: Sequence[Sequence[int]]):
    """Teacher-forced cross-entropy per block kind -> (thought loss, subquery loss, their sum)."""
    if thought_blocks is None and subquery_blocks is None:
        raise DataError("no decode targets")
    zero = Tensor(np.zeros(()))
    lt = _kind_loss(llm, decoder, vocab, thought_blocks, thought_targets, "thought") \
        if thought_blocks is not None else zero
    ls = _kind_loss(llm, decoder, vocab, subquery_blocks, subquery_targets, "subquery") \
        if subquery_blocks is not None else zero
    return lt, ls, lt + ls
