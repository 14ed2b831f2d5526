"""Latent agent: thought block -> action -> subquery block -> retrieval -> repeat, then answer."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import DecodeItem, LatentDecoder, decode_parallel_tokens, tokens_to_text
from .ledger import INDEX_QUERY, ForwardPassLedger
from .retrieval import (CorpusIndex, Encoder, EncoderConfig, PooledLinearRetriever, ReferenceEncoder,
                        RetrieverProjector, embed_latent_subquery, embed_latent_subquery_np)
from .tensor import Tensor
from .transformer import CapacityError, DecoderLM, ModelConfig
from .vocab import (ACTION_ANSWER, ACTION_QUERY, ANSWER_CLOSE, ANSWER_OPEN, INFO_CLOSE, INFO_OPEN,
                    Vocabulary)

INSTRUCTION = ("answer the following question by reasoning step by step and retrieving "
               "necessary information at each step :")

ARMS = ("kl", "cosine", "infonce", "no-retriever", "no-decoding")


class LatentRAG:
    """Every trainable and frozen piece of the latent agent, plus checkpoint IO."""

    def __init__(self, vocab: Vocabulary, model_config: ModelConfig, encoder: Encoder, arm: str = "kl",
                 seed: int = 0):
        if arm not in ARMS:
            raise ValueError(f"unknown ablation arm {arm!r}")
        if (model_config.m, model_config.n) != (vocab.m, vocab.n):
            raise ValueError("model slot counts differ from the vocabulary's")
        self.vocab = vocab
        self.arm = arm
        self.llm = DecoderLM(model_config, seed)
        self.encoder = encoder.clone()
        self.reference = ReferenceEncoder(encoder, vocab)
        rng = np.random.default_rng(seed + 1000)
        d = model_config.d_model
        if arm == "no-retriever":
            self.head = PooledLinearRetriever(d, encoder.dim, rng)
        else:
            self.head = RetrieverProjector(d, encoder.dim, rng, n_heads=model_config.n_heads)
        self.decoder = LatentDecoder(d, rng, n_heads=model_config.n_heads)

    @property
    def uses_decoder(self) -> bool:
        return self.arm != "no-decoding"

    def parts(self) -> dict:
        return {"llm": self.llm, "head": self.head, "encoder": self.encoder, "decoder": self.decoder,
                "reference": self.reference.encoder}

    def trainable_parameters(self) -> list[Tensor]:
        params = self.llm.parameters() + self.head.parameters()
        if self.arm != "no-retriever":
            params += self.encoder.parameters()
        if self.uses_decoder:
            params += self.decoder.parameters()
        return params

    def train(self, mode: bool = True) -> None:
        for name, part in self.parts().items():
            part.train(mode and name != "reference")

    def eval(self) -> None:
        self.train(False)

    def embed_subquery(self, h_s: Tensor) -> Tensor:
        """Latent subquery blocks (B, n, d) -> unit retrieval vectors (B, d_ret)."""
        if isinstance(self.head, PooledLinearRetriever):
            return self.head(h_s)
        return embed_latent_subquery(h_s, self.head, self.encoder, self.vocab.n)

    def embed_subquery_np(self, rows: np.ndarray) -> np.ndarray:
        return embed_latent_subquery_np(rows, self.head, self.encoder)

    # -- checkpoints ----------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, part in self.parts().items():
            out.update(part.state_dict(prefix=f"{name}."))
        return out

    def meta(self) -> dict:
        return {"kind": "latentrag-checkpoint", "arm": self.arm, "vocab": self.vocab.tokens,
                "m": self.vocab.m, "n": self.vocab.n, "model_config": self.llm.config.to_dict(),
                "encoder_config": vars(self.encoder.config).copy()}

    def save(self, path, extra_meta: dict | None = None, extra_arrays: dict | None = None) -> str:
        arrays = self.state_arrays()
        arrays.update(extra_arrays or {})
        return T.save_archive(path, arrays, {**self.meta(), **(extra_meta or {})})

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "LatentRAG":
        if meta.get("kind") != "latentrag-checkpoint":
            raise ValueError("not a latent agent checkpoint")
        vocab = Vocabulary(meta["vocab"], meta["m"], meta["n"])
        if vocab.tokens != meta["vocab"]:
            raise ValueError("vocabulary in checkpoint is not canonical")
        encoder = Encoder(EncoderConfig(**meta["encoder_config"]))
        system = cls(vocab, ModelConfig(**meta["model_config"]), encoder, meta["arm"])
        for name, part in system.parts().items():
            part.load_state_dict(arrays, prefix=f"{name}.")
        system.reference.invalidate()
        return system

    @classmethod
    def load(cls, path) -> "LatentRAG":
        arrays, meta = T.load_archive(path)
        return cls.from_arrays(arrays, meta)


# ---------------------------------------------------------------------------
# trajectory types

@dataclass
class LoopConfig:
    k: int = 3
    max_iterations: int = 4
    max_answer_tokens: int = 8
    context_cap: int | None = None
    decode: bool = False
    decode_max_tokens: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class StepRecord:
    latent_thought: np.ndarray
    action: str
    latent_subquery: np.ndarray | None = None
    retrieved: list[tuple[str, float, str]] | None = None
    thought_text: str | None = None
    subquery_text: str | None = None

    @property
    def retrieved_ids(self) -> list[str]:
        return [r[0] for r in self.retrieved or []]


@dataclass
class LatentTrajectory:
    question: str
    question_tokens: list[int]
    steps: list[StepRecord]
    answer: str | None
    answer_tokens: list[int]
    termination_reason: str
    ledger: ForwardPassLedger = field(default_factory=ForwardPassLedger)
    decoded_lengths: list[int] = field(default_factory=list)

    @property
    def retrieval_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.action == ACTION_QUERY]

    def retrieved_ids(self) -> set[str]:
        return {i for s in self.retrieval_steps for i in s.retrieved_ids}

    def to_record(self, with_timing: bool = False) -> dict:
        return {
            "question": self.question,
            "steps": [{"action": s.action, "thought": s.thought_text, "subquery": s.subquery_text,
                       "retrieved": [[i, score] for i, score, _ in s.retrieved or []]} for s in self.steps],
            "answer": self.answer,
            "answer_tokens": len(self.answer_tokens),
            "termination": self.termination_reason,
            "decoded_lengths": self.decoded_lengths,
            "ledger": self.ledger.to_records(with_timing),
        }


# ---------------------------------------------------------------------------
# loop pieces

def decide_action(llm: DecoderLM, vocab: Vocabulary, last_thought_hidden: np.ndarray) -> str:
    """Greedy choice between the two action tokens (the lower id wins a tie)."""
    logits = llm.logits_np(np.asarray(last_thought_hidden).reshape(-1))
    q, a = vocab.query_action_id, vocab.answer_action_id
    if logits[q] > logits[a] or (logits[q] == logits[a] and q < a):
        return ACTION_QUERY
    return ACTION_ANSWER


def format_information_block(vocab: Vocabulary, docs: Sequence[str]) -> list[int]:
    if not docs:
        raise ValueError("information block needs at least one document")
    parts = [INFO_OPEN]
    for rank, text in enumerate(docs, 1):
        parts.append(f"doc {rank} : {text}")
    parts.append(INFO_CLOSE)
    return vocab.encode(" ".join(parts))


def extract_answer(vocab: Vocabulary, tokens: Sequence[int]) -> str:
    toks = list(tokens)
    open_id, close_id = vocab.index[ANSWER_OPEN], vocab.index[ANSWER_CLOSE]
    if toks and toks[0] == open_id:
        toks = toks[1:]
    if close_id in toks:
        toks = toks[:toks.index(close_id)]
    return vocab.decode(toks, skip_special=True)


def _max_info_tokens(vocab: Vocabulary, index: CorpusIndex, k: int) -> int:
    longest = max(len(vocab.encode(d.text)) for d in index.documents)
    return 2 + k * (longest + 3)


def run_question(question: str, system: LatentRAG, index: CorpusIndex, cfg: LoopConfig,
                 info_budget: int | None = None) -> LatentTrajectory:
    vocab, llm = system.vocab, system.llm
    m, n = vocab.m, vocab.n
    ledger = ForwardPassLedger()
    cache = llm.new_cache()
    cap = min(cfg.context_cap or llm.config.max_context, llm.config.max_context)
    k = min(cfg.k, len(index))
    if info_budget is None:
        info_budget = _max_info_tokens(vocab, index, k)
    q_tokens = vocab.encode(question)
    pending = vocab.encode(INSTRUCTION) + q_tokens
    reserve = m + 1 + cfg.max_answer_tokens
    if len(pending) + reserve > cap:
        raise CapacityError("question does not fit in the context window")

    steps: list[StepRecord] = []
    termination = "answered"
    for it in range(cfg.max_iterations):
        room = cap - cache.length - reserve
        truncated = len(pending) > room
        if truncated:
            pending = pending[:room]
        thought = llm.latent_block(cache, pending, vocab.thought_ids, ledger, "thought-gen")
        pending = []
        event = ledger.events[-1]
        t0 = time.perf_counter()
        step = StepRecord(thought, decide_action(llm, vocab, thought[-1]))
        event.duration += time.perf_counter() - t0
        steps.append(step)
        if step.action == ACTION_QUERY:
            if truncated or cache.length + n + info_budget + reserve > cap:
                step.action, termination = ACTION_ANSWER, "context-cap"
            elif it == cfg.max_iterations - 1:
                step.action, termination = ACTION_ANSWER, "iteration-cap"
        elif truncated:
            termination = "context-cap"
        if step.action == ACTION_ANSWER:
            break

        sub = llm.latent_block(cache, [], vocab.query_ids, ledger, "subquery-gen")
        event = ledger.events[-1]
        t0 = time.perf_counter()
        vec = system.embed_subquery_np(sub)
        event.duration += time.perf_counter() - t0
        with ledger.timed("retrieval", INDEX_QUERY):
            hits = index.topk(vec, k)
        step.latent_subquery = sub
        step.retrieved = [(i, s, index.documents[index.position[i]].text) for i, s in hits]
        pending = format_information_block(vocab, [r[2] for r in step.retrieved])

    answer_tokens = llm.generate(cache, vocab.answer_action_id, cfg.max_answer_tokens,
                                 [vocab.index[ANSWER_CLOSE]], ledger, "answer-gen")
    traj = LatentTrajectory(question, q_tokens, steps, extract_answer(vocab, answer_tokens), answer_tokens,
                            termination, ledger)
    if cfg.decode:
        decode_trajectory(system, traj, cfg.decode_max_tokens)
    return traj


def decode_trajectory(system: LatentRAG, traj: LatentTrajectory, max_tokens: int = 32) -> None:
    """Fill thought/subquery texts of every step in one parallel decode batch."""
    items, slots = [], []
    for s in traj.steps:
        items.append(DecodeItem(s.latent_thought, "thought"))
        slots.append((s, "thought_text"))
        if s.latent_subquery is not None:
            items.append(DecodeItem(s.latent_subquery, "subquery"))
            slots.append((s, "subquery_text"))
    outputs = decode_parallel_tokens(system.llm, system.decoder, system.vocab, items, max_tokens, traj.ledger)
    traj.decoded_lengths = [len(o) for o in outputs]
    for (s, attr), toks in zip(slots, outputs):
        setattr(s, attr, tokens_to_text(system.vocab, toks))


def run_questions(questions: Sequence[str], system: LatentRAG, index: CorpusIndex,
                  cfg: LoopConfig) -> list[LatentTrajectory]:
    budget = _max_info_tokens(system.vocab, index, min(cfg.k, len(index)))
    system.eval()
    return [run_question(q, system, index, cfg, budget) for q in questions]
