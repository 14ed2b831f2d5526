"""Metrics and cost accounting: EM, retrieval quality, forward passes and stage latency."""

from __future__ import annotations

import re
import string
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ledger import AUTOREGRESSIVE, INDEX_QUERY, STAGES, ForwardPassLedger
from .vocab import ANSWER_CLOSE, ANSWER_OPEN

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


class PairingError(ValueError):
    pass


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def em_score(pred: str | None, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("em_score needs at least one gold answer")
    if pred is None:
        return 0
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def contains_answer(text: str, golds: Sequence[str]) -> bool:
    """Normalised containment, matched on whole-word boundaries."""
    hay = f" {normalize_answer(text)} "
    return any(f" {g} " in hay for g in (normalize_answer(x) for x in golds) if g)


def retrieval_success_rate(step_texts: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]) -> float | None:
    """Fraction of retrieval steps whose retrieved text contains a gold answer.

    ``step_texts[q]`` lists, per retrieval step of question q, the step's
    retrieved text. Returns None when there are no steps at all.
    """
    if len(step_texts) != len(golds):
        raise PairingError("one gold list per trajectory required")
    hits = total = 0
    for steps, gold in zip(step_texts, golds):
        for text in steps:
            total += 1
            hits += contains_answer(text, gold)
    return None if total == 0 else hits / total


def retrieval_overlap(ours: Mapping[str, set], reference: Mapping[str, set]) -> float | None:
    """Micro-averaged share of reference-retrieved documents that we also retrieved."""
    if set(ours) != set(reference):
        raise PairingError("trajectories are not paired by question")
    inter = sum(len(set(reference[q]) & set(ours[q])) for q in reference)
    denom = sum(len(set(reference[q])) for q in reference)
    return None if denom == 0 else inter / denom


def max_length_ratio(lengths: Sequence[int]) -> float:
    if len(lengths) == 0:
        raise ValueError("max_length_ratio of an empty list is undefined")
    if any(n <= 0 for n in lengths):
        raise ValueError("lengths must be positive")
    return max(lengths) / sum(lengths)


@dataclass
class StageCount:
    passes: int = 0
    tokens_in: int = 0
    tokens_out: int = 0


def forward_pass_summary(ledger: ForwardPassLedger) -> dict[str, StageCount]:
    """Per-stage passes and token counts, plus a ``total`` entry. Index queries are not passes."""
    out = {s: StageCount() for s in STAGES}
    for e in ledger:
        if e.kind == INDEX_QUERY:
            continue
        out[e.stage].passes += 1
        out[e.stage].tokens_in += e.tokens_in - e.prefill_tokens
        out[e.stage].tokens_out += e.tokens_out
        out["prefill"].tokens_in += e.prefill_tokens
    out["total"] = StageCount(sum(c.passes for c in out.values()), sum(c.tokens_in for c in out.values()),
                              sum(c.tokens_out for c in out.values()))
    return out


def count_passes(ledger: ForwardPassLedger) -> int:
    return sum(1 for e in ledger if e.kind != INDEX_QUERY)


def stage_durations(ledger: ForwardPassLedger) -> dict[str, float]:
    """Seconds per stage; fused context prefill is booked to the prefill stage."""
    out = dict.fromkeys(STAGES, 0.0)
    for e in ledger:
        out["prefill"] += e.prefill_duration
        out[e.stage] += e.duration - e.prefill_duration
    return out


def latency_breakdown(ledgers: Sequence[ForwardPassLedger]) -> dict[str, tuple[float, float]]:
    """Stage -> (mean ms per question, percent of total); includes a ``total`` row."""
    if not ledgers:
        raise ValueError("need at least one ledger")
    sums = dict.fromkeys(STAGES, 0.0)
    for led in ledgers:
        for stage, secs in stage_durations(led).items():
            sums[stage] += secs
    means = {s: 1000.0 * v / len(ledgers) for s, v in sums.items()}
    total = sum(means.values())
    table = {s: (ms, 100.0 * ms / total if total > 0 else 0.0) for s, ms in means.items()}
    table["total"] = (total, 100.0 if total > 0 else 0.0)
    return table


# ---------------------------------------------------------------------------
# explicit-mode cost simulation

def simulate_explicit(llm, vocab, traj, index, reference, instruction: str,
                      format_block, k: int = 3) -> ForwardPassLedger:
    """Replay a teacher trajectory through the LLM as if its text were generated token by token.

    Output tokens are teacher-forced, so every thought, subquery and answer
    token is one autoregressive event. Context blocks (question, retrieved
    documents) ride along with the next event as fused prefill.
    """
    ledger = ForwardPassLedger()
    cache = llm.new_cache()
    context = vocab.encode(instruction) + vocab.encode(traj.question)
    carry: list[int] = []

    def emit(stage: str, tokens: list[int]) -> None:
        nonlocal context, carry
        for tok in tokens:
            t0 = time.perf_counter()
            hidden = None
            if carry:
                hidden = llm.infer_rows([cache], [llm.embed_np(carry)])[0]
            t1 = time.perf_counter()
            n_ctx = len(context)
            if context:
                hidden = llm.infer_rows([cache], [llm.embed_np(context)])[0]
            t2 = time.perf_counter()
            np.argmax(llm.logits_np(hidden[-1]))  # the greedy pick is discarded: outputs are teacher-forced
            ledger.record(stage, AUTOREGRESSIVE, tokens_in=len(carry) + n_ctx, tokens_out=1,
                          duration=time.perf_counter() - t0, prefill_tokens=n_ctx, prefill_duration=t2 - t1)
            carry, context = [tok], []

    for step in traj.steps:
        emit("thought-gen", vocab.encode(step.thought))
        emit("subquery-gen", vocab.encode(step.subquery))
        t0 = time.perf_counter()
        vec = reference.embed_text(step.subquery)
        ledger.events[-1].duration += time.perf_counter() - t0
        with ledger.timed("retrieval", INDEX_QUERY):
            hits = index.topk(vec, min(k, len(index)))
        context = format_block(vocab, [index.documents[index.position[i]].text for i, _ in hits])
    emit("thought-gen", vocab.encode(traj.final_thought))
    emit("answer-gen", [vocab.index[ANSWER_OPEN]] + vocab.encode(traj.answer or "") + [vocab.index[ANSWER_CLOSE]])
    return ledger


def explicit_output_lengths(vocab, traj) -> list[int]:
    lens = []
    for s in traj.steps:
        lens += [len(vocab.encode(s.thought)), len(vocab.encode(s.subquery))]
    lens += [len(vocab.encode(traj.final_thought)), len(vocab.encode(traj.answer or "")) + 2]
    return lens


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    method: str
    n_questions: int
    em: float
    retrieval_success: float | None
    retrieval_overlap: float | None
    mean_passes: float
    passes_by_stage: dict
    mean_latency_ms: float
    latency: dict
    max_length_ratio: float | None = None
    teacher_em: float | None = None
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def metric_rows(self) -> list[list]:
        """Deterministic metrics only (no wall-clock values)."""
        rows = [[self.method, "n_questions", self.n_questions], [self.method, "em", self.em],
                [self.method, "teacher_em", self.teacher_em],
                [self.method, "retrieval_success", self.retrieval_success],
                [self.method, "retrieval_overlap", self.retrieval_overlap],
                [self.method, "mean_passes", self.mean_passes],
                [self.method, "max_length_ratio", self.max_length_ratio]]
        for stage, v in self.passes_by_stage.items():
            if stage == "latent-decode" and not self.decoded:
                continue
            rows.append([self.method, f"passes.{stage}", v])
        for key, v in sorted(self.extra.items()):
            rows.append([self.method, key, v])
        rows.append([self.method, "flags", ";".join(self.flags) or "none"])
        return rows

    def latency_rows(self) -> list[list]:
        return [[self.method, stage, ms, pct] for stage, (ms, pct) in self.latency.items()
                if stage != "latent-decode" or self.decoded]

    @property
    def decoded(self) -> bool:
        return self.passes_by_stage.get("latent-decode", 0) > 0


def summarize(method: str, ledgers: Sequence[ForwardPassLedger], ems: Sequence[int],
              success: float | None, overlap: float | None, ratios: Sequence[float] = (),
              teacher_em: float | None = None) -> EvalReport:
    summaries = [forward_pass_summary(led) for led in ledgers]
    stages = list(STAGES) + ["total"]
    by_stage = {s: float(np.mean([sm[s].passes for sm in summaries])) for s in stages}
    lat = latency_breakdown(ledgers)
    return EvalReport(method, len(ems), float(np.mean(ems)) if ems else 0.0, success, overlap,
                      by_stage["total"], by_stage, lat["total"][0], lat,
                      float(np.mean(ratios)) if len(ratios) else None, teacher_em)
