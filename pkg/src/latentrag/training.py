"""Supervised fine-tuning of the latent agent from explicit teacher trajectories."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .agent import INSTRUCTION, LatentRAG, format_information_block
from .decoder import decoding_loss
from .optim import AdamW, clip_grad_norm
from .records import write_tsv
from .retrieval import (CorpusIndex, cosine_alignment_loss, infonce_batch_loss, kl_batch_loss)
from .tensor import DivergenceError, ParameterError, Tensor
from .vocab import ANSWER_CLOSE, ANSWER_OPEN

log = logging.getLogger(__name__)


class SequenceTooLong(ValueError):
    pass


@dataclass
class TeacherStep:
    thought: str
    subquery: str
    doc_ids: list[str]


@dataclass
class TeacherTrajectory:
    question: str
    steps: list[TeacherStep]
    final_thought: str
    answer: str | None
    gold: list[str]
    correct: bool
    hops: int = 1
    qid: str = ""

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["steps"] = [asdict(s) for s in self.steps]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TeacherTrajectory":
        rec = dict(rec)
        rec["steps"] = [TeacherStep(**s) for s in rec["steps"]]
        return cls(**rec)


@dataclass
class LossWeights:
    retrieval: float = 1.0

    def __post_init__(self):
        if self.retrieval < 0:
            raise ParameterError("retrieval loss weight must be non-negative")


@dataclass
class TrainingExample:
    ids: np.ndarray
    action_positions: list[int]
    action_targets: list[int]
    answer_positions: list[int]
    answer_targets: list[int]
    thought_positions: list[list[int]]
    thought_targets: list[list[int]]
    query_positions: list[list[int]]
    subquery_targets: list[list[int]]
    reference_vecs: np.ndarray
    pseudo_relevant: list[list[str]]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def answer_token(self) -> int | None:
        """The answer's id when it is a single token (targets are ``<Answer> x </Answer>``)."""
        return self.answer_targets[1] if len(self.answer_targets) == 3 else None

    def swap_token(self, old: int, new: int) -> "TrainingExample":
        """Copy with every occurrence of ``old`` (context and targets) replaced by ``new``."""
        def sub(seq):
            return [new if t == old else t for t in seq]
        ids = self.ids.copy()
        ids[ids == old] = new
        return replace(self, ids=ids, answer_targets=sub(self.answer_targets),
                       thought_targets=[sub(t) for t in self.thought_targets],
                       subquery_targets=[sub(t) for t in self.subquery_targets])


def build_training_example(traj: TeacherTrajectory, system: LatentRAG, index: CorpusIndex,
                           cap: int | None = None, n_pseudo: int = 16) -> TrainingExample:
    """Lay out the teacher trajectory with thoughts and subqueries replaced by slot tokens."""
    if not traj.correct:
        raise ValueError("only correct teacher trajectories are used for training")
    vocab = system.vocab
    ids: list[int] = vocab.encode(INSTRUCTION) + vocab.encode(traj.question)
    ex = TrainingExample(np.zeros(0, dtype=np.int64), [], [], [], [], [], [], [], [],
                         np.zeros((0, index.dim)), [])
    ref_rows = []

    def add_thought(text: str, action_id: int) -> None:
        start = len(ids)
        ids.extend(vocab.thought_ids)
        ex.thought_positions.append(list(range(start, len(ids))))
        ex.thought_targets.append(vocab.encode(text))
        ex.action_positions.append(len(ids) - 1)
        ex.action_targets.append(action_id)

    for step in traj.steps:
        add_thought(step.thought, vocab.query_action_id)
        start = len(ids)
        ids.extend(vocab.query_ids)
        ex.query_positions.append(list(range(start, len(ids))))
        ex.subquery_targets.append(vocab.encode(step.subquery))
        ref = system.reference.embed_text(step.subquery)
        ref_rows.append(ref)
        ex.pseudo_relevant.append([d for d, _ in index.topk(ref, min(n_pseudo, len(index)))])
        texts = [index.documents[index.position[d]].text for d in step.doc_ids]
        ids.extend(format_information_block(vocab, texts))

    add_thought(traj.final_thought, vocab.answer_action_id)
    answer = [vocab.answer_action_id, vocab.index[ANSWER_OPEN]] + vocab.encode(traj.answer or "") \
        + [vocab.index[ANSWER_CLOSE]]
    start = len(ids)
    ids.extend(answer)
    ex.answer_positions = list(range(start, len(ids) - 1))
    ex.answer_targets = answer[1:]

    cap = cap or system.llm.config.max_context
    if len(ids) > cap:
        raise SequenceTooLong(f"example of {len(ids)} tokens exceeds cap {cap}")
    ex.ids = np.array(ids, dtype=np.int64)
    ex.reference_vecs = np.array(ref_rows).reshape(len(ref_rows), index.dim)
    return ex


def build_training_examples(trajs: Sequence[TeacherTrajectory], system: LatentRAG, index: CorpusIndex,
                            cap: int | None = None, n_pseudo: int = 16) -> tuple[list[TrainingExample], int]:
    """Examples for every correct trajectory that fits; returns (examples, number skipped)."""
    out, skipped = [], 0
    for t in trajs:
        if not t.correct:
            skipped += 1
            continue
        try:
            out.append(build_training_example(t, system, index, cap, n_pseudo))
        except SequenceTooLong:
            skipped += 1
    return out, skipped


# ---------------------------------------------------------------------------
# objective

@dataclass
class LossParts:
    total: Tensor
    gen: Tensor
    ret: Tensor
    dec: Tensor
    dec_thought: Tensor
    dec_subquery: Tensor
    n_subqueries: int

    def values(self) -> dict[str, float]:
        return {"L": self.total.item(), "L_gen": self.gen.item(), "L_ret": self.ret.item(),
                "L_dec": self.dec.item(), "L_dec_thought": self.dec_thought.item(),
                "L_dec_subquery": self.dec_subquery.item()}


def _gather(hidden: Tensor, rows: list[tuple[int, list[int]]]) -> Tensor:
    b = np.array([r[0] for r in rows])
    pos = np.array([r[1] for r in rows])
    return hidden[b[:, None], pos]


def joint_loss(system: LatentRAG, batch: Sequence[TrainingExample], index: CorpusIndex,
               weights: LossWeights | None = None, beta: float = 0.03) -> LossParts:
    """Generation + weighted retrieval + decoding loss on one batch."""
    if not batch:
        raise ValueError("empty batch")
    weights = weights or LossWeights()
    vocab, llm = system.vocab, system.llm
    width = max(len(ex) for ex in batch)
    ids = np.full((len(batch), width), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(batch), width), dtype=bool)
    for i, ex in enumerate(batch):
        ids[i, :len(ex)] = ex.ids
        mask[i, :len(ex)] = True
    hidden = llm.forward(ids, mask)

    bi, pos, tgt = [], [], []
    for i, ex in enumerate(batch):
        for p, t in zip(ex.action_positions + ex.answer_positions, ex.action_targets + ex.answer_targets):
            bi.append(i)
            pos.append(p)
            tgt.append(t)
    gen = T.cross_entropy(llm.logits(hidden[np.array(bi), np.array(pos)]), tgt)

    sub_rows = [(i, p) for i, ex in enumerate(batch) for p in ex.query_positions]
    zero = Tensor(np.zeros(()))
    if sub_rows:
        h_s = _gather(hidden, sub_rows)
        latent = system.embed_subquery(h_s)
        ref = np.concatenate([ex.reference_vecs for ex in batch], axis=0)
        if system.arm == "cosine":
            ret = cosine_alignment_loss(latent, ref)
        elif system.arm == "infonce":
            ret = infonce_batch_loss(latent, ref, index, beta)
        else:
            union = sorted({index.position[d] for ex in batch for ids_ in ex.pseudo_relevant for d in ids_})
            ret = kl_batch_loss(latent, ref, index, beta, rows=np.array(union, dtype=np.int64))
    else:
        log.warning("batch without subqueries: retrieval loss set to 0")
        h_s, ret = None, zero

    if system.uses_decoder:
        th_rows = [(i, p) for i, ex in enumerate(batch) for p in ex.thought_positions]
        th_tgt = [t for ex in batch for t in ex.thought_targets]
        sq_tgt = [t for ex in batch for t in ex.subquery_targets]
        dec_t, dec_s, dec = decoding_loss(llm, system.decoder, vocab, _gather(hidden, th_rows), th_tgt,
                                          h_s, sq_tgt)
    else:
        dec_t = dec_s = dec = zero
    total = gen + ret * weights.retrieval + dec
    return LossParts(total, gen, ret, dec, dec_t, dec_s, len(sub_rows))


# ---------------------------------------------------------------------------
# batching

def make_binned_batches(lengths: Sequence[int], num_bins: int, batch_size: int, seed: int) -> list[list[int]]:
    """Equal-width length bins; each batch comes from one bin; order shuffled by ``seed``."""
    if num_bins < 1:
        raise ParameterError("num_bins must be >= 1")
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    lengths = np.asarray(lengths)
    if lengths.size == 0:
        return []
    lo, hi = int(lengths.min()), int(lengths.max())
    width = (hi - lo) / num_bins
    if width > 0:
        bins = np.minimum(((lengths - lo) / width).astype(np.int64), num_bins - 1)
    else:
        bins = np.zeros(lengths.size, dtype=np.int64)
    rng = np.random.default_rng(seed)
    batches = []
    for b in range(num_bins):
        members = np.flatnonzero(bins == b)
        members = members[rng.permutation(members.size)]
        batches.extend(members[i:i + batch_size].tolist() for i in range(0, members.size, batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------------------
# answer substitution

def entity_pools(groups: Sequence[Sequence[int]]) -> dict[int, np.ndarray]:
    """token id -> every id of its group (e.g. all city tokens), for answer substitution."""
    pools = {}
    for g in groups:
        arr = np.array(sorted(set(g)), dtype=np.int64)
        for t in arr:
            pools[int(t)] = arr
    return pools


def pick_substitute(answer: int | None, context, pools: dict[int, np.ndarray],
                    rng: np.random.Generator) -> int | None:
    """A same-group token absent from ``context``, or None when the answer has no group."""
    pool = pools.get(answer) if answer is not None else None
    if pool is None:
        return None
    cands = np.setdiff1d(pool, np.asarray(context))
    return int(cands[rng.integers(cands.size)]) if cands.size else None


def _substituted(ex: TrainingExample, pools, rate: float, rng: np.random.Generator) -> TrainingExample:
    if not pools or rng.random() >= rate:
        return ex
    new = pick_substitute(ex.answer_token, ex.ids, pools, rng)
    return ex if new is None else ex.swap_token(ex.answer_token, new)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 16
    num_bins: int = 8
    seed: int = 0
    beta: float = 0.03
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 1.0
    warmup_steps: int = 0
    final_lr_fraction: float = 1.0
    answer_swap: float = 0.0  # chance per example of relabelling its answer entity


@dataclass
class TrainResult:
    log_rows: list[dict]
    checkpoints: list[str]
    checkpoint_hashes: list[str]
    epoch_means: list[dict]


LOG_COLUMNS = ["step", "epoch", "L", "L_gen", "L_ret", "L_dec", "L_dec_thought", "L_dec_subquery"]


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac)


def train(system: LatentRAG, examples: Sequence[TrainingExample], index: CorpusIndex, cfg: TrainConfig,
          out_dir: str | Path | None = None, config_hash: str = "", progress=None,
          swap_pools: dict[int, np.ndarray] | None = None) -> TrainResult:
    """Optimise the joint objective; writes a loss log and one checkpoint per epoch into ``out_dir``.

    With ``cfg.answer_swap > 0`` each example's single-token answer is, at
    that rate, replaced everywhere (documents, thoughts, answer) by another
    member of its ``swap_pools`` group, so the answer has to be read from the
    retrieved text rather than recalled.
    """
    if not examples:
        raise ValueError("no training examples")
    ref_hash = system.reference.state_hash()
    params = system.trainable_parameters()
    opt = AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.01)
    lengths = [len(ex) for ex in examples]
    schedules = [make_binned_batches(lengths, cfg.num_bins, cfg.batch_size, cfg.seed + e) for e in range(cfg.epochs)]
    total_steps = sum(len(s) for s in schedules)
    rows: list[dict] = []
    ckpts, hashes, epoch_means = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    system.train()
    for epoch, schedule in enumerate(schedules, 1):
        t0 = time.perf_counter()
        epoch_rows = []
        for batch_idx in schedule:
            opt.lr = _lr_at(step, total_steps, cfg)
            rng = np.random.default_rng([cfg.seed, step])
            batch = [_substituted(examples[i], swap_pools, cfg.answer_swap, rng) for i in batch_idx]
            parts = joint_loss(system, batch, index, cfg.weights, cfg.beta)
            vals = parts.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch}): {vals}")
            opt.zero_grad()
            parts.total.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            row = {"step": step, "epoch": epoch, **vals}
            rows.append(row)
            epoch_rows.append(row)
            step += 1
        means = {k: float(np.mean([r[k] for r in epoch_rows])) for k in LOG_COLUMNS[2:]}
        epoch_means.append(means)
        if progress:
            progress(f"epoch {epoch}/{cfg.epochs} ({time.perf_counter() - t0:.0f}s): "
                     + " ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if out is not None:
            path = out / f"epoch{epoch}.ckpt"
            system.eval()
            hashes.append(system.save(path, {"epoch": epoch, "config_hash": config_hash}))
            system.train()
            ckpts.append(str(path))
    system.eval()
    if system.reference.state_hash() != ref_hash:
        raise RuntimeError("reference encoder changed during training")
    if out is not None:
        write_tsv(out / "loss_log.tsv", LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in rows), config_hash,
                  comments=[f"arm={system.arm}"])
    return TrainResult(rows, ckpts, hashes, epoch_means)


# ---------------------------------------------------------------------------
# explicit-text warm start

def explicit_sequence(traj: TeacherTrajectory, vocab, index: CorpusIndex) -> tuple[list[int], list[int]]:
    """Token ids of a teacher transcript and the positions whose next token is supervised."""
    ids = vocab.encode(INSTRUCTION) + vocab.encode(traj.question)
    predict: list[int] = []

    def out(tokens: list[int]) -> None:
        for t in tokens:
            predict.append(len(ids) - 1)
            ids.append(t)

    for step in traj.steps:
        out(vocab.encode(step.thought) + [vocab.query_action_id] + vocab.encode(step.subquery))
        if step.doc_ids:
            ids.extend(format_information_block(vocab, [index.documents[index.position[d]].text
                                                        for d in step.doc_ids]))
    out(vocab.encode(traj.final_thought) + [vocab.answer_action_id, vocab.index[ANSWER_OPEN]]
        + vocab.encode(traj.answer or "") + [vocab.index[ANSWER_CLOSE]])
    return ids, predict


def pretrain_explicit(llm, vocab, index: CorpusIndex, trajs: Sequence[TeacherTrajectory], epochs: int,
                      lr: float = 2e-3, batch_size: int = 16, seed: int = 0, corpus: bool = True,
                      swap_pools: dict[int, np.ndarray] | None = None, answer_swap: float = 0.0,
                      progress=None) -> list[float]:
    """Next-token training on full explicit transcripts (and optionally the corpus text).

    Stands in for starting from a pretrained LM: the model learns to copy
    entities from the question and documents while the signal is dense, and
    every corpus entity has been seen as an output token at least once.
    """
    seqs, answers = [], []
    for t in trajs:
        if t.correct:
            seqs.append(explicit_sequence(t, vocab, index))
            ans = vocab.encode(t.answer or "")
            answers.append(ans[0] if len(ans) == 1 else None)
    if corpus:
        for doc in index.documents:
            ids = vocab.encode(doc.text)
            seqs.append((ids, list(range(len(ids) - 1))))
            answers.append(None)
    if not seqs or epochs <= 0:
        return []
    params = llm.parameters()
    opt = AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.01)
    schedules = [make_binned_batches([len(s[0]) for s in seqs], 8, batch_size, seed + 7919 + e)
                 for e in range(epochs)]
    total = sum(len(s) for s in schedules)
    cfg = TrainConfig(lr=lr, warmup_steps=min(50, total // 10), final_lr_fraction=0.1)
    step, means = 0, []
    llm.train(True)
    for epoch, schedule in enumerate(schedules, 1):
        t0, losses = time.perf_counter(), []
        for batch_idx in schedule:
            rng = np.random.default_rng([seed, 7919, step])
            batch = []
            for i in batch_idx:
                seq, pred = seqs[i]
                new = pick_substitute(answers[i], seq, swap_pools, rng) \
                    if swap_pools and rng.random() < answer_swap else None
                if new is not None:
                    seq = [new if t == answers[i] else t for t in seq]
                batch.append((seq, pred))
            width = max(len(s[0]) for s in batch)
            ids = np.full((len(batch), width), vocab.pad_id, dtype=np.int64)
            mask = np.zeros((len(batch), width), dtype=bool)
            bi, pos, tgt = [], [], []
            for i, (seq, pred) in enumerate(batch):
                ids[i, :len(seq)] = seq
                mask[i, :len(seq)] = True
                bi += [i] * len(pred)
                pos += pred
                tgt += [seq[p + 1] for p in pred]
            opt.lr = _lr_at(step, total, cfg)
            hidden = llm.forward(ids, mask)
            loss = T.cross_entropy(llm.logits(hidden[np.array(bi), np.array(pos)]), tgt)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite warm-start loss at step {step}")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, 1.0)
            opt.step()
            losses.append(loss.item())
            step += 1
        means.append(float(np.mean(losses)))
        if progress:
            progress(f"warm-start epoch {epoch}/{epochs} ({time.perf_counter() - t0:.0f}s): L_lm={means[-1]:.4f}")
    llm.train(False)
    return means


def init_slot_embeddings(llm, vocab, trajs: Sequence[TeacherTrajectory]) -> None:
    """Set each slot token's embedding to the mean embedding of the text tokens it stands in for.

    Query slot i starts as the average of token i (cycling) over all teacher
    subqueries; thought slots likewise over thoughts. Random slot embeddings
    leave the slots' attention unfocused and training stalls for epochs.
    """
    emb = llm.tok_emb.data
    subqueries = [vocab.encode(s.subquery) for t in trajs if t.correct for s in t.steps]
    thoughts = [vocab.encode(s.thought) for t in trajs if t.correct for s in t.steps]
    thoughts += [vocab.encode(t.final_thought) for t in trajs if t.correct]
    for slots, texts in ((vocab.query_ids, subqueries), (vocab.thought_ids, thoughts)):
        texts = [x for x in texts if x]
        if not texts:
            continue
        for i, sid in enumerate(slots):
            emb[sid] = np.mean([emb[x[i % len(x)]] for x in texts], axis=0)
