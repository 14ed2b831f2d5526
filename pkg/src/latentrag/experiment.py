"""Pipeline stages shared by the command line and the test-suite."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synth
from . import tensor as T
from .agent import INSTRUCTION, LatentRAG, LatentTrajectory, LoopConfig, format_information_block, run_questions
from .config import RunConfig
from .evaluation import (EvalReport, em_score, explicit_output_lengths, max_length_ratio, retrieval_overlap,
                         retrieval_success_rate, simulate_explicit, summarize)
from .records import DataError, read_jsonl, write_jsonl, write_tsv
from .retrieval import (CorpusIndex, Encoder, EncoderConfig, ReferenceEncoder, build_index, pretrain_encoder,
                        read_corpus, write_corpus)
from .training import (LossWeights, TeacherTrajectory, TrainConfig, TrainResult, build_training_examples,
                       entity_pools, init_slot_embeddings, pretrain_explicit, train)
from .transformer import ModelConfig
from .vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class World:
    """Everything produced before latent training: corpus, questions, encoder, index, teacher runs."""
    graph: synth.FactGraph | None
    train_items: list[synth.QAItem]
    test_items: list[synth.QAItem]
    vocab: Vocabulary
    encoder: Encoder
    reference: ReferenceEncoder
    index: CorpusIndex
    teacher_train: list[TeacherTrajectory]
    teacher_test: list[TeacherTrajectory]
    entity_groups: list[list[str]] = dataclasses.field(default_factory=list)  # [persons, cities]
    # warm-started LM weights keyed by config hash; the warm start does not depend on the arm
    warm_states: dict = dataclasses.field(default_factory=dict, repr=False)


def loop_config(cfg: RunConfig, decode: bool | None = None) -> LoopConfig:
    return LoopConfig(k=cfg.k, max_iterations=cfg.max_iterations, max_answer_tokens=cfg.max_answer_tokens,
                      context_cap=cfg.max_context, decode=cfg.decode if decode is None else decode,
                      decode_max_tokens=cfg.decode_max_tokens)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, num_bins=cfg.num_bins,
                       seed=cfg.seed, beta=cfg.beta, weights=LossWeights(cfg.lambda_ret), grad_clip=cfg.grad_clip,
                       warmup_steps=cfg.warmup_steps, final_lr_fraction=cfg.final_lr_fraction,
                       answer_swap=cfg.answer_swap)


def model_config(cfg: RunConfig, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(len(vocab), d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                       d_ff=cfg.d_ff, max_context=cfg.max_context, m=cfg.m, n=cfg.n, dropout=cfg.dropout)


# ---------------------------------------------------------------------------
# in-memory pipeline

def generate_items(cfg: RunConfig):
    return synth.generate(cfg.data_seed, cfg.n_persons, cfg.n_cities, cfg.n_test_cities, cfg.n_train, cfg.n_test,
                          cfg.two_hop_fraction, cfg.hops or None)


def pretrain_reference(cfg: RunConfig, graph: synth.FactGraph, vocab: Vocabulary, progress=None) -> Encoder:
    enc = Encoder(EncoderConfig(len(vocab), d_model=cfg.d_ret, n_layers=cfg.enc_layers, n_heads=cfg.enc_heads,
                                d_ff=cfg.enc_d_ff), seed=cfg.data_seed)
    pretrain_encoder(enc, vocab, synth.encoder_pretraining_pairs(graph), epochs=cfg.enc_epochs, lr=cfg.enc_lr,
                     beta=cfg.enc_beta, seed=cfg.data_seed, log=progress)
    return enc


def run_teacher(items, index, reference, k) -> list[TeacherTrajectory]:
    return [synth.teacher_run(it, index, reference, k) for it in items]


def build_world(cfg: RunConfig, progress=None) -> World:
    graph, train_items, test_items = generate_items(cfg)
    vocab = synth.build_vocabulary(graph, cfg.m, cfg.n)
    enc = pretrain_reference(cfg, graph, vocab, progress)
    reference = ReferenceEncoder(enc, vocab)
    index = build_index(graph.documents, reference)
    return World(graph, train_items, test_items, vocab, enc, reference, index,
                 run_teacher(train_items, index, reference, cfg.k), run_teacher(test_items, index, reference, cfg.k),
                 [list(graph.persons), list(graph.cities)])


def with_slots(world: World, m: int, n: int) -> World:
    """Same world re-keyed for different slot counts.

    Slot tokens never occur in documents or subqueries, so moving the encoder's
    embedding rows onto the new ids leaves every reference vector unchanged.
    """
    vocab = Vocabulary(world.vocab.tokens[len(world.vocab.special_tokens):], m, n)
    old = world.vocab
    enc = Encoder(dataclasses.replace(world.encoder.config, vocab_size=len(vocab)), 0)
    state = world.encoder.state_dict()
    emb = np.zeros((len(vocab), enc.dim))
    for tok, i in vocab.index.items():
        if tok in old.index:
            emb[i] = state["tok_emb"][old.index[tok]]
    state["tok_emb"] = emb
    enc.load_state_dict(state)
    reference = ReferenceEncoder(enc, vocab)
    return World(world.graph, world.train_items, world.test_items, vocab, enc, reference, world.index,
                 world.teacher_train, world.teacher_test, world.entity_groups)


def swap_pools(world: World) -> dict:
    groups = [[world.vocab.index[w] for w in g if w in world.vocab.index] for g in world.entity_groups]
    return entity_pools([g for g in groups if len(g) > 1])


def train_system(cfg: RunConfig, world: World, out_dir=None, progress=None) -> tuple[LatentRAG, TrainResult, int]:
    system = LatentRAG(world.vocab, model_config(cfg, world.vocab), world.encoder, cfg.arm, cfg.seed)
    pools = swap_pools(world) if cfg.answer_swap > 0 else None
    if cfg.warm_epochs > 0:
        key = cfg.replace(arm="kl").hash()
        if key not in world.warm_states:
            pretrain_explicit(system.llm, world.vocab, world.index, world.teacher_train, cfg.warm_epochs,
                              cfg.warm_lr, cfg.batch_size, cfg.seed, cfg.warm_corpus, pools, cfg.answer_swap,
                              progress)
            world.warm_states[key] = (system.llm.state_dict(), system.llm.rng.bit_generator.state)
        weights, rng_state = world.warm_states[key]
        system.llm.load_state_dict(weights)
        system.llm.rng.bit_generator.state = rng_state
    if cfg.slot_init:
        init_slot_embeddings(system.llm, world.vocab, world.teacher_train)
    examples, skipped = build_training_examples(world.teacher_train, system, world.index, cfg.seq_cap,
                                                cfg.n_pseudo)
    if skipped:
        log.info("skipped %d teacher trajectories (incorrect or over the length cap)", skipped)
    result = train(system, examples, world.index, train_config(cfg), out_dir, cfg.hash(), progress, pools)
    return system, result, len(examples)


@dataclass
class Evaluation:
    latent: EvalReport
    explicit: EvalReport
    trajectories: list[LatentTrajectory]
    explicit_ledgers: list


def evaluate(system: LatentRAG, index: CorpusIndex, items: Sequence[synth.QAItem],
             teacher: Sequence[TeacherTrajectory], loop: LoopConfig, method: str = "latent",
             explicit: bool = True) -> Evaluation:
    if [t.qid for t in teacher] != [it.qid for it in items]:
        raise DataError("teacher trajectories are not aligned with the evaluation questions")
    trajs = run_questions([it.question for it in items], system, index, loop)
    golds = [it.answers for it in items]
    ems = [em_score(t.answer, g) for t, g in zip(trajs, golds)]
    step_texts = [[" ".join(r[2] for r in s.retrieved) for s in t.retrieval_steps] for t in trajs]
    success = retrieval_success_rate(step_texts, golds)
    overlap = retrieval_overlap({it.qid: t.retrieved_ids() for it, t in zip(items, trajs)},
                                {it.qid: {d for s in tt.steps for d in s.doc_ids} for it, tt in zip(items, teacher)})
    ratios = [max_length_ratio(t.decoded_lengths) for t in trajs if t.decoded_lengths]
    teacher_em = float(np.mean([em_score(t.answer, t.gold) for t in teacher])) if teacher else None
    name = f"{method}+decode" if loop.decode else method
    latent = summarize(name, [t.ledger for t in trajs], ems, success, overlap, ratios, teacher_em)
    latent.extra.update(_em_by_hops(items, ems))
    exp_ledgers = []
    exp_report = None
    if explicit:
        exp_ledgers = [simulate_explicit(system.llm, system.vocab, t, index, system.reference, INSTRUCTION,
                                         format_information_block, loop.k) for t in teacher]
        t_ems = [em_score(t.answer, t.gold) for t in teacher]
        t_texts = [[" ".join(index.documents[index.position[d]].text for d in s.doc_ids) for s in t.steps]
                   for t in teacher]
        t_ratios = [max_length_ratio([n for n in explicit_output_lengths(system.vocab, t) if n > 0]) for t in teacher]
        exp_report = summarize("explicit-teacher", exp_ledgers, t_ems, retrieval_success_rate(t_texts, golds), 1.0,
                               t_ratios, teacher_em)
        exp_report.extra.update(_em_by_hops(items, t_ems))
    return Evaluation(latent, exp_report, trajs, exp_ledgers)


def _em_by_hops(items, ems) -> dict:
    out = {}
    for h in (1, 2):
        sel = [e for it, e in zip(items, ems) if it.hops == h]
        out[f"em_hop{h}"] = float(np.mean(sel)) if sel else None
    return out


# ---------------------------------------------------------------------------
# on-disk stages

class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        files = {"corpus": "corpus.jsonl", "train_items": "train_qa.jsonl", "test_items": "test_qa.jsonl",
                 "vocab": "vocab.json", "encoder": "encoder.ckpt", "index": "index.bin",
                 "teacher_train": "teacher_train.jsonl", "teacher_test": "teacher_test.jsonl",
                 "train_dir": "train", "checkpoint": "train/final.ckpt", "eval_dir": "eval",
                 "config": "config.txt", "world": "world.json"}
        if name in files:
            return self.root / files[name]
        raise AttributeError(name)


def stage_gen_data(cfg: RunConfig, wd: Workdir) -> dict:
    wd.root.mkdir(parents=True, exist_ok=True)
    graph, train_items, test_items = generate_items(cfg)
    vocab = synth.build_vocabulary(graph, cfg.m, cfg.n)
    h = cfg.hash()
    write_corpus(wd.corpus, graph.documents, h)
    write_jsonl(wd.train_items, (it.to_record() for it in train_items), h)
    write_jsonl(wd.test_items, (it.to_record() for it in test_items), h)
    wd.vocab.write_text(vocab.to_json(), encoding="utf-8")
    persons_cities = {"persons": graph.persons, "cities": graph.cities, "test_cities": graph.test_cities}
    wd.world.write_text(json.dumps({"config_hash": h, **persons_cities}, sort_keys=True),
                                        encoding="utf-8")
    return {"documents": len(graph.documents), "train": len(train_items), "test": len(test_items),
            "hops": {h_: sum(it.hops == h_ for it in train_items + test_items) for h_ in (1, 2)}}


def _load_graph_pairs(wd: Workdir) -> synth.FactGraph:
    """A graph stub sufficient for encoder pretraining (documents only)."""
    docs = read_corpus(wd.corpus)
    graph = synth.FactGraph([], [], [], {}, {}, docs)
    for d in docs:
        relation, subject = _doc_relation(d.text)
        graph.doc_of[(relation, subject)] = d.id
    return graph


def _doc_relation(text: str) -> tuple[str, str]:
    words = text.split()
    if len(words) == 6 and words[1:4] == ["was", "born", "in"]:
        return "birthplace", words[0]
    if len(words) == 7 and words[0] == "the" and words[2] == "of" and words[4] == "is":
        return words[1], words[3]
    raise DataError(f"unrecognised corpus document: {text!r}")


def stage_build_index(cfg: RunConfig, wd: Workdir, progress=None) -> dict:
    vocab = Vocabulary.from_json(wd.vocab.read_text(encoding="utf-8"))
    graph = _load_graph_pairs(wd)
    enc = pretrain_reference(cfg, graph, vocab, progress)
    T.save_archive(wd.encoder, enc.state_dict(), {"kind": "encoder", "encoder_config": vars(enc.config),
                                                  "config_hash": cfg.hash()})
    reference = ReferenceEncoder(enc, vocab)
    index = build_index(graph.documents, reference)
    digest = index.save(wd.index, cfg.hash())
    items = load_items(wd.train_items) + load_items(wd.test_items)
    return {"index_sha256": digest, "validation_top_k": synth.validate_retrieval(items, index, reference, cfg.k)}


def load_items(path) -> list[synth.QAItem]:
    return [synth.QAItem.from_record(r) for r in read_jsonl(path)[1]]


def load_encoder(wd: Workdir) -> Encoder:
    arrays, meta = T.load_archive(wd.encoder)
    enc = Encoder(EncoderConfig(**meta["encoder_config"]))
    enc.load_state_dict(arrays)
    return enc


def stage_teach(cfg: RunConfig, wd: Workdir) -> dict:
    vocab = Vocabulary.from_json(wd.vocab.read_text(encoding="utf-8"))
    reference = ReferenceEncoder(load_encoder(wd), vocab)
    index = CorpusIndex.load(wd.index)
    out = {}
    for name, items_path, dest in (("train", wd.train_items, wd.teacher_train),
                                   ("test", wd.test_items, wd.teacher_test)):
        trajs = run_teacher(load_items(items_path), index, reference, cfg.k)
        write_jsonl(dest, (t.to_record() for t in trajs), cfg.hash())
        out[f"teacher_em_{name}"] = float(np.mean([t.correct for t in trajs])) if trajs else None
    return out


def load_world(wd: Workdir) -> World:
    for p in (wd.vocab, wd.encoder, wd.index, wd.teacher_train, wd.teacher_test, wd.world):
        if not p.exists():
            raise DataError(f"missing {p}; run gen-data first")
    vocab = Vocabulary.from_json(wd.vocab.read_text(encoding="utf-8"))
    enc = load_encoder(wd)
    teach = lambda p: [TeacherTrajectory.from_record(r) for r in read_jsonl(p)[1]]  # noqa: E731
    meta = json.loads(wd.world.read_text(encoding="utf-8"))
    groups = [meta["persons"], meta["cities"]]
    return World(None, load_items(wd.train_items), load_items(wd.test_items), vocab, enc,
                 ReferenceEncoder(enc, vocab), CorpusIndex.load(wd.index), teach(wd.teacher_train),
                 teach(wd.teacher_test), groups)


def stage_train(cfg: RunConfig, wd: Workdir, progress=None) -> dict:
    world = load_world(wd)
    system, result, n_examples = train_system(cfg, world, wd.train_dir, progress)
    digest = system.save(wd.checkpoint, {"config_hash": cfg.hash(), "epoch": cfg.epochs})
    return {"examples": n_examples, "checkpoint_sha256": digest, "final": result.epoch_means[-1]}


def write_eval_outputs(ev: Evaluation, out_dir: Path, config_hash: str, with_timing_series: bool = True) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [ev.latent] + ([ev.explicit] if ev.explicit else [])
    write_tsv(out_dir / "report.tsv", ["method", "metric", "value"],
              [row for r in reports for row in r.metric_rows()], config_hash)
    write_tsv(out_dir / "latency.tsv", ["method", "stage", "mean_ms", "percent"],
              [row for r in reports for row in r.latency_rows()], config_hash)
    write_tsv(out_dir / "series.tsv", ["stage", "method", "value"],
              [[stage, r.method, ms] for r in reports for _, stage, ms, _ in r.latency_rows() if stage != "total"],
              config_hash)
    write_jsonl(out_dir / "trajectories.jsonl", (t.to_record(with_timing=False) for t in ev.trajectories),
                config_hash)


def stage_eval(cfg: RunConfig, wd: Workdir, checkpoint=None, decode: bool | None = None) -> Evaluation:
    world = load_world(wd)
    system = LatentRAG.load(checkpoint or wd.checkpoint)
    ev = evaluate(system, world.index, world.test_items, world.teacher_test, loop_config(cfg, decode),
                  method=cfg.arm)
    write_eval_outputs(ev, wd.eval_dir, cfg.hash())
    return ev


# ---------------------------------------------------------------------------
# sweeps and ablations

ABLATION_BASELINES = ("cosine", "infonce", "no-retriever")


def run_arm(cfg: RunConfig, world: World, arm: str, seed: int, eval_items=None, eval_teacher=None,
            progress=None) -> EvalReport:
    c = cfg.replace(arm=arm, seed=seed)
    system, _, _ = train_system(c, world, None, progress)
    items = world.test_items if eval_items is None else eval_items
    teacher = world.teacher_test if eval_teacher is None else eval_teacher
    return evaluate(system, world.index, items, teacher, loop_config(c, False), method=arm, explicit=False).latent


def ordering_flags(success: dict[str, float | None], primary: str = "kl",
                   baselines: Sequence[str] = ABLATION_BASELINES) -> list[str]:
    """Names of baseline arms whose retrieval success beats the primary arm."""
    top = success.get(primary)
    flags = []
    for arm in baselines:
        if arm not in success:
            continue
        if top is None or (success[arm] is not None and success[arm] > top):
            flags.append(f"ordering-violated:{arm}")
    return flags


def write_ablation(path, cfg: RunConfig, per_seed: dict[str, list[EvalReport]]) -> list[str]:
    success = {arm: _mean_or_none([r.retrieval_success for r in reps]) for arm, reps in per_seed.items()}
    flags = ordering_flags(success)
    rows = []
    for arm, reps in per_seed.items():
        rows.append([arm, len(reps), success[arm], _mean_or_none([r.em for r in reps]),
                     _mean_or_none([r.retrieval_overlap for r in reps]), _mean_or_none([r.mean_passes for r in reps])])
    write_tsv(path, ["arm", "seeds", "retrieval_success", "em", "retrieval_overlap", "mean_passes"], rows,
              cfg.hash(), comments=[f"ordering={'ok' if not flags else ';'.join(flags)}"])
    return flags


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def sweep_tokens(cfg: RunConfig, world: World, m_list: Sequence[int], n_list: Sequence[int],
                 progress=None) -> dict[tuple[int, int], float]:
    grid = {}
    for m in m_list:
        for n in n_list:
            w = with_slots(world, m, n)
            c = cfg.replace(m=m, n=n)
            system, _, _ = train_system(c, w, None, progress)
            ev = evaluate(system, w.index, w.test_items, w.teacher_test, loop_config(c, False), explicit=False)
            grid[(m, n)] = ev.latent.em
    return grid


# ---------------------------------------------------------------------------
# analysis

def logit_lens_rows(system: LatentRAG, trajs: Sequence[LatentTrajectory], k: int = 5) -> list[list]:
    """One row per latent token: question index, step, kind, slot, then k top tokens."""
    rows = []
    for qi, t in enumerate(trajs):
        for si, s in enumerate(t.steps):
            blocks = [("thought", s.latent_thought)]
            if s.latent_subquery is not None:
                blocks.append(("subquery", s.latent_subquery))
            for kind, block in blocks:
                for slot, h in enumerate(block, 1):
                    top = system.llm.logit_lens(h, k, system.vocab)
                    rows.append([qi, si + 1, kind, slot] + [tok for tok, _ in top])
    return rows


def ratio_stats(ratios: Sequence[float]) -> dict[str, float]:
    r = np.asarray(ratios, dtype=float)
    if r.size == 0:
        raise ValueError("no decoded trajectories to summarise")
    return {"count": int(r.size), "mean": float(r.mean()), "min": float(r.min()), "median": float(np.median(r)),
            "max": float(r.max())}
