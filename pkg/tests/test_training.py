import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentrag import tensor as T
from latentrag.agent import INSTRUCTION
from latentrag.records import read_tsv
from latentrag.training import (LOG_COLUMNS, LossWeights, SequenceTooLong, TeacherTrajectory, TrainConfig,
                                build_training_example, build_training_examples, joint_loss,
                                entity_pools, explicit_sequence, init_slot_embeddings, make_binned_batches,
                                pick_substitute, pretrain_explicit, train)
from latentrag.vocab import ANSWER_CLOSE, ANSWER_OPEN

from test_agent import make_system


@pytest.fixture
def setup(tiny_world):
    system = make_system(tiny_world)
    correct = [t for t in tiny_world["teacher"] if t.correct]
    return system, correct, tiny_world["index"]


def test_one_step_layout(setup):
    system, trajs, index = setup
    v = system.vocab
    t = next(t for t in trajs if t.hops == 1)
    ex = build_training_example(t, system, index)
    ids = list(ex.ids)
    q_start = ex.query_positions[0][0]
    assert ids[q_start - v.m:q_start] == list(v.thought_ids)
    assert ids[q_start:q_start + v.n] == list(v.query_ids)
    assert ids[q_start + v.n] == v.index["<information>"]
    # non-slot regions detokenise to the template
    prefix = v.decode(ids[:q_start - v.m])
    assert prefix == " ".join((INSTRUCTION + " " + t.question).split())
    tail = v.decode(ids[-3:])
    assert tail == f"{ANSWER_OPEN} {t.answer} {ANSWER_CLOSE}"
    assert ex.action_targets == [v.query_action_id, v.answer_action_id]
    assert ex.answer_targets == [v.index[ANSWER_OPEN]] + v.encode(t.answer) + [v.index[ANSWER_CLOSE]]


def test_pseudo_relevant_is_brute_force_top16(setup):
    system, trajs, index = setup
    t = next(t for t in trajs if t.hops == 2)
    ex = build_training_example(t, system, index)
    for vec, ids in zip(ex.reference_vecs, ex.pseudo_relevant):
        s = index.embeddings @ vec
        brute = [index.documents[i].id for i in np.lexsort((np.arange(len(s)), -s))[:16]]
        assert ids == brute


def test_incorrect_and_overlong_are_skipped(setup, tiny_world):
    system, trajs, index = setup
    bad = [t for t in tiny_world["teacher"] if not t.correct]
    with pytest.raises(SequenceTooLong):
        build_training_example(trajs[0], system, index, cap=10)
    ex, skipped = build_training_examples(trajs[:5] + bad, system, index)
    assert len(ex) == 5 and skipped == len(bad)


def test_lambda_zero_total(setup):
    system, trajs, index = setup
    batch, _ = build_training_examples(trajs[:3], system, index)
    parts = joint_loss(system, batch, index, LossWeights(0.0))
    assert parts.total.item() == parts.gen.item() + parts.dec.item()
    assert parts.dec.item() == parts.dec_thought.item() + parts.dec_subquery.item()


@pytest.mark.parametrize("arm", ["kl", "cosine", "infonce", "no-retriever", "no-decoding"])
def test_joint_loss_gradient_check(tiny_world, arm):
    """Finite differences on a 2-example micro-batch through every loss term."""
    system = make_system(tiny_world, arm)
    trajs = [t for t in tiny_world["teacher"] if t.correct][:2]
    batch, _ = build_training_examples(trajs, system, tiny_world["index"])
    head = system.head.proj.weight if arm == "no-retriever" else system.head.attn.qkv.weight
    params = [system.llm.ln_f.weight, head]
    if arm != "no-decoding":
        params.append(system.decoder.thought_proj.ln_mid.bias)
    if arm not in ("no-retriever",):
        params.append(system.encoder.blocks[0].ln1.bias)
    fn = lambda: joint_loss(system, batch, tiny_world["index"]).total  # noqa: E731
    assert T.gradient_check(fn, params) < 1e-4


def test_binned_batches_example():
    batches = make_binned_batches([5, 6, 100, 101], 2, 2, seed=0)
    assert sorted(sorted(b) for b in batches) == [[0, 1], [2, 3]]


def test_single_bin_is_plain_shuffle():
    lengths = list(range(10, 40))
    batches = make_binned_batches(lengths, 1, 4, seed=3)
    assert sorted(i for b in batches for i in b) == list(range(30))
    assert [len(b) for b in batches].count(4) == 7


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=80), st.integers(1, 10), st.integers(1, 8),
       st.integers(0, 99))
def test_binned_batches_stay_within_bin_width(lengths, bins, bs, seed):
    batches = make_binned_batches(lengths, bins, bs, seed)
    assert sorted(i for b in batches for i in b) == list(range(len(lengths)))
    width = (max(lengths) - min(lengths)) / bins
    for b in batches:
        ls = [lengths[i] for i in b]
        assert max(ls) - min(ls) <= width + 1e-9
        assert len(b) <= bs


def test_train_overfit_and_reproducible(tiny_world, tmp_path):
    trajs = [t for t in tiny_world["teacher"] if t.correct][:20]
    cfg = TrainConfig(epochs=10, lr=3e-3, batch_size=10, num_bins=1, seed=0)

    def run(out):
        system = make_system(tiny_world)
        ex, _ = build_training_examples(trajs, system, tiny_world["index"])
        ref = system.reference.encoder.state_dict()
        res = train(system, ex, tiny_world["index"], cfg, out, "cfg")
        for k, v in system.reference.encoder.state_dict().items():
            np.testing.assert_array_equal(v, ref[k])
        return res

    a = run(tmp_path / "a")
    b = run(tmp_path / "b")
    assert a.checkpoint_hashes == b.checkpoint_hashes
    first, last = a.epoch_means[0], a.epoch_means[-1]
    for k in ("L_gen", "L_ret", "L_dec"):
        assert last[k] < first[k]
    h, header, rows = read_tsv(tmp_path / "a" / "loss_log.tsv")
    assert h == "cfg" and header == LOG_COLUMNS and len(rows) == 20
    assert "# arm=kl" in (tmp_path / "a" / "loss_log.tsv").read_text()


def test_train_raises_on_divergence(tiny_world):
    system = make_system(tiny_world)
    trajs = [t for t in tiny_world["teacher"] if t.correct][:2]
    ex, _ = build_training_examples(trajs, system, tiny_world["index"])
    system.llm.out_bias.data[0] = np.nan
    with pytest.raises(T.DivergenceError):
        train(system, ex, tiny_world["index"], TrainConfig(epochs=1))


# -- warm start, slot init, answer substitution -------------------------------

def test_swap_token_replaces_everywhere(setup, tiny_world):
    system, trajs, index = setup
    v = system.vocab
    t = next(t for t in trajs if t.hops == 2)
    ex = build_training_example(t, system, index)
    old = ex.answer_token
    assert old == v.index[t.answer]
    pools = entity_pools([[v.index[c] for c in tiny_world["graph"].cities]])
    new = pick_substitute(old, ex.ids, pools, np.random.default_rng(0))
    assert new in pools[old] and new not in ex.ids
    sw = ex.swap_token(old, new)
    assert old not in sw.ids and (sw.ids == new).sum() == (ex.ids == old).sum()
    assert sw.answer_token == new
    assert all(old not in th for th in sw.thought_targets)
    assert old in ex.ids  # original untouched
    np.testing.assert_array_equal(sw.reference_vecs, ex.reference_vecs)


def test_pick_substitute_without_group_or_candidates():
    rng = np.random.default_rng(0)
    pools = entity_pools([[5, 6]])
    assert pick_substitute(None, [1], pools, rng) is None
    assert pick_substitute(9, [1], pools, rng) is None
    assert pick_substitute(5, [5, 6], pools, rng) is None
    assert pick_substitute(5, [5], pools, rng) == 6


def test_explicit_sequence_supervises_outputs_only(setup):
    system, trajs, index = setup
    v = system.vocab
    t = next(t for t in trajs if t.hops == 2)
    ids, pred = explicit_sequence(t, v, index)
    supervised = v.decode([ids[p + 1] for p in pred])
    expected = " ".join(v.decode(v.encode(x)) for x in (
        t.steps[0].thought, "<query>", t.steps[0].subquery, t.steps[1].thought, "<query>", t.steps[1].subquery,
        t.final_thought, f"<answer> {ANSWER_OPEN} {t.answer} {ANSWER_CLOSE}"))
    assert supervised == expected
    assert v.index["<information>"] in ids and not any(ids[p + 1] == v.index["<information>"] for p in pred)


def test_init_slot_embeddings_is_positional_mean(setup):
    system, trajs, _ = setup
    v, emb = system.vocab, system.llm.tok_emb.data
    init_slot_embeddings(system.llm, v, trajs)
    subs = [v.encode(s.subquery) for t in trajs for s in t.steps]
    for i in (0, 3):
        np.testing.assert_allclose(emb[v.query_ids[i]], np.mean([emb[x[i % len(x)]] for x in subs], axis=0))


def test_warm_start_lowers_lm_loss(setup):
    system, trajs, index = setup
    losses = pretrain_explicit(system.llm, system.vocab, index, trajs[:40], epochs=3, lr=3e-3, batch_size=8,
                               corpus=False)
    assert len(losses) == 3 and losses[-1] < losses[0]
    assert not system.llm.training


def test_cached_warm_start_matches_fresh():
    from latentrag.config import build_config
    from latentrag.experiment import build_world, train_system
    cfg = build_config(overrides=["n_persons=40", "n_cities=20", "n_test_cities=6", "n_train=170", "n_test=30",
                                  "enc_epochs=1", "warm_epochs=1", "epochs=1", "d_model=16", "d_ff=32",
                                  "n_layers=1", "n_heads=2", "m=2", "n=4", "dropout=0.1"])
    world = build_world(cfg)
    first = train_system(cfg, world)[0].state_arrays()
    assert len(world.warm_states) == 1
    cached = train_system(cfg, world)[0].state_arrays()
    other_arm = train_system(cfg.replace(arm="cosine"), world)[0]
    assert len(world.warm_states) == 1 and other_arm.arm == "cosine"
    assert first.keys() == cached.keys()
    assert all(np.array_equal(first[k], cached[k]) for k in first)
