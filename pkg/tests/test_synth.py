import numpy as np
import pytest

from latentrag import synth
from latentrag.evaluation import em_score
from latentrag.vocab import split_words

SMALL = dict(n_persons=40, n_cities=20, n_test_cities=6, n_train=170, n_test=30)


def test_generate_is_deterministic():
    g1, tr1, te1 = synth.generate(5, **SMALL)
    g2, tr2, te2 = synth.generate(5, **SMALL)
    assert g1.documents == g2.documents
    assert [i.to_record() for i in tr1 + te1] == [i.to_record() for i in tr2 + te2]
    g3, _, _ = synth.generate(6, **SMALL)
    assert g3.documents != g1.documents


def test_item_structure_and_held_out_answers():
    g, train, test = synth.generate(0, **SMALL)
    for it in train + test:
        assert len(it.subqueries) == it.hops == len(it.support)
    held = set(g.test_cities)
    assert all(it.answers[0] in held for it in test)
    assert not any(it.answers[0] in held for it in train)
    assert len({it.qid for it in train + test}) == len(train) + len(test)


def test_hops_restriction():
    _, train, test = synth.generate(0, n_persons=80, n_cities=20, n_test_cities=6, n_train=150, n_test=50, hops=2)
    assert {it.hops for it in train + test} == {2}


def test_infeasible_sizes_raise():
    with pytest.raises(synth.GenerationError):
        synth.generate(0, n_persons=10, n_cities=10, n_test_cities=2, n_train=50, n_test=10)
    with pytest.raises(synth.GenerationError):
        synth.generate(0, n_persons=40, n_cities=20, n_test_cities=6, n_train=170, n_test=500)


def test_vocabulary_covers_all_text(tiny_world):
    v = tiny_world["vocab"]
    unk = v.index["<unk>"]
    for d in tiny_world["graph"].documents:
        assert unk not in v.encode(d.text)
    for it in tiny_world["train"] + tiny_world["test"]:
        assert unk not in v.encode(it.question)


def test_gold_subqueries_retrieve_support(tiny_world):
    items = tiny_world["train"] + tiny_world["test"]
    assert synth.validate_retrieval(items, tiny_world["index"], tiny_world["reference"], 3) >= 0.95


def test_teacher_templates(tiny_world):
    one = next(t for t in tiny_world["teacher"] if t.hops == 1 and t.correct)
    assert len(one.steps) == 1 and one.final_thought.endswith("i can answer now .")
    two = next(t for t in tiny_world["teacher"] if t.hops == 2 and t.correct)
    assert len(two.steps) == 2
    bridge = two.steps[1].subquery.split()[-1]
    assert bridge in split_words(two.steps[1].thought) and bridge in split_words(two.final_thought)
    assert two.steps[1].subquery == f"birthplace of {bridge}"
    for t in tiny_world["teacher"]:
        assert t.correct == bool(em_score(t.answer, t.gold))
