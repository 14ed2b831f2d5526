import numpy as np
import pytest

from latentrag.agent import (INSTRUCTION, LatentRAG, LoopConfig, decide_action, extract_answer,
                             format_information_block, run_question, run_questions)
from latentrag.decoder import DecodeItem, decode_latent_block, decode_parallel, decode_parallel_tokens
from latentrag.evaluation import count_passes, forward_pass_summary
from latentrag.ledger import ForwardPassLedger
from latentrag.transformer import ModelConfig
from latentrag.vocab import ACTION_ANSWER, ACTION_QUERY, ANSWER_CLOSE, INFO_CLOSE, INFO_OPEN


def make_system(world, arm="kl", max_context=160, seed=0):
    vocab = world["vocab"]
    cfg = ModelConfig(len(vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_context=max_context,
                      m=vocab.m, n=vocab.n, dropout=0.0, init_std=0.3)
    return LatentRAG(vocab, cfg, world["encoder"], arm, seed)


def _force(system, token_id, strength=1e3):
    system.llm.out_bias.data[:] = 0.0
    system.llm.out_bias.data[token_id] = strength


@pytest.fixture
def system(tiny_world):
    return make_system(tiny_world)


def test_pass_identity_on_every_trajectory(system, tiny_world):
    cfg = LoopConfig(k=3, max_iterations=4, max_answer_tokens=5)
    for it in tiny_world["test"][:8]:
        t = run_question(it.question, system, tiny_world["index"], cfg)
        s, a = len(t.retrieval_steps), len(t.answer_tokens)
        assert count_passes(t.ledger) == 2 * s + 1 + a
        assert len(t.steps) == s + 1


def test_iteration_cap_forces_answer(system, tiny_world):
    _force(system, system.vocab.query_action_id)
    t = run_question(tiny_world["test"][0].question, system, tiny_world["index"], LoopConfig(max_iterations=3))
    assert t.termination_reason == "iteration-cap"
    assert len(t.retrieval_steps) == 2 and t.steps[-1].action == ACTION_ANSWER
    assert count_passes(t.ledger) == 2 * 2 + 1 + len(t.answer_tokens)
    summ = forward_pass_summary(t.ledger)
    assert summ["retrieval"].passes == 0 and summ["subquery-gen"].passes == 2


def test_two_step_trajectory_event_count(system, tiny_world):
    _force(system, system.vocab.query_action_id)
    t = run_question(tiny_world["test"][1].question, system, tiny_world["index"],
                     LoopConfig(max_iterations=3, max_answer_tokens=4))
    a = len(t.answer_tokens)
    assert len(t.ledger) - sum(e.kind == "index-query" for e in t.ledger) == 2 * 2 + 1 + a


def test_immediate_answer(system, tiny_world):
    _force(system, system.vocab.answer_action_id)
    t = run_question(tiny_world["test"][0].question, system, tiny_world["index"], LoopConfig(max_answer_tokens=3))
    assert t.termination_reason == "answered" and not t.retrieval_steps
    assert count_passes(t.ledger) == 1 + len(t.answer_tokens)


def test_context_cap(tiny_world):
    system = make_system(tiny_world, max_context=70)
    _force(system, system.vocab.query_action_id)
    t = run_question(tiny_world["test"][0].question, system, tiny_world["index"], LoopConfig(max_iterations=4))
    assert t.termination_reason == "context-cap"
    assert count_passes(t.ledger) == 2 * len(t.retrieval_steps) + 1 + len(t.answer_tokens)


def test_decide_action_constructed_and_deterministic(system):
    v = system.vocab
    _force(system, v.answer_action_id)
    h = np.random.default_rng(0).normal(size=16)
    assert decide_action(system.llm, v, h) == ACTION_ANSWER
    _force(system, v.query_action_id)
    assert {decide_action(system.llm, v, h) for _ in range(5)} == {ACTION_QUERY}


def test_information_block(tiny_world):
    v = tiny_world["vocab"]
    docs = [d.text for d in tiny_world["index"].documents[:3]]
    ids = format_information_block(v, docs)
    assert ids.count(v.index[INFO_OPEN]) == 1 and ids.count(v.index[INFO_CLOSE]) == 1
    text = v.decode(ids)
    assert v.encode(text) == ids
    assert [text.index(d) for d in docs] == sorted(text.index(d) for d in docs)
    assert text.index("doc 1 :") < text.index("doc 2 :") < text.index("doc 3 :")
    with pytest.raises(ValueError):
        format_information_block(v, [])


def test_extract_answer(tiny_world):
    v = tiny_world["vocab"]
    city = tiny_world["graph"].cities[0]
    toks = [v.index["<Answer>"]] + v.encode(city) + [v.index[ANSWER_CLOSE]] + v.encode("where")
    assert extract_answer(v, toks) == city
    assert extract_answer(v, v.encode(city + " where")) == city + " where"


def _blocks(system, rng, count):
    v = system.vocab
    items = []
    for i in range(count):
        kind = "thought" if i % 2 else "subquery"
        rows = v.m if kind == "thought" else v.n
        items.append(DecodeItem(rng.normal(size=(rows, 16)), kind))
    return items


def test_parallel_decode_equals_sequential(system):
    items = _blocks(system, np.random.default_rng(1), 12)
    led = ForwardPassLedger()
    par = decode_parallel_tokens(system.llm, system.decoder, system.vocab, items, 9, led)
    seq = [decode_parallel_tokens(system.llm, system.decoder, system.vocab, [it], 9)[0] for it in items]
    assert par == seq
    assert len(led) == max(len(o) for o in par)
    one = decode_parallel(system.llm, system.decoder, system.vocab, items[:1], 9)
    assert one == [decode_latent_block(system.llm, system.decoder, system.vocab, items[0].block, items[0].kind, 9)]


def test_decode_events_follow_longest_item(system):
    v = system.vocab
    # EOS as soon as the hidden says so: force everything to EOS -> one step
    _force(system, v.eos_id)
    items = _blocks(system, np.random.default_rng(2), 5)
    led = ForwardPassLedger()
    out = decode_parallel_tokens(system.llm, system.decoder, v, items, 20, led)
    assert all(o == [v.eos_id] for o in out) and len(led) == 1
    _force(system, v.index["where"])
    led = ForwardPassLedger()
    out = decode_parallel_tokens(system.llm, system.decoder, v, items, 20, led)
    assert [len(o) for o in out] == [20] * 5 and len(led) == 20


def test_decode_depends_only_on_block(system, tiny_world):
    rng = np.random.default_rng(3)
    block = rng.normal(size=(system.vocab.m, 16))
    other = _blocks(system, rng, 4)
    a = decode_parallel(system.llm, system.decoder, system.vocab, [DecodeItem(block, "thought")] + other, 6)[0]
    b = decode_parallel(system.llm, system.decoder, system.vocab, other[::-1] + [DecodeItem(block, "thought")], 6)[-1]
    assert a == b


def test_decoding_trajectories_adds_decode_passes(system, tiny_world):
    _force(system, system.vocab.query_action_id, 5.0)
    cfg = LoopConfig(max_iterations=3, decode=True, decode_max_tokens=7)
    t = run_question(tiny_world["test"][2].question, system, tiny_world["index"], cfg)
    s, a = len(t.retrieval_steps), len(t.answer_tokens)
    assert count_passes(t.ledger) == 2 * s + 1 + a + max(t.decoded_lengths)
    assert len(t.decoded_lengths) == len(t.steps) + s
    assert all(step.thought_text is not None for step in t.steps)


def test_checkpoint_roundtrip_reproduces_trajectories(system, tiny_world, tmp_path):
    h1 = system.save(tmp_path / "a.ckpt")
    back = LatentRAG.load(tmp_path / "a.ckpt")
    assert back.save(tmp_path / "b.ckpt") == h1
    qs = [it.question for it in tiny_world["test"][:4]]
    cfg = LoopConfig(max_answer_tokens=4)
    a = [t.to_record() for t in run_questions(qs, system, tiny_world["index"], cfg)]
    b = [t.to_record() for t in run_questions(qs, back, tiny_world["index"], cfg)]
    assert a == b


def test_instruction_is_encodable(tiny_world):
    v = tiny_world["vocab"]
    assert v.index["<unk>"] not in v.encode(INSTRUCTION)
