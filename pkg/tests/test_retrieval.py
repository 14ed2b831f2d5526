import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentrag import tensor as T
from latentrag.retrieval import (CorpusIndex, DegenerateMeanError, Document, Encoder, EncoderConfig,
                                 IndexBuildError, PairingError, ReferenceEncoder, RetrieverProjector,
                                 anisotropy_report, build_index, calibrate_temperature, candidate_union,
                                 cosine_alignment_loss, distribution_from_scores, embed_latent_subquery,
                                 embed_latent_subquery_np, embed_reference_subquery, infonce_loss, kl_batch_loss,
                                 kl_retrieval_loss, read_corpus, similarity_distribution, write_corpus)
from latentrag.tensor import Tensor, parameter
from latentrag.vocab import Vocabulary

from conftest import WORDS, random_unit_rows


@pytest.fixture
def enc_setup():
    vocab = Vocabulary(WORDS, 2, 3)
    enc = Encoder(EncoderConfig(len(vocab), d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16), seed=0)
    return vocab, enc


def _docs(n, rng):
    return [Document(f"d{i:03d}", "", " ".join(rng.choice(WORDS, 4))) for i in range(n)]


def test_single_document_index(enc_setup):
    vocab, enc = enc_setup
    idx = build_index([Document("a", "", "alpha beta")], ReferenceEncoder(enc, vocab))
    assert idx.embeddings.shape == (1, 8)
    assert abs(np.linalg.norm(idx.embeddings[0]) - 1) < 1e-9


def test_index_rebuild_bit_identical_and_unit_rows(enc_setup):
    vocab, enc = enc_setup
    docs = _docs(100, np.random.default_rng(0))
    a = build_index(docs, ReferenceEncoder(enc, vocab))
    b = build_index(docs, ReferenceEncoder(enc, vocab))
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert np.all(np.abs(np.linalg.norm(a.embeddings, axis=1) - 1) < 1e-9)
    with pytest.raises(ValueError):
        a.embeddings[0, 0] = 1.0


def test_index_errors(enc_setup):
    vocab, enc = enc_setup
    with pytest.raises(IndexBuildError):
        build_index([], ReferenceEncoder(enc, vocab))
    with pytest.raises(IndexBuildError):
        build_index([Document("a", "", "alpha"), Document("a", "", "beta")], ReferenceEncoder(enc, vocab))


def test_topk_examples_and_brute_force():
    rng = np.random.default_rng(1)
    emb = random_unit_rows(rng, 200, 16)
    docs = [Document(f"d{i:03d}", "", "x") for i in range(200)]
    idx = CorpusIndex(docs, emb)
    top = idx.topk(emb[17], 3)
    assert top[0][0] == "d017" and top[0][1] == pytest.approx(1.0)
    full = idx.topk(emb[0], 200)
    assert sorted(i for i, _ in full) == [d.id for d in docs]
    for _ in range(20):
        q = rng.normal(size=16)
        brute = [docs[i].id for i in np.argsort(-(emb @ q) / np.linalg.norm(q), kind="stable")[:10]]
        assert [i for i, _ in idx.topk(q, 10)] == brute
    with pytest.raises(T.UndefinedSimilarityError):
        idx.topk(np.zeros(16), 1)


def test_topk_ties_broken_by_id():
    emb = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    idx = CorpusIndex([Document("z", "", ""), Document("b", "", ""), Document("m", "", "")], emb)
    assert [i for i, _ in idx.topk(np.array([1.0, 0]), 2)] == ["b", "z"]


def test_index_and_corpus_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    docs = [Document("a", "t", "alpha beta"), Document("b", "u", "gamma")]
    idx = CorpusIndex(docs, random_unit_rows(rng, 2, 4), "h")
    h1 = idx.save(tmp_path / "i.bin", "cfg")
    back = CorpusIndex.load(tmp_path / "i.bin")
    np.testing.assert_array_equal(back.embeddings, idx.embeddings)
    assert back.documents == idx.documents and back.save(tmp_path / "j.bin", "cfg") == h1
    write_corpus(tmp_path / "c.jsonl", docs, "cfg")
    assert read_corpus(tmp_path / "c.jsonl") == docs


def test_reference_embedding(enc_setup):
    vocab, enc = enc_setup
    ref = ReferenceEncoder(enc, vocab)
    a, b = embed_reference_subquery("alpha beta", ref), embed_reference_subquery("alpha beta", ref)
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-9
    # at initialisation the reference equals the trainable copy
    trainable = enc.forward_ids([vocab.encode("alpha beta")]).data[0]
    np.testing.assert_allclose(a, trainable, atol=1e-12)
    with pytest.raises(ValueError):
        ref.embed_text("   ")


def test_latent_subquery_embedding(enc_setup):
    vocab, enc = enc_setup
    rng = np.random.default_rng(3)
    proj = RetrieverProjector(8, 8, rng)
    h = parameter(rng.normal(size=(3, 8)))
    v = embed_latent_subquery(h, proj, enc, 3)
    assert v.shape == (8,)
    np.testing.assert_allclose(v.data, embed_latent_subquery_np(h.data, proj, enc), atol=1e-12)
    target = Tensor(rng.normal(size=8))
    assert T.gradient_check(lambda: (embed_latent_subquery(h, proj, enc) * target).sum(), [h]) < 1e-4
    for p in proj.parameters():
        p.data[:] = 0.0
    z = embed_latent_subquery(h, proj, enc).data
    assert abs(np.linalg.norm(z) - 1) < 1e-9


def test_similarity_distribution_examples():
    cands = np.array([[1.0, 0], [0, 1.0], [-1.0, 0]])
    uni = similarity_distribution(np.array([0.0, 1e-3]) + np.array([0, 0]), cands[:1].repeat(3, 0), 0.03)
    np.testing.assert_allclose(uni.probs.data, [1 / 3] * 3)
    d = distribution_from_scores([0.9, 0.6, 0.3], 0.03)
    np.testing.assert_allclose(d.probs.data, [0.99995460, 4.5397868e-5, 2.0610600e-9], rtol=1e-6)


def test_kl_retrieval_loss_examples():
    p = distribution_from_scores(np.log([0.5, 0.5]), 1.0, ["a", "b"])
    q = distribution_from_scores(np.log([0.9, 0.1]), 1.0, ["a", "b"])
    assert kl_retrieval_loss([(p, q)]).item() == pytest.approx(0.5108256, abs=1e-6)
    assert kl_retrieval_loss([(p, p), (q, q)]).item() == pytest.approx(0.0, abs=1e-15)
    r = distribution_from_scores([0.0, 1.0], 1.0, ["a", "c"])
    with pytest.raises(PairingError):
        kl_retrieval_loss([(p, r)])


def test_kl_descent_is_monotone():
    p = distribution_from_scores([2.0, 0.5, -1.0, 0.0], 1.0)
    z = parameter(np.zeros(4))
    losses = []
    for _ in range(100):
        z.grad = None
        loss = kl_retrieval_loss([(p, distribution_from_scores(z, 1.0))])
        loss.backward()
        losses.append(loss.item())
        z.data -= 0.5 * z.grad
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_kl_batch_loss_matches_pairwise_definition():
    rng = np.random.default_rng(4)
    emb = random_unit_rows(rng, 40, 8)
    idx = CorpusIndex([Document(f"d{i:02d}", "", "") for i in range(40)], emb)
    refs = random_unit_rows(rng, 3, 8)
    lat = parameter(random_unit_rows(rng, 3, 8))
    rows = candidate_union(refs, idx, 5)
    assert set(rows) == {int(r) for v in refs for r in np.argsort(-(emb @ v))[:5]}
    loss = kl_batch_loss(lat, refs, idx, 0.1, 5)
    pairs = [(similarity_distribution(refs[i], emb[rows], 0.1), similarity_distribution(Tensor(lat.data[i]), emb[rows], 0.1))
             for i in range(3)]
    assert loss.item() == pytest.approx(kl_retrieval_loss(pairs).item(), rel=1e-10)
    assert T.gradient_check(lambda: kl_batch_loss(lat, refs, idx, 0.1, 5), [lat]) < 1e-4


def test_cosine_alignment_values():
    v = Tensor([[1.0, 2.0]])
    assert cosine_alignment_loss(v, [[1.0, 2.0]]).item() == pytest.approx(0.0, abs=1e-15)
    assert cosine_alignment_loss(Tensor([[1.0, 0]]), [[0.0, 1]]).item() == pytest.approx(1.0)
    assert cosine_alignment_loss(Tensor([[1.0, 0]]), [[-1.0, 0]]).item() == pytest.approx(2.0)
    lat = parameter(np.random.default_rng(5).normal(size=(2, 4)))
    ref = np.random.default_rng(6).normal(size=(2, 4))
    assert T.gradient_check(lambda: cosine_alignment_loss(lat, ref), [lat]) < 1e-4


def test_infonce_values():
    e1, e2 = np.array([1.0, 0]), np.array([-1.0, 0])
    assert infonce_loss(Tensor(e1), e1, e2[None], 0.01).item() < 1e-50
    assert infonce_loss(Tensor([1.0, 0]), [0.0, 1], [[0.0, -1]], 1.0).item() == pytest.approx(math.log(2))
    # cosines 0.5 (positive), 0.2 and -0.1 (negatives) at beta 0.1: log(1 + e^-3 + e^-6)
    q = np.array([1.0, 0, 0])
    pos = np.array([0.5, math.sqrt(0.75), 0])
    negs = np.array([[0.2, 0, math.sqrt(0.96)], [-0.1, 0, math.sqrt(0.99)]])
    assert infonce_loss(Tensor(q), pos, negs, 0.1).item() == pytest.approx(0.05094576352299828, rel=1e-10)


def test_infonce_gradient_and_mask():
    rng = np.random.default_rng(7)
    lat = parameter(rng.normal(size=(2, 5)))
    pos, neg = rng.normal(size=(2, 5)), rng.normal(size=(4, 5))
    mask = np.array([[True, False, True, True], [True, True, True, False]])
    assert T.gradient_check(lambda: infonce_loss(lat, pos, neg, 0.2, mask), [lat]) < 1e-4
    a = infonce_loss(Tensor(lat.data), pos, neg, 0.2, mask).item()
    b = (infonce_loss(Tensor(lat.data[:1]), pos[:1], neg[[0, 2, 3]], 0.2).item()
         + infonce_loss(Tensor(lat.data[1:]), pos[1:], neg[:3], 0.2).item()) / 2
    assert a == pytest.approx(b, rel=1e-9)


def test_calibrated_temperature_hits_target_mass():
    rng = np.random.default_rng(8)
    q, c = random_unit_rows(rng, 20, 16), random_unit_rows(rng, 50, 16)
    beta = calibrate_temperature(q, c, 0.5, 3)
    z = (q @ c.T) / beta
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert np.sort(p, 1)[:, -3:].sum(1).mean() == pytest.approx(0.5, abs=1e-6)


def test_anisotropy_examples():
    same = np.tile([[0.6, 0.8]], (5, 1))
    rep = anisotropy_report(same)
    assert np.allclose(rep.cosines, 1) and np.allclose(rep.angles, 0, atol=1e-6)
    basis = anisotropy_report(np.eye(2))
    np.testing.assert_allclose(basis.cosines, [math.sqrt(2) / 2] * 2)
    np.testing.assert_allclose(basis.angles, [45.0, 45.0])
    iso = anisotropy_report(random_unit_rows(np.random.default_rng(9), 2000, 64))
    assert abs(iso.cosine_quantiles["median"]) <= 0.05
    with pytest.raises(DegenerateMeanError):
        anisotropy_report(np.array([[1.0, 0], [-1.0, 0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.floats(0.01, 2.0), st.integers(0, 10_000))
def test_similarity_distribution_sums_to_one(n, beta, seed):
    rng = np.random.default_rng(seed)
    d = similarity_distribution(rng.normal(size=4), rng.normal(size=(n, 4)), beta)
    assert abs(d.probs.data.sum() - 1) < 1e-12 and np.all(d.probs.data >= 0)
