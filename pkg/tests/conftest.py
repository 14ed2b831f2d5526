import numpy as np
import pytest

from latentrag import synth
from latentrag.retrieval import Encoder, EncoderConfig, ReferenceEncoder, build_index, pretrain_encoder
from latentrag.transformer import DecoderLM, ModelConfig
from latentrag.vocab import Vocabulary

WORDS = "alpha beta gamma delta eps zeta eta theta iota kappa lambda mu nu xi omicron pi rho sigma".split()


@pytest.fixture
def vocab():
    return Vocabulary(WORDS, 2, 3)


@pytest.fixture
def small_lm(vocab):
    cfg = ModelConfig(len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_context=64, m=2, n=3,
                      dropout=0.0, init_std=0.3)
    lm = DecoderLM(cfg, seed=3)
    lm.eval()
    return lm


@pytest.fixture(scope="session")
def tiny_world():
    """A small synthetic world with a pretrained reference encoder and its index."""
    graph, train, test = synth.generate(0, n_persons=40, n_cities=20, n_test_cities=6, n_train=170, n_test=30)
    vocab = synth.build_vocabulary(graph, 2, 4)
    enc = Encoder(EncoderConfig(len(vocab), d_model=32, n_layers=1, n_heads=2, d_ff=64), seed=0)
    pretrain_encoder(enc, vocab, synth.encoder_pretraining_pairs(graph), epochs=4, seed=0)
    ref = ReferenceEncoder(enc, vocab)
    index = build_index(graph.documents, ref)
    teacher = [synth.teacher_run(it, index, ref, 3) for it in train]
    return {"graph": graph, "train": train, "test": test, "vocab": vocab, "encoder": enc, "reference": ref,
            "index": index, "teacher": teacher}


def random_unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
