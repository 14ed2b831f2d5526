"""Dense retrieval: corpus index, query encoders, latent-subquery embedding and retrieval losses."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Projector, TransformerBlock, LayerNorm
from .optim import AdamW
from .records import DataError, read_jsonl, write_jsonl
from .tensor import ParameterError, ShapeError, Tensor, UndefinedSimilarityError
from .vocab import Vocabulary


class IndexBuildError(ValueError):
    pass


class PairingError(ValueError):
    """Two distributions were paired over different candidate sets."""


class DegenerateMeanError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


def write_corpus(path, documents: Sequence[Document], config_hash: str = "") -> None:
    write_jsonl(path, ({"id": d.id, "title": d.title, "text": d.text} for d in documents), config_hash)


def read_corpus(path) -> list[Document]:
    _, records = read_jsonl(path)
    try:
        return [Document(str(r["id"]), str(r["title"]), str(r["text"])) for r in records]
    except KeyError as exc:
        raise DataError(f"{path}: corpus record missing field {exc}") from exc


# ---------------------------------------------------------------------------
# encoder

@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64


class Encoder(Module):
    """Bidirectional transformer, mean-pooled and L2-normalised. No dropout."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.tok_emb = T.parameter(rng.normal(0.0, 0.1, (config.vocab_size, d)))
        self.pos_emb = T.parameter(rng.normal(0.0, 0.02, (config.max_len, d)))
        self.blocks = [TransformerBlock(d, config.n_heads, config.d_ff, rng, causal=False)
                       for _ in range(config.n_layers)]
        self.ln_f = LayerNorm(d)

    @property
    def dim(self) -> int:
        return self.config.d_model

    def forward_embeds(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Input rows (B, L, d) -> unit embeddings (B, d)."""
        b, length, _ = x.shape
        if length > self.config.max_len:
            raise ShapeError(f"encoder input of {length} exceeds {self.config.max_len}")
        if mask is None:
            mask = np.ones((b, length), dtype=bool)
        h = x + T.embedding(self.pos_emb, np.broadcast_to(np.arange(length), (b, length)))
        for blk in self.blocks:
            h = blk(h, mask)
        return T.l2_normalize(T.masked_mean(self.ln_f(h), mask))

    def forward_ids(self, batch: Sequence[Sequence[int]]) -> Tensor:
        ids, mask = pad_batch(batch)
        return self.forward_embeds(T.embedding(self.tok_emb, ids), mask)

    def encode_embeds_np(self, rows: np.ndarray) -> np.ndarray:
        """Row-wise numpy path for one sequence; result depends only on ``rows``."""
        length = rows.shape[0]
        if length == 0:
            raise ShapeError("cannot encode an empty sequence")
        if length > self.config.max_len:
            raise ShapeError(f"encoder input of {length} exceeds {self.config.max_len}")
        h = rows + self.pos_emb.data[:length]
        for blk in self.blocks:
            h = blk.infer(h)
        pooled = self.ln_f.infer(h).mean(axis=0)
        norm = np.sqrt(pooled @ pooled)
        if norm == 0:
            raise UndefinedSimilarityError("encoder produced a zero vector")
        return pooled / norm

    def encode_ids_np(self, ids: Sequence[int]) -> np.ndarray:
        return self.encode_embeds_np(self.tok_emb.data[np.asarray(ids, dtype=np.int64)])

    def clone(self) -> "Encoder":
        return copy.deepcopy(self)


def pad_batch(batch: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in batch)
    ids = np.full((len(batch), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(batch), width), dtype=bool)
    for i, seq in enumerate(batch):
        ids[i, :len(seq)] = seq
        mask[i, :len(seq)] = True
    return ids, mask


class ReferenceEncoder:
    """Frozen twin of the trainable encoder; yields plain arrays, never gradients."""

    def __init__(self, encoder: Encoder, vocab: Vocabulary):
        self.encoder = encoder.clone()
        self.vocab = vocab
        self._cache: dict[str, np.ndarray] = {}

    def invalidate(self) -> None:
        """Drop memoised embeddings (after weights are loaded from a checkpoint)."""
        self._cache.clear()

    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        hit = self._cache.get(text)
        if hit is None:
            hit = self.encoder.encode_ids_np(self.vocab.encode(text))
            hit.setflags(write=False)
            self._cache[text] = hit
        return hit

    def state_hash(self) -> str:
        return self.encoder.state_hash()


def embed_reference_subquery(text: str, reference: ReferenceEncoder) -> np.ndarray:
    return reference.embed_text(text)


# ---------------------------------------------------------------------------
# index

class CorpusIndex:
    """Documents with unit-normalised embedding rows. Read-only after construction."""

    def __init__(self, documents: Sequence[Document], embeddings: np.ndarray, encoder_hash: str = ""):
        if len(documents) == 0:
            raise IndexBuildError("empty corpus")
        ids = [d.id for d in documents]
        if len(set(ids)) != len(ids):
            raise IndexBuildError("duplicate document id")
        embeddings = np.array(embeddings, dtype=np.float64)
        if embeddings.shape[0] != len(documents):
            raise IndexBuildError("embedding rows do not match documents")
        embeddings.setflags(write=False)
        self.documents = tuple(documents)
        self.embeddings = embeddings
        self.encoder_hash = encoder_hash
        self.position = {d.id: i for i, d in enumerate(documents)}
        # rank of each row's id in ascending id order, used to break score ties
        self._id_rank = np.argsort(np.argsort(np.array(ids), kind="stable"), kind="stable")

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def scores(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        norm = math.sqrt(float(query @ query))
        if norm == 0.0:
            raise UndefinedSimilarityError("zero query vector")
        return self.embeddings @ (query / norm)

    def topk_rows(self, query: np.ndarray, k: int) -> np.ndarray:
        if not 1 <= k <= len(self):
            raise ValueError(f"k={k} outside [1, {len(self)}]")
        return np.lexsort((self._id_rank, -self.scores(query)))[:k]

    def topk(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        s = self.scores(query)
        return [(self.documents[i].id, float(s[i])) for i in self.topk_rows(query, k)]

    def save(self, path, config_hash: str = "") -> str:
        meta = {"kind": "corpus-index", "n": len(self), "d_ret": self.dim, "encoder_hash": self.encoder_hash,
                "config_hash": config_hash,
                "documents": [[d.id, d.title, d.text] for d in self.documents]}
        return T.save_archive(path, {"embeddings": self.embeddings}, meta)

    @classmethod
    def load(cls, path) -> "CorpusIndex":
        arrays, meta = T.load_archive(path)
        if meta.get("kind") != "corpus-index":
            raise DataError(f"{path} is not an index file")
        docs = [Document(*row) for row in meta["documents"]]
        return cls(docs, arrays["embeddings"], meta.get("encoder_hash", ""))


def build_index(corpus: Sequence[Document], reference: ReferenceEncoder) -> CorpusIndex:
    if not corpus:
        raise IndexBuildError("empty corpus")
    ids = [d.id for d in corpus]
    if len(set(ids)) != len(ids):
        raise IndexBuildError("duplicate document id")
    rows = np.stack([reference.encoder.encode_ids_np(reference.vocab.encode(d.text)) for d in corpus])
    return CorpusIndex(corpus, rows, reference.state_hash())


# ---------------------------------------------------------------------------
# latent subquery embedding

class RetrieverProjector(Projector):
    """Maps subquery slot hidden states (n, d_model) to encoder input rows (n, d_enc)."""


class PooledLinearRetriever(Module):
    """Ablation stand-in for projector+encoder: mean-pool slots, one linear map, normalise."""

    def __init__(self, d_model: int, d_ret: int, rng: np.random.Generator):
        self.proj = Linear(d_model, d_ret, rng)

    def __call__(self, h: Tensor) -> Tensor:
        if h.ndim == 2:
            return self(h.reshape(1, *h.shape)).reshape(-1)
        pooled = T.mean(h, axis=1)
        return T.l2_normalize(self.proj(pooled))

    def infer(self, rows: np.ndarray) -> np.ndarray:
        v = self.proj.infer(rows.mean(axis=0))
        return v / np.sqrt(v @ v)


def embed_latent_subquery(h_s: Tensor, projector: RetrieverProjector, encoder: Encoder,
                          n: int | None = None) -> Tensor:
    """Subquery hidden states (n, d) or (B, n, d) -> unit embeddings (d_ret,) or (B, d_ret)."""
    if n is not None and h_s.shape[-2] != n:
        raise ShapeError(f"expected {n} subquery rows, got {h_s.shape[-2]}")
    if h_s.ndim == 2:
        return embed_latent_subquery(h_s.reshape(1, *h_s.shape), projector, encoder).reshape(-1)
    return encoder.forward_embeds(projector(h_s))


def embed_latent_subquery_np(rows: np.ndarray, projector, encoder: Encoder | None) -> np.ndarray:
    """Inference-time version of :func:`embed_latent_subquery` for one block."""
    if isinstance(projector, PooledLinearRetriever):
        return projector.infer(rows)
    return encoder.encode_embeds_np(projector.infer(rows))


# ---------------------------------------------------------------------------
# similarity distributions and losses

@dataclass
class SimilarityDistribution:
    ids: tuple
    probs: Tensor
    beta: float


def distribution_from_scores(scores, beta: float, ids: Sequence | None = None) -> SimilarityDistribution:
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if not beta > 0:
        raise ParameterError(f"temperature must be positive, got {beta}")
    if scores.shape[-1] == 0:
        raise ParameterError("no candidates")
    ids = tuple(ids) if ids is not None else tuple(range(scores.shape[-1]))
    return SimilarityDistribution(ids, T.softmax(scores, temperature=beta), beta)


def similarity_distribution(query, candidates: np.ndarray, beta: float,
                            ids: Sequence | None = None) -> SimilarityDistribution:
    """Softmax over cosine(query, candidate) / beta."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ParameterError("candidates must be a nonempty (N, d) matrix")
    norms = np.sqrt((candidates * candidates).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise UndefinedSimilarityError("zero candidate vector")
    unit = Tensor((candidates / norms).T)
    q = T.l2_normalize(query if isinstance(query, Tensor) else Tensor(query))
    scores = T.matmul(q.reshape(1, -1), unit).reshape(-1)
    return distribution_from_scores(scores, beta, ids)


def kl_retrieval_loss(pairs: Sequence[tuple[SimilarityDistribution, SimilarityDistribution]]) -> Tensor:
    """Mean over pairs of KL(reference || latent)."""
    if not pairs:
        raise ParameterError("no distribution pairs")
    terms = []
    for p, q in pairs:
        if p.ids != q.ids:
            raise PairingError("reference and latent distributions cover different candidates")
        terms.append(T.kl_divergence(p.probs.data, q.probs))
    return T.mean(T.stack(terms))


def candidate_union(reference_vecs: np.ndarray, index: CorpusIndex, n_pseudo: int = 16) -> np.ndarray:
    """Sorted index rows of the union of each reference query's top-``n_pseudo`` documents."""
    k = min(n_pseudo, len(index))
    rows = set()
    for v in reference_vecs:
        rows.update(int(i) for i in index.topk_rows(v, k))
    return np.array(sorted(rows), dtype=np.int64)


def kl_batch_loss(latent: Tensor, reference_vecs: np.ndarray, index: CorpusIndex, beta: float,
                  n_pseudo: int = 16, rows: np.ndarray | None = None) -> Tensor:
    """KL retrieval loss for a batch of latent embeddings (B, d) against frozen references (B, d).

    Candidates are the in-batch union of pseudo-relevant documents; their
    embeddings come from the (frozen) index. ``rows`` may pass a
    precomputed union.
    """
    if not beta > 0:
        raise ParameterError(f"temperature must be positive, got {beta}")
    if rows is None:
        rows = candidate_union(reference_vecs, index, n_pseudo)
    cand = index.embeddings[rows]
    ref_logits = (reference_vecs @ cand.T) / beta
    ref_logits = ref_logits - ref_logits.max(axis=1, keepdims=True)
    log_p = ref_logits - np.log(np.exp(ref_logits).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    log_q = T.log_softmax(T.matmul(latent, Tensor(cand.T)) * (1.0 / beta))
    b = latent.shape[0]
    cross = T.tsum(log_q * Tensor(-p / b))
    return cross + float((p * log_p).sum() / b)


def cosine_alignment_loss(v_latent: Tensor, v_reference) -> Tensor:
    """mean(1 - cos) over rows."""
    v_reference = v_reference if isinstance(v_reference, Tensor) else Tensor(v_reference)
    cos = T.cosine_similarity(v_latent, v_reference)
    return 1.0 - T.mean(cos)


def infonce_loss(v_latent: Tensor, positives, negatives, beta: float,
                 negative_mask: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of each row's positive under softmax(cos / beta) over positive + negatives.

    ``v_latent`` (B, d); ``positives`` (B, d); ``negatives`` (M, d) shared by
    all rows, with ``negative_mask`` (B, M) optionally excluding entries.
    """
    if not beta > 0:
        raise ParameterError(f"temperature must be positive, got {beta}")
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ParameterError("InfoNCE needs at least one negative")
    if v_latent.ndim == 1:
        v_latent = v_latent.reshape(1, -1)
        positives = np.asarray(positives).reshape(1, -1)
    unit = T.l2_normalize(v_latent)
    pos = np.asarray(positives, dtype=np.float64)
    pos = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    neg = negatives / np.linalg.norm(negatives, axis=1, keepdims=True)
    pos_scores = T.tsum(unit * Tensor(pos), axis=1, keepdims=True)
    neg_scores = T.matmul(unit, Tensor(neg.T))
    if negative_mask is not None:
        neg_scores = neg_scores + Tensor(np.where(negative_mask, 0.0, -1e9))
    logits = T.concat([pos_scores, neg_scores], axis=1) * (1.0 / beta)
    return T.cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))


def infonce_batch_loss(latent: Tensor, reference_vecs: np.ndarray, index: CorpusIndex, beta: float,
                       n_pseudo: int = 16) -> Tensor:
    """InfoNCE with each row's reference top-1 document as positive, the rest of the in-batch
    pseudo-relevant union as negatives."""
    rows = candidate_union(reference_vecs, index, n_pseudo)
    positive_rows = np.array([int(index.topk_rows(v, 1)[0]) for v in reference_vecs])
    mask = rows[None, :] != positive_rows[:, None]
    if not mask.any(axis=1).all():
        raise ParameterError("a query has no negatives")
    return infonce_loss(latent, index.embeddings[positive_rows], index.embeddings[rows], beta, mask)


def calibrate_temperature(queries: np.ndarray, candidates: np.ndarray, target: float = 0.5, top: int = 3,
                          lo: float = 1e-4, hi: float = 10.0, iters: int = 80) -> float:
    """Temperature at which the mean top-``top`` probability mass equals ``target`` (log-space bisection)."""
    queries = np.asarray(queries, dtype=np.float64)
    sims = queries @ np.asarray(candidates, dtype=np.float64).T
    if sims.shape[1] <= top:
        raise ParameterError("need more candidates than the top-mass window")

    def mass(beta: float) -> float:
        z = sims / beta
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return float(np.sort(p, axis=1)[:, -top:].sum(axis=1).mean())

    a, b = math.log(lo), math.log(hi)
    if not mass(math.exp(b)) <= target <= mass(math.exp(a)):
        raise ParameterError("target mass not bracketed by the temperature range")
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if mass(math.exp(mid)) > target:
            a = mid
        else:
            b = mid
    return math.exp(0.5 * (a + b))


# ---------------------------------------------------------------------------
# anisotropy

@dataclass
class AnisotropyReport:
    cosines: np.ndarray
    angles: np.ndarray
    cosine_quantiles: dict
    angle_quantiles: dict

    def to_json(self) -> str:
        return json.dumps({"cosine": self.cosine_quantiles, "angle_deg": self.angle_quantiles}, sort_keys=True)


_QUANTILES = {"min": 0.0, "q25": 0.25, "median": 0.5, "q75": 0.75, "max": 1.0}


def anisotropy_report(embeddings) -> AnisotropyReport:
    """Cosine and angle of every embedding against the normalised mean direction."""
    if isinstance(embeddings, CorpusIndex):
        embeddings = embeddings.embeddings
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    mean = emb.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    if mnorm < 1e-12:
        raise DegenerateMeanError("mean embedding is zero")
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = np.clip(unit @ (mean / mnorm), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    cq = {k: float(np.quantile(cos, q)) for k, q in _QUANTILES.items()}
    aq = {k: float(np.quantile(ang, q)) for k, q in _QUANTILES.items()}
    return AnisotropyReport(cos, ang, cq, aq)


# ---------------------------------------------------------------------------
# encoder pretraining

def pretrain_encoder(encoder: Encoder, vocab: Vocabulary, pairs: Sequence[tuple[str, str]], epochs: int = 30,
                     batch_size: int = 64, lr: float = 3e-3, beta: float = 0.05, seed: int = 0,
                     log=None) -> list[float]:
    """In-batch-negative InfoNCE on (query text, document text) pairs. Returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    opt = AdamW(encoder.parameters(), lr=lr, weight_decay=0.0)
    q_ids = [vocab.encode(q) for q, _ in pairs]
    d_ids = [vocab.encode(d) for _, d in pairs]
    history = []
    encoder.train()
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            q = encoder.forward_ids([q_ids[i] for i in idx])
            d = encoder.forward_ids([d_ids[i] for i in idx])
            logits = T.matmul(q, T.transpose(d)) * (1.0 / beta)
            loss = T.cross_entropy(logits, np.arange(len(idx)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"encoder epoch {epoch + 1}: loss {history[-1]:.4f}")
    encoder.eval()
    return history
