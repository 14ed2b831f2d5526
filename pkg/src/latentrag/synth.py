"""Synthetic kinship/birthplace world: corpus, 1- and 2-hop questions, and a rule-based teacher."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .decoder import SUBQUERY_PROMPT, THOUGHT_PROMPT
from .agent import INSTRUCTION
from .evaluation import em_score
from .retrieval import CorpusIndex, Document, ReferenceEncoder
from .training import TeacherStep, TeacherTrajectory
from .vocab import Vocabulary, split_words

RELATIONS = ("father", "mother", "mentor")

_ONSETS = ["b", "br", "d", "dr", "f", "g", "gr", "h", "k", "kr", "l", "m", "n", "p", "r", "s", "st", "t",
           "th", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "eo"]
_CODAS = ["", "", "n", "r", "s", "l", "m", "th", "k"]


class GenerationError(ValueError):
    pass


@dataclass
class QAItem:
    qid: str
    question: str
    answers: list[str]
    hops: int
    subqueries: list[str]
    support: list[str]

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "QAItem":
        return cls(**rec)


@dataclass
class FactGraph:
    persons: list[str]
    cities: list[str]
    test_cities: list[str]
    relations: dict[tuple[str, str], str]  # (relation, person) -> person
    birthplace: dict[str, str]
    documents: list[Document] = field(default_factory=list)
    doc_of: dict[tuple[str, str], str] = field(default_factory=dict)  # (relation or "birthplace", subject) -> doc id


def _make_names(rng: np.random.Generator, count: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    names: list[str] = []
    attempts = 0
    while len(names) < count:
        attempts += 1
        if attempts > 200 * count:
            raise GenerationError("could not draw enough distinct names")
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(k)) + _CODAS[rng.integers(len(_CODAS))]
        if word in taken or len(word) < 4:
            continue
        taken.add(word)
        names.append(word)
    return names


def fact_text(relation: str, subject: str, obj: str) -> str:
    if relation == "birthplace":
        return f"{subject} was born in {obj} ."
    return f"the {relation} of {subject} is {obj} ."


def subquery_text(relation: str, subject: str) -> str:
    return f"{relation} of {subject}"


_RESERVED = set(split_words(" ".join([INSTRUCTION, THOUGHT_PROMPT, SUBQUERY_PROMPT,
                                       "the father mother mentor birthplace of is was born in where who doc "
                                       "i need to find first now can answer"])))


def build_graph(seed: int, n_persons: int = 300, n_cities: int = 100, n_test_cities: int = 25) -> FactGraph:
    if n_persons < 4 or n_cities < 2 or not 1 <= n_test_cities < n_cities:
        raise GenerationError("infeasible world size")
    rng = np.random.default_rng(seed)
    taken = set(_RESERVED)
    persons = _make_names(rng, n_persons, taken)
    cities = _make_names(rng, n_cities, taken)
    test_cities = sorted(cities[:n_test_cities])
    relations = {}
    for p in persons:
        others = [q for q in persons if q != p]
        for r in RELATIONS:
            relations[(r, p)] = others[int(rng.integers(len(others)))]
    birthplace = {p: cities[int(rng.integers(len(cities)))] for p in persons}
    graph = FactGraph(persons, cities, test_cities, relations, birthplace)
    facts = [(r, p, relations[(r, p)]) for p in persons for r in RELATIONS] + \
            [("birthplace", p, birthplace[p]) for p in persons]
    for i, (r, s, o) in enumerate(facts):
        doc_id = f"d{i:05d}"
        graph.documents.append(Document(doc_id, s, fact_text(r, s, o)))
        graph.doc_of[(r, s)] = doc_id
    return graph


def _relation_item(graph: FactGraph, r: str, x: str) -> QAItem:
    y = graph.relations[(r, x)]
    return QAItem("", f"who is the {r} of {x} ?", [y], 1, [subquery_text(r, x)], [graph.doc_of[(r, x)]])


def _birthplace_item(graph: FactGraph, x: str) -> QAItem:
    return QAItem("", f"where was {x} born ?", [graph.birthplace[x]], 1, [subquery_text("birthplace", x)],
                  [graph.doc_of[("birthplace", x)]])


def _two_hop_item(graph: FactGraph, r: str, x: str) -> QAItem:
    y = graph.relations[(r, x)]
    return QAItem("", f"where was the {r} of {x} born ?", [graph.birthplace[y]], 2,
                  [subquery_text(r, x), subquery_text("birthplace", y)],
                  [graph.doc_of[(r, x)], graph.doc_of[("birthplace", y)]])


def generate(seed: int = 0, n_persons: int = 300, n_cities: int = 100, n_test_cities: int = 25,
             n_train: int = 1600, n_test: int = 200, two_hop_fraction: float = 0.5,
             hops: int | None = None) -> tuple[FactGraph, list[QAItem], list[QAItem]]:
    """World + train/test questions. Test answers are drawn only from held-out cities,
    which never occur as a train answer."""
    graph = build_graph(seed, n_persons, n_cities, n_test_cities)
    if len(graph.documents) < 100 or n_train + n_test < 200:
        raise GenerationError("need at least 100 documents and 200 questions")
    rng = np.random.default_rng(seed + 1)
    held_out = set(graph.test_cities)
    one_hop, two_hop, test_one, test_two = [], [], [], []
    for x in graph.persons:
        for r in RELATIONS:
            one_hop.append(_relation_item(graph, r, x))
            item = _two_hop_item(graph, r, x)
            (test_two if item.answers[0] in held_out else two_hop).append(item)
        item = _birthplace_item(graph, x)
        (test_one if item.answers[0] in held_out else one_hop).append(item)
    if hops == 1:
        two_hop, test_two = [], []
    elif hops == 2:
        one_hop, test_one = [], []

    def pick(pool: list[QAItem], count: int) -> list[QAItem]:
        count = min(count, len(pool))
        return [pool[i] for i in sorted(rng.choice(len(pool), size=count, replace=False))] if count else []

    n_two = round(n_train * two_hop_fraction) if one_hop and two_hop else (n_train if two_hop else 0)
    train = pick(two_hop, n_two) + pick(one_hop, n_train - min(n_two, len(two_hop)))
    t_two = round(n_test * (0.75 if test_one and test_two else 1.0)) if test_two else 0
    test = pick(test_two, t_two) + pick(test_one, n_test - min(t_two, len(test_two)))
    if len(train) < n_train or len(test) < n_test:
        raise GenerationError(f"only {len(train)} train / {len(test)} test questions available")
    order = rng.permutation(len(train))
    train = [train[i] for i in order]
    for i, it in enumerate(train):
        it.qid = f"train-{i:05d}"
    for i, it in enumerate(test):
        it.qid = f"test-{i:05d}"
    return graph, train, test


def encoder_pretraining_pairs(graph: FactGraph) -> list[tuple[str, str]]:
    """(subquery text, document text) for every fact."""
    pairs = []
    for (r, s), doc_id in sorted(graph.doc_of.items(), key=lambda kv: kv[1]):
        doc = graph.documents[int(doc_id[1:])]
        pairs.append((subquery_text(r, s), doc.text))
    return pairs


def vocabulary_words(graph: FactGraph, k_max: int = 10) -> list[str]:
    words = set(_RESERVED)
    words.update(graph.persons)
    words.update(graph.cities)
    words.update(str(i) for i in range(1, k_max + 1))
    words.update(split_words(". ? :"))
    return sorted(words)


def build_vocabulary(graph: FactGraph, m: int, n: int) -> Vocabulary:
    return Vocabulary(vocabulary_words(graph), m, n)


# ---------------------------------------------------------------------------
# teacher

_PATTERNS = {
    "birthplace": re.compile(r"^(\w+) was born in (\w+) \.$"),
    "relation": re.compile(r"^the (\w+) of (\w+) is (\w+) \.$"),
}


def _read_fact(texts: Sequence[str], relation: str, subject: str) -> str | None:
    for text in texts:
        if relation == "birthplace":
            m = _PATTERNS["birthplace"].match(text)
            if m and m.group(1) == subject:
                return m.group(2)
        else:
            m = _PATTERNS["relation"].match(text)
            if m and m.group(1) == relation and m.group(2) == subject:
                return m.group(3)
    return None


def _parse_subquery(sq: str) -> tuple[str, str]:
    rel, _, subject = sq.split(" ")
    return rel, subject


def teacher_run(item: QAItem, index: CorpusIndex, reference: ReferenceEncoder, k: int = 3) -> TeacherTrajectory:
    """Explicit step-by-step run: issue the gold subquery, read the retrieved docs, continue."""
    steps: list[TeacherStep] = []
    rel, subject = _parse_subquery(item.subqueries[0])
    found: str | None = None
    final = ""

    def retrieve(sq: str) -> tuple[list[str], list[str]]:
        hits = index.topk(reference.embed_text(sq), min(k, len(index)))
        ids = [i for i, _ in hits]
        return ids, [index.documents[index.position[i]].text for i in ids]

    if item.hops == 1:
        sq = subquery_text(rel, subject)
        ids, texts = retrieve(sq)
        steps.append(TeacherStep(f"i need to find the {rel} of {subject} .", sq, ids))
        found = _read_fact(texts, rel, subject)
        if found is not None:
            final = (f"{subject} was born in {found} . i can answer now ." if rel == "birthplace"
                     else f"the {rel} of {subject} is {found} . i can answer now .")
    else:
        sq = subquery_text(rel, subject)
        ids, texts = retrieve(sq)
        steps.append(TeacherStep(f"i need to find the {rel} of {subject} first .", sq, ids))
        bridge = _read_fact(texts, rel, subject)
        if bridge is not None:
            sq2 = subquery_text("birthplace", bridge)
            ids2, texts2 = retrieve(sq2)
            steps.append(TeacherStep(f"the {rel} of {subject} is {bridge} . now i need the birthplace of {bridge} .",
                                     sq2, ids2))
            found = _read_fact(texts2, "birthplace", bridge)
            if found is not None:
                final = f"{bridge} was born in {found} . i can answer now ."
    correct = bool(em_score(found, item.answers))
    return TeacherTrajectory(item.question, steps, final, found, list(item.answers), correct, item.hops, item.qid)


def validate_retrieval(items: Sequence[QAItem], index: CorpusIndex, reference: ReferenceEncoder,
                       k: int = 3) -> float:
    """Share of items whose every gold subquery retrieves its supporting doc within top-k."""
    ok = 0
    for it in items:
        ok += all(doc in [i for i, _ in index.topk(reference.embed_text(sq), min(k, len(index)))]
                  for sq, doc in zip(it.subqueries, it.support))
    return ok / len(items) if items else 0.0
