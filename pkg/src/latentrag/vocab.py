"""Word-level vocabulary with the agent's special tokens."""

from __future__ import annotations

import json
import re
from typing import Iterable, Sequence

PAD = "<pad>"
EOS = "<eos>"
UNK = "<unk>"
ACTION_QUERY = "<query>"
ACTION_ANSWER = "<answer>"
INFO_OPEN = "<information>"
INFO_CLOSE = "</information>"
ANSWER_OPEN = "<Answer>"
ANSWER_CLOSE = "</Answer>"

FIXED_SPECIALS = (PAD, EOS, UNK, ACTION_QUERY, ACTION_ANSWER, INFO_OPEN, INFO_CLOSE,
                  ANSWER_OPEN, ANSWER_CLOSE)

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[\w']+|[^\w\s]")


def think_token(i: int) -> str:
    return f"<think_{i}>"


def query_token(i: int) -> str:
    return f"<query_{i}>"


def slot_id_range(m: int, n: int) -> tuple[range, range]:
    """Ids of the thought slots and subquery slots for any vocabulary built with (m, n)."""
    first = len(FIXED_SPECIALS)
    return range(first, first + m), range(first + m, first + m + n)


def split_words(text: str) -> list[str]:
    """Split text into word, punctuation and tag tokens (tags like ``<information>`` stay whole)."""
    return _TOKEN_RE.findall(text)


class Vocabulary:
    """Token <-> id mapping. Special tokens occupy the first ids, in a fixed order."""

    def __init__(self, words: Iterable[str], m: int, n: int):
        if m < 1 or n < 1:
            raise ValueError("need at least one thought slot and one subquery slot")
        self.m = m
        self.n = n
        specials = list(FIXED_SPECIALS)
        specials += [think_token(i) for i in range(1, m + 1)]
        specials += [query_token(i) for i in range(1, n + 1)]
        self.special_tokens = tuple(specials)
        special_set = set(specials)
        base = sorted({w for w in words if w not in special_set})
        self.tokens: list[str] = specials + base
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.thought_ids = tuple(self.index[think_token(i)] for i in range(1, m + 1))
        self.query_ids = tuple(self.index[query_token(i)] for i in range(1, n + 1))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def query_action_id(self) -> int:
        return self.index[ACTION_QUERY]

    @property
    def answer_action_id(self) -> int:
        return self.index[ACTION_ANSWER]

    def encode(self, text: str) -> list[int]:
        return [self.id(tok) for tok in split_words(text)]

    def decode(self, ids: Sequence[int], skip_special: bool = False) -> str:
        toks = [self.tokens[i] for i in ids]
        if skip_special:
            toks = [t for t in toks if t not in self.special_tokens]
        return " ".join(toks)

    def is_special(self, token_id: int) -> bool:
        return token_id < len(self.special_tokens)

    def to_json(self) -> str:
        return json.dumps({"m": self.m, "n": self.n, "tokens": self.tokens})

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        data = json.loads(payload)
        vocab = cls(data["tokens"], data["m"], data["n"])
        if vocab.tokens != data["tokens"]:
            raise ValueError("vocabulary ids are not stable across reload")
        return vocab
