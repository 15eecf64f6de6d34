"""Word-level vocabulary with a fixed registry of special tokens."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, SchemaError

# Order fixes the ids: PAD must stay first so that it is id 0.
SPECIAL_TOKENS: dict[str, str] = {
    "PAD": "<pad>",
    "UNK": "<unk>",
    "BOS": "<bos>",
    "EOS": "<eos>",
    "UTT_SEP": "<sep>",
    "SPK_A": "<spk_a>",
    "SPK_B": "<spk_b>",
    "TOPIC_MARK": "<topic>",
    "TOPIC_SEP": "<tsep>",
    "CLS": "<cls>",
}


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization; the only tokenizer the package ships."""
    return text.split()


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    topics: tuple[str, ...] = ()
    specials: Mapping[str, str] = field(default_factory=lambda: dict(SPECIAL_TOKENS))

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        missing = [t for t in self.specials.values() if t not in self.tokens]
        if missing:
            raise ConfigError(f"special tokens missing from vocabulary: {missing}")
        if self.tokens[0] != self.specials["PAD"]:
            raise ConfigError("PAD must have id 0")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        object.__setattr__(
            self, "_special_ids", {self._index[t] for t in self.specials.values()}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index[token]

    def special_id(self, name: str) -> int:
        return self._index[self.specials[name]]

    @property
    def pad_id(self) -> int:
        return self.special_id("PAD")

    @property
    def unk_id(self) -> int:
        return self.special_id("UNK")

    @property
    def bos_id(self) -> int:
        return self.special_id("BOS")

    @property
    def eos_id(self) -> int:
        return self.special_id("EOS")

    @property
    def n_topics(self) -> int:
        return len(self.topics)

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def content_tokens(self) -> list[str]:
        specials = set(self.specials.values())
        return [t for t in self.tokens if t not in specials]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self._index.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, dropping PAD. Raises IndexError on ids >= V."""
        size = len(self.tokens)
        pad = self.pad_id
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= size:
                raise IndexError(f"token id {i} outside vocabulary of size {size}")
            if i != pad:
                out.append(self.tokens[i])
        return out

    def topic_tokens(self, topic_id: int) -> list[str]:
        return tokenize(self.topics[topic_id])

    def topic_ids(self, topic_id: int) -> list[int]:
        return self.encode(self.topic_tokens(topic_id))

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "specials": dict(self.specials),
            "topics": {str(i): s for i, s in enumerate(self.topics)},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocab":
        try:
            topics = data.get("topics", {})
            ordered = tuple(topics[str(i)] for i in range(len(topics)))
            return cls(
                tokens=tuple(data["tokens"]),
                topics=ordered,
                specials=dict(data["specials"]),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed vocabulary file: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_vocab(corpus, min_count: int = 1) -> Vocab:
    """Build a vocabulary from a :class:`~topicrefine.corpus.Corpus`.

    Content tokens with frequency >= ``min_count`` are kept, ordered by
    descending frequency then lexicographically. Every word of every topic
    surface is always kept, regardless of frequency, so that topic
    injection never produces UNK.
    """
    dialogues = getattr(corpus, "dialogues", corpus)
    if not dialogues:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    topics: Sequence[str] = tuple(getattr(corpus, "topics", ()))

    counts: Counter[str] = Counter()
    for d in dialogues:
        for sentence in d.profile:
            counts.update(sentence)
        for u in d.utterances:
            counts.update(u.tokens)
    specials = set(SPECIAL_TOKENS.values())
    clash = specials.intersection(counts)
    if clash:
        raise ConfigError(f"corpus text contains reserved tokens: {sorted(clash)}")

    keep = {t for t, c in counts.items() if c >= min_count}
    for surface in topics:
        keep.update(tokenize(surface))
    keep -= specials
    content = sorted(keep, key=lambda t: (-counts.get(t, 0), t))
    return Vocab(tokens=tuple(SPECIAL_TOKENS.values()) + tuple(content), topics=topics)
