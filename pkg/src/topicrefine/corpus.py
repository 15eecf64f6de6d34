"""Dialogue data model, sample construction and corpus I/O."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, SchemaError
from .vocab import Vocab, tokenize

MULTI_LABEL = "multi-label"
MULTI_CLASS = "multi-class"
MODES = (MULTI_LABEL, MULTI_CLASS)

SPEAKERS = ("A", "B")
SYSTEM = "B"


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    speaker: str
    topics: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise DataError(f"unknown speaker {self.speaker!r}")


@dataclass(frozen=True)
class Dialogue:
    utterances: tuple[Utterance, ...]
    profile: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise DataError("a dialogue needs at least two utterances")


@dataclass(frozen=True)
class Corpus:
    """Dialogues plus the topic header (surface string per topic id)."""

    mode: str
    topics: tuple[str, ...]
    dialogues: tuple[Dialogue, ...]
    profiles_present: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def n_topics(self) -> int:
        return len(self.topics)

    def __len__(self) -> int:
        return len(self.dialogues)

    def subset(self, indices) -> "Corpus":
        return Corpus(
            self.mode,
            self.topics,
            tuple(self.dialogues[i] for i in indices),
            self.profiles_present,
        )

    def stats(self) -> dict:
        return {
            "dialogues": len(self.dialogues),
            "utterances": sum(len(d.utterances) for d in self.dialogues),
            "topics": len(self.topics),
            "mode": self.mode,
        }

    def to_json(self) -> dict:
        out = {
            "mode": self.mode,
            "topics": list(self.topics),
            "profiles_present": self.profiles_present,
            "dialogues": [],
        }
        for d in self.dialogues:
            item = {}
            if d.profile:
                item["profile"] = [" ".join(s) for s in d.profile]
            item["turns"] = [
                {"speaker": u.speaker, "text": " ".join(u.tokens), "topics": sorted(u.topics)}
                for u in d.utterances
            ]
            out["dialogues"].append(item)
        return out


def n_classes(mode: str, n_topics: int) -> int:
    """Width of the classifier head: multi-class adds a trailing NONE class."""
    return n_topics + 1 if mode == MULTI_CLASS else n_topics


@dataclass(frozen=True)
class TrainingSample:
    history_ids: tuple[int, ...]
    response_ids: tuple[int, ...]
    topic_label: object  # multi-hot float array (multi-label) or int class
    turn_index: int
    gold_topics: frozenset[int] = frozenset()
    dialogue_index: int = -1


@dataclass(frozen=True)
class SyntheticConfig:
    n_dialogues: int = 32
    turns: int = 4
    vocab_size: int = 64
    n_topics: int = 8
    stickiness: float = 0.7
    seed: int = 7
    mode: str = MULTI_LABEL
    phrase_len: int = 3
    filler_len: tuple[int, int] = (1, 3)

    def __post_init__(self):
        for name in ("n_dialogues", "turns", "vocab_size", "n_topics", "phrase_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.turns < 2:
            raise ConfigError("turns must be >= 2")
        if not 0.0 <= self.stickiness <= 1.0:
            raise ConfigError("stickiness must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        lo, hi = self.filler_len
        if lo < 0 or hi < lo:
            raise ConfigError("filler_len must be a (lo, hi) range with 0 <= lo <= hi")
        if self.vocab_size < self.n_topics + self.phrase_len + 1:
            raise ConfigError("vocab_size too small for the requested topics and phrases")


def generate_synthetic(cfg: SyntheticConfig) -> Corpus:
    """Sample a corpus whose topics follow a sticky Markov chain.

    Content tokens are ``w0 .. w{vocab_size-1}``; topic ``k`` has the
    one-word surface ``w{k}``. Every system response is a deterministic
    function of its topic (a fixed per-topic phrase with the topic word
    inserted), so the gold response always contains its topic surface.
    User turns wrap the topic word in random filler.
    """
    rng = np.random.default_rng(cfg.seed)
    words = [f"w{i}" for i in range(cfg.vocab_size)]
    topic_words = words[: cfg.n_topics]
    pool = words[cfg.n_topics:]

    phrases = []
    for _ in range(cfg.n_topics):
        phrase = [pool[j] for j in rng.choice(len(pool), size=cfg.phrase_len)]
        slot = int(rng.integers(0, cfg.phrase_len + 1))
        phrases.append((phrase, slot))

    lo, hi = cfg.filler_len
    dialogues = []
    for _ in range(cfg.n_dialogues):
        topic = int(rng.integers(cfg.n_topics))
        utterances = []
        for turn in range(cfg.turns):
            if turn > 0 and rng.random() >= cfg.stickiness and cfg.n_topics > 1:
                others = [k for k in range(cfg.n_topics) if k != topic]
                topic = others[int(rng.integers(len(others)))]
            speaker = SPEAKERS[turn % 2]
            if speaker == SYSTEM:
                phrase, slot = phrases[topic]
                tokens = phrase[:slot] + [topic_words[topic]] + phrase[slot:]
            else:
                before = int(rng.integers(lo, hi + 1))
                after = int(rng.integers(lo, hi + 1))
                fill = [pool[j] for j in rng.integers(0, len(pool), size=before + after)]
                tokens = fill[:before] + [topic_words[topic]] + fill[before:]
            utterances.append(Utterance(tuple(tokens), speaker, frozenset({topic})))
        dialogues.append(Dialogue(tuple(utterances)))
    return Corpus(cfg.mode, tuple(topic_words), tuple(dialogues), False)


def _require(cond, message, index, fieldname):
    if not cond:
        raise SchemaError(message, dialogue_index=index, field=fieldname)


def parse_corpus(data, pretokenized: bool = False) -> Corpus:
    """Validate a decoded corpus JSON object. See :func:`load_corpus`."""
    _require(isinstance(data, dict), "top level must be an object", None, None)
    mode = data.get("mode")
    _require(mode in MODES, f"mode must be one of {MODES}", None, "mode")
    topics = data.get("topics")
    _require(
        isinstance(topics, list) and all(isinstance(t, str) and t.strip() for t in topics),
        "topics must be a list of non-empty strings",
        None,
        "topics",
    )
    _require(len(set(topics)) == len(topics), "topic surfaces must be unique", None, "topics")
    raw = data.get("dialogues")
    _require(isinstance(raw, list), "dialogues must be a list", None, "dialogues")

    def toks(value, index, name):
        if pretokenized:
            _require(
                isinstance(value, list) and all(isinstance(t, str) for t in value),
                "expected a list of tokens",
                index,
                name,
            )
            return tuple(value)
        _require(isinstance(value, str), "expected a string", index, name)
        return tuple(tokenize(value))

    dialogues = []
    for i, d in enumerate(raw):
        _require(isinstance(d, dict), "dialogue must be an object", i, None)
        profile = tuple(toks(s, i, "profile") for s in d.get("profile") or [])
        turns = d.get("turns")
        _require(isinstance(turns, list) and len(turns) >= 2, "needs >= 2 turns", i, "turns")
        utterances = []
        for turn in turns:
            _require(isinstance(turn, dict), "turn must be an object", i, "turns")
            _require(turn.get("speaker") in SPEAKERS, "speaker must be 'A' or 'B'", i, "speaker")
            ids = turn.get("topics", [])
            _require(
                isinstance(ids, list) and all(isinstance(t, int) for t in ids),
                "topics must be a list of integer indices",
                i,
                "topics",
            )
            bad = [t for t in ids if not 0 <= t < len(topics)]
            if bad:
                raise DataError(f"[dialogue {i}] unknown topic index {bad[0]}")
            if mode == MULTI_CLASS and len(set(ids)) > 1:
                raise DataError(f"[dialogue {i}] multi-class corpora allow one topic per turn")
            utterances.append(
                Utterance(toks(turn.get("text"), i, "text"), turn["speaker"], frozenset(ids))
            )
        dialogues.append(Dialogue(tuple(utterances), profile))
    return Corpus(mode, tuple(topics), tuple(dialogues), bool(data.get("profiles_present", False)))


def load_corpus(path, pretokenized: bool = False) -> Corpus:
    """Read a corpus JSON file.

    Schema::

        {"mode": "multi-label" | "multi-class",
         "topics": ["surface", ...],
         "profiles_present": bool,
         "dialogues": [{"profile": [...]?,
                        "turns": [{"speaker": "A" | "B", "text": "...",
                                   "topics": [indices]}]}]}

    With ``pretokenized`` set, ``text`` and profile entries are token lists.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return parse_corpus(data, pretokenized=pretokenized)


def save_corpus(corpus: Corpus, path, stats: bool = True) -> None:
    data = corpus.to_json()
    if stats:
        data["stats"] = corpus.stats()
    Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=1), encoding="utf-8")


def topic_label(topics: frozenset[int], mode: str, n_topics: int):
    if mode == MULTI_CLASS:
        if len(topics) > 1:
            raise DataError("multi-class label needs at most one topic")
        return next(iter(topics)) if topics else n_topics
    y = np.zeros(n_topics)
    y[sorted(topics)] = 1.0
    return y


def _utterance_block(u: Utterance, vocab: Vocab, use_roles: bool) -> list[int]:
    block = []
    if use_roles:
        block.append(vocab.special_id("SPK_A" if u.speaker == "A" else "SPK_B"))
    block.extend(vocab.encode(u.tokens))
    block.append(vocab.special_id("TOPIC_MARK"))
    block.extend(_topic_segment(sorted(u.topics), vocab))
    block.append(vocab.special_id("UTT_SEP"))
    return block


def _topic_segment(topic_ids: Sequence[int], vocab: Vocab) -> list[int]:
    out: list[int] = []
    sep = vocab.special_id("TOPIC_SEP")
    for j, t in enumerate(topic_ids):
        if j:
            out.append(sep)
        out.extend(vocab.topic_ids(t))
    return out


def serialize_history(
    utterances: Sequence[Utterance],
    vocab: Vocab,
    max_context: int,
    profile: Sequence[Sequence[str]] = (),
    use_roles: bool = True,
) -> list[int]:
    """Flatten a dialogue prefix into ids, left-truncated to ``max_context``.

    Whole blocks (the profile block, then utterances oldest first) are
    dropped while more than one remains; a lone oversized block loses its
    leading tokens instead. BOS is always kept.
    """
    if max_context < 2:
        raise ConfigError("max_context must be >= 2")
    sep = vocab.special_id("UTT_SEP")
    blocks = []
    if profile:
        prof: list[int] = []
        for sentence in profile:
            prof.extend(vocab.encode(sentence))
            prof.append(sep)
        blocks.append(prof)
    blocks.extend(_utterance_block(u, vocab, use_roles) for u in utterances)

    budget = max_context - 1
    while len(blocks) > 1 and sum(map(len, blocks)) > budget:
        blocks.pop(0)
    flat = [t for b in blocks for t in b]
    if len(flat) > budget:
        flat = flat[len(flat) - budget:]
    return [vocab.bos_id] + flat


def build_samples(
    d: Dialogue,
    vocab: Vocab,
    mode: str,
    max_context: int,
    max_decode: int,
    use_roles: bool = True,
    dialogue_index: int = -1,
) -> list[TrainingSample]:
    """One :class:`TrainingSample` per system turn that has some history."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if max_decode < 1:
        raise ConfigError("max_decode must be >= 1")
    samples = []
    for n, u in enumerate(d.utterances):
        if n == 0 or u.speaker != SYSTEM:
            continue
        if not u.tokens:
            warnings.warn(f"skipping empty system turn {n} of dialogue {dialogue_index}")
            continue
        history = serialize_history(d.utterances[:n], vocab, max_context, d.profile, use_roles)
        response = vocab.encode(u.tokens)[: max_decode - 1] + [vocab.eos_id]
        samples.append(
            TrainingSample(
                history_ids=tuple(history),
                response_ids=tuple(response),
                topic_label=topic_label(u.topics, mode, vocab.n_topics),
                turn_index=n,
                gold_topics=u.topics,
                dialogue_index=dialogue_index,
            )
        )
    return samples


def corpus_samples(corpus: Corpus, vocab: Vocab, max_context: int, max_decode: int,
                   use_roles: bool = True) -> list[TrainingSample]:
    out = []
    for i, d in enumerate(corpus.dialogues):
        out.extend(build_samples(d, vocab, corpus.mode, max_context, max_decode, use_roles, i))
    return out


def build_refine_input(
    history_ids: Sequence[int],
    r1_ids: Sequence[int],
    topic_ids,
    vocab: Vocab,
    refine_context: str = "full",
    max_len: int | None = None,
) -> list[int]:
    """``history ++ [CLS] ++ r1 ++ [<topic>] ++ topic surfaces ++ [<topic>]``.

    Topic surfaces are joined by TOPIC_SEP in ascending topic-id order. With
    ``refine_context="response_only"`` the history prefix is omitted. When
    ``max_len`` is exceeded, history tokens after the leading BOS are
    dropped oldest first; r1 and the topic segment are never cut.
    """
    if len(r1_ids) == 0:
        raise ContractError("coarse response must be non-empty")
    if refine_context not in ("full", "response_only"):
        raise ConfigError(f"unknown refine_context {refine_context!r}")
    mark = vocab.special_id("TOPIC_MARK")
    suffix = (
        [vocab.special_id("CLS")]
        + list(r1_ids)
        + [mark]
        + _topic_segment(sorted(set(topic_ids)), vocab)
        + [mark]
    )
    history = list(history_ids) if refine_context == "full" else []
    if max_len is not None and len(history) + len(suffix) > max_len:
        room = max_len - len(suffix)
        if room < 0:
            raise ContractError("coarse response and topics alone exceed the length budget")
        if history and history[0] == vocab.bos_id:
            history = history[:1] + history[len(history) - room + 1:] if room >= 1 else []
        else:
            history = history[len(history) - room:] if room else []
    return history + suffix


def split_corpus(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministic dialogue-level train/test split."""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in [0, 1)")
    n = len(corpus.dialogues)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return corpus.subset(train), corpus.subset(test)
