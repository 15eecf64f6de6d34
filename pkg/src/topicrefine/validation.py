"""Input checks used by the estimator front end."""

from __future__ import annotations

from typing import Sequence

from .corpus import Corpus, Dialogue, TrainingSample
from .errors import ConfigError, DataError


def check_corpus(X, mode: str | None = None) -> Corpus:
    """Return ``X`` as a :class:`Corpus`, refusing a mode different from ``mode``."""
    if isinstance(X, Corpus):
        corpus = X
    else:
        raise DataError(f"expected a Corpus, got {type(X).__name__}")
    if not corpus.dialogues:
        raise DataError("corpus has no dialogues")
    if mode is not None and corpus.mode != mode:
        raise ConfigError(f"configured for {mode} topics but the corpus is {corpus.mode}")
    return corpus


def check_histories(X) -> list[list[int]]:
    """Accept samples or raw id sequences; always return id lists."""
    if isinstance(X, (Corpus, Dialogue)):
        raise DataError("pass samples or histories here, not a raw corpus")
    out = []
    for item in X:
        ids = item.history_ids if isinstance(item, TrainingSample) else item
        ids = [int(t) for t in ids]
        if not ids:
            raise DataError("empty history")
        out.append(ids)
    return out


def check_choice(value: str, choices: Sequence[str], name: str) -> str:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value
