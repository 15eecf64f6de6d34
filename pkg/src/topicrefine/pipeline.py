"""Inference: greedy coarse decode, topic prediction, greedy refined decode."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import net
from .corpus import MULTI_CLASS, TrainingSample, build_refine_input
from .errors import ConfigError, ContractError
from .objective import (
    SEPARATE_BERT,
    SHARED_GPT,
    JointConfig,
    classifier_forward,
    classifier_input,
    sigmoid,
)
from .vocab import Vocab

STAGE_ONE = "stage_one"
STAGE_TWO_GPT = "stage_two_gpt"
STAGE_TWO_BERT = "stage_two_bert"
VARIANTS = (STAGE_ONE, STAGE_TWO_GPT, STAGE_TWO_BERT)


def normalize_variant(value: str) -> str:
    v = value.replace("-", "_")
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {value!r}; choose from {list(VARIANTS)}")
    return v


@dataclass(frozen=True)
class DecodeConfig:
    max_decode: int = 50
    threshold: float = 0.5
    hit_ks: tuple[int, ...] = (1, 3, 5)
    batch_size: int = 32

    def __post_init__(self):
        if self.max_decode < 1:
            raise ConfigError("max_decode must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")


@dataclass
class ThreePassOutput:
    coarse_ids: list[int]
    topic_scores: np.ndarray | None = None
    predicted_topics: list[int] = field(default_factory=list)
    refined_ids: list[int] | None = None

    @property
    def final_ids(self) -> list[int]:
        return self.coarse_ids if self.refined_ids is None else self.refined_ids


def greedy_decode_batch(params, cfg: net.ModelConfig, prefixes: Sequence[Sequence[int]],
                        max_decode: int, eos_id: int, prefix: str = "") -> list[list[int]]:
    """Greedy decoding of several prefixes at once (left-padded).

    Each output stops after EOS (included) or after ``max_decode`` tokens.
    Ties go to the lowest token id; PAD is never emitted.
    """
    if max_decode < 1:
        raise ConfigError("max_decode must be >= 1")
    for p in prefixes:
        if len(p) == 0:
            raise ContractError("decode prefix must be non-empty")
        if len(p) + max_decode - 1 > cfg.max_positions:
            raise ContractError(
                f"prefix of {len(p)} tokens leaves no room for {max_decode} decode steps"
            )
    seqs = net.pad_batch(prefixes, left=True)
    B = len(prefixes)
    outs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_decode):
        trace = net.forward(params, cfg, seqs, prefix=prefix, lm=True, last_only=True)
        logits = trace.logits[:, -1].copy()
        logits[:, net.PAD_ID] = -np.inf
        nxt = np.argmax(logits, axis=-1)
        nxt[done] = net.PAD_ID
        for i in np.flatnonzero(~done):
            outs[i].append(int(nxt[i]))
        done |= nxt == eos_id
        if done.all():
            break
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return outs


def greedy_decode(params, cfg: net.ModelConfig, prefix_ids: Sequence[int], max_decode: int,
                  eos_id: int) -> list[int]:
    return greedy_decode_batch(params, cfg, [prefix_ids], max_decode, eos_id)[0]


def decide_topics(scores: np.ndarray, mode: str, threshold: float = 0.5,
                  n_topics: int | None = None) -> list[int]:
    """Argmax class (NONE maps to no topic) or every class with sigmoid > threshold."""
    if mode == MULTI_CLASS:
        c = int(np.argmax(scores))
        none = len(scores) - 1 if n_topics is None else n_topics
        return [] if c == none else [c]
    return [int(c) for c in np.flatnonzero(sigmoid(scores) > threshold)]


def predict_topics_batch(params, cfg: JointConfig, vocab: Vocab,
                         histories: Sequence[Sequence[int]], decode_cfg: DecodeConfig,
                         classifier: str | None = None):
    """Topic scores from the history alone; the coarse response is never an input."""
    classifier = classifier or cfg.classifier
    if classifier != cfg.classifier:
        raise ConfigError(f"model was built with the {cfg.classifier} classifier")
    scores, chosen = [], []
    for i in range(0, len(histories), decode_cfg.batch_size):
        chunk = histories[i: i + decode_cfg.batch_size]
        seqs = [classifier_input(h, cfg, vocab) for h in chunk]
        logits = classifier_forward(params, cfg, seqs).cls_logits
        for z in logits:
            scores.append(z)
            chosen.append(decide_topics(z, cfg.mode, decode_cfg.threshold, vocab.n_topics))
    return scores, chosen


def predict_topics(params, cfg: JointConfig, vocab: Vocab, history_ids: Sequence[int],
                   decode_cfg: DecodeConfig | None = None):
    scores, chosen = predict_topics_batch(params, cfg, vocab, [history_ids],
                                          decode_cfg or DecodeConfig())
    return scores[0], chosen[0]


def _classifier_for(variant: str) -> str:
    return SEPARATE_BERT if variant == STAGE_TWO_BERT else SHARED_GPT


def three_pass_batch(params, cfg: JointConfig, vocab: Vocab,
                     histories: Sequence[Sequence[int]], decode_cfg: DecodeConfig,
                     variant: str = STAGE_TWO_GPT) -> list[ThreePassOutput]:
    variant = normalize_variant(variant)
    if variant != STAGE_ONE and _classifier_for(variant) != cfg.classifier:
        raise ConfigError(
            f"variant {variant} needs the {_classifier_for(variant)} classifier, "
            f"model has {cfg.classifier}"
        )
    bos, eos = vocab.bos_id, vocab.eos_id
    outputs: list[ThreePassOutput] = []
    for i in range(0, len(histories), decode_cfg.batch_size):
        chunk = [list(h) for h in histories[i: i + decode_cfg.batch_size]]
        coarse = greedy_decode_batch(
            params, cfg.model, [h + [bos] for h in chunk], decode_cfg.max_decode, eos
        )
        if variant == STAGE_ONE:
            outputs.extend(ThreePassOutput(c) for c in coarse)
            continue
        scores, topics = predict_topics_batch(params, cfg, vocab, chunk, decode_cfg)
        refine_prefixes = [
            build_refine_input(h, c, t, vocab, cfg.refine_context, cfg.refine_budget) + [bos]
            for h, c, t in zip(chunk, coarse, topics)
        ]
        refined = greedy_decode_batch(
            params, cfg.model, refine_prefixes, decode_cfg.max_decode, eos
        )
        outputs.extend(
            ThreePassOutput(c, s, t, r) for c, s, t, r in zip(coarse, scores, topics, refined)
        )
    return outputs


def three_pass(params, cfg: JointConfig, vocab: Vocab, history_ids: Sequence[int],
               decode_cfg: DecodeConfig | None = None,
               variant: str = STAGE_TWO_GPT) -> ThreePassOutput:
    return three_pass_batch(params, cfg, vocab, [history_ids], decode_cfg or DecodeConfig(),
                            variant)[0]


def strip_eos(ids: Sequence[int], vocab: Vocab) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(vocab.eos_id)] if vocab.eos_id in ids else ids


def generation_records(samples: Sequence[TrainingSample], outputs: Sequence[ThreePassOutput],
                       vocab: Vocab, variant: str) -> list[dict]:
    """Rows of the generations JSONL file."""
    rows = []
    for k, (s, o) in enumerate(zip(samples, outputs)):
        rows.append({
            "sample_id": k,
            "dialogue": s.dialogue_index,
            "turn": s.turn_index,
            "variant": variant,
            "coarse": " ".join(vocab.decode(strip_eos(o.coarse_ids, vocab))),
            "topics": [vocab.topics[t] for t in o.predicted_topics],
            "refined": None if o.refined_ids is None
            else " ".join(vocab.decode(strip_eos(o.refined_ids, vocab))),
            "gold_response": " ".join(vocab.decode(strip_eos(s.response_ids, vocab))),
            "gold_topics": [vocab.topics[t] for t in sorted(s.gold_topics)],
            "topic_scores": None if o.topic_scores is None
            else [float(x) for x in o.topic_scores],
        })
    return rows
