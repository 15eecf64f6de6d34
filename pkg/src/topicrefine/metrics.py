"""BLEU, Topic-F1, micro P/R/F1, Hit@k and length-bucketed BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .vocab import tokenize

BLEU_EPS = 1e-9
DEFAULT_BUCKETS = (0, 10, 20, 30, 40, math.inf)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence],
                n: int = 4) -> float:
    """Single-reference corpus BLEU with uniform weights over orders 1..n.

    Clipped n-gram counts are pooled over the corpus. An order with no
    matches (or no candidate n-grams) gets precision ``1e-9 / max(total, 1)``
    instead of zero. Brevity penalty is ``exp(min(0, 1 - r / c))``. An empty
    candidate corpus scores 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if n < 1:
        raise ValueError("n must be >= 1")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        matched = total = 0
        for c, r in zip(candidates, references):
            cc = _ngrams(c, k)
            rc = _ngrams(r, k)
            matched += sum(min(cnt, rc[g]) for g, cnt in cc.items())
            total += sum(cc.values())
        p = matched / total if matched else BLEU_EPS / max(total, 1)
        log_p += math.log(p) / n
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


def bleu_n(candidate: Sequence, reference: Sequence, n: int = 4) -> float:
    return corpus_bleu([candidate], [reference], n)


def sentence_avg_bleu(candidate: Sequence, reference: Sequence) -> float:
    """Mean of BLEU-1..4 on one pair; the per-sample score used for length buckets."""
    return sum(bleu_n(candidate, reference, k) for k in range(1, 5)) / 4


def contains_span(tokens: Sequence, span: Sequence) -> bool:
    m = len(span)
    if m == 0:
        return False
    return any(list(tokens[i: i + m]) == list(span) for i in range(len(tokens) - m + 1))


def mentioned_topics(generated: Sequence, topic_lexicon: Sequence[str]) -> set[int]:
    """Topics whose surface occurs as a contiguous token run of ``generated``."""
    return {t for t, s in enumerate(topic_lexicon) if contains_span(generated, tokenize(s))}


def prf_multilabel(predicted: Sequence[Iterable[int]], gold: Sequence[Iterable[int]]):
    """Micro precision/recall/F1 over all (sample, topic) decisions; 0/0 is 0."""
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold differ in length")
    tp = fp = fn = 0
    for p, g in zip(predicted, gold):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def topic_f1(generated: Sequence[Sequence], gold_topics: Sequence[Iterable[int]],
             topic_lexicon: Sequence[str]):
    """Corpus-level micro (P, R, F1) of topics mentioned verbatim in the responses.

    Each topic counts once per response however often it appears.
    """
    mentioned = [mentioned_topics(g, topic_lexicon) for g in generated]
    return prf_multilabel(mentioned, gold_topics)


def top_k(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k best scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return order[:k].tolist()


def hit_at_k(scores: Sequence[float], gold_class: int, k: int) -> int:
    return int(gold_class in top_k(scores, k))


def corpus_hit_at_k(all_scores: Sequence[Sequence[float]], gold: Sequence[int], k: int) -> float:
    if not len(gold):
        return 0.0
    return sum(hit_at_k(s, g, k) for s, g in zip(all_scores, gold)) / len(gold)


def length_bucketed_bleu(results: Sequence[tuple[Sequence, Sequence]],
                         bucket_edges: Sequence[float] = DEFAULT_BUCKETS) -> list[dict]:
    """Mean per-sample average BLEU grouped by gold-response length.

    ``results`` holds ``(candidate, reference)`` pairs; buckets are the
    half-open intervals ``[edges[i], edges[i+1])``.
    """
    edges = list(bucket_edges)
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing with at least two entries")
    sums = [0.0] * (len(edges) - 1)
    counts = [0] * (len(edges) - 1)
    for cand, ref in results:
        length = len(ref)
        for b in range(len(edges) - 1):
            if edges[b] <= length < edges[b + 1]:
                sums[b] += sentence_avg_bleu(cand, ref)
                counts[b] += 1
                break
    return [
        {"range": [edges[b], edges[b + 1] if math.isfinite(edges[b + 1]) else None],
         "mean_bleu": sums[b] / counts[b] if counts[b] else 0.0,
         "count": counts[b]}
        for b in range(len(edges) - 1)
    ]


@dataclass
class MetricsReport:
    mode: str
    variant: str
    n_samples: int
    bleu: dict[int, float]
    topic_precision: float | None = None
    topic_recall: float | None = None
    topic_f1: float | None = None
    pred_precision: float | None = None
    pred_recall: float | None = None
    pred_f1: float | None = None
    hits: dict[int, float] = field(default_factory=dict)
    avg_score: float | None = None
    length_buckets: list[dict] = field(default_factory=list)
    notes: str = ("corpus BLEU, single reference, add-eps smoothing (1e-9) on empty orders; "
                  "Topic-F1 by contiguous token match, set-wise per response; "
                  "avg_score = mean(BLEU-1, BLEU-4, Topic-F1); "
                  "bucket score = mean sentence BLEU-1..4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bleu"] = {f"bleu_{k}": v for k, v in self.bleu.items()}
        d["hits"] = {f"hit@{k}": v for k, v in self.hits.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        """Aligned table with scores shown x100."""
        cols = [(f"BLEU-{k}", v) for k, v in sorted(self.bleu.items())]
        if self.topic_f1 is not None:
            cols.append(("Topic-F1", self.topic_f1))
        if self.avg_score is not None:
            cols.append(("Avg Score", self.avg_score))
        lines = [f"# {self.notes}", f"# mode={self.mode} variant={self.variant} "
                 f"samples={self.n_samples}", ""]
        lines.append("Model".ljust(16) + "".join(name.rjust(11) for name, _ in cols))
        lines.append(self.variant.ljust(16) + "".join(f"{100 * v:11.2f}" for _, v in cols))
        lines.append("")
        if self.pred_f1 is not None:
            lines.append("Topic prediction".ljust(16) + "P".rjust(11) + "R".rjust(11)
                         + "F1".rjust(11))
            lines.append(self.variant.ljust(16) + f"{100 * self.pred_precision:11.2f}"
                         f"{100 * self.pred_recall:11.2f}{100 * self.pred_f1:11.2f}")
            lines.append("")
        if self.hits:
            lines.append("Topic prediction".ljust(16)
                         + "".join(f"Hit@{k}".rjust(11) for k in sorted(self.hits)))
            lines.append(self.variant.ljust(16)
                         + "".join(f"{self.hits[k]:11.4f}" for k in sorted(self.hits)))
            lines.append("")
        if self.length_buckets:
            lines.append("Gold length".ljust(16) + "Avg BLEU".rjust(11) + "Count".rjust(11))
            for b in self.length_buckets:
                lo, hi = b["range"]
                label = f"[{lo:g}, {'inf' if hi is None else format(hi, 'g')})"
                lines.append(label.ljust(16) + f"{100 * b['mean_bleu']:11.2f}"
                             + f"{b['count']:11d}")
        return "\n".join(lines) + "\n"


def evaluate_records(records: Sequence[dict], topic_lexicon: Sequence[str], mode: str,
                     variant: str, hit_ks: Sequence[int] = (1, 3, 5),
                     bucket_edges: Sequence[float] = DEFAULT_BUCKETS) -> MetricsReport:
    """Score generation rows (see :func:`topicrefine.pipeline.generation_records`).

    Stage-one rows are scored on ``coarse``; stage-two rows on ``refined``.
    Multi-class corpora get Hit@k instead of the Topic-F1 / P/R/F1 tables.
    """
    index = {s: i for i, s in enumerate(topic_lexicon)}
    cands, refs, gold_sets, pred_sets, scores = [], [], [], [], []
    for r in records:
        text = r["refined"] if r.get("refined") is not None else r["coarse"]
        cands.append(tokenize(text))
        refs.append(tokenize(r["gold_response"]))
        gold_sets.append({index[t] for t in r["gold_topics"]})
        pred_sets.append({index[t] for t in r.get("topics", [])})
        scores.append(r.get("topic_scores"))

    report = MetricsReport(
        mode=mode, variant=variant, n_samples=len(records),
        bleu={k: corpus_bleu(cands, refs, k) for k in range(1, 5)},
    )
    have_scores = all(s is not None for s in scores) and bool(records)
    if mode == "multi-class":
        if have_scores:
            none = len(topic_lexicon)
            gold = [min(g) if g else none for g in gold_sets]
            report.hits = {k: corpus_hit_at_k(scores, gold, k) for k in hit_ks}
    else:
        p, r_, f = topic_f1(cands, gold_sets, topic_lexicon)
        report.topic_precision, report.topic_recall, report.topic_f1 = p, r_, f
        report.avg_score = (report.bleu[1] + report.bleu[4] + f) / 3
        if have_scores:
            report.pred_precision, report.pred_recall, report.pred_f1 = prf_multilabel(
                pred_sets, gold_sets)
    report.length_buckets = length_bucketed_bleu(list(zip(cands, refs)), bucket_edges)
    return report
