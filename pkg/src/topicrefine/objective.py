"""Losses, AdamW with linear warmup, and the joint teacher-forced step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import net
from .corpus import MODES, MULTI_CLASS, MULTI_LABEL, TrainingSample, build_refine_input, n_classes
from .errors import ConfigError, ContractError, NumericalError
from .vocab import Vocab

FULL = "full"
GPT2DH = "gpt2dh"
STAGE_ONE_ONLY = "stage_one_only"
ABLATIONS = (FULL, GPT2DH, STAGE_ONE_ONLY)

SHARED_GPT = "shared_gpt"
SEPARATE_BERT = "separate_bert"
CLASSIFIERS = (SHARED_GPT, SEPARATE_BERT)

BERT_PREFIX = "bert."


def normalize_choice(value: str, choices: Sequence[str], what: str) -> str:
    """Accept CLI spellings like ``stage-one`` or ``separate-bert``."""
    v = value.replace("-", "_")
    if v == "stage_one":
        v = STAGE_ONE_ONLY if what == "ablation" else v
    if v not in choices:
        raise ConfigError(f"unknown {what} {value!r}; choose from {list(choices)}")
    return v


# ----------------------------------------------------------------------------
# losses


def loss_lm(logits, targets, response_mask):
    """Mean negative log-likelihood over the masked (response) positions.

    ``logits`` is ``(..., T, V)``; ``targets`` and ``response_mask`` are
    ``(..., T)``. Returns ``(loss, d_logits)``.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    mask = np.asarray(response_mask, dtype=bool)
    if mask.shape != targets.shape or logits.shape[:-1] != targets.shape:
        raise ContractError("logits, targets and mask shapes disagree")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("response mask selects no positions")
    V = logits.shape[-1]
    logp = net.log_softmax(logits).reshape(-1, V)
    rows = np.arange(logp.shape[0])
    cols = np.where(mask, targets, 0).ravel()
    flat_mask = mask.ravel()
    loss = -logp[rows[flat_mask], cols[flat_mask]].sum() / count
    grad = np.exp(logp)
    grad[rows, cols] -= 1.0
    grad *= flat_mask[:, None] / count
    grad = grad.reshape(logits.shape)
    return float(loss), grad


def loss_topic_multiclass(logits, label):
    """Softmax cross-entropy; batched inputs are averaged over the batch."""
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    K = z.shape[-1]
    if y.shape != (z.shape[0],):
        raise ContractError("one label per row expected")
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"label outside [0, {K})")
    logp = net.log_softmax(z)
    rows = np.arange(len(y))
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= len(y)
    return float(loss), (grad[0] if single else grad)


def loss_topic_multilabel(logits, labels):
    """Independent binary cross-entropies, averaged over classes (and batch).

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` which never overflows.
    """
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype if z.dtype.kind == "f" else float)
    if y.shape != z.shape:
        raise ContractError("labels must match logits in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("multi-label targets must be 0 or 1")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = per.mean()
    grad = (sigmoid(z) - y) / z.size
    return float(loss), grad


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 2000

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptState":
        return cls(m=net.zeros_like(params), v=net.zeros_like(params), **hyper)

    def hyperparameters(self) -> dict:
        d = asdict(self)
        for k in ("m", "v", "step"):
            d.pop(k)
        d["betas"] = list(self.betas)
        return d


def lr_at(opt: OptState, step: int) -> float:
    """Linear warmup to ``opt.lr`` over ``warmup_steps`` updates, then constant."""
    if opt.warmup_steps <= 0:
        return opt.lr
    return opt.lr * min(step / opt.warmup_steps, 1.0)


def adamw_step(params: dict, grads: Mapping[str, np.ndarray], opt: OptState) -> dict:
    """Decoupled weight decay Adam; updates ``params`` in place and returns it."""
    opt.step += 1
    lr = lr_at(opt, opt.step)
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name in sorted(params):
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w = params[name]
        if opt.weight_decay and not net.is_decay_exempt(name):
            w *= 1.0 - lr * opt.weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


# ----------------------------------------------------------------------------
# joint model


@dataclass(frozen=True)
class JointConfig:
    """Everything the three passes need besides parameters and vocabulary."""

    model: net.ModelConfig
    mode: str
    max_context: int
    max_decode: int
    classifier: str = SHARED_GPT
    bert: net.ModelConfig | None = None
    refine_context: str = "full"
    refine_r1_source: str = "argmax_teacher_forced"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.model.attention_mode != net.CAUSAL:
            raise ConfigError("the generator must use causal attention")
        if self.model.max_positions < self.max_context + self.max_decode:
            raise ConfigError("max_positions must be >= max_context + max_decode")
        if self.classifier == SEPARATE_BERT:
            if self.bert is None or self.bert.attention_mode != net.BIDIRECTIONAL:
                raise ConfigError("separate_bert needs a bidirectional encoder config")
            if self.bert.n_topics != self.model.n_topics:
                raise ConfigError("encoder and generator disagree on the class count")
        if self.refine_r1_source not in ("argmax_teacher_forced", "gold"):
            raise ConfigError(f"unknown refine_r1_source {self.refine_r1_source!r}")
        if self.refine_context not in ("full", "response_only"):
            raise ConfigError(f"unknown refine_context {self.refine_context!r}")

    @property
    def refine_budget(self) -> int:
        """Longest refine input that still leaves room for BOS plus a response."""
        return self.model.max_positions - self.max_decode - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["bert"] = self.bert.to_dict() if self.bert else None
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "JointConfig":
        data = dict(data)
        data["model"] = net.ModelConfig.from_dict(data["model"])
        if data.get("bert"):
            data["bert"] = net.ModelConfig.from_dict(data["bert"])
        return cls(**data)


def make_joint_config(vocab: Vocab, mode: str, *, d_model=64, n_layers=4, n_heads=4,
                      d_ff=None, max_context=500, max_decode=50, classifier=SHARED_GPT,
                      tie_lm_head=True, dtype="float64", refine_context="full",
                      refine_r1_source="argmax_teacher_forced",
                      max_positions=None) -> JointConfig:
    K = n_classes(mode, vocab.n_topics)
    positions = max_positions or max_context + max_decode
    model = net.ModelConfig(
        vocab_size=len(vocab), n_topics=K, d_model=d_model, n_layers=n_layers,
        n_heads=n_heads, d_ff=d_ff, max_positions=positions, tie_lm_head=tie_lm_head,
        dtype=dtype,
    )
    bert = None
    if classifier == SEPARATE_BERT:
        bert = net.ModelConfig(
            vocab_size=len(vocab), n_topics=K, d_model=d_model, n_layers=n_layers,
            n_heads=n_heads, d_ff=d_ff, max_positions=positions,
            attention_mode=net.BIDIRECTIONAL, cls_pool=net.FIRST_TOKEN, tie_lm_head=True,
            dtype=dtype, cls_token_id=vocab.special_id("CLS"),
        )
    return JointConfig(model, mode, max_context, max_decode, classifier, bert,
                       refine_context, refine_r1_source)


def init_joint_params(cfg: JointConfig, seed: int) -> dict[str, np.ndarray]:
    params = net.init_params(cfg.model, seed)
    if cfg.classifier == SEPARATE_BERT:
        params.update(net.init_params(cfg.bert, seed + 1, prefix=BERT_PREFIX))
    return params


def joint_shapes(cfg: JointConfig) -> dict[str, tuple]:
    shapes = net.param_shapes(cfg.model)
    if cfg.classifier == SEPARATE_BERT:
        shapes.update(net.param_shapes(cfg.bert, BERT_PREFIX))
    return shapes


def classifier_input(history_ids: Sequence[int], cfg: JointConfig, vocab: Vocab) -> list[int]:
    """History only; the encoder variant swaps the leading BOS for CLS."""
    if cfg.classifier == SEPARATE_BERT:
        body = list(history_ids[1:]) if history_ids and history_ids[0] == vocab.bos_id \
            else list(history_ids)
        return [vocab.special_id("CLS")] + body
    return list(history_ids)


def classifier_forward(params, cfg: JointConfig, seqs) -> net.ForwardTrace:
    ids = net.pad_batch(seqs)
    if cfg.classifier == SEPARATE_BERT:
        return net.forward(params, cfg.bert, ids, prefix=BERT_PREFIX, lm=False, cls=True)
    return net.forward(params, cfg.model, ids, lm=False, cls=True)


def teacher_forced_batch(prefixes: Sequence[Sequence[int]], responses: Sequence[Sequence[int]],
                         bos_id: int):
    """Build ``prefix ++ BOS ++ response`` inputs, shifted targets and masks."""
    inputs, targets = [], []
    for pre, resp in zip(prefixes, responses):
        seq = list(pre) + [bos_id] + list(resp)
        inputs.append(seq[:-1])
        targets.append(seq[1:])
    x = net.pad_batch(inputs)
    y = net.pad_batch(targets)
    mask = np.zeros(x.shape, dtype=bool)
    for i, (pre, resp) in enumerate(zip(prefixes, responses)):
        mask[i, len(pre): len(pre) + len(resp)] = True
    return x, y, mask


def topic_loss(cls_logits, labels, mode: str):
    if mode == MULTI_CLASS:
        return loss_topic_multiclass(cls_logits, np.asarray(labels, dtype=np.int64))
    return loss_topic_multilabel(cls_logits, np.stack(labels).astype(cls_logits.dtype))


def coarse_from_logits(logits, mask, eos_id: int) -> list[list[int]]:
    """Per-position argmax at response positions, cut after the first EOS."""
    out = []
    for row, m in zip(logits, mask):
        toks = np.argmax(row[m], axis=-1).tolist()
        if eos_id in toks:
            toks = toks[: toks.index(eos_id) + 1]
        out.append(toks)
    return out


@dataclass
class LossBreakdown:
    l_one: float
    l_topic: float
    l_refine: float
    l_total: float
    lr: float = 0.0
    step: int = 0

    def to_log(self) -> dict:
        return {"step": self.step, "l_one": self.l_one, "l_topic": self.l_topic,
                "l_refine": self.l_refine, "l_total": self.l_total, "lr": self.lr}


def compute_losses(params, batch: Sequence[TrainingSample], cfg: JointConfig, vocab: Vocab,
                   ablation: str = FULL, with_grads: bool = True):
    """Forward/backward for every active term; returns losses, summed grads, extras."""
    if not batch:
        raise ContractError("empty batch")
    ablation = normalize_choice(ablation, ABLATIONS, "ablation")
    grads = net.zeros_like(params) if with_grads else None
    histories = [s.history_ids for s in batch]
    responses = [s.response_ids for s in batch]
    bos = vocab.bos_id

    # pass A: coarse response under teacher forcing
    x, y, mask = teacher_forced_batch(histories, responses, bos)
    trace_a = net.forward(params, cfg.model, x, lm=True)
    l_one, d_a = loss_lm(trace_a.logits, y, mask)
    if with_grads:
        _accumulate(grads, net.backward(params, cfg.model, trace_a, d_logits=d_a))

    l_topic = 0.0
    cls_logits = None
    if ablation in (FULL, GPT2DH):
        # pass B: topics from history only
        seqs = [classifier_input(h, cfg, vocab) for h in histories]
        trace_b = classifier_forward(params, cfg, seqs)
        cls_logits = trace_b.cls_logits
        l_topic, d_b = topic_loss(cls_logits, [s.topic_label for s in batch], cfg.mode)
        if with_grads:
            model_cfg = cfg.bert if cfg.classifier == SEPARATE_BERT else cfg.model
            _accumulate(grads, net.backward(params, model_cfg, trace_b, d_cls=d_b))

    l_refine = 0.0
    if ablation == FULL:
        # pass C: refinement; coarse tokens enter as constants
        if cfg.refine_r1_source == "gold":
            r1 = [list(r) for r in responses]
        else:
            r1 = coarse_from_logits(trace_a.logits, mask, vocab.eos_id)
        prefixes = [
            build_refine_input(h, c, s.gold_topics, vocab, cfg.refine_context, cfg.refine_budget)
            for h, c, s in zip(histories, r1, batch)
        ]
        xc, yc, mc = teacher_forced_batch(prefixes, responses, bos)
        trace_c = net.forward(params, cfg.model, xc, lm=True)
        l_refine, d_c = loss_lm(trace_c.logits, yc, mc)
        if with_grads:
            _accumulate(grads, net.backward(params, cfg.model, trace_c, d_logits=d_c))

    l_total = l_one + l_topic + l_refine
    return LossBreakdown(l_one, l_topic, l_refine, l_total), grads, {"cls_logits": cls_logits}


def _accumulate(total: dict, part: Mapping[str, np.ndarray]) -> None:
    for k, v in part.items():
        total[k] += v


def _diagnostics(params, grads) -> dict:
    out = {}
    for name in sorted(params):
        w = params[name]
        g = grads[name] if grads is not None else None
        bad_w = not np.all(np.isfinite(w))
        bad_g = g is not None and not np.all(np.isfinite(g))
        if bad_w or bad_g:
            out[name] = {"param_finite": not bad_w, "grad_finite": not bad_g}
    finite = [np.abs(w[np.isfinite(w)]) for w in params.values()]
    out["_max_abs_param"] = max((float(f.max()) for f in finite if f.size), default=float("nan"))
    return out


def train_step(params: dict, opt: OptState, batch: Sequence[TrainingSample], cfg: JointConfig,
               vocab: Vocab, ablation: str = FULL) -> LossBreakdown:
    """One teacher-forced joint update. Raises NumericalError on non-finite loss."""
    losses, grads, _ = compute_losses(params, batch, cfg, vocab, ablation)
    if not math.isfinite(losses.l_total):
        raise NumericalError(
            f"non-finite loss at step {opt.step + 1}: {losses.to_log()}",
            diagnostics=_diagnostics(params, grads),
        )
    adamw_step(params, grads, opt)
    losses.lr = lr_at(opt, opt.step)
    losses.step = opt.step
    return losses


# ----------------------------------------------------------------------------
# training loop


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [order[i: i + batch_size] for i in range(0, n_samples, batch_size)]


def batch_for_step(n_samples: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices used at 0-based update ``step``; pure, so resumed runs line up."""
    per_epoch = math.ceil(n_samples / batch_size)
    return epoch_batches(n_samples, batch_size, seed, step // per_epoch)[step % per_epoch]


def run_training(params: dict, opt: OptState, samples: Sequence[TrainingSample],
                 cfg: JointConfig, vocab: Vocab, n_steps: int, batch_size: int = 4,
                 seed: int = 0, ablation: str = FULL,
                 callback: Callable[[LossBreakdown], None] | None = None) -> list[LossBreakdown]:
    """Continue training from ``opt.step`` until ``n_steps`` updates in total."""
    if not samples:
        raise ContractError("no training samples")
    history = []
    while opt.step < n_steps:
        idx = batch_for_step(len(samples), batch_size, seed, opt.step)
        out = train_step(params, opt, [samples[i] for i in idx], cfg, vocab, ablation)
        history.append(out)
        if callback is not None:
            callback(out)
    return history


def topic_accuracy(params, samples: Iterable[TrainingSample], cfg: JointConfig, vocab: Vocab,
                   threshold: float = 0.5, batch_size: int = 32) -> float:
    """Exact-match accuracy of the topic head (whole label set in multi-label mode)."""
    samples = list(samples)
    hits = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        seqs = [classifier_input(s.history_ids, cfg, vocab) for s in chunk]
        logits = classifier_forward(params, cfg, seqs).cls_logits
        for s, z in zip(chunk, logits):
            if cfg.mode == MULTI_CLASS:
                hits += int(np.argmax(z) == s.topic_label)
            else:
                hits += int(np.array_equal(sigmoid(z) > threshold, s.topic_label > 0.5))
    return hits / len(samples)
