"""scikit-learn style front end for the joint coarse/topic/refine model."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import net
from .corpus import Corpus, corpus_samples
from .errors import ConfigError
from .metrics import corpus_bleu
from .objective import (
    ABLATIONS,
    CLASSIFIERS,
    JointConfig,
    LossBreakdown,
    OptState,
    init_joint_params,
    joint_shapes,
    make_joint_config,
    normalize_choice,
    run_training,
)
from .pipeline import (
    DecodeConfig,
    normalize_variant,
    predict_topics_batch,
    strip_eos,
    three_pass_batch,
)
from .validation import check_corpus, check_histories
from .vocab import Vocab, build_vocab

log = logging.getLogger(__name__)

_OPT_M = "__opt_m__/"
_OPT_V = "__opt_v__/"


class TopicRefineGenerator(BaseEstimator):
    """Joint response generator with topic prediction and topic refinement.

    ``fit`` takes a :class:`~topicrefine.corpus.Corpus`; ``predict`` takes a
    corpus, a list of training samples, or raw history id sequences and
    returns the final response (coarse for ``variant="stage_one"``, refined
    otherwise) as token lists.

    Defaults: lr 1.5e-4, batch 4, 2000 warmup steps, max context 500 and
    max decode 50, with a small backbone that trains on a laptop CPU.
    """

    def __init__(self, d_model=64, n_layers=4, n_heads=4, d_ff=None, max_context=500,
                 max_decode=50, max_positions=None, tie_lm_head=True, dtype="float64",
                 lr=1.5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 warmup_steps=2000, batch_size=4, steps=2000, ablation="full",
                 classifier="shared_gpt", refine_context="full",
                 refine_r1_source="argmax_teacher_forced", variant="stage_two_gpt",
                 use_roles=True, min_count=1, threshold=0.5, mode=None, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_context = max_context
        self.max_decode = max_decode
        self.max_positions = max_positions
        self.tie_lm_head = tie_lm_head
        self.dtype = dtype
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.steps = steps
        self.ablation = ablation
        self.classifier = classifier
        self.refine_context = refine_context
        self.refine_r1_source = refine_r1_source
        self.variant = variant
        self.use_roles = use_roles
        self.min_count = min_count
        self.threshold = threshold
        self.mode = mode
        self.seed = seed

    # ------------------------------------------------------------------ setup

    def _validate_params(self):
        normalize_choice(self.ablation, ABLATIONS, "ablation")
        normalize_choice(self.classifier, CLASSIFIERS, "classifier")
        normalize_variant(self.variant)
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    def _init_model(self, corpus: Corpus, vocab: Vocab | None = None):
        self.vocab_ = vocab or build_vocab(corpus, self.min_count)
        self.config_ = make_joint_config(
            self.vocab_, corpus.mode, d_model=self.d_model, n_layers=self.n_layers,
            n_heads=self.n_heads, d_ff=self.d_ff, max_context=self.max_context,
            max_decode=self.max_decode,
            classifier=normalize_choice(self.classifier, CLASSIFIERS, "classifier"),
            tie_lm_head=self.tie_lm_head, dtype=self.dtype,
            refine_context=self.refine_context, refine_r1_source=self.refine_r1_source,
            max_positions=self.max_positions,
        )
        self.params_ = init_joint_params(self.config_, self.seed)
        self.opt_ = OptState.create(
            self.params_, lr=self.lr, betas=tuple(self.betas), eps=self.eps,
            weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
        )
        self.history_: list[LossBreakdown] = []

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(max_decode=self.max_decode, threshold=self.threshold)

    def samples(self, corpus: Corpus):
        check_is_fitted(self, "params_")
        return corpus_samples(corpus, self.vocab_, self.max_context, self.max_decode,
                              self.use_roles)

    # -------------------------------------------------------------- training

    def fit(self, X, y=None, callback: Callable[[LossBreakdown], None] | None = None):
        """Train from scratch on corpus ``X`` for ``steps`` updates."""
        self._validate_params()
        corpus = check_corpus(X, self.mode)
        self._init_model(corpus)
        return self._train(corpus, callback)

    def resume(self, X, checkpoint, callback=None):
        """Load ``checkpoint`` and continue training on ``X`` up to ``steps`` updates."""
        self._validate_params()
        corpus = check_corpus(X, self.mode)
        self.load_state(checkpoint)
        return self._train(corpus, callback)

    def _train(self, corpus, callback):
        self.n_topics_ = corpus.n_topics
        self.mode_ = corpus.mode
        samples = self.samples(corpus)
        log.info("training on %d samples for %d steps", len(samples), self.steps)

        def record(out):
            self.history_.append(out)
            if callback is not None:
                callback(out)

        run_training(self.params_, self.opt_, samples, self.config_, self.vocab_, self.steps,
                     self.batch_size, self.seed, self.ablation, record)
        return self

    # ------------------------------------------------------------- inference

    def _histories(self, X):
        check_is_fitted(self, "params_")
        if isinstance(X, Corpus):
            X = self.samples(X)
        return check_histories(X)

    def predict_three_pass(self, X, variant=None):
        histories = self._histories(X)
        return three_pass_batch(self.params_, self.config_, self.vocab_, histories,
                                self.decode_config(), variant or self.variant)

    def predict(self, X):
        outs = self.predict_three_pass(X)
        return [self.vocab_.decode(strip_eos(o.final_ids, self.vocab_)) for o in outs]

    def predict_topics(self, X):
        """Topic decisions (lists of topic ids) from the history alone."""
        histories = self._histories(X)
        _, chosen = predict_topics_batch(self.params_, self.config_, self.vocab_, histories,
                                         self.decode_config())
        return chosen

    def decision_function(self, X):
        histories = self._histories(X)
        scores, _ = predict_topics_batch(self.params_, self.config_, self.vocab_, histories,
                                         self.decode_config())
        return np.stack(scores)

    def score(self, X, y=None):
        """Corpus BLEU-1 of the final responses on the system turns of ``X``."""
        samples = self.samples(check_corpus(X))
        preds = self.predict(samples)
        refs = [self.vocab_.decode(strip_eos(s.response_ids, self.vocab_)) for s in samples]
        return corpus_bleu(preds, refs, 1)

    # ----------------------------------------------------------- persistence

    def save_state(self, stem) -> tuple[Path, Path]:
        """Checkpoint parameters, optimizer moments, vocabulary and configuration."""
        check_is_fitted(self, "params_")
        tensors = dict(self.params_)
        for k in self.params_:
            tensors[_OPT_M + k] = self.opt_.m[k]
            tensors[_OPT_V + k] = self.opt_.v[k]
        meta = {
            "step": self.opt_.step,
            "estimator": _jsonable(self.get_params()),
            "optimizer": self.opt_.hyperparameters(),
            "vocab": self.vocab_.to_dict(),
            "mode": self.config_.mode,
        }
        return net.save_checkpoint(stem, tensors, self.config_.to_dict(), meta)

    def load_state(self, stem):
        _, manifest = net.load_checkpoint(stem)
        self.config_ = JointConfig.from_dict(manifest["config"])
        tensors, _ = net.load_checkpoint(stem, expected_shapes=joint_shapes(self.config_))
        meta = manifest["meta"]
        self.vocab_ = Vocab.from_dict(meta["vocab"])
        names = list(joint_shapes(self.config_))
        self.params_ = {k: tensors[k].copy() for k in names}
        hyper = dict(meta["optimizer"])
        hyper["betas"] = tuple(hyper["betas"])
        self.opt_ = OptState(
            m={k: tensors[_OPT_M + k].copy() for k in names},
            v={k: tensors[_OPT_V + k].copy() for k in names},
            step=int(meta["step"]),
            **hyper,
        )
        self.history_ = []
        self.mode_ = self.config_.mode
        self.n_topics_ = self.vocab_.n_topics
        return self

    @classmethod
    def from_checkpoint(cls, stem) -> "TopicRefineGenerator":
        _, manifest = net.load_checkpoint(stem)
        params = dict(manifest["meta"]["estimator"])
        if isinstance(params.get("betas"), list):
            params["betas"] = tuple(params["betas"])
        return cls(**params).load_state(stem)


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
