import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from topicrefine import corpus as C
from topicrefine.errors import ConfigError
from topicrefine.estimator import TopicRefineGenerator

SMALL = dict(d_model=8, n_layers=1, n_heads=2, max_context=40, max_decode=8,
             warmup_steps=2, steps=4, lr=1e-3, seed=3)


def test_get_params_and_clone():
    est = TopicRefineGenerator(**SMALL)
    params = est.get_params()
    assert params["d_model"] == 8 and params["variant"] == "stage_two_gpt"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(steps=9)
    assert est.steps == 9


def test_unfitted_predict_raises(synth):
    with pytest.raises(NotFittedError):
        TopicRefineGenerator(**SMALL).predict(synth)


def test_fit_predict_shapes(synth):
    est = TopicRefineGenerator(**SMALL).fit(synth)
    assert len(est.history_) == 4
    samples = est.samples(synth)
    preds = est.predict(samples[:5])
    assert len(preds) == 5 and all(len(p) <= 8 for p in preds)
    assert est.decision_function(samples[:5]).shape == (5, synth.n_topics)
    assert len(est.predict_topics(samples[:5])) == 5
    assert 0.0 <= est.score(synth) <= 1.0


def test_bad_choices_rejected(synth):
    with pytest.raises(ConfigError):
        TopicRefineGenerator(**SMALL, ablation="nope").fit(synth)
    with pytest.raises(ConfigError):
        TopicRefineGenerator(**dict(SMALL, mode="multi-class")).fit(synth)


def test_bad_input_types(synth):
    est = TopicRefineGenerator(**SMALL).fit(synth)
    with pytest.raises((TypeError, ValueError)):
        est.predict([[]])
    with pytest.raises((TypeError, ValueError)):
        TopicRefineGenerator(**SMALL).fit("not a corpus")


def test_state_round_trip_and_resume(tmp_path, synth):
    straight = TopicRefineGenerator(**dict(SMALL, steps=6)).fit(synth)
    half = TopicRefineGenerator(**SMALL).fit(synth)
    half.save_state(tmp_path / "ck")
    loaded = TopicRefineGenerator.from_checkpoint(tmp_path / "ck")
    assert loaded.opt_.step == 4
    samples = half.samples(synth)[:3]
    assert loaded.predict(samples) == half.predict(samples)
    resumed = TopicRefineGenerator(**dict(SMALL, steps=6)).resume(synth, tmp_path / "ck")
    assert [h.to_log() for h in resumed.history_] == [h.to_log() for h in straight.history_[4:]]
    for k in straight.params_:
        assert np.array_equal(straight.params_[k], resumed.params_[k])


def test_separate_encoder_variant(synth):
    est = TopicRefineGenerator(**dict(SMALL, classifier="separate_bert",
                                      variant="stage_two_bert")).fit(synth)
    assert any(k.startswith("bert.") for k in est.params_)
    outs = est.predict_three_pass(est.samples(synth)[:2])
    assert all(o.refined_ids for o in outs)


def test_multiclass_corpus(synth):
    mc = C.generate_synthetic(C.SyntheticConfig(n_dialogues=8, mode=C.MULTI_CLASS, seed=2))
    est = TopicRefineGenerator(**SMALL).fit(mc)
    assert est.decision_function(mc).shape[1] == mc.n_topics + 1
