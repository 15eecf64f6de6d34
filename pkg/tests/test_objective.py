import math

import numpy as np
import pytest

from gradcheck import finite_difference, max_relative_error
from topicrefine import corpus as C
from topicrefine import net
from topicrefine import objective as O
from topicrefine.errors import ContractError, NumericalError


def numeric_grad(f, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        old = z[idx]
        z[idx] = old + h
        up = f(z)
        z[idx] = old - h
        down = f(z)
        z[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


# --------------------------------------------------------------- losses


def test_uniform_lm_loss_is_log_v():
    T, V = 6, 64
    targets = np.arange(T) + 3
    mask = np.array([False, True, True, True, False, True])
    loss, _ = O.loss_lm(np.zeros((T, V)), targets, mask)
    assert abs(loss - math.log(64)) <= 1e-9
    assert abs(loss - 4.1589) < 1e-4


def test_lm_loss_ignores_unmasked_positions(rng):
    logits = rng.standard_normal((2, 5, 10))
    targets = rng.integers(0, 10, size=(2, 5))
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, 3:] = True
    base, grad = O.loss_lm(logits, targets, mask)
    corrupted = logits.copy()
    corrupted[:, :3] = 1e3 * rng.standard_normal((2, 3, 10))
    assert O.loss_lm(corrupted, targets, mask)[0] == base
    assert not np.any(grad[:, :3])


def test_lm_loss_limit_and_empty_mask():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 2] = 60.0
    loss, _ = O.loss_lm(logits, np.array([1, 2]), np.array([True, True]))
    assert loss < 1e-20
    with pytest.raises(ContractError):
        O.loss_lm(logits, np.array([1, 2]), np.array([False, False]))


def test_lm_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((2, 4, 7))
    targets = rng.integers(0, 7, size=(2, 4))
    mask = rng.random((2, 4)) < 0.6
    mask[0, 0] = True
    _, grad = O.loss_lm(logits, targets, mask)
    num = numeric_grad(lambda z: O.loss_lm(z, targets, mask)[0], logits)
    np.testing.assert_allclose(grad, num, atol=1e-9)


def test_uniform_multiclass_is_log_k():
    loss, grad = O.loss_topic_multiclass(np.zeros(2571), 17)
    assert abs(loss - math.log(2571)) <= 1e-9
    assert abs(loss - 7.852) < 1e-3
    assert abs(grad.sum()) < 1e-12


def test_multiclass_gradient(rng):
    z = rng.standard_normal((3, 6))
    y = np.array([0, 5, 2])
    loss, grad = O.loss_topic_multiclass(z, y)
    num = numeric_grad(lambda q: O.loss_topic_multiclass(q, y)[0], z)
    np.testing.assert_allclose(grad, num, atol=1e-9)
    np.testing.assert_allclose(grad.sum(-1), 0.0, atol=1e-15)
    with pytest.raises(IndexError):
        O.loss_topic_multiclass(z[0], 6)


def test_multilabel_zero_logits_is_log_2(rng):
    labels = (rng.random(9) < 0.5).astype(float)
    loss, _ = O.loss_topic_multilabel(np.zeros(9), labels)
    assert abs(loss - math.log(2)) <= 1e-9


def brute_bce(z, y):
    total = 0.0
    for zc, yc in zip(z, y):
        p = 1.0 / (1.0 + math.exp(-zc))
        total += -(yc * math.log(p) + (1 - yc) * math.log(1 - p))
    return total / len(z)


def test_multilabel_matches_scalar_oracle(rng):
    for _ in range(200):
        z = rng.standard_normal(8) * 3
        y = (rng.random(8) < 0.5).astype(float)
        assert abs(O.loss_topic_multilabel(z, y)[0] - brute_bce(z, y)) <= 1e-12


def test_multilabel_is_stable_and_checked():
    loss, _ = O.loss_topic_multilabel(np.full(4, -800.0), np.zeros(4))
    assert loss == 0.0
    loss, _ = O.loss_topic_multilabel(np.array([800.0, -800.0]), np.array([0.0, 1.0]))
    assert loss == 800.0
    with pytest.raises(ContractError):
        O.loss_topic_multilabel(np.zeros(3), np.array([0, 2, 1]))


def test_multilabel_gradient(rng):
    z = rng.standard_normal((2, 5))
    y = (rng.random((2, 5)) < 0.5).astype(float)
    _, grad = O.loss_topic_multilabel(z, y)
    num = numeric_grad(lambda q: O.loss_topic_multilabel(q, y)[0], z)
    np.testing.assert_allclose(grad, num, atol=1e-9)


# --------------------------------------------------------------- optimizer


def test_adamw_single_scalar_step():
    params = {"w": np.array([1.0]), "b": np.array([1.0])}
    grads = {"w": np.array([0.5]), "b": np.array([0.5])}
    opt = O.OptState.create(params, lr=0.1, weight_decay=0.01, warmup_steps=0)
    O.adamw_step(params, grads, opt)
    # by hand: m = 0.05, v = 0.00025, bias-corrected 0.5 and 0.25
    step = 0.1 * 0.5 / (0.5 + 1e-8)
    assert params["w"][0] == pytest.approx((1 - 0.1 * 0.01) - step, abs=1e-15)
    assert params["b"][0] == pytest.approx(1 - step, abs=1e-15)
    assert opt.step == 1


def test_warmup_schedule():
    opt = O.OptState.create({})
    assert O.lr_at(opt, 1000) == pytest.approx(0.5 * 1.5e-4, rel=1e-15)
    assert O.lr_at(opt, 2000) == 1.5e-4
    assert O.lr_at(opt, 5000) == 1.5e-4
    assert O.lr_at(O.OptState.create({}, warmup_steps=0), 1) == 1.5e-4


def test_zero_gradient_fixed_point(rng):
    params = {"h0.mlp.w_1": rng.standard_normal((3, 3)), "h0.ln_1.g": np.ones(3)}
    before = {k: v.copy() for k, v in params.items()}
    opt = O.OptState.create(params, weight_decay=0.0, warmup_steps=0)
    for _ in range(5):
        O.adamw_step(params, {k: np.zeros_like(v) for k, v in params.items()}, opt)
    for k in params:
        assert np.array_equal(params[k], before[k])


def test_decay_skips_gains_and_biases(rng):
    params = {"h0.mlp.w_1": np.ones((2, 2)), "h0.mlp.b_1": np.ones(2), "ln_f.g": np.ones(2)}
    opt = O.OptState.create(params, lr=0.1, weight_decay=0.5, warmup_steps=0)
    O.adamw_step(params, {k: np.zeros_like(v) for k, v in params.items()}, opt)
    np.testing.assert_allclose(params["h0.mlp.w_1"], 0.95)
    assert np.all(params["h0.mlp.b_1"] == 1.0)
    assert np.all(params["ln_f.g"] == 1.0)


# --------------------------------------------------------------- joint step


@pytest.fixture(scope="module")
def joint(synth, synth_vocab):
    cfg = O.make_joint_config(synth_vocab, synth.mode, d_model=16, n_layers=2, n_heads=2,
                              max_context=40, max_decode=12)
    samples = C.corpus_samples(synth, synth_vocab, 40, 12)
    return cfg, samples, synth_vocab


def fresh(cfg, seed=0):
    return O.init_joint_params(cfg, seed)


def test_loss_breakdown_sums_exactly(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg)
    opt = O.OptState.create(params, warmup_steps=5, lr=1e-3)
    hist = O.run_training(params, opt, samples, cfg, vocab, n_steps=10, batch_size=4)
    assert len(hist) == 10
    for h in hist:
        assert h.l_total == h.l_one + h.l_topic + h.l_refine
        assert h.l_refine > 0


def test_ablations_zero_their_terms(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg)
    dh, _, _ = O.compute_losses(params, samples[:4], cfg, vocab, O.GPT2DH)
    assert dh.l_refine == 0.0
    assert dh.l_total == dh.l_one + dh.l_topic
    one, _, _ = O.compute_losses(params, samples[:4], cfg, vocab, "stage-one")
    assert one.l_topic == 0.0 and one.l_refine == 0.0
    assert one.l_total == one.l_one


def test_initial_losses_near_uniform(joint):
    cfg, samples, vocab = joint
    out, _, _ = O.compute_losses(fresh(cfg), samples[:8], cfg, vocab, with_grads=False)
    assert abs(out.l_one - math.log(len(vocab))) < 0.1
    assert abs(out.l_topic - math.log(2)) < 0.05


def test_training_is_deterministic(joint):
    cfg, samples, vocab = joint
    runs = []
    for _ in range(2):
        params = fresh(cfg, 3)
        opt = O.OptState.create(params, warmup_steps=10, lr=1e-3)
        hist = O.run_training(params, opt, samples, cfg, vocab, n_steps=50, batch_size=4, seed=9)
        runs.append(([h.to_log() for h in hist], params))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_resume_continues_identically(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg, 4)
    opt = O.OptState.create(params, warmup_steps=4, lr=1e-3)
    straight = O.run_training(params, opt, samples, cfg, vocab, n_steps=12, seed=2)
    params2 = fresh(cfg, 4)
    opt2 = O.OptState.create(params2, warmup_steps=4, lr=1e-3)
    first = O.run_training(params2, opt2, samples, cfg, vocab, n_steps=5, seed=2)
    rest = O.run_training(params2, opt2, samples, cfg, vocab, n_steps=12, seed=2)
    assert [h.to_log() for h in first + rest] == [h.to_log() for h in straight]


def test_joint_gradients_match_finite_differences(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg, 5)
    rng = np.random.default_rng(0)
    for w in params.values():
        w += 0.1 * rng.standard_normal(w.shape)
    batch = samples[:2]
    names = ["cls.w", "h1.attn.w_v", "h0.ln_2.g", "ln_f.b", "h1.mlp.b_2"]
    _, analytic, _ = O.compute_losses(params, batch, cfg, vocab)
    (numeric,) = finite_difference(
        lambda p: (O.compute_losses(p, batch, cfg, vocab, with_grads=False)[0].l_total,),
        params, names=names)
    worst, where = max_relative_error({k: analytic[k] for k in names}, numeric)
    assert worst <= 1e-4, where


def test_refine_pass_does_not_backprop_into_coarse_tokens(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg, 6)
    batch = samples[:3]
    full, g_full, _ = O.compute_losses(params, batch, cfg, vocab)
    dh, g_dh, _ = O.compute_losses(params, batch, cfg, vocab, O.GPT2DH)
    # the refine contribution equals an independent teacher-forced pass on fixed inputs
    x, y, mask = O.teacher_forced_batch([s.history_ids for s in batch],
                                        [s.response_ids for s in batch], vocab.bos_id)
    logits = net.forward(params, cfg.model, x).logits
    r1 = O.coarse_from_logits(logits, mask, vocab.eos_id)
    prefixes = [C.build_refine_input(s.history_ids, c, s.gold_topics, vocab,
                                     max_len=cfg.refine_budget) for s, c in zip(batch, r1)]
    xc, yc, mc = O.teacher_forced_batch(prefixes, [s.response_ids for s in batch], vocab.bos_id)
    trace = net.forward(params, cfg.model, xc)
    l_ref, d = O.loss_lm(trace.logits, yc, mc)
    g_ref = net.backward(params, cfg.model, trace, d_logits=d)
    assert l_ref == full.l_refine
    for k in g_full:
        np.testing.assert_allclose(g_full[k], g_dh[k] + g_ref[k], atol=1e-13)


def test_separate_encoder_routes_topic_gradients(synth, synth_vocab):
    cfg = O.make_joint_config(synth_vocab, synth.mode, d_model=8, n_layers=1, n_heads=2,
                              max_context=40, max_decode=12, classifier=O.SEPARATE_BERT)
    samples = C.corpus_samples(synth, synth_vocab, 40, 12)[:3]
    params = O.init_joint_params(cfg, 0)
    _, grads, _ = O.compute_losses(params, samples, cfg, synth_vocab)
    assert np.any(grads["bert.cls.w"])
    assert not np.any(grads["cls.w"])
    _, grads_one, _ = O.compute_losses(params, samples, cfg, synth_vocab, O.STAGE_ONE_ONLY)
    assert not any(np.any(grads_one[k]) for k in grads_one if k.startswith(O.BERT_PREFIX))


def test_non_finite_loss_aborts(joint):
    cfg, samples, vocab = joint
    params = fresh(cfg)
    params["cls.b"][:] = np.nan
    before = params["wte"].copy()
    opt = O.OptState.create(params)
    with pytest.raises(NumericalError) as info:
        O.train_step(params, opt, samples[:2], cfg, vocab)
    assert "cls.b" in info.value.diagnostics
    assert opt.step == 0
    assert np.array_equal(params["wte"], before)


def test_batch_schedule_is_pure_permutation():
    seen = np.concatenate([O.batch_for_step(10, 4, 1, s) for s in range(3)])
    assert sorted(seen) == list(range(10))
    assert np.array_equal(O.batch_for_step(10, 4, 1, 7), O.batch_for_step(10, 4, 1, 7))
