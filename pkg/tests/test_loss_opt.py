import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripleprompt import loss_opt as lo
from tripleprompt import prompt_context as pc
from tripleprompt import spatial_head as sh
from tripleprompt.data_protocol import SyntheticSpec, generate_synthetic, mask_labels

ASL = lo.AslConfig()


def asl_oracle(p, y, gp=1.0, gn=2.0, c=0.05):
    """Direct transcription of the focal asymmetric loss on a probability."""
    if y == 1:
        return -((1 - p) ** gp) * math.log(p)
    pc_ = max(p - c, 0.0)
    if pc_ == 0.0:
        return 0.0
    return -(pc_ ** gn) * math.log(1 - pc_)


# -- ASL --------------------------------------------------------------------

def test_asl_hand_values():
    v = lo.asl_loss(0.5, 1, ASL)
    assert abs(v - 0.34657) < 1e-4
    assert v == pytest.approx(0.5 * math.log(2), rel=1e-14)
    v = lo.asl_loss(0.55, -1, ASL)
    assert abs(v - 0.17329) < 1e-4
    assert v == pytest.approx(0.25 * math.log(2), rel=1e-12)


def test_asl_limits():
    assert lo.asl_loss(1 - 1e-12, 1, ASL) < 1e-20
    assert lo.asl_loss(0.04, -1, ASL) == 0.0
    assert lo.asl_loss(0.04, -1, lo.AslConfig(0.0, 0.0, 0.05)) == 0.0


def test_asl_rejects_unknown_label():
    with pytest.raises(ValueError):
        lo.asl_loss(0.5, 0, ASL)


@pytest.mark.parametrize("kw", [dict(gamma_pos=3.0, gamma_neg=2.0), dict(margin=-0.1), dict(margin=1.0)])
def test_asl_config_validation(kw):
    with pytest.raises(ValueError):
        lo.AslConfig(**kw)


# the oracle evaluates log(1 - p) directly, so keep p away from 1
@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 10), st.sampled_from([1, -1]), st.floats(0, 2), st.floats(0, 2), st.floats(0, 0.2))
def test_asl_logit_form_matches_oracle(z, y, gp, extra, c):
    cfg = lo.AslConfig(gp, gp + extra, c)
    p = 1 / (1 + math.exp(-z))
    loss, _ = lo.asl_from_logit(np.array([z]), np.array([y]), cfg)
    assert loss[0] >= 0
    assert loss[0] == pytest.approx(asl_oracle(p, y, gp, gp + extra, c), rel=1e-8, abs=1e-12)
    assert lo.asl_loss(p, y, cfg) == pytest.approx(loss[0], rel=1e-9, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-8, 8), st.sampled_from([1, -1]), st.floats(0, 2), st.floats(0, 2), st.floats(0, 0.2))
def test_asl_logit_gradient(z, y, gp, extra, c):
    cfg = lo.AslConfig(gp, gp + extra, c)
    p = 1 / (1 + math.exp(-z))
    if y == -1 and abs(p - c) < 1e-4:
        return  # margin kink
    _, g = lo.asl_from_logit(np.array([z]), np.array([y]), cfg)
    h = 1e-6
    f = lambda t: lo.asl_from_logit(np.array([t]), np.array([y]), cfg)[0][0]
    assert g[0] == pytest.approx((f(z + h) - f(z - h)) / (2 * h), rel=1e-5, abs=1e-8)


def test_asl_logit_saturation_finite():
    z = np.array([-800.0, 800.0, -800.0, 800.0])
    y = np.array([1, 1, -1, -1])
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        loss, g = lo.asl_from_logit(z, y, ASL)
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(g))
    assert loss[0] == pytest.approx(800.0)


# -- batch loss -------------------------------------------------------------

def test_batch_loss_singleton_and_mean():
    z = np.array([[0.0, 1.0], [2.0, -1.0]])
    labels = np.array([[1, 0], [0, 0]])
    assert lo.batch_loss(z, labels, ASL) == pytest.approx(lo.asl_loss(0.5, 1, ASL), rel=1e-14)
    labels = np.array([[1, 0], [0, -1]])
    a, b = lo.asl_loss(0.5, 1, ASL), lo.asl_loss(1 / (1 + math.e), -1, ASL)
    assert lo.batch_loss(z, labels, ASL) == pytest.approx((a + b) / 2, rel=1e-12)


def test_batch_loss_accepts_class_scores():
    z = np.array([[0.3, -0.2]])
    scores = [sh.ClassScores(np.zeros(2), np.zeros(2), 1 / (1 + np.exp(-z[0])), z[0])]
    labels = np.array([[1, -1]])
    assert lo.batch_loss(scores, labels, ASL) == lo.batch_loss(z, labels, ASL)


def test_batch_loss_errors():
    with pytest.raises(ValueError):
        lo.batch_loss(np.zeros((2, 2)), np.zeros((2, 2), dtype=int), ASL)
    with pytest.raises(ValueError):
        lo.batch_loss(np.zeros((2, 2)), np.ones((2, 3), dtype=int), ASL)


def test_mean_matches_bce_reduction():
    # with gamma+ = gamma- = 0 and no margin ASL is binary cross-entropy
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 4))
    y = rng.choice([-1, 0, 1], size=(6, 4))
    y[0, 0] = 1
    cfg = lo.AslConfig(0.0, 0.0, 0.0)
    p = 1 / (1 + np.exp(-z))
    known = y != 0
    bce = -(np.where(y == 1, np.log(p), np.log(1 - p)))[known].mean()
    assert lo.batch_loss(z, y, cfg) == pytest.approx(bce, rel=1e-12)


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("mode", sh.HEAD_MODES)
@pytest.mark.parametrize("wta", [False, True])
def test_gradient_matches_finite_difference(mode, wta):
    r = lo.gradcheck_mode(mode, wta, n_instances=3, seed=100)
    assert r.max_rel_err < 1e-5


@pytest.mark.parametrize("layout", [pc.CLASS_SPECIFIC, pc.SHARED])
def test_gradient_shared_layout(layout):
    inst = lo.random_instance(7, sh.TRIPLE, True, layout=layout)
    _, g = lo.loss_and_grad(inst.features, inst.labels, inst.prompts, inst.world, inst.head, inst.asl)
    num = lo.finite_difference_grad(inst.loss, inst.prompts.ctx)
    assert lo.relative_error(g, num) < 1e-5


def test_structural_zero_gradients():
    inst = lo.random_instance(3, sh.POS_ONLY, False)
    g = lo.grad_prompts(inst.features, inst.labels, inst.prompts, inst.world, inst.head, inst.asl)
    assert np.all(g[:, pc.NEG] == 0) and np.all(g[:, pc.EVI] == 0)
    assert np.any(g[:, pc.POS] != 0)
    inst = lo.random_instance(3, sh.DUAL, False)
    g = lo.grad_prompts(inst.features, inst.labels, inst.prompts, inst.world, inst.head, inst.asl)
    assert np.all(g[:, pc.EVI] == 0)


def test_triple_disentangled_dual_not():
    for seed in range(10):
        inst = lo.random_instance(seed, sh.TRIPLE, False)
        gn = lo.delta_grads(inst.features, inst.prompts, inst.world, inst.head, "neg")
        gp = lo.delta_grads(inst.features, inst.prompts, inst.world, inst.head, "pos")
        assert np.all(gn[:, pc.POS] == 0.0)
        assert np.all(gp[:, pc.NEG] == 0.0)
        assert np.any(gn[:, pc.EVI] != 0.0)
    nonzero = 0
    for seed in range(10):
        inst = lo.random_instance(seed, sh.DUAL, False)
        gn = lo.delta_grads(inst.features, inst.prompts, inst.world, inst.head, "neg")
        nonzero += bool(np.any(gn[:, pc.POS] != 0.0))
    assert nonzero >= 9


def test_relative_error_floor():
    assert lo.relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert lo.relative_error(np.array([2.0]), np.array([2.0])) == 0.0


# -- schedule / optimizer ---------------------------------------------------

def test_cosine_lr():
    assert lo.cosine_lr(0.002, 0, 100) == 0.002
    assert lo.cosine_lr(0.002, 100, 100) == pytest.approx(0.0, abs=1e-20)
    assert lo.cosine_lr(0.002, 50, 100) == pytest.approx(0.001, rel=1e-14)
    with pytest.raises(ValueError):
        lo.cosine_lr(0.1, 101, 100)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500))
def test_cosine_lr_monotone(total):
    lrs = [lo.cosine_lr(1.0, s, total) for s in range(total + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_sgd_step():
    p = pc.PromptSet(np.full((1, 3, 1, 1), 0.5))
    assert np.array_equal(lo.sgd_step(p, np.zeros_like(p.ctx), 0.1).ctx, p.ctx)
    assert np.all(lo.sgd_step(p, np.full_like(p.ctx, 0.5), 1.0).ctx == 0.0)
    with pytest.raises(ValueError):
        lo.sgd_step(p, np.zeros((2, 3, 1, 1)), 1.0)


# -- training ---------------------------------------------------------------

def small_problem(n=64, m=4, seed=0):
    spec = SyntheticSpec(num_images=n, num_classes=m, height=2, width=2, feature_dim=8,
                         min_planted=1, max_planted=2)
    ds = generate_synthetic(spec)
    world = lo.build_world(m, 4, 8, 8, 8, seed=0, modality_gap=0.6)
    labels = mask_labels(ds.labels, 0.5, seed)
    return ds.flat_features(), labels, world


def test_train_deterministic_and_converges():
    x, y, world = small_problem()
    cfg = lo.TrainConfig(lr0=0.05, epochs=8, batch_size=16,
                         head=sh.HeadConfig(mode=sh.TRIPLE, wta=True, sharpness=5.0))
    prompts = pc.init_prompts(4, 4, pc.CLASS_SPECIFIC, 0.02, seed=0, token_dim=8)
    a = lo.train(x, y, prompts, world, cfg)
    b = lo.train(x, y, prompts, world, cfg)
    assert [r.csv() for r in a.steps] == [r.csv() for r in b.steps]
    assert a.prompts.ctx.tobytes() == b.prompts.ctx.tobytes()
    assert a.epoch_losses[-1] < a.epoch_losses[0]
    assert len(a.steps) == 8 * 4


def test_train_split_equals_uninterrupted():
    x, y, world = small_problem()
    cfg = lo.TrainConfig(lr0=0.05, epochs=6, batch_size=20)
    p0 = pc.init_prompts(4, 4, pc.CLASS_SPECIFIC, 0.02, seed=1, token_dim=8)
    full = lo.train(x, y, p0, world, cfg)
    first = lo.train(x, y, p0, world, cfg, stop_epoch=2)
    rest = lo.train(x, y, first.prompts, world, cfg, start_epoch=first.epochs_done)
    assert rest.prompts.ctx.tobytes() == full.prompts.ctx.tobytes()
    assert [r.csv() for r in first.steps + rest.steps] == [r.csv() for r in full.steps]


def test_train_no_signal_constant_loss():
    # a zero mix matrix row is rejected, so kill the signal through the encoder
    # weights: every prompt then encodes to the same embedding
    x, y, world = small_problem()
    text = pc.TextEncoderParams(np.r_[np.zeros(4), 1.0], world.text.mix_matrix)
    flat = lo.FrozenWorld(text, world.proj, world.class_tokens)
    cfg = lo.TrainConfig(lr0=0.5, epochs=3, batch_size=64)
    r = lo.train(x, y, pc.init_prompts(4, 4, pc.CLASS_SPECIFIC, 0.02, seed=0, token_dim=8), flat, cfg)
    assert r.epoch_losses[0] == r.epoch_losses[1] == r.epoch_losses[2]


def test_epoch_order_varies_by_epoch():
    a, b = lo.epoch_order(50, 0, 0), lo.epoch_order(50, 0, 1)
    assert sorted(a) == list(range(50)) and not np.array_equal(a, b)
    assert np.array_equal(a, lo.epoch_order(50, 0, 0))


def test_train_rejects_unlabelled():
    x, y, world = small_problem()
    with pytest.raises(ValueError):
        lo.train(x, np.zeros_like(y), pc.init_prompts(4, 4, token_dim=8), world, lo.TrainConfig())


def test_build_world_gap_validation():
    with pytest.raises(ValueError):
        lo.build_world(3, 2, 4, 4, 4, modality_gap=2.0)
    w0 = lo.build_world(3, 2, 4, 4, 4, modality_gap=0.0)
    np.testing.assert_allclose(w0.proj.proj_matrix, w0.text.mix_matrix, atol=1e-15)
