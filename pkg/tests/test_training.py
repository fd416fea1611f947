import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanfuse import tensor as T
from chanfuse.config import ModelConfig
from chanfuse.data import DataError, SegmentationSample, generate_synthetic, save_checkpoint
from chanfuse.tensor import Tensor
from chanfuse.training import (
    Adam,
    AdamState,
    PretrainedLoadError,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    augment,
    combined_loss,
    fit,
    load_pretrained_unet,
    predict,
)
from chanfuse.unet import UNET_NAMESPACE, SegmentationNet

# ------------------------------------------------------------------ loss


def test_uniform_logits_cross_entropy_is_ln2(f64, rng):
    terms = combined_loss(Tensor(np.zeros((2, 2, 4, 4))), rng.integers(0, 2, (2, 4, 4)))
    assert terms.ce.item() == pytest.approx(math.log(2), abs=1e-12)


def test_confident_correct_logits_have_near_zero_loss(f64, rng):
    mask = rng.integers(0, 2, (2, 8, 8))
    mask[0, 0, 0] = 1
    logits = np.where(np.eye(2)[mask].transpose(0, 3, 1, 2) > 0, 20.0, -20.0)
    assert combined_loss(Tensor(logits), mask).total.item() < 0.01


def test_soft_dice_matches_pixel_counting_on_hard_probabilities(f64):
    pred = np.zeros((1, 4, 4), dtype=int)
    pred[0, :2, :2] = 1  # 4 predicted foreground pixels
    mask = np.zeros((1, 4, 4), dtype=int)
    mask[0, :2, :1] = 1  # 2 true, both inside the prediction
    logits = np.where(np.eye(2)[pred].transpose(0, 3, 1, 2) > 0, 60.0, -60.0)
    terms = combined_loss(Tensor(logits), mask)
    assert terms.dice.item() == pytest.approx(1 - 2 * 2 / (4 + 2), abs=1e-6)


def test_dice_over_all_classes_includes_background(f64, rng):
    logits = Tensor(rng.standard_normal((2, 3, 4, 4)))
    mask = rng.integers(0, 3, (2, 4, 4))
    fg = combined_loss(logits, mask).dice.item()
    every = combined_loss(logits, mask, dice_classes="all").dice.item()
    assert fg != every


def test_out_of_range_labels_raise(rng):
    with pytest.raises(DataError):
        combined_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))


def test_loss_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        TrainConfig(w_ce=0.7, w_dice=0.7)


# ------------------------------------------------------------------ adam


def test_first_adam_step_moves_by_lr_times_sign():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.3, -5.0, 1e-3])
    adam_step([p], [g], AdamState(), lr=0.001)
    assert np.allclose(p, [1.0 - 0.001, -2.0 + 0.001, 3.0 - 0.001], atol=1e-7)


def test_zero_gradient_changes_nothing():
    p = np.array([1.0, 2.0])
    state = AdamState()
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state)
    assert p.tolist() == [1.0, 2.0]
    adam_step([p], [None], state)
    assert p.tolist() == [1.0, 2.0]


def test_adam_minimizes_a_quadratic(f64):
    x = Tensor([0.0], requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        ((x - 3.0) * (x - 3.0)).sum().backward()
        opt.step()
    assert abs(x.item() - 3.0) < 1e-2


# ---------------------------------------------------------- augmentation


def _sample(rng, size=6):
    return SegmentationSample(rng.standard_normal((size, size, 1)), rng.integers(0, 3, (size, size)), "s")


def test_disabled_augmentation_is_identity(rng):
    s = _sample(rng)
    out = augment(s, np.random.default_rng(0), hflip=False, vflip=False, rotate=False)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


class ScriptedRng:
    """Stands in for a generator so each augmentation decision can be forced."""

    def __init__(self, flip_h, flip_v, quarter):
        self.uniforms = [0.0 if flip_h else 0.9, 0.0 if flip_v else 0.9]
        self.quarter = quarter

    def random(self):
        return self.uniforms.pop(0)

    def integers(self, low, high):
        return self.quarter


@pytest.mark.parametrize("flips", [(True, False), (False, True), (True, True)])
def test_flips_applied_twice_are_identity(rng, flips):
    s = _sample(rng)
    once = augment(s, ScriptedRng(*flips, 0))
    assert not np.array_equal(once.image, s.image)
    twice = augment(once, ScriptedRng(*flips, 0))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_quarter_turn_four_times_is_identity(rng):
    s = _sample(rng)
    out = s
    for k in range(4):
        out = augment(out, ScriptedRng(False, False, 1))
        assert np.array_equal(out.image[..., 0], np.rot90(s.image[..., 0], k + 1))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augmentation_moves_image_and_mask_together(seed):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    # encode the mask into the image so any mismatch in transforms shows up
    s = SegmentationSample(s.mask[..., None].astype(float), s.mask, "s")
    out = augment(s, rng)
    assert np.array_equal(out.image[..., 0], out.mask)
    assert np.array_equal(np.bincount(out.mask.ravel(), minlength=3), np.bincount(s.mask.ravel(), minlength=3))


# ------------------------------------------------------------- training


def _tiny(mode="plain", seed=0):
    kw = dict(base_channels=2, image_size=32)
    cfg = ModelConfig.plain(**kw) if mode == "plain" else ModelConfig.ctrans(heads=2, cct_layers=1, **kw)
    return SegmentationNet(cfg, seed=seed)


def test_fit_is_deterministic():
    data = generate_synthetic(4, 32, seed=1)
    cfg = TrainConfig(max_iterations=3, batch_size=2, seed=5)
    a, b = _tiny("ctrans"), _tiny("ctrans")
    ra, rb = fit(a, data, cfg), fit(b, data, cfg)
    assert ra.curve == rb.curve
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_non_finite_parameters_abort_with_iteration():
    net = _tiny()
    net.head.bias.data[0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        fit(net, generate_synthetic(2, 32, seed=0), TrainConfig(max_iterations=5, batch_size=2))
    assert info.value.iteration == 1


def _smoothed_loss(model, data, batch_size):
    curve = np.array([row[1] for row in fit(model, data, TrainConfig(max_iterations=50, augment=False,
                                                                     batch_size=batch_size)).curve])
    assert np.all(curve >= 0)
    return np.convolve(curve, np.ones(10) / 10, mode="valid")


def test_loss_decreases_over_first_fifty_iterations():
    data = generate_synthetic(8, 32, seed=3)
    net = SegmentationNet(ModelConfig.plain(base_channels=4, image_size=32), seed=0)
    smoothed = _smoothed_loss(net, data, batch_size=4)
    assert smoothed[-1] < smoothed[0]


@pytest.mark.slow
def test_overfit_task_loss_is_monotone_after_smoothing():
    # full-batch steps on the 8-sample, 64x64 overfit corpus
    net = SegmentationNet(ModelConfig.ctrans(base_channels=8, image_size=64), seed=0)
    smoothed = _smoothed_loss(net, generate_synthetic(8, 64, seed=0), batch_size=8)
    assert np.all(np.diff(smoothed) <= 0)


def test_validation_callback_runs_on_schedule():
    data = generate_synthetic(4, 32, seed=3)
    calls = []
    result = fit(_tiny(), data, TrainConfig(max_iterations=4, batch_size=2, val_every=2), data[:1],
                 evaluate=lambda m, v: calls.append(len(v)) or {"dice": 0.0})
    assert [it for it, _ in result.validation] == [2, 4]
    assert calls == [1, 1]


def test_predict_returns_label_maps():
    data = generate_synthetic(3, 32, seed=0)
    preds = predict(_tiny(), data, batch_size=2)
    assert len(preds) == 3 and preds[0].shape == (32, 32)
    assert set(np.unique(np.concatenate(preds))) <= {0, 1}


# ----------------------------------------------------------- pretraining


def test_pretrained_load_copies_unet_only(tmp_path):
    source = _tiny("plain", seed=11)
    path = tmp_path / "unet.ckpt"
    save_checkpoint(source.state_dict(), path)
    target = _tiny("ctrans", seed=0)
    before = {k: v.copy() for k, v in target.state_dict().items()}
    report = load_pretrained_unet(target, path)
    unet = [n for n, _ in target.named_parameters() if n.startswith(UNET_NAMESPACE)]
    assert sorted(report.matched) == sorted(unet) == sorted(source.state_dict())
    after = target.state_dict()
    for name in after:
        if name in unet:
            assert np.array_equal(after[name], source.state_dict()[name])
        else:
            assert np.array_equal(after[name], before[name])


def test_pretrained_shape_mismatch_is_rejected():
    source = SegmentationNet(ModelConfig.plain(base_channels=4, image_size=32), seed=0)
    with pytest.raises(PretrainedLoadError, match="shape"):
        load_pretrained_unet(_tiny("ctrans"), source.state_dict())
    with pytest.raises(PretrainedLoadError):
        load_pretrained_unet(_tiny("ctrans"), {})


def test_pretrained_strategy_needs_checkpoint():
    with pytest.raises(PretrainedLoadError):
        fit(_tiny("ctrans"), generate_synthetic(2, 32, 0), TrainConfig(strategy="pretrained"))
