import math

import numpy as np
import pytest

from segadapt import segmodels
from segadapt.errors import ConfigError
from segadapt.nnet import weights_hash
from segadapt.segmodels import SegArchConfig

TINY = SegArchConfig(base_width=2, encoder_depth=3, dilation_rates=(1, 2),
                     num_classes=2)


def test_init_deterministic_and_shapes():
    a = segmodels.init_segmenter(SegArchConfig(), 0)
    b = segmodels.init_segmenter(SegArchConfig(), 0)
    assert weights_hash(a) == weights_hash(b)
    c = segmodels.init_segmenter(SegArchConfig(), 1)
    assert weights_hash(a) != weights_hash(c)
    assert a.params["cls.w"].shape[-1] == 5  # one output channel per class


def test_parameter_budget():
    # frozen regression value for the default architecture
    w = segmodels.init_segmenter(SegArchConfig(), 0)
    assert w.num_params() == 39189
    assert w.num_params() < 2_000_000


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        segmodels.init_segmenter(SegArchConfig(num_classes=1), 0)
    with pytest.raises(ConfigError):
        segmodels.init_segmenter(SegArchConfig(base_width=0), 0)


def test_arch_round_trip():
    cfg = SegArchConfig(base_width=4, num_classes=3)
    w = segmodels.init_segmenter(cfg, 0)
    assert SegArchConfig.from_arch(w.arch) == cfg


@pytest.fixture(scope="module")
def small_net():
    cfg = SegArchConfig(base_width=4)
    return cfg, segmodels.init_segmenter(cfg, 3)


def test_forward_shapes_and_eval_determinism(small_net):
    _, w = small_net
    x = np.random.default_rng(0).random((2, 16, 24, 3), dtype=np.float32)
    pre, full = segmodels.forward_segment(w, x, mode="eval")
    assert pre.shape == (2, 4, 6, 5)
    assert full.shape == (2, 16, 24, 5)
    pre2, full2 = segmodels.forward_segment(w, x, mode="eval")
    assert np.array_equal(pre, pre2) and np.array_equal(full, full2)


def test_train_mode_dropout_depends_on_seed(small_net):
    _, w = small_net
    x = np.random.default_rng(0).random((1, 16, 24, 3), dtype=np.float32)
    a, _ = segmodels.forward_segment(w, x, mode="train", perturbation_seed=1)
    b, _ = segmodels.forward_segment(w, x, mode="train", perturbation_seed=2)
    c, _ = segmodels.forward_segment(w, x, mode="train", perturbation_seed=1)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_batch_independence(small_net):
    _, w = small_net
    x = np.random.default_rng(4).random((2, 16, 24, 3), dtype=np.float32)
    _, both = segmodels.forward_segment(w, x, mode="eval")
    _, first = segmodels.forward_segment(w, x[:1], mode="eval")
    _, second = segmodels.forward_segment(w, x[1:], mode="eval")
    np.testing.assert_allclose(both, np.concatenate([first, second]), atol=1e-5)


def test_softmax_examples():
    assert np.allclose(segmodels.softmax_probs(np.zeros(4)), 0.25)
    p = segmodels.softmax_probs(np.array([1000.0, 0.0]))
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0)
    # independent scalar evaluation with math.exp
    z = [1.0, 2.0, 3.0]
    denom = sum(math.exp(v) for v in z)
    expect = [math.exp(v) / denom for v in z]
    np.testing.assert_allclose(segmodels.softmax_probs(np.array(z)), expect, atol=1e-7)
    assert expect == pytest.approx([0.09003057, 0.24472847, 0.66524096], abs=1e-7)


def test_softmax_rows_sum_to_one_random():
    rng = np.random.default_rng(5)
    logits = rng.uniform(-20, 20, size=(4, 6, 6, 7))
    p = segmodels.softmax_probs(logits)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform_is_log_c():
    probs = np.full((1, 3, 3, 5), 0.2)
    labels = np.random.default_rng(0).integers(0, 5, (1, 3, 3))
    assert segmodels.cross_entropy(probs, labels) == pytest.approx(
        math.log(5), abs=1e-9)


def test_cross_entropy_perfect_prediction():
    probs = np.zeros((1, 2, 2, 3))
    labels = np.array([[[0, 1], [2, 0]]])
    for b, h, w in np.ndindex(1, 2, 2):
        probs[b, h, w, labels[b, h, w]] = 1.0 - 1e-7
    assert segmodels.cross_entropy(probs, labels) <= 1.1e-7


def test_cross_entropy_single_pixel():
    probs = np.array([[[[0.7, 0.3]]]])
    labels = np.array([[[0]]])
    assert segmodels.cross_entropy(probs, labels) == pytest.approx(
        -math.log(0.7), abs=1e-9)


def test_cross_entropy_bad_label_names_pixel():
    probs = np.full((1, 2, 2, 3), 1 / 3)
    labels = np.array([[[0, 1], [5, 0]]])
    with pytest.raises(ValueError, match=r"\(0, 1, 0\)"):
        segmodels.cross_entropy(probs, labels)


def test_cross_entropy_matches_loop_oracle():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(2, 3, 4, 5))
    probs = segmodels.softmax_probs(logits)
    labels = rng.integers(0, 5, (2, 3, 4))
    total = 0.0
    for b, h, w in np.ndindex(2, 3, 4):
        total -= math.log(max(probs[b, h, w, labels[b, h, w]], 1e-7))
    assert segmodels.cross_entropy(probs, labels) == pytest.approx(
        total / 24, abs=1e-9)


def numeric_grad_sample(f, arr, coords, h=1e-3):
    out = []
    for idx in coords:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def test_supervised_gradient_matches_finite_differences():
    # tiny (<500 parameter) network in float64; 50 sampled coordinates
    weights = segmodels.init_segmenter(TINY, 1).astype(np.float64)
    assert weights.num_params() <= 500
    rng = np.random.default_rng(2)
    x = rng.random((1, 8, 8, 3))
    y = rng.integers(0, 2, (1, 8, 8))

    from segadapt.nnet import collect_grads, wrap_params

    def loss_value():
        drop = np.random.default_rng(9)
        pre, full = segmodels.segment_logits(weights.params, TINY, x,
                                             mode="train", drop_rng=drop)
        return float(segmodels.cross_entropy(
            segmodels.softmax_probs(full.data), y))

    pvars = wrap_params(weights)
    _, full = segmodels.segment_logits(pvars, TINY, x, mode="train",
                                       drop_rng=np.random.default_rng(9))
    loss = segmodels.cross_entropy(segmodels.softmax_probs(full), y)
    loss.backward()
    grads = collect_grads(pvars)

    sampler = np.random.default_rng(3)
    names = sorted(weights.params)
    checked = 0
    while checked < 50:
        name = names[sampler.integers(len(names))]
        arr = weights.params[name]
        idx = tuple(sampler.integers(s) for s in arr.shape)
        analytic = grads[name][idx]
        numeric = numeric_grad_sample(loss_value, arr, [idx])[0]
        if abs(numeric) < 1e-8 and abs(analytic) < 1e-8:
            continue
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        assert rel < 1e-2, f"{name}{idx}: analytic={analytic} numeric={numeric}"
        checked += 1


def test_pretrain_fseg_learns_and_freezes(toy_dataset):
    from segadapt.nnet import StageSchedule
    cfg = SegArchConfig(base_width=4)
    weights = segmodels.pretrain_fseg(toy_dataset, cfg,
                                      StageSchedule(steps=60, batch_size=8),
                                      seed=0)
    assert weights.frozen
    x, y = toy_dataset.source.sample_batch(8, np.random.default_rng(5))
    _, full = segmodels.forward_segment(weights, x, mode="eval")
    loss = segmodels.cross_entropy(segmodels.softmax_probs(full), y)
    assert loss < 0.9  # well below the ln(5) ~ 1.61 of an untrained net
