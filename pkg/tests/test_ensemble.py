import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segadapt import ensemble, segmodels
from segadapt.ensemble import (ConsistencySchedule, EmaSchedule, PerturbConfig,
                               consistency_loss, consistency_weight, ema_decay,
                               ema_update, perturb_target, total_loss)
from segadapt.errors import ConfigError
from segadapt.nnet import StageSchedule, weights_hash


def make_weights(seed, width=2):
    return segmodels.init_segmenter(
        segmodels.SegArchConfig(base_width=width, encoder_depth=3,
                                dilation_rates=(1,), num_classes=2), seed)


# -- EMA ------------------------------------------------------------------------

def test_ema_alpha_zero_copies_student():
    teacher, student = make_weights(0), make_weights(1)
    ema_update(teacher, student, 0.0)
    assert weights_hash(teacher) == weights_hash(student)


def test_ema_fixed_point():
    teacher = make_weights(2)
    student = teacher.copy()
    before = weights_hash(teacher)
    ema_update(teacher, student, 0.7)
    assert weights_hash(teacher) == before


def test_ema_scalar_case():
    teacher, student = make_weights(3), make_weights(3)
    teacher.params["stem.w"][:] = 1.0
    student.params["stem.w"][:] = 0.0
    ema_update(teacher, student, 0.999)
    np.testing.assert_allclose(teacher.params["stem.w"], 0.999, atol=1e-7)


def test_ema_mismatch_names_error():
    teacher, student = make_weights(4), make_weights(4)
    student.params["extra.w"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(ValueError, match="extra.w"):
        ema_update(teacher, student, 0.5)


def test_ema_invalid_alpha():
    with pytest.raises(ConfigError):
        ema_update(make_weights(0), make_weights(0), 1.0)


def test_ema_averages_buffers_too():
    teacher, student = make_weights(5), make_weights(5)
    teacher.buffers["stat"] = np.zeros(3, dtype=np.float64)
    student.buffers["stat"] = np.ones(3, dtype=np.float64)
    ema_update(teacher, student, 0.9)
    np.testing.assert_allclose(teacher.buffers["stat"], 0.1, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.9, 0.99, 0.999])
def test_ema_geometric_contraction(alpha):
    # float64 so the k-step contraction identity holds to 1e-9 relative
    teacher = make_weights(6).astype(np.float64)
    student = make_weights(7).astype(np.float64)
    d0 = math.sqrt(sum(float(((t - s) ** 2).sum()) for t, s in
                       zip(teacher.params.values(), student.params.values())))
    for k in range(1, 101):
        ema_update(teacher, student, alpha)
        dk = math.sqrt(sum(float(((t - s) ** 2).sum()) for t, s in
                           zip(teacher.params.values(), student.params.values())))
        assert dk == pytest.approx(alpha ** k * d0, rel=1e-9)


def test_ema_decay_schedule_boundaries():
    sched = EmaSchedule(early_decay=0.99, late_decay=0.999, switch_step=37000)
    assert ema_decay(0, sched) == 0.99
    assert ema_decay(36999, sched) == 0.99
    assert ema_decay(37000, sched) == 0.999
    assert ema_decay(50000, sched) == 0.999


def test_ema_schedule_validation_and_derivation():
    with pytest.raises(ConfigError):
        EmaSchedule(early_decay=0.999, late_decay=0.99).validate()
    derived = EmaSchedule().resolved(total_steps=1000)
    assert derived.switch_step == 660


# -- consistency ramp -------------------------------------------------------------

def test_consistency_weight_closed_form():
    assert consistency_weight(1.0, 30.0) == 31.0
    assert consistency_weight(0.0, 30.0) == pytest.approx(
        1.0 + 30.0 * math.exp(-5.0), abs=1e-12)
    assert consistency_weight(0.5, 30.0) == pytest.approx(
        1.0 + 30.0 * math.exp(-1.25), abs=1e-12)
    assert consistency_weight(0.5, 30.0) == pytest.approx(9.59515, abs=1e-4)


def test_consistency_weight_clamps_with_warning():
    with pytest.warns(UserWarning, match="clamped"):
        assert consistency_weight(1.2, 30.0) == 31.0
    with pytest.warns(UserWarning):
        assert consistency_weight(-0.1, 30.0) == consistency_weight(0.0, 30.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_consistency_weight_monotone(x1, x2):
    lo, hi = sorted((x1, x2))
    assert consistency_weight(hi, 30.0) >= consistency_weight(lo, 30.0)


def test_schedule_reaches_full_weight_in_final_epoch():
    sched = ConsistencySchedule(ramp_coefficient=30.0, total_epochs=8)
    assert sched.weight_at(8) == 31.0
    assert sched.weight_at(1) < 2.0


# -- perturbations ------------------------------------------------------------------

def test_perturb_zero_std_identity():
    img = np.random.default_rng(0).random((8, 8, 3), dtype=np.float32)
    out = perturb_target(img, PerturbConfig(gaussian_noise_std=0.0), seed=1)
    assert np.array_equal(out, img)


def test_perturb_deterministic_in_seed():
    img = np.random.default_rng(1).random((8, 8, 3), dtype=np.float32)
    cfg = PerturbConfig(gaussian_noise_std=0.1)
    a = perturb_target(img, cfg, seed=5)
    b = perturb_target(img, cfg, seed=5)
    c = perturb_target(img, cfg, seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_perturb_noise_std_empirically_correct():
    img = np.full((200, 200, 3), 0.5, dtype=np.float32)
    out = perturb_target(img, PerturbConfig(gaussian_noise_std=0.1), seed=2)
    assert 0.09 <= float((out - img).std()) <= 0.11


def test_perturb_negative_std_rejected():
    with pytest.raises(ConfigError):
        perturb_target(np.zeros((2, 2, 3)), PerturbConfig(gaussian_noise_std=-1), 0)


# -- consistency loss -----------------------------------------------------------------

def test_consistency_loss_examples():
    a = np.random.default_rng(0).random((1, 4, 4, 3))
    assert consistency_loss(a, a) == 0.0
    s = np.array([[[[1.0, 0.0]]]])
    t = np.array([[[[0.0, 1.0]]]])
    assert consistency_loss(s, t) == pytest.approx(1.0)
    s = np.array([[[[0.6, 0.4]]]])
    t = np.array([[[[0.5, 0.5]]]])
    assert consistency_loss(s, t) == pytest.approx(0.01)


def test_consistency_loss_symmetric_exactly():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.random((2, 3, 3, 4))
        b = rng.random((2, 3, 3, 4))
        assert consistency_loss(a, b) == consistency_loss(b, a)


def test_consistency_loss_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        consistency_loss(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 4)))


def test_consistency_matches_loop_oracle():
    rng = np.random.default_rng(4)
    s = rng.random((2, 3, 2, 3))
    t = rng.random((2, 3, 2, 3))
    total = sum((sv - tv) ** 2 for sv, tv in
                zip(s.ravel().tolist(), t.ravel().tolist()))
    assert consistency_loss(s, t) == pytest.approx(total / s.size, abs=1e-12)


# -- total loss -------------------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(1.0, 0.5, 2.0) == 2.0
    assert total_loss(3.3, 99.0, 0.0) == 3.3
    assert total_loss(1.60944, 0.01, 9.59515) == pytest.approx(1.70539, abs=1e-5)
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, -0.5)


# -- trainer ---------------------------------------------------------------------------

SMALL_SEG = segmodels.SegArchConfig(base_width=4)


def test_trainer_deterministic(toy_dataset):
    kw = dict(schedule=StageSchedule(steps=8, batch_size=4, lr=1e-3), seed=13,
              use_consistency=True)
    r1 = ensemble.train_selfensemble(toy_dataset, SMALL_SEG, **kw)
    r2 = ensemble.train_selfensemble(toy_dataset, SMALL_SEG, **kw)
    assert weights_hash(r1.student) == weights_hash(r2.student)
    assert weights_hash(r1.teacher) == weights_hash(r2.teacher)
    assert r1.history == r2.history


def test_teacher_changes_only_through_ema(toy_dataset, monkeypatch):
    hashes = {"before": [], "after": []}
    real_ema = ensemble.ema_update

    def spy(teacher, student, alpha):
        hashes["before"].append(weights_hash(teacher))
        out = real_ema(teacher, student, alpha)
        hashes["after"].append(weights_hash(teacher))
        return out

    monkeypatch.setattr(ensemble, "ema_update", spy)
    ensemble.train_selfensemble(
        toy_dataset, SMALL_SEG, StageSchedule(steps=6, batch_size=4, lr=1e-3),
        seed=3, use_consistency=True)
    # between consecutive updates nothing else may have touched the teacher
    assert len(hashes["before"]) == 6
    for nxt, prev in zip(hashes["before"][1:], hashes["after"][:-1]):
        assert nxt == prev
    # and the updates themselves do change it
    assert any(b != a for b, a in zip(hashes["before"], hashes["after"]))


def test_history_schema_and_source_only_mode(toy_dataset):
    res = ensemble.train_selfensemble(
        toy_dataset, SMALL_SEG, StageSchedule(steps=8, batch_size=4, lr=1e-3),
        seed=5, use_consistency=False)
    assert res.teacher is None
    row = res.history[-1]
    assert set(row) == {"epoch", "step", "l_sup", "l_con", "delta", "alpha",
                        "student_miou", "teacher_miou"}
    assert row["l_con"] == 0.0 and row["delta"] == 0.0
    assert row["teacher_miou"] == row["student_miou"]
    assert res.final_miou == row["student_miou"]


def test_unlabeled_split_has_no_labels(toy_dataset):
    assert not hasattr(toy_dataset.target, "labels")


def test_augmented_stream_requires_generator_shapes(toy_dataset, tiny_fseg):
    from segadapt import styleaug
    gen = styleaug.init_generator(
        styleaug.GenArchConfig(base_width=4, style_width=8), 0)
    res = ensemble.train_selfensemble(
        toy_dataset, SMALL_SEG, StageSchedule(steps=4, batch_size=4, lr=1e-3),
        seed=6, generator=gen, use_consistency=True, augment_mode="per_step")
    assert res.history[-1]["epoch"] >= 1


def test_snapshots_recorded(toy_dataset):
    res = ensemble.train_selfensemble(
        toy_dataset, SMALL_SEG, StageSchedule(steps=24, batch_size=4, lr=1e-3),
        seed=7, use_consistency=True, snapshot_epochs=(1,))
    assert 1 in res.snapshots
    stu, tea = res.snapshots[1]
    assert weights_hash(stu) != weights_hash(res.student)
    assert tea is not None
