"""Mean-teacher self-ensembling trainer.

The student learns from labeled source batches (optionally joined by
generator-restyled copies carrying the source labels) while a
consistency term pulls its predictions on perturbed target batches
toward those of a teacher whose weights are an exponential moving
average of the student's. The teacher never sees a gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics, segmodels, styleaug
from .autodiff import Var
from .errors import ConfigError, TrainingError
from .nnet import (Adam, ModelWeights, collect_grads, wrap_params)


@dataclass
class EmaSchedule:
    """Two-phase decay: fast tracking early, long memory late."""

    early_decay: float = 0.99
    late_decay: float = 0.999
    switch_step: int = 0  # 0 means "derive as ~2/3 of total steps"

    def validate(self):
        if not (0.0 <= self.early_decay <= self.late_decay < 1.0):
            raise ConfigError(
                f"need 0 <= early {self.early_decay} <= late {self.late_decay} < 1")

    def resolved(self, total_steps: int) -> "EmaSchedule":
        self.validate()
        if self.switch_step > 0:
            return self
        return EmaSchedule(self.early_decay, self.late_decay,
                           int(round(0.66 * total_steps)))


@dataclass
class ConsistencySchedule:
    """Ramp-up of the consistency weight over the training run."""

    ramp_coefficient: float = 30.0
    total_epochs: int = 1

    def weight_at(self, epoch: int) -> float:
        # x is the current-epoch / total-epochs ratio, reaching 1 at the end
        return consistency_weight(epoch / max(self.total_epochs, 1),
                                  self.ramp_coefficient)


@dataclass
class PerturbConfig:
    gaussian_noise_std: float = 0.1
    dropout: bool = True


def ema_decay(step: int, schedule: EmaSchedule) -> float:
    """Early decay strictly before the switch step, late decay from it on."""
    schedule.validate()
    return schedule.early_decay if step < schedule.switch_step else schedule.late_decay


def consistency_weight(x: float, delta0: float) -> float:
    """1 + delta0 * exp(-5 (1-x)^2) on x in [0,1]; out-of-range x clamps."""
    if x < 0.0 or x > 1.0:
        warnings.warn(f"consistency ramp ratio {x} clamped into [0,1]", stacklevel=2)
        x = min(max(x, 0.0), 1.0)
    return 1.0 + delta0 * float(np.exp(-5.0 * (1.0 - x) ** 2))


def ema_update(teacher: ModelWeights, student: ModelWeights,
               alpha: float) -> ModelWeights:
    """t <- alpha * t + (1 - alpha) * s, elementwise, in place.

    Covers every parameter and every buffer; the weight sets must share
    an architecture (equal name sets and shapes).
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"EMA decay must be in [0,1), got {alpha}")
    for kind, t_table, s_table in (("parameter", teacher.params, student.params),
                                   ("buffer", teacher.buffers, student.buffers)):
        if t_table.keys() != s_table.keys():
            missing = t_table.keys() ^ s_table.keys()
            raise ValueError(
                f"{kind} mismatch between teacher and student: {sorted(missing)!r}")
        for name, t in t_table.items():
            s = s_table[name]
            if t.shape != s.shape:
                raise ValueError(f"{kind} {name}: shape {t.shape} vs {s.shape}")
            # same as alpha*t + (1-alpha)*s, but exactly stationary at t == s
            t += (1.0 - alpha) * (s - t)
    return teacher


def perturb_target(image: np.ndarray, config: PerturbConfig, seed: int) -> np.ndarray:
    """Additive i.i.d. Gaussian pixel noise, clipped back to [0,1]."""
    if config.gaussian_noise_std < 0:
        raise ConfigError(
            f"noise std must be >= 0, got {config.gaussian_noise_std}")
    image = np.asarray(image)
    if config.gaussian_noise_std == 0.0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(image.shape).astype(image.dtype)
    return np.clip(image + config.gaussian_noise_std * noise, 0.0, 1.0)


def consistency_loss(student_probs, teacher_probs):
    """Mean squared difference of the two softmax maps (all axes averaged)."""
    t = teacher_probs.data if isinstance(teacher_probs, Var) else np.asarray(teacher_probs)
    is_var = isinstance(student_probs, Var)
    s = student_probs if is_var else ad.as_var(np.asarray(student_probs))
    if s.data.shape != t.shape:
        raise ValueError(
            f"prediction shape mismatch: {s.data.shape} vs {t.shape}")
    d = s - t
    loss = ad.vmean(d * d)
    return loss if is_var else float(loss.data)


def total_loss(l_sup, l_con, delta: float):
    """Supervised term plus delta-weighted consistency term."""
    if delta < 0:
        raise ConfigError(f"consistency weight must be >= 0, got {delta}")
    return l_sup + l_con * delta


@dataclass
class SelfEnsembleResult:
    student: ModelWeights
    teacher: ModelWeights | None
    history: list[dict] = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # epoch -> (student, teacher)

    @property
    def final_miou(self) -> float:
        row = self.history[-1]
        return row["teacher_miou"] if self.teacher is not None else row["student_miou"]


def train_selfensemble(dataset, seg_config: segmodels.SegArchConfig, schedule,
                       seed: int, generator: ModelWeights | None = None,
                       use_consistency: bool = True,
                       ema_schedule: EmaSchedule | None = None,
                       cons_schedule: ConsistencySchedule | None = None,
                       perturb: PerturbConfig | None = None,
                       augment_mode: str = "per_epoch",
                       snapshot_epochs: tuple[int, ...] = (),
                       ) -> SelfEnsembleResult:
    """Run one adaptation variant.

    generator=None drops the restyled stream; use_consistency=False
    drops the teacher and consistency term (plain supervised training).
    History carries one row per epoch with losses, schedule values and
    eval-split mIoU of both networks. Deterministic in `seed`.
    """
    if augment_mode not in ("per_epoch", "per_step"):
        raise ConfigError(f"unknown augment_mode {augment_mode!r}")
    perturb = perturb or PerturbConfig()
    batch = schedule.batch_size
    steps_per_epoch = max(1, len(dataset.source) // batch)
    total_steps = schedule.steps
    total_epochs = -(-total_steps // steps_per_epoch)  # ceil; last epoch may be short
    ema_schedule = (ema_schedule or EmaSchedule()).resolved(total_steps)
    cons_schedule = cons_schedule or ConsistencySchedule(total_epochs=total_epochs)
    cons_schedule.total_epochs = total_epochs

    student = segmodels.init_segmenter(seg_config, np.random.default_rng(
        [seed, 31]).integers(2 ** 31))
    teacher = student.copy() if use_consistency else None
    opt = Adam(lr=schedule.lr)
    gen_config = (styleaug.GenArchConfig.from_arch(generator.arch)
                  if generator is not None else None)

    history = []
    snapshots = {}
    aug_images = aug_labels = None
    step = 0
    for epoch in range(1, total_epochs + 1):
        delta = cons_schedule.weight_at(epoch) if use_consistency else 0.0
        if generator is not None and augment_mode == "per_epoch":
            # one restyled copy of a source batch per source image, refreshed
            # each epoch with freshly drawn target style images
            rng = np.random.default_rng([seed, 41, epoch])
            aug_images, aug_labels = _precompute_augmented(
                dataset, generator, gen_config, rng, batch)
        sup_sum = con_sum = 0.0
        alpha = 0.0
        epoch_steps = min(steps_per_epoch, total_steps - step)
        for _ in range(epoch_steps):
            x_s, y_s = dataset.source.sample_batch(
                batch, np.random.default_rng([seed, 51, step]))
            xs_parts = [x_s]
            ys_parts = [y_s]
            if generator is not None:
                if augment_mode == "per_epoch":
                    idx = np.random.default_rng([seed, 52, step]).integers(
                        0, aug_images.shape[0], size=batch)
                    x_a, y_a = aug_images[idx], aug_labels[idx]
                else:
                    x_t_style = dataset.target.sample_batch(
                        batch, np.random.default_rng([seed, 53, step]))
                    x_a = styleaug.generate_augmented(generator, x_s, x_t_style)
                    y_a = y_s
                xs_parts.append(x_a)
                ys_parts.append(y_a)

            sup_x = np.concatenate(xs_parts, axis=0)
            sup_y = np.concatenate(ys_parts, axis=0)
            n_sup = sup_x.shape[0]

            if use_consistency:
                x_t = dataset.target.sample_batch(
                    batch, np.random.default_rng([seed, 54, step]))
                stu_in = perturb_target(
                    x_t, perturb, np.random.default_rng([seed, 55, step])
                    .integers(2 ** 31))
                tea_in = perturb_target(
                    x_t, perturb, np.random.default_rng([seed, 56, step])
                    .integers(2 ** 31))
                forward_x = np.concatenate([sup_x, stu_in], axis=0)
            else:
                forward_x = sup_x

            pvars = wrap_params(student)
            pre, full = segmodels.segment_logits(
                pvars, seg_config, forward_x, mode="train",
                drop_rng=np.random.default_rng([seed, 57, step]))
            sup_probs = segmodels.softmax_probs(ad.index(
                full, np.s_[:n_sup]))
            l_sup = segmodels.cross_entropy(sup_probs, sup_y)

            if use_consistency:
                stu_pre = ad.index(pre, np.s_[n_sup:])
                stu_probs = segmodels.softmax_probs(stu_pre)
                tea_mode = "train" if perturb.dropout else "eval"
                tea_pre, _ = segmodels.segment_logits(
                    teacher.params, seg_config, tea_in, mode=tea_mode,
                    drop_rng=np.random.default_rng([seed, 58, step]))
                tea_probs = segmodels.softmax_probs(tea_pre.data)
                l_con = consistency_loss(stu_probs, tea_probs)
            else:
                l_con = ad.as_var(np.float32(0.0))

            loss = total_loss(l_sup, l_con, delta)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"self-ensembling diverged at step {step}: "
                    f"sup={float(l_sup.data):.4g} con={float(l_con.data):.4g}")
            loss.backward()
            opt.lr = schedule.lr_at(step)
            opt.step(student.params, collect_grads(pvars))

            if use_consistency:
                alpha = ema_decay(step, ema_schedule)
                ema_update(teacher, student, alpha)
            sup_sum += float(l_sup.data)
            con_sum += float(l_con.data)
            step += 1

        student_report = metrics.evaluate_segmenter(
            student, dataset.target_eval.images, dataset.target_eval.labels)
        if teacher is not None:
            teacher_report = metrics.evaluate_segmenter(
                teacher, dataset.target_eval.images, dataset.target_eval.labels)
        else:
            teacher_report = student_report
        history.append({
            "epoch": epoch,
            "step": step,
            "l_sup": sup_sum / epoch_steps,
            "l_con": con_sum / epoch_steps,
            "delta": delta,
            "alpha": alpha,
            "student_miou": student_report.miou,
            "teacher_miou": teacher_report.miou,
        })
        if epoch in snapshot_epochs:
            snapshots[epoch] = (student.copy(),
                                teacher.copy() if teacher is not None else None)

    return SelfEnsembleResult(student=student, teacher=teacher,
                              history=history, snapshots=snapshots)


def _precompute_augmented(dataset, generator, gen_config, rng, batch):
    """Restyle every source image once, in deterministic batched order."""
    n = len(dataset.source)
    images = dataset.source.images.astype(np.float32) / 255.0
    labels = dataset.source.labels.astype(np.int64)
    out = np.empty_like(images)
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        style = dataset.target.sample_batch(hi - lo, rng)
        out[lo:hi] = styleaug.generate_augmented(generator, images[lo:hi], style)
    return out, labels
