"""Pipeline orchestration: configuration, stages, persistence, reports.

Three training stages feed each other through checkpoints on disk:
constraint-segmenter pretraining, augmentation-GAN training, and the
self-ensembling adaptation runs (four ablation variants). Every stage
archives the config it ran under; re-running an archived config
reproduces all artifacts byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ensemble, metrics, segmodels, styleaug, toydata
from .errors import ConfigError, PipelineError
from .nnet import StageSchedule, load_checkpoint, save_checkpoint

SCHEMA_VERSION = 1
VARIANTS = ("source_only", "se", "tgcfda", "tgcfda_se")


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    scene: toydata.SceneSpec = field(default_factory=lambda: toydata.SceneSpec(
        shift_params=toydata.DomainShift(
            hue_rotation=30.0, texture_noise_scale=4.0,
            texture_noise_amplitude=0.12, blur_sigma=0.5,
            brightness_jitter=0.05, contrast_jitter=0.08, seed=9)))
    counts: tuple[int, int, int] = (800, 800, 100)
    seg: segmodels.SegArchConfig = field(default_factory=segmodels.SegArchConfig)
    fseg: segmodels.SegArchConfig = field(
        default_factory=lambda: segmodels.SegArchConfig(base_width=8))
    gen: styleaug.GenArchConfig = field(default_factory=styleaug.GenArchConfig)
    disc: styleaug.DiscArchConfig = field(default_factory=styleaug.DiscArchConfig)
    pretrain: StageSchedule = field(
        default_factory=lambda: StageSchedule(steps=600, batch_size=8, lr=1e-3))
    augment: StageSchedule = field(
        default_factory=lambda: StageSchedule(steps=700, batch_size=4, lr=2e-4))
    adapt: StageSchedule = field(
        default_factory=lambda: StageSchedule(steps=1200, batch_size=8, lr=7e-4,
                                              lr_end=7e-5))
    lambda_sem: float = 10.0
    ema: ensemble.EmaSchedule = field(default_factory=ensemble.EmaSchedule)
    consistency_ramp: float = 30.0
    perturb: ensemble.PerturbConfig = field(default_factory=ensemble.PerturbConfig)
    augment_mode: str = "per_epoch"

    def to_json(self) -> str:
        payload = asdict(self)
        payload["schema_version"] = SCHEMA_VERSION
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        payload = json.loads(text)
        version = payload.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        try:
            scene_raw = payload.pop("scene")
            scene_raw["shift_params"] = toydata.DomainShift(
                **scene_raw["shift_params"])
            scene_raw["shapes_per_scene"] = tuple(scene_raw["shapes_per_scene"])
            cfg = PipelineConfig(
                scene=toydata.SceneSpec(**scene_raw),
                counts=tuple(payload.pop("counts")),
                seg=_seg_cfg(payload.pop("seg")),
                fseg=_seg_cfg(payload.pop("fseg")),
                gen=styleaug.GenArchConfig(**payload.pop("gen")),
                disc=styleaug.DiscArchConfig(**payload.pop("disc")),
                pretrain=StageSchedule(**payload.pop("pretrain")),
                augment=StageSchedule(**payload.pop("augment")),
                adapt=StageSchedule(**payload.pop("adapt")),
                ema=ensemble.EmaSchedule(**payload.pop("ema")),
                perturb=ensemble.PerturbConfig(**payload.pop("perturb")),
                **payload,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed pipeline config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        self.scene.validate()
        self.seg.validate()
        self.fseg.validate()
        self.gen.validate()
        self.disc.validate()
        for sched in (self.pretrain, self.augment, self.adapt):
            sched.validate()
        self.ema.validate()
        if self.lambda_sem < 0:
            raise ConfigError(f"lambda_sem must be >= 0, got {self.lambda_sem}")

    # -- derived paths -----------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.out_dir)

    @property
    def manifest_path(self) -> Path:
        return self.root / "data" / "manifest.json"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.csv"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name


def _seg_cfg(d: dict) -> segmodels.SegArchConfig:
    d = dict(d)
    d["dilation_rates"] = tuple(d["dilation_rates"])
    return segmodels.SegArchConfig(**d)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return PipelineConfig.from_json(p.read_text())


def _archive_config(config: PipelineConfig):
    config.root.mkdir(parents=True, exist_ok=True)
    (config.root / "config.json").write_text(config.to_json())


def _write_csv(path: Path, rows: list[dict], columns: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items() if k in columns})


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing prerequisite for this stage: run "
                            f"'{stage}' first (expected {path})")
    return path


# -- stages -------------------------------------------------------------------

def cmd_generate_data(config: PipelineConfig) -> Path:
    """Stage 0: render the two-domain benchmark under <out>/data."""
    config.validate()
    _archive_config(config)
    toydata.build_dataset(config.scene, config.counts,
                          config.root / "data", seed=config.seed)
    return config.manifest_path


def cmd_pretrain_fseg(config: PipelineConfig) -> Path:
    """Stage 1: pretrain the frozen constraint segmenter on source labels."""
    config.validate()
    _archive_config(config)
    dataset = toydata.load_dataset(_require(config.manifest_path, "generate-data"))
    weights = segmodels.pretrain_fseg(dataset, config.fseg, config.pretrain,
                                      seed=config.seed)
    path = config.checkpoint("fseg")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(weights, path, step=config.pretrain.steps)
    return path


def cmd_train_aug(config: PipelineConfig) -> Path:
    """Stage 2: adversarial training of the restyling generator."""
    config.validate()
    _archive_config(config)
    dataset = toydata.load_dataset(_require(config.manifest_path, "generate-data"))
    fseg, _ = load_checkpoint(_require(config.checkpoint("fseg"), "pretrain-seg"))
    gen, disc, log = styleaug.train_tgcfda(
        dataset, fseg, config.gen, config.disc, config.augment,
        lambda_sem=config.lambda_sem, seed=config.seed)
    gen_path = config.checkpoint("generator")
    gen_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(gen, gen_path, step=config.augment.steps)
    save_checkpoint(disc, config.checkpoint("discriminator"),
                    step=config.augment.steps)
    _write_csv(config.log_path("augment_train"), log,
               ["step", "d_loss", "g_adv_loss", "sem_loss", "fseg_agreement"])
    return gen_path


def cmd_train(config: PipelineConfig, variant: str) -> dict:
    """Stage 3: one adaptation run; writes checkpoints, history and evals."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    config.validate()
    _archive_config(config)
    dataset = toydata.load_dataset(_require(config.manifest_path, "generate-data"))
    use_consistency = variant in ("se", "tgcfda_se")
    generator = None
    if variant in ("tgcfda", "tgcfda_se"):
        generator, _ = load_checkpoint(
            _require(config.checkpoint("generator"), "train-aug"))

    result = ensemble.train_selfensemble(
        dataset, config.seg, config.adapt, seed=config.seed,
        generator=generator, use_consistency=use_consistency,
        ema_schedule=config.ema,
        cons_schedule=ensemble.ConsistencySchedule(
            ramp_coefficient=config.consistency_ramp),
        perturb=config.perturb, augment_mode=config.augment_mode,
        snapshot_epochs=(1,))

    ckpt_dir = config.root / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student, config.checkpoint(f"student_{variant}"),
                    step=config.adapt.steps)
    final = result.student
    if result.teacher is not None:
        save_checkpoint(result.teacher, config.checkpoint(f"teacher_{variant}"),
                        step=config.adapt.steps)
        final = result.teacher
    for epoch, (stu, tea) in result.snapshots.items():
        save_checkpoint(stu, config.checkpoint(f"student_{variant}_ep{epoch}"),
                        step=epoch)
        if tea is not None:
            save_checkpoint(tea, config.checkpoint(f"teacher_{variant}_ep{epoch}"),
                            step=epoch)

    _write_csv(config.log_path(f"history_{variant}"), result.history,
               ["epoch", "step", "l_sup", "l_con", "delta", "alpha",
                "student_miou", "teacher_miou"])

    report = metrics.evaluate_segmenter(
        final, dataset.target_eval.images, dataset.target_eval.labels,
        checkpoint_id=f"{'teacher' if result.teacher is not None else 'student'}"
                      f"_{variant}")
    report_path = config.report_path(f"eval_{variant}.json")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    _update_ablation(config, variant, report)
    return {"variant": variant, "miou": report.miou,
            "history": result.history}


def _update_ablation(config: PipelineConfig, variant: str,
                     report: metrics.EvalReport):
    path = config.report_path("ablation.json")
    rows = {}
    if path.exists():
        rows = {r["variant"]: r for r in json.loads(path.read_text())["rows"]}
    rows[variant] = {
        "variant": variant,
        "miou": round(report.miou, 6),
        "per_class_iou": [round(v, 6) for v in report.per_class_iou],
        "evaluated": report.checkpoint_id,
    }
    ordered = [rows[v] for v in VARIANTS if v in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"rows": ordered}, indent=2, sort_keys=True))


def cmd_evaluate(checkpoint_path, manifest_path, out_path=None) -> metrics.EvalReport:
    """Evaluate any segmenter checkpoint on the labeled target-eval split."""
    weights, _ = load_checkpoint(_require(Path(checkpoint_path), "train"))
    dataset = toydata.load_dataset(_require(Path(manifest_path), "generate-data"))
    report = metrics.evaluate_segmenter(
        weights, dataset.target_eval.images, dataset.target_eval.labels,
        checkpoint_id=Path(checkpoint_path).stem)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report.to_json())
    return report


# -- report emission ------------------------------------------------------------

def _read_history(path: Path) -> list[dict]:
    with open(path) as f:
        return [{k: float(v) for k, v in row.items()}
                for row in csv.DictReader(f)]


def consistency_heatmap(student, teacher, images) -> np.ndarray:
    """Per-pixel squared student/teacher disagreement, summed over classes."""
    s_pre, _ = segmodels.forward_segment(student, images, mode="eval")
    t_pre, _ = segmodels.forward_segment(teacher, images, mode="eval")
    diff = segmodels.softmax_probs(s_pre) - segmodels.softmax_probs(t_pre)
    return (diff * diff).sum(axis=-1)


def cmd_report(config: PipelineConfig, run_dir=None) -> list[Path]:
    """Emit the analysis artifacts for whatever runs exist in the run dir."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(run_dir) if run_dir is not None else config.root
    histories = {v: _read_history(root / "logs" / f"history_{v}.csv")
                 for v in VARIANTS if (root / "logs" / f"history_{v}.csv").exists()}
    if not histories:
        raise PipelineError(f"no history files under {root}/logs; run 'train' first")
    out_dir = root / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    # (a) teacher/student mIoU learning curves
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant, rows in histories.items():
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [100 * r["teacher_miou"] for r in rows],
                label=f"{variant} teacher")
        ax.plot(epochs, [100 * r["student_miou"] for r in rows], "--",
                label=f"{variant} student", alpha=0.6)
    ax.set_xlabel("epoch")
    ax.set_ylabel("target-eval mIoU (%)")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    curve_path = out_dir / "miou_curves.png"
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    written.append(curve_path)

    # (b) consistency heatmaps at an early and the final checkpoint
    heat_variant = "tgcfda_se" if "tgcfda_se" in histories else None
    if heat_variant:
        dataset = toydata.load_dataset(root / "data" / "manifest.json")
        sample = dataset.target_eval.images[:3].astype(np.float32) / 255.0
        for tag, suffix in (("early", "_ep1"), ("late", "")):
            stu_path = root / "checkpoints" / f"student_{heat_variant}{suffix}.ckpt"
            tea_path = root / "checkpoints" / f"teacher_{heat_variant}{suffix}.ckpt"
            if not (stu_path.exists() and tea_path.exists()):
                continue
            student, _ = load_checkpoint(stu_path)
            teacher, _ = load_checkpoint(tea_path)
            heat = consistency_heatmap(student, teacher, sample)
            fig, axes = plt.subplots(2, heat.shape[0], figsize=(9, 4))
            axes = np.atleast_2d(axes)
            for i in range(heat.shape[0]):
                axes[0, i].imshow(sample[i])
                axes[0, i].set_axis_off()
                im = axes[1, i].imshow(heat[i], cmap="magma",
                                       vmin=0.0, vmax=max(heat.max(), 1e-6))
                axes[1, i].set_axis_off()
            fig.colorbar(im, ax=axes[1, :].tolist(), shrink=0.8)
            heat_path = out_dir / f"consistency_heatmap_{tag}.png"
            fig.savefig(heat_path, dpi=120)
            plt.close(fig)
            written.append(heat_path)

    # (c) per-class IoU gain of adding self-ensembling on top of augmentation
    eval_a = root / "reports" / "eval_tgcfda.json"
    eval_b = root / "reports" / "eval_tgcfda_se.json"
    if eval_a.exists() and eval_b.exists():
        base = json.loads(eval_a.read_text())
        full = json.loads(eval_b.read_text())
        gains = [100 * (b - a) for a, b in
                 zip(base["per_class_iou"], full["per_class_iou"])]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(gains)), gains, color="tab:blue")
        ax.set_xlabel("class index")
        ax.set_ylabel("IoU gain (points)")
        ax.axhline(0, color="k", lw=0.8)
        fig.tight_layout()
        bars_path = out_dir / "iou_gain_bars.png"
        fig.savefig(bars_path, dpi=120)
        plt.close(fig)
        written.append(bars_path)
        gain_rows = [{"class": i, "iou_base": base["per_class_iou"][i],
                      "iou_full": full["per_class_iou"][i],
                      "gain": gains[i] / 100} for i in range(len(gains))]
        _write_csv(out_dir / "per_class_gains.csv", gain_rows,
                   ["class", "iou_base", "iou_full", "gain"])
        written.append(out_dir / "per_class_gains.csv")
    return written
