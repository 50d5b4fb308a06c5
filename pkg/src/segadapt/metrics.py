"""Segmentation evaluation: confusion matrix, per-class IoU, mean IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Add one label-map pair to the matrix (rows = ground truth, cols = prediction)."""
    c = cm.shape[0]
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label shape mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = (arr < 0) | (arr >= c)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(f"{name} label {arr[i]} out of range [0, {c}) at pixel {i}")
    cm += np.bincount(c * gt.astype(np.int64) + pred, minlength=c * c).reshape(c, c)
    return cm


def per_class_iou(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU per class plus presence flags.

    A class is absent when it has neither ground-truth nor predicted
    pixels; absent classes get IoU 0.0 and present=False and are skipped
    by mean_iou.
    """
    tp = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    union = rows + cols - tp
    present = union > 0
    ious = np.zeros(cm.shape[0], dtype=np.float64)
    ious[present] = tp[present] / union[present]
    return ious, present


def mean_iou(ious: np.ndarray, present: np.ndarray) -> float:
    if not np.any(present):
        raise ValueError("cannot average IoU: no class is present")
    return float(np.mean(np.asarray(ious)[np.asarray(present)]))


@dataclass
class EvalReport:
    """Evaluation summary for one checkpoint on one labeled split."""

    num_classes: int
    confusion: np.ndarray
    per_class_iou: list[float]
    present: list[bool]
    miou: float
    pixel_counts: list[int]
    checkpoint_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "num_classes": self.num_classes,
            "per_class_iou": [round(v, 6) for v in self.per_class_iou],
            "present": list(map(bool, self.present)),
            "miou": round(self.miou, 6),
            "pixel_counts": list(map(int, self.pixel_counts)),
            "checkpoint_id": self.checkpoint_id,
        }
        payload.update(self.extra)
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_confusion(cm: np.ndarray, checkpoint_id: str = "") -> "EvalReport":
        ious, present = per_class_iou(cm)
        return EvalReport(
            num_classes=cm.shape[0],
            confusion=cm.copy(),
            per_class_iou=[float(v) for v in ious],
            present=[bool(v) for v in present],
            miou=mean_iou(ious, present),
            pixel_counts=[int(v) for v in cm.sum(axis=1)],
            checkpoint_id=checkpoint_id,
        )


def evaluate_segmenter(weights, images_u8, labels, batch_size=25,
                       checkpoint_id="") -> EvalReport:
    """mIoU of a segmenter on labeled images (argmax of upsampled logits)."""
    from . import segmodels  # local import: metrics stays usable standalone

    c = weights.arch["num_classes"]
    cm = new_confusion(c)
    n = images_u8.shape[0]
    for lo in range(0, n, batch_size):
        x = images_u8[lo:lo + batch_size].astype(np.float32) / 255.0
        _, full = segmodels.forward_segment(weights, x, mode="eval")
        pred = np.argmax(full, axis=-1)
        accumulate(cm, pred, labels[lo:lo + batch_size])
    return EvalReport.from_confusion(cm, checkpoint_id=checkpoint_id)
