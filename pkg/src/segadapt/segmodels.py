"""Segmentation networks and the shared softmax / cross-entropy primitives.

One compact architecture family serves all three roles: the student and
teacher networks of the self-ensembling stage and the frozen constraint
segmenter of the augmentation GAN (at half width). The encoder
downsamples by 4, a multi-rate dilated context head aggregates context,
and logits come out both on the stride-4 grid (for the consistency
loss) and bilinearly upsampled to input resolution (for supervision and
evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, TrainingError
from .nnet import (Adam, ModelWeights, collect_grads, dropout_mask, he_conv,
                   wrap_params, zeros)

_EPS_PROB = 1e-7
_interp_cache: dict = {}


def _interp_pair(h_in, w_in, h_out, w_out):
    key = (h_in, w_in, h_out, w_out)
    if key not in _interp_cache:
        _interp_cache[key] = (ad.interp_matrix(h_in, h_out),
                              ad.interp_matrix(w_in, w_out))
    return _interp_cache[key]


def upsample(x, h_out, w_out):
    """Bilinear resample of (B,H,W,C) features to (B,h_out,w_out,C)."""
    x = ad.as_var(x)
    b, h, w, c = x.data.shape
    if (h, w) == (h_out, w_out):
        return x
    a, bm = _interp_pair(h, w, h_out, w_out)
    return ad.interp2d(x, a, bm)


@dataclass(frozen=True)
class SegArchConfig:
    in_channels: int = 3
    base_width: int = 16
    encoder_depth: int = 4          # 2 strided stages + dilated stages
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    num_classes: int = 5
    dropout_rate: float = 0.5
    dropout_site: str = "pre_classifier"

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 1 or self.in_channels < 1:
            raise ConfigError("base_width and in_channels must be positive")
        if self.encoder_depth < 3:
            raise ConfigError(
                "encoder_depth must be at least 3 (2 downsamples + 1 dilated)")
        if not self.dilation_rates:
            raise ConfigError("need at least one context-head dilation rate")

    def to_arch(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        d["family"] = "segmenter"
        return d

    @staticmethod
    def from_arch(arch: dict) -> "SegArchConfig":
        d = {k: v for k, v in arch.items() if k != "family"}
        d["dilation_rates"] = tuple(d["dilation_rates"])
        return SegArchConfig(**d)


def init_segmenter(config: SegArchConfig, seed: int) -> ModelWeights:
    """Deterministic He-normal initialization of one segmenter."""
    config.validate()
    rng = np.random.default_rng(seed)
    w = config.base_width
    params = {}

    def conv(name, kh, kw, cin, cout):
        params[f"{name}.w"] = he_conv(rng, kh, kw, cin, cout)
        params[f"{name}.b"] = zeros(cout)

    conv("stem", 3, 3, config.in_channels, w)
    conv("down", 3, 3, w, 2 * w)
    for i in range(config.encoder_depth - 2):
        conv(f"dil{i}", 3, 3, 2 * w, 2 * w)
    for r in config.dilation_rates:
        conv(f"head_r{r}", 3, 3, 2 * w, w)
    conv("fuse", 1, 1, len(config.dilation_rates) * w, 2 * w)
    conv("cls", 1, 1, 2 * w, config.num_classes)
    return ModelWeights(arch=config.to_arch(), params=params)


def segment_logits(params, config: SegArchConfig, images, mode="eval",
                   drop_rng=None):
    """Graph forward pass. `params` maps names to Vars (training) or
    ndarrays (inference); returns (pre_upsample, upsampled) logit Vars."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = ad.as_var(images)
    b, h, w_in, cin = x.data.shape
    if cin != config.in_channels:
        raise ValueError(f"expected {config.in_channels}-channel input, got {cin}")

    def conv(name, inp, stride=1, dilation=1):
        return ad.conv2d(inp, params[f"{name}.w"], params[f"{name}.b"],
                         stride=stride, dilation=dilation, pad=dilation)

    t = ad.relu(conv("stem", x, stride=2))
    t = ad.relu(conv("down", t, stride=2))
    for i in range(config.encoder_depth - 2):
        t = ad.relu(conv(f"dil{i}", t, dilation=2))
    branches = [conv(f"head_r{r}", t, dilation=r) for r in config.dilation_rates]
    t = ad.relu(ad.concat(branches, axis=3))
    t = ad.relu(ad.conv2d(t, params["fuse.w"], params["fuse.b"]))
    if mode == "train" and config.dropout_rate > 0.0:
        rng = drop_rng if drop_rng is not None else np.random.default_rng(0)
        mask = dropout_mask(rng, t.data.shape, config.dropout_rate,
                            dtype=t.data.dtype)
        t = t * mask
    pre = ad.conv2d(t, params["cls.w"], params["cls.b"])
    return pre, upsample(pre, h, w_in)


def forward_segment(weights: ModelWeights, images, mode="eval",
                    perturbation_seed=None):
    """Inference entry point: numpy in, numpy out.

    Eval mode is deterministic (dropout off); train mode is deterministic
    in perturbation_seed. Returns (pre_upsample, upsampled) logits.
    """
    config = SegArchConfig.from_arch(weights.arch)
    rng = None
    if mode == "train":
        rng = np.random.default_rng(
            0 if perturbation_seed is None else perturbation_seed)
    pre, full = segment_logits(weights.params, config, images, mode=mode,
                               drop_rng=rng)
    return pre.data, full.data


def softmax_probs(logits):
    """Per-pixel class probabilities over the last axis (stabilized)."""
    if isinstance(logits, Var):
        return ad.softmax(logits, axis=-1)
    return ad.softmax(ad.as_var(logits), axis=-1).data


def _check_labels(labels, num_classes):
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(
            f"label {labels[where]} out of range [0, {num_classes}) at pixel {where}")


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class.

    probs: (B,H,W,C) probabilities; labels: (B,H,W) ints in [0,C).
    Probabilities are clamped at 1e-7 before the log. Returns a float
    for ndarray input, a Var for graph input.
    """
    is_var = isinstance(probs, Var)
    p = probs if is_var else ad.as_var(np.asarray(probs))
    labels = np.asarray(labels)
    c = p.data.shape[-1]
    if labels.shape != p.data.shape[:-1]:
        raise ValueError(
            f"labels shape {labels.shape} does not match probs {p.data.shape}")
    _check_labels(labels, c)
    onehot = np.eye(c, dtype=p.data.dtype)[labels]
    p_true = ad.vsum(p * onehot, axis=-1)
    loss = -ad.vmean(ad.log(ad.clip(p_true, _EPS_PROB, 1.0)))
    return loss if is_var else float(loss.data)


def supervised_loss(param_vars, config, images, labels, drop_rng):
    """Cross-entropy of the upsampled prediction against dense labels."""
    _, full = segment_logits(param_vars, config, images, mode="train",
                             drop_rng=drop_rng)
    return cross_entropy(softmax_probs(full), labels)


def pretrain_fseg(dataset, config: SegArchConfig, schedule, seed: int):
    """Train the semantic-constraint segmenter on the labeled source split.

    Returns frozen weights; downstream GAN training must never touch
    them. `schedule` needs .steps, .batch_size and .lr.
    """
    weights = init_segmenter(config, seed)
    opt = Adam(lr=schedule.lr)
    for step in range(schedule.steps):
        opt.lr = schedule.lr_at(step)
        rng = np.random.default_rng([seed, 101, step])
        x, y = dataset.source.sample_batch(schedule.batch_size, rng)
        pvars = wrap_params(weights)
        loss = supervised_loss(pvars, config, x, y,
                               drop_rng=np.random.default_rng([seed, 102, step]))
        if not np.isfinite(loss.data):
            raise TrainingError(f"constraint-segmenter loss diverged at step {step}")
        loss.backward()
        opt.step(weights.params, collect_grads(pvars))
    weights.check_finite("after constraint pretraining")
    weights.frozen = True
    return weights
