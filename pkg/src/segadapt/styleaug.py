"""Target-guided augmentation GAN.

A style-conditioned generator restyles labeled source images toward the
unlabeled target domain without any reverse generator or reconstruction
loss: a style encoder reads one target image and emits per-channel
affine parameters that modulate the source content features through
adaptive instance normalization. A frozen, pretrained segmenter
penalizes any drift of the semantic layout, and a spectrally-normalized
multi-scale patch discriminator supplies the least-squares adversarial
signal.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import segmodels
from .autodiff import Var
from .errors import ConfigError, TrainingError
from .nnet import (Adam, ModelWeights, collect_grads, he_conv, he_linear,
                   wrap_params, zeros)


# -- adaptive instance normalization -----------------------------------------

def adain(features, gamma, beta, eps=1e-5):
    """Re-standardize each (sample, channel) over space, then shift/scale.

    features: (B,H,W,C); gamma/beta: (C,) shared or (B,C) per-sample.
    Mean and variance are taken across the spatial dimensions.
    """
    if eps < 0:
        raise ConfigError(f"adain eps must be >= 0, got {eps}")
    f = ad.as_var(features)
    b, h, w, c = f.data.shape
    g = ad.as_var(gamma)
    bt = ad.as_var(beta)
    for name, v in (("gamma", g), ("beta", bt)):
        if v.data.shape not in ((c,), (b, c)):
            raise ValueError(
                f"{name} shape {v.data.shape} does not match {c} channels")
    g = ad.reshape(g, (1, 1, 1, c) if g.data.ndim == 1 else (b, 1, 1, c))
    bt = ad.reshape(bt, (1, 1, 1, c) if bt.data.ndim == 1 else (b, 1, 1, c))
    mu = f.mean(axis=(1, 2), keepdims=True)
    centered = f - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    normed = centered * ad.power(var + eps, -0.5)
    return normed * g + bt


def instance_norm(features, eps=1e-5):
    """Non-affine instance normalization (AdaIN with identity modulation)."""
    f = ad.as_var(features)
    mu = f.mean(axis=(1, 2), keepdims=True)
    centered = f - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    return centered * ad.power(var + eps, -0.5)


# -- spectral normalization ---------------------------------------------------

@dataclass
class SpectralState:
    """Persistent left-singular-vector estimate for one weight matrix."""

    u: np.ndarray


def _l2norm(v, eps):
    return v / max(float(np.linalg.norm(v)), eps)


def estimate_sigma(w2d: np.ndarray, u: np.ndarray, power_iters: int = 1,
                   eps: float = 1e-12):
    """Power-iteration estimate of the largest singular value.

    Returns (sigma, u_new, v); u_new is unit-norm.
    """
    if power_iters < 1:
        raise ConfigError(f"power_iters must be >= 1, got {power_iters}")
    v = None
    for _ in range(power_iters):
        v = _l2norm(w2d.T @ u, eps)
        u = _l2norm(w2d @ v, eps)
    sigma = float(u @ w2d @ v)
    return sigma, u, v


def spectral_normalize(w2d: np.ndarray, state: SpectralState,
                       power_iters: int = 1, eps: float = 1e-12):
    """Divide a 2-D weight matrix by its estimated top singular value.

    The state's u vector is updated in place of the old estimate. A zero
    matrix yields sigma clamped to eps and an all-zero result.
    """
    if w2d.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {w2d.shape}")
    sigma, u, _ = estimate_sigma(w2d, state.u, power_iters, eps)
    state.u = u
    return w2d / max(sigma, eps), state


# -- architectures ------------------------------------------------------------

@dataclass(frozen=True)
class GenArchConfig:
    in_channels: int = 3
    base_width: int = 8
    enc_downsamples: int = 2
    adain_blocks: int = 4
    style_depth: int = 2
    style_width: int = 32

    def validate(self):
        if self.base_width < 1 or self.enc_downsamples < 1:
            raise ConfigError("generator widths/downsamples must be positive")
        if self.adain_blocks < 1:
            raise ConfigError("need at least one modulated residual block")

    @property
    def block_channels(self) -> int:
        return self.base_width * 2 ** self.enc_downsamples

    def to_arch(self) -> dict:
        d = asdict(self)
        d["family"] = "generator"
        return d

    @staticmethod
    def from_arch(arch: dict) -> "GenArchConfig":
        return GenArchConfig(**{k: v for k, v in arch.items() if k != "family"})


@dataclass(frozen=True)
class DiscArchConfig:
    in_channels: int = 3
    base_width: int = 16
    num_scales: int = 2
    num_strided: int = 3
    use_bias: bool = True

    def validate(self):
        if self.num_scales < 1 or self.num_strided < 1:
            raise ConfigError("discriminator needs >= 1 scale and strided layer")

    def to_arch(self) -> dict:
        d = asdict(self)
        d["family"] = "discriminator"
        return d

    @staticmethod
    def from_arch(arch: dict) -> "DiscArchConfig":
        return DiscArchConfig(**{k: v for k, v in arch.items() if k != "family"})


@dataclass
class StyleParams:
    """One (scale, shift) pair per modulated residual block."""

    gamma: np.ndarray  # (B, blocks, channels)
    beta: np.ndarray   # (B, blocks, channels)


def init_generator(config: GenArchConfig, seed: int) -> ModelWeights:
    config.validate()
    rng = np.random.default_rng(seed)
    w = config.base_width
    params = {}

    def conv(name, kh, kw, cin, cout, zero=False):
        params[f"{name}.w"] = (zeros(kh, kw, cin, cout) if zero
                               else he_conv(rng, kh, kw, cin, cout))
        params[f"{name}.b"] = zeros(cout)

    conv("enc0", 3, 3, config.in_channels, w)
    for i in range(config.enc_downsamples):
        conv(f"enc{i + 1}", 3, 3, w * 2 ** i, w * 2 ** (i + 1))
    cb = config.block_channels
    for k in range(config.adain_blocks):
        conv(f"block{k}.c1", 3, 3, cb, cb)
        conv(f"block{k}.c2", 3, 3, cb, cb)
    for i in range(config.enc_downsamples):
        cin, cout = cb // 2 ** i, cb // 2 ** (i + 1)
        params[f"dec{i}.w"] = he_conv(rng, 4, 4, cin, cout)
        params[f"dec{i}.b"] = zeros(cout)
    conv("out", 3, 3, w, config.in_channels)

    sw = config.style_width
    cin = config.in_channels
    for i in range(config.style_depth):
        conv(f"style{i}", 3, 3, cin, sw)
        cin = sw
    params["style_fc0.w"] = he_linear(rng, sw, sw)
    params["style_fc0.b"] = zeros(sw)
    # zero-initialized head: gamma comes out as 1 + 0, beta as 0, so the
    # generator starts with identity modulation
    params["style_fc1.w"] = zeros(sw, 2 * config.adain_blocks * cb)
    params["style_fc1.b"] = zeros(2 * config.adain_blocks * cb)
    return ModelWeights(arch=config.to_arch(), params=params)


def style_forward(params, config: GenArchConfig, x_t):
    """Style-encoder pass: (gamma, beta) Vars of shape (B, blocks, Cb)."""
    t = ad.as_var(x_t)
    b = t.data.shape[0]
    for i in range(config.style_depth):
        t = ad.leaky_relu(ad.conv2d(t, params[f"style{i}.w"], params[f"style{i}.b"],
                                    stride=2, pad=1), 0.2)
    t = t.mean(axis=(1, 2))
    t = ad.leaky_relu(ad.matmul(t, params["style_fc0.w"]) + params["style_fc0.b"], 0.2)
    t = ad.matmul(t, params["style_fc1.w"]) + params["style_fc1.b"]
    cb = config.block_channels
    t = ad.reshape(t, (b, 2, config.adain_blocks, cb))
    gamma = ad.index(t, (slice(None), 0)) + 1.0
    beta = ad.index(t, (slice(None), 1))
    return gamma, beta


def encode_style(x_t, gen_weights: ModelWeights) -> StyleParams:
    """Extract per-block modulation parameters from target images."""
    config = GenArchConfig.from_arch(gen_weights.arch)
    gamma, beta = style_forward(gen_weights.params, config, np.asarray(x_t))
    return StyleParams(gamma=gamma.data.copy(), beta=beta.data.copy())


def generator_apply(params, config: GenArchConfig, x_s, x_t):
    """Full generator pass on the graph; output in [0,1], same size as x_s."""
    gamma, beta = style_forward(params, config, x_t)
    t = ad.as_var(x_s)
    t = ad.relu(instance_norm(ad.conv2d(t, params["enc0.w"], params["enc0.b"],
                                        pad=1)))
    for i in range(config.enc_downsamples):
        t = ad.relu(instance_norm(ad.conv2d(
            t, params[f"enc{i + 1}.w"], params[f"enc{i + 1}.b"], stride=2, pad=1)))
    for k in range(config.adain_blocks):
        h = ad.conv2d(t, params[f"block{k}.c1.w"], params[f"block{k}.c1.b"], pad=1)
        h = ad.relu(adain(h, ad.index(gamma, (slice(None), k)),
                          ad.index(beta, (slice(None), k))))
        h = ad.conv2d(h, params[f"block{k}.c2.w"], params[f"block{k}.c2.b"], pad=1)
        t = t + h
    for i in range(config.enc_downsamples):
        t = ad.relu(instance_norm(ad.conv_transpose2d(
            t, params[f"dec{i}.w"], params[f"dec{i}.b"], stride=2, pad=1)))
    t = ad.conv2d(t, params["out.w"], params["out.b"], pad=1)
    return (ad.tanh(t) + 1.0) * 0.5


def generate_augmented(gen_weights: ModelWeights, x_s, x_t) -> np.ndarray:
    """Restyle source images toward the target style (inference)."""
    x_s = np.asarray(x_s)
    x_t = np.asarray(x_t)
    if x_s.shape[0] != x_t.shape[0]:
        raise ValueError(
            f"batch mismatch: {x_s.shape[0]} source vs {x_t.shape[0]} target")
    config = GenArchConfig.from_arch(gen_weights.arch)
    return generator_apply(gen_weights.params, config, x_s, x_t).data


def init_discriminator(config: DiscArchConfig, seed: int) -> ModelWeights:
    config.validate()
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    w = config.base_width
    for s in range(config.num_scales):
        cin = config.in_channels
        cout = w
        for i in range(config.num_strided):
            name = f"scale{s}.conv{i}"
            params[f"{name}.w"] = he_conv(rng, 4, 4, cin, cout)
            if config.use_bias:
                params[f"{name}.b"] = zeros(cout)
            buffers[f"{name}.u"] = _l2norm(rng.standard_normal(cout), 1e-12) \
                .astype(np.float32)
            cin, cout = cout, min(cout * 2, 8 * w)
        name = f"scale{s}.score"
        params[f"{name}.w"] = he_conv(rng, 3, 3, cin, 1)
        if config.use_bias:
            params[f"{name}.b"] = zeros(1)
        buffers[f"{name}.u"] = _l2norm(rng.standard_normal(1), 1e-12) \
            .astype(np.float32)
    return ModelWeights(arch=config.to_arch(), params=params, buffers=buffers)


def _sn_conv(params, buffers, name, x, stride, pad, train):
    """Convolution whose kernel is divided by its power-iteration sigma.

    The u/v vectors are treated as constants; the division itself stays
    on the graph so the normalization is differentiated exactly. With
    train=True one power iteration refreshes the persistent u buffer.
    """
    wv = ad.as_var(params[f"{name}.w"])
    kh, kw, cin, cout = wv.data.shape
    w2d = wv.data.transpose(3, 0, 1, 2).reshape(cout, -1)
    u = buffers[f"{name}.u"].astype(w2d.dtype)
    if train:
        _, u, v = estimate_sigma(w2d, u, power_iters=1)
        buffers[f"{name}.u"] = u.astype(np.float32)
    else:
        v = _l2norm(w2d.T @ u, 1e-12)
    # sigma as a graph node: <W, u v^T> with u, v detached
    uv = (np.outer(u, v).reshape(cout, kh, kw, cin)
          .transpose(1, 2, 3, 0))
    sigma = ad.vsum(wv * uv)
    if float(sigma.data) <= 1e-12:
        sigma = sigma + 1e-12
    w_sn = wv * ad.power(sigma, -1.0)
    bias = params.get(f"{name}.b")
    return ad.conv2d(x, w_sn, bias, stride=stride, pad=pad)


def discriminator_apply(params, buffers, config: DiscArchConfig, image,
                        train=False):
    """Patch-score maps, one per scale (full and halved resolutions)."""
    x = ad.as_var(image)
    scores = []
    for s in range(config.num_scales):
        t = x
        if s > 0:
            b, h, w, _ = t.data.shape
            t = segmodels.upsample(t, h // 2 ** s, w // 2 ** s)
        for i in range(config.num_strided):
            t = ad.leaky_relu(
                _sn_conv(params, buffers, f"scale{s}.conv{i}", t, 2, 1, train), 0.2)
        scores.append(_sn_conv(params, buffers, f"scale{s}.score", t, 1, 1, train))
    return scores


def discriminator_forward(disc_weights: ModelWeights, image, train=False):
    """Inference entry point: list of ndarray score maps, one per scale."""
    config = DiscArchConfig.from_arch(disc_weights.arch)
    outs = discriminator_apply(disc_weights.params, disc_weights.buffers,
                               config, np.asarray(image), train=train)
    return [o.data for o in outs]


# -- losses -------------------------------------------------------------------

def _mean_sq(x, target):
    x = ad.as_var(x)
    d = x - target if target != 0.0 else x
    return ad.vmean(d * d)


def lsgan_d_loss(scores_fake, scores_real):
    """Least-squares discriminator objective: fake -> 0, real -> 1,
    averaged over scales."""
    if not scores_fake or not scores_real:
        raise ValueError("lsgan_d_loss needs non-empty score lists")
    if len(scores_fake) != len(scores_real):
        raise ValueError(
            f"scale mismatch: {len(scores_fake)} fake vs {len(scores_real)} real")
    terms = [_mean_sq(f, 0.0) + _mean_sq(r, 1.0)
             for f, r in zip(scores_fake, scores_real)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(terms))
    return total if isinstance(total, Var) and total.requires_grad else float(total.data)


def lsgan_g_loss(scores_fake):
    """Least-squares generator objective: fake scores driven toward 1."""
    if not scores_fake:
        raise ValueError("lsgan_g_loss needs a non-empty score list")
    terms = [_mean_sq(f, 1.0) for f in scores_fake]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(terms))
    return total if isinstance(total, Var) and total.requires_grad else float(total.data)


def _constraint_terms(fseg: ModelWeights, x_aug, y_s):
    """(loss, argmax agreement) of the frozen segmenter on restyled images."""
    if not fseg.frozen:
        raise ValueError("constraint segmenter must be frozen")
    config = segmodels.SegArchConfig.from_arch(fseg.arch)
    _, full = segmodels.segment_logits(fseg.params, config, x_aug, mode="eval")
    probs = segmodels.softmax_probs(full)
    loss = segmodels.cross_entropy(probs, y_s)
    agreement = float(np.mean(np.argmax(probs.data, axis=-1) == np.asarray(y_s)))
    return loss, agreement


def semantic_constraint_loss(fseg: ModelWeights, x_aug, y_s):
    """Cross-entropy of the frozen constraint segmenter on restyled images.

    Gradients flow only into x_aug (and through it into the generator);
    the segmenter parameters are plain arrays, never graph leaves.
    """
    loss, _ = _constraint_terms(fseg, x_aug, y_s)
    if isinstance(x_aug, Var):
        return loss
    return float(loss.data)


# -- training loop -------------------------------------------------------------

def train_tgcfda(dataset, fseg: ModelWeights, gen_config: GenArchConfig,
                 disc_config: DiscArchConfig, schedule, lambda_sem=10.0,
                 seed: int = 0):
    """Adversarial training of the restyling generator.

    Per step: the discriminator minimizes the least-squares loss on
    (restyled, real-target) batches, then the generator minimizes its
    adversarial term plus lambda_sem times the semantic-constraint loss.
    Returns (generator, discriminator, per-step log rows).
    """
    if not fseg.frozen:
        raise ValueError("train_tgcfda requires a frozen constraint segmenter")
    gen = init_generator(gen_config, np.random.default_rng([seed, 11])
                         .integers(2 ** 31))
    disc = init_discriminator(disc_config, np.random.default_rng([seed, 12])
                              .integers(2 ** 31))
    opt_g = Adam(lr=schedule.lr, beta1=0.5)
    opt_d = Adam(lr=schedule.lr, beta1=0.5)
    log = []
    batch = schedule.batch_size
    for step in range(schedule.steps):
        opt_g.lr = opt_d.lr = schedule.lr_at(step)
        x_s, y_s = dataset.source.sample_batch(
            batch, np.random.default_rng([seed, 21, step]))
        x_t = dataset.target.sample_batch(
            batch, np.random.default_rng([seed, 22, step]))

        # generator forward (graph kept for the later G update)
        g_pvars = wrap_params(gen)
        x_aug = generator_apply(g_pvars, gen_config, x_s, x_t)

        # discriminator update: one forward on [fake; real], one power iteration
        d_pvars = wrap_params(disc)
        stacked = np.concatenate([x_aug.data, x_t], axis=0)
        d_scores = discriminator_apply(d_pvars, disc.buffers, disc_config,
                                       stacked, train=True)
        fake_scores = [ad.index(s, np.s_[:batch]) for s in d_scores]
        real_scores = [ad.index(s, np.s_[batch:]) for s in d_scores]
        d_loss = lsgan_d_loss(fake_scores, real_scores)
        d_loss.backward()
        opt_d.step(disc.params, collect_grads(d_pvars))

        # generator update through the (frozen-this-half-step) discriminator
        g_scores = discriminator_apply(disc.params, disc.buffers, disc_config,
                                       x_aug, train=False)
        g_adv = lsgan_g_loss(g_scores)
        sem, agreement = _constraint_terms(fseg, x_aug, y_s)
        g_loss = g_adv + sem * float(lambda_sem)
        g_loss.backward()
        opt_g.step(gen.params, collect_grads(g_pvars))

        row = {"step": step, "d_loss": float(d_loss.data),
               "g_adv_loss": float(g_adv.data), "sem_loss": float(sem.data),
               "fseg_agreement": agreement}
        if not all(np.isfinite(v) for v in row.values()):
            raise TrainingError(
                f"augmentation GAN diverged at step {step}: "
                f"d={row['d_loss']:.4g} g_adv={row['g_adv_loss']:.4g} "
                f"sem={row['sem_loss']:.4g}")
        log.append(row)
    return gen, disc, log
