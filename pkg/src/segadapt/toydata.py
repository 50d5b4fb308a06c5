"""Procedural two-domain segmentation benchmark.

Scenes are flat-shaded: a background, one horizontal road stripe
(majority class) and a handful of non-overlapping shapes (minority
classes). The target domain reuses the exact same layout sampler and
differs only photometrically, so a source label map stays valid for the
matching target scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

MANIFEST_VERSION = 1

# offsets separating the scene-seed ranges of the three splits
_SPLIT_OFFSETS = {"source": 0, "target": 2_000_000, "target_eval": 4_000_000}

DEFAULT_PALETTE = [
    [0.16, 0.21, 0.26],  # background: dark blue-gray
    [0.46, 0.41, 0.35],  # road: warm gray
    [0.78, 0.24, 0.20],  # circles: red
    [0.22, 0.66, 0.30],  # rectangles: green
    [0.25, 0.38, 0.82],  # triangles: blue
]


@dataclass
class DomainShift:
    """Purely photometric restyling parameters for the target domain."""

    hue_rotation: float = 0.0        # degrees around the gray axis
    texture_noise_scale: float = 4.0  # correlation length, pixels
    texture_noise_amplitude: float = 0.0  # fraction of dynamic range
    blur_sigma: float = 0.0          # pixels
    brightness_jitter: float = 0.0   # additive fraction, sampled in +/- range
    contrast_jitter: float = 0.0     # multiplicative fraction around 0.5
    seed: int = 0


@dataclass
class SceneSpec:
    image_height: int = 64
    image_width: int = 128
    num_classes: int = 5
    shapes_per_scene: tuple[int, int] = (2, 5)
    class_palette: list[list[float]] = field(
        default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    color_jitter: float = 0.06  # per-instance flat lightness scaling
    shift_params: DomainShift = field(default_factory=DomainShift)

    def validate(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ConfigError(
                f"scene dimensions must be positive, got "
                f"{self.image_height}x{self.image_width}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.class_palette) != self.num_classes:
            raise ConfigError(
                f"palette has {len(self.class_palette)} colors for "
                f"{self.num_classes} classes")
        lo, hi = self.shapes_per_scene
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad shapes_per_scene range {self.shapes_per_scene}")


@dataclass
class DatasetManifest:
    source_labeled: list[tuple[str, str]]
    target_unlabeled: list[str]
    target_eval_labeled: list[tuple[str, str]]
    scene_spec: SceneSpec
    format_version: int = MANIFEST_VERSION
    scene_seeds: dict = field(default_factory=dict)


def _paint(image, label, mask, color, cls):
    image[mask] = color
    label[mask] = cls


def _shape_mask(kind, h, w, cy, cx, ry, rx):
    yy, xx = np.ogrid[:h, :w]
    if kind == 0:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= ry * ry
    if kind == 1:  # rectangle
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # upward triangle: apex at cy-ry, base at cy+ry
    inside_y = (yy >= cy - ry) & (yy <= cy + ry)
    half_width = (yy - (cy - ry)) * (rx / max(2 * ry, 1))
    return inside_y & (np.abs(xx - cx) <= half_width)


def generate_scene(spec: SceneSpec, seed: int):
    """Render one scene: float image in [0,1] (H,W,3) plus int label map (H,W).

    Bit-identical for identical (spec, seed).
    """
    spec.validate()
    if seed < 0:
        raise ConfigError(f"scene seed must be >= 0, got {seed}")
    rng = np.random.default_rng(seed)
    h, w, c = spec.image_height, spec.image_width, spec.num_classes
    palette = np.asarray(spec.class_palette, dtype=np.float64)

    def shaded(cls):
        tone = 1.0 + rng.uniform(-spec.color_jitter, spec.color_jitter)
        return np.clip(palette[cls] * tone, 0.0, 1.0)

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = shaded(0)
    label = np.zeros((h, w), dtype=np.uint8)

    if spec.shapes_per_scene[1] == 0:
        # an empty-foreground spec renders pure background
        return image.astype(np.float32), label

    road_box = None
    if c >= 2:
        band = max(2, int(round(rng.uniform(0.12, 0.20) * h)))
        top = int(round(rng.uniform(0.55, 0.80 - band / h) * h))
        _paint(image, label, (slice(top, top + band), slice(None)), shaded(1), 1)
        road_box = (top, top + band)

    n_shapes = int(rng.integers(spec.shapes_per_scene[0],
                                spec.shapes_per_scene[1] + 1))
    placed = []  # bounding boxes (y0,y1,x0,x1)
    for _ in range(n_shapes):
        if c <= 2:
            break
        cls = int(rng.integers(2, c))
        kind = (cls - 2) % 3
        for _attempt in range(20):
            ry = int(rng.integers(5, max(6, h // 5)))
            rx = int(rng.integers(5, max(6, h // 4))) if kind != 0 else ry
            cy = int(rng.integers(ry + 1, h - ry - 1))
            cx = int(rng.integers(rx + 1, w - rx - 1))
            box = (cy - ry, cy + ry + 1, cx - rx, cx + rx + 1)
            if road_box and not (box[1] <= road_box[0] or box[0] >= road_box[1]):
                continue
            if any(not (box[1] <= b[0] or box[0] >= b[1]
                        or box[3] <= b[2] or box[2] >= b[3]) for b in placed):
                continue
            mask = _shape_mask(kind, h, w, cy, cx, ry, rx)
            _paint(image, label, mask, shaded(cls), cls)
            placed.append(box)
            break

    return image.astype(np.float32), label


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation about the gray axis; rows corrected to sum to exactly 1
    so achromatic pixels are fixed points."""
    theta = np.deg2rad(degrees)
    a = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    rot = (np.cos(theta) * np.eye(3) + np.sin(theta) * k
           + (1 - np.cos(theta)) * np.outer(a, a))
    rot -= (rot.sum(axis=1, keepdims=True) - 1.0) / 3.0
    return rot


def apply_domain_shift(image: np.ndarray, shift: DomainShift, seed: int) -> np.ndarray:
    """Restyle an image; the label map of the underlying scene is untouched.

    Deterministic in (image, shift, seed); an all-zero shift is an exact
    identity. Output is clipped to [0,1].
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H,W,3) image, got {image.shape}")
    rng = np.random.default_rng([int(shift.seed), int(seed)])
    out = image.astype(np.float64)
    touched = False

    if shift.hue_rotation != 0.0:
        out = out @ _hue_matrix(shift.hue_rotation).T
        touched = True
    if shift.contrast_jitter != 0.0:
        factor = 1.0 + rng.uniform(-shift.contrast_jitter, shift.contrast_jitter)
        out = (out - 0.5) * factor + 0.5
        touched = True
    if shift.brightness_jitter != 0.0:
        out = out + rng.uniform(-shift.brightness_jitter, shift.brightness_jitter)
        touched = True
    if shift.texture_noise_amplitude > 0.0:
        noise = rng.standard_normal(image.shape[:2])
        noise = gaussian_filter(noise, sigma=shift.texture_noise_scale, mode="reflect")
        noise /= max(noise.std(), 1e-12)
        out = out + shift.texture_noise_amplitude * noise[:, :, None]
        touched = True
    if shift.blur_sigma > 0.0:
        out = gaussian_filter(out, sigma=(shift.blur_sigma, shift.blur_sigma, 0),
                              mode="nearest")
        touched = True

    if not touched:
        return image.copy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- on-disk format ---------------------------------------------------------

def _write_png(path: Path, array: np.ndarray):
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Deterministic per-scene seed; split ranges never overlap."""
    return int(base_seed) * 10_000_000 + _SPLIT_OFFSETS[split] + int(index)


def build_dataset(spec: SceneSpec, counts, out_dir, seed: int) -> DatasetManifest:
    """Render and write the full benchmark; returns the manifest.

    counts = (n_source, n_target_unlabeled, n_target_eval). Re-running
    with identical inputs reproduces identical bytes.
    """
    spec.validate()
    n_s, n_t, n_eval = counts
    if min(n_s, n_t, n_eval) <= 0:
        raise ConfigError(f"split counts must be positive, got {counts}")
    root = Path(out_dir)
    for sub in ("source/images", "source/labels", "target/images",
                "target_eval/images", "target_eval/labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest([], [], [], spec, scene_seeds={
        "source": [], "target": [], "target_eval": []})

    def render(split, index, shifted):
        s = scene_seed(seed, split, index)
        image, label = generate_scene(spec, s)
        if shifted:
            image = apply_domain_shift(image, spec.shift_params, seed=s)
        manifest.scene_seeds[split].append(s)
        return image, label

    for i in range(n_s):
        image, label = render("source", i, shifted=False)
        img_rel = f"source/images/{i:05d}.png"
        lab_rel = f"source/labels/{i:05d}.png"
        _write_png(root / img_rel, _to_u8(image))
        _write_png(root / lab_rel, label)
        manifest.source_labeled.append((img_rel, lab_rel))

    for i in range(n_t):
        image, _ = render("target", i, shifted=True)
        img_rel = f"target/images/{i:05d}.png"
        _write_png(root / img_rel, _to_u8(image))
        manifest.target_unlabeled.append(img_rel)

    for i in range(n_eval):
        image, label = render("target_eval", i, shifted=True)
        img_rel = f"target_eval/images/{i:05d}.png"
        lab_rel = f"target_eval/labels/{i:05d}.png"
        _write_png(root / img_rel, _to_u8(image))
        _write_png(root / lab_rel, label)
        manifest.target_eval_labeled.append((img_rel, lab_rel))

    payload = asdict(manifest)
    with open(root / "manifest.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return manifest


class LabeledSplit:
    """Images plus aligned label maps, loaded as uint8 arrays."""

    def __init__(self, images, labels):
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.images.shape[0]

    def sample_batch(self, batch_size, rng):
        idx = rng.integers(0, len(self), size=batch_size)
        x = self.images[idx].astype(np.float32) / 255.0
        return x, self.labels[idx].astype(np.int64)


class UnlabeledSplit:
    """Images only; this split carries no labels anywhere in memory."""

    def __init__(self, images):
        self.images = images

    def __len__(self):
        return self.images.shape[0]

    def sample_batch(self, batch_size, rng):
        idx = rng.integers(0, len(self), size=batch_size)
        return self.images[idx].astype(np.float32) / 255.0


class ToyDataset:
    def __init__(self, spec, source, target, target_eval):
        self.spec = spec
        self.source = source
        self.target = target
        self.target_eval = target_eval


def _read_png(path: Path, expect_hw, channels) -> np.ndarray:
    if not path.exists():
        raise DataError(f"dataset file missing: {path}")
    try:
        arr = np.asarray(Image.open(path))
    except OSError as exc:
        raise DataError(f"corrupt raster {path}: {exc}") from exc
    if arr.shape[:2] != expect_hw or (channels == 3) != (arr.ndim == 3):
        raise DataError(f"{path}: unexpected raster shape {arr.shape}")
    return arr


def load_dataset(manifest_path) -> ToyDataset:
    """Load a built dataset into memory with typed split handles."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest missing: {manifest_path}")
    with open(manifest_path) as f:
        payload = json.load(f)
    if payload.get("format_version") != MANIFEST_VERSION:
        raise DataError(
            f"unsupported manifest version {payload.get('format_version')} "
            f"(expected {MANIFEST_VERSION})")
    raw_spec = dict(payload["scene_spec"])
    raw_spec["shift_params"] = DomainShift(**raw_spec["shift_params"])
    raw_spec["shapes_per_scene"] = tuple(raw_spec["shapes_per_scene"])
    spec = SceneSpec(**raw_spec)
    root = manifest_path.parent
    hw = (spec.image_height, spec.image_width)

    def load_labeled(pairs):
        images = np.stack([_read_png(root / ip, hw, 3) for ip, _ in pairs])
        labels = np.stack([_read_png(root / lp, hw, 1) for _, lp in pairs])
        return LabeledSplit(images, labels)

    source = load_labeled(payload["source_labeled"])
    target = UnlabeledSplit(
        np.stack([_read_png(root / p, hw, 3) for p in payload["target_unlabeled"]]))
    target_eval = load_labeled(payload["target_eval_labeled"])
    return ToyDataset(spec, source, target, target_eval)
