"""Network plumbing: weight containers, initializers, Adam, checkpoints.

Networks are purely functional: a ModelWeights holds named float32
arrays, and each architecture module provides build/forward functions
over it. That keeps weight averaging, hashing and serialization trivial
dict arithmetic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var
from .errors import DataError

CHECKPOINT_MAGIC = b"SGCKPT01"
CHECKPOINT_VERSION = 1


@dataclass
class ModelWeights:
    """Named parameters plus non-trainable buffers for one network.

    `arch` is a plain-dict architecture descriptor; two weight sets with
    equal descriptors are guaranteed to share parameter names and shapes.
    `frozen` marks weights that trainers must never update (the GAN's
    semantic-constraint segmenter).
    """

    arch: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            arch=json.loads(json.dumps(self.arch)),
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            frozen=self.frozen,
        )

    def astype(self, dtype) -> "ModelWeights":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in out.buffers.items()}
        return out

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def check_finite(self, context=""):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite parameter {name} {context}")


def wrap_params(weights: ModelWeights, trainable: bool = True) -> dict[str, Var]:
    """Wrap every parameter as a graph Var (gradient leaves if trainable)."""
    return {k: Var(v, requires_grad=trainable) for k, v in weights.params.items()}


def collect_grads(param_vars: dict[str, Var]) -> dict[str, np.ndarray]:
    return {
        k: (v.grad if v.grad is not None else np.zeros_like(v.data))
        for k, v in param_vars.items()
    }


def weights_hash(weights: ModelWeights) -> str:
    """SHA-256 over parameter names and raw bytes, order-independent."""
    h = hashlib.sha256()
    for name in sorted(weights.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights.params[name]).tobytes())
    return h.hexdigest()


# -- initializers ----------------------------------------------------------

def he_conv(rng, kh, kw, cin, cout, dtype=np.float32):
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype)


def he_linear(rng, fan_in, fan_out, dtype=np.float32):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def zeros(*shape, dtype=np.float32):
    return np.zeros(shape, dtype=dtype)


def ones(*shape, dtype=np.float32):
    return np.ones(shape, dtype=dtype)


def dropout_mask(rng, shape, rate, dtype=np.float32):
    """Inverted-dropout mask: zeros with prob `rate`, survivors scaled."""
    keep = (rng.random(shape) >= rate).astype(dtype)
    keep /= np.asarray(1.0 - rate, dtype=dtype)
    return keep


@dataclass
class StageSchedule:
    """Budget of one training stage.

    lr_end < lr enables cosine decay across the stage; equal values keep
    the learning rate constant.
    """

    steps: int
    batch_size: int = 8
    lr: float = 1e-3
    lr_end: float = -1.0  # -1 means "same as lr" (no decay)

    def __post_init__(self):
        if self.lr_end < 0:
            self.lr_end = self.lr

    def validate(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(
                f"invalid schedule: steps={self.steps} "
                f"batch={self.batch_size} lr={self.lr}")
        if self.lr_end <= 0 or self.lr_end > self.lr:
            raise ValueError(f"lr_end must be in (0, lr], got {self.lr_end}")

    def lr_at(self, step: int) -> float:
        if self.lr_end == self.lr:
            return self.lr
        frac = min(max(step / max(self.steps - 1, 1), 0.0), 1.0)
        cos = 0.5 * (1.0 + np.cos(np.pi * frac))
        return self.lr_end + (self.lr - self.lr_end) * cos


# -- optimizer --------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer; state keyed on parameter names."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)


# -- checkpoint format -------------------------------------------------------
#
# Single-file layout:
#   8-byte magic | uint32 LE header length | JSON header | raw tensor bytes
# The header lists tensors in write order; data is little-endian float32,
# concatenated with no padding.

def save_checkpoint(weights: ModelWeights, path, step: int = 0):
    entries = []
    blobs = []
    for kind, table in (("param", weights.params), ("buffer", weights.buffers)):
        for name, arr in table.items():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(arr32.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": weights.arch,
        "step": int(step),
        "frozen": bool(weights.frozen),
        "dtype": "<f4",
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ModelWeights, int]:
    try:
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"{path}: not a checkpoint (bad magic)")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            if header["format_version"] != CHECKPOINT_VERSION:
                raise DataError(
                    f"{path}: unsupported checkpoint version {header['format_version']}")
            params, buffers = {}, {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = f.read(4 * count)
                if len(raw) != 4 * count:
                    raise DataError(f"{path}: truncated tensor {entry['name']}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    weights = ModelWeights(
        arch=header["arch"], params=params, buffers=buffers,
        frozen=header.get("frozen", False),
    )
    return weights, header["step"]
