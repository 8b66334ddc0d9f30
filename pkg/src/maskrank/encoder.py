"""Dual-stream encoder with skipped three-level feature fusion.

Images are treated as bags of pixels. The original raster (shifted by -0.5)
and the masked raster each pass through their own per-pixel affine+relu block, the two results are
concatenated per pixel and fed through three shared affine+relu levels.
Each level's output is mean-pooled over pixels; the three pooled vectors are
concatenated, projected to ``dim`` and L2-normalized.

Checkpoint layout (little-endian)::

    b"MRCKPT01" | uint32 config length | config JSON (UTF-8) |
    float64 arrays in declaration order (see ``param_shapes``)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor

CHECKPOINT_MAGIC = b"MRCKPT01"
# subtracted from the original stream only; the masked stream keeps its zero background
ORIGINAL_OFFSET = 0.5


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple = (8, 8, 3)
    stream_width: int = 16
    level_widths: tuple = (32, 32, 32)
    dim: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "level_widths", tuple(int(v) for v in self.level_widths))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C) with positive entries, got {self.input_shape}")
        if len(self.level_widths) != 3:
            raise ValueError("the trunk has exactly three levels")
        if self.dim < 8:
            raise ValueError(f"output dimension must be >= 8, got {self.dim}")
        if self.stream_width < 1 or min(self.level_widths) < 1:
            raise ValueError("layer widths must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["level_widths"] = list(self.level_widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        return cls(
            input_shape=tuple(d["input_shape"]),
            stream_width=d["stream_width"],
            level_widths=tuple(d["level_widths"]),
            dim=d["dim"],
            seed=d.get("seed", 0),
        )


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    c = config.input_shape[2]
    s = config.stream_width
    w1, w2, w3 = config.level_widths
    return {
        "stream_orig.weight": (c, s),
        "stream_orig.bias": (s,),
        "stream_mask.weight": (c, s),
        "stream_mask.bias": (s,),
        "level1.weight": (2 * s, w1),
        "level1.bias": (w1,),
        "level2.weight": (w1, w2),
        "level2.bias": (w2,),
        "level3.weight": (w2, w3),
        "level3.bias": (w3,),
        "proj.weight": (w1 + w2 + w3, config.dim),
        "proj.bias": (config.dim,),
    }


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.arrays) != list(shapes):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class ImagePair:
    original: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        self.original = np.asarray(self.original, dtype=np.float64)
        self.masked = np.asarray(self.masked, dtype=np.float64)
        if self.original.shape != self.masked.shape:
            raise ValueError(f"original {self.original.shape} and masked {self.masked.shape} shapes differ")


def init_params(config: EncoderConfig, rng: np.random.Generator | None = None) -> EncoderParams:
    """Uniform(-s, s) weights with ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-s, s, size=shape)
    return EncoderParams(config, arrays)


def fuse_levels(f_low: Tensor, f_mid: Tensor, f_high: Tensor) -> Tensor:
    """Skipped fusion: concatenate the pooled outputs of the three trunk levels."""
    return dc.concat([f_low, f_mid, f_high], axis=-1)


def put_on_tape(params: EncoderParams, tape: Tape) -> dict[str, Tensor]:
    return {name: tape.param(name, value) for name, value in params.arrays.items()}


def forward(p: dict[str, Tensor], originals: np.ndarray, masked: np.ndarray) -> Tensor:
    """Encode a batch of (B, H, W, C) raster pairs into (B, dim) unit rows."""
    b = originals.shape[0]
    orig = originals.reshape(b, -1, originals.shape[-1]) - ORIGINAL_OFFSET
    mask = masked.reshape(b, -1, masked.shape[-1])
    tape = p["proj.weight"].tape
    h_orig = dc.relu(dc.affine(tape.constant(orig), p["stream_orig.weight"], p["stream_orig.bias"]))
    h_mask = dc.relu(dc.affine(tape.constant(mask), p["stream_mask.weight"], p["stream_mask.bias"]))
    h = dc.concat([h_orig, h_mask], axis=-1)
    h1 = dc.relu(dc.affine(h, p["level1.weight"], p["level1.bias"]))
    h2 = dc.relu(dc.affine(h1, p["level2.weight"], p["level2.bias"]))
    h3 = dc.relu(dc.affine(h2, p["level3.weight"], p["level3.bias"]))
    fused = fuse_levels(dc.mean_pool(h1, axis=1), dc.mean_pool(h2, axis=1), dc.mean_pool(h3, axis=1))
    return dc.l2_normalize(dc.affine(fused, p["proj.weight"], p["proj.bias"]), axis=-1)


def _check_batch(config: EncoderConfig, originals, masked):
    originals = np.asarray(originals, dtype=np.float64)
    masked = np.asarray(masked, dtype=np.float64)
    if originals.ndim == 3:
        originals, masked = originals[None], masked[None]
    if originals.shape != masked.shape:
        raise ValueError(f"original {originals.shape} and masked {masked.shape} shapes differ")
    if originals.shape[1:] != config.input_shape:
        raise ValueError(f"raster shape {originals.shape[1:]} does not match encoder input {config.input_shape}")
    return originals, masked


def encode_batch(params: EncoderParams, originals, masked, tape: Tape | None = None) -> Tensor:
    """Taped batch encoding; returns a (B, dim) Tensor on ``tape`` (new if None)."""
    originals, masked = _check_batch(params.config, originals, masked)
    tape = Tape() if tape is None else tape
    return forward(put_on_tape(params, tape), originals, masked)


def encode(params: EncoderParams, pair: ImagePair) -> Tensor:
    """Encode one image pair into a taped unit vector of length ``dim``."""
    out = encode_batch(params, pair.original, pair.masked)
    return dc.take(out, 0)


def embed(params: EncoderParams, originals, masked, chunk: int = 256) -> np.ndarray:
    """Untaped inference in chunks; returns (n, dim) float64 unit rows."""
    originals, masked = _check_batch(params.config, originals, masked)
    out = []
    for lo in range(0, originals.shape[0], chunk):
        out.append(encode_batch(params, originals[lo:lo + chunk], masked[lo:lo + chunk]).value)
    if not out:
        return np.zeros((0, params.config.dim))
    return np.concatenate(out)


def sgd_step(params: EncoderParams, grads: dict, lr: float) -> EncoderParams:
    """Plain SGD: ``w <- w - lr * g`` for every parameter."""
    new = {}
    for name, value in params.arrays.items():
        g = np.asarray(grads[name])
        if g.shape != value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {value.shape}")
        new[name] = value - lr * g
    return EncoderParams(params.config, new)


def save_checkpoint(path, params: EncoderParams) -> None:
    cfg = json.dumps(params.config.to_json(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.arrays.values()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> EncoderParams:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header at byte {len(buf)}")
    (n,) = struct.unpack_from("<I", buf, 8)
    off = 12 + n
    if off > len(buf):
        raise CheckpointError(f"{path}: truncated config block at byte {len(buf)}")
    try:
        config = EncoderConfig.from_json(json.loads(buf[12:off].decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from exc
    arrays = {}
    for name, shape in param_shapes(config).items():
        count = int(np.prod(shape))
        if off + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated array {name} at byte {off}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(buf):
        raise CheckpointError(f"{path}: trailing bytes at byte {off}")
    return EncoderParams(config, arrays)
