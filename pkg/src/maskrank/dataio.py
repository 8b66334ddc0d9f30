"""Manifests, mask application, synthetic corpora and feature-file persistence.

Feature file layout (all integers little-endian)::

    b"MRFEAT01"            8-byte magic (format version 1)
    n         uint64       number of records
    d         uint32       feature dimension
    n x record:
        uint32 len + UTF-8 identity
        uint32 len + UTF-8 camera
        d x float64 (little-endian)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .evaluation import FeatureSet

FEATURE_MAGIC = b"MRFEAT01"
_HEADER = struct.Struct("<8sQI")
_U32 = struct.Struct("<I")
SPLITS = ("train", "query", "gallery")
MASK_THRESHOLD = 0.5


class FeatureFormatError(ValueError):
    """Malformed feature file; the message names the byte offset."""


class DataError(ValueError):
    """Bad manifest, raster or mask input."""


# ----------------------------------------------------------------- masking


def apply_mask(image, mask) -> np.ndarray:
    """Zero every pixel whose mask value is not above 0.5."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if image.ndim == 2:
        image = image[:, :, None]
    if mask.shape != image.shape[:2]:
        raise DataError(f"mask shape {mask.shape} does not match image shape {image.shape[:2]}")
    return np.where((mask > MASK_THRESHOLD)[:, :, None], image, 0.0)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestRecord:
    image: str
    id: str
    cam: str
    split: str = "train"
    mask: str | None = None

    def __post_init__(self):
        self.id = str(self.id)
        self.cam = str(self.cam)
        if not self.id or not self.cam:
            raise DataError("identity and camera labels must be non-empty")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        out = {"image": self.image}
        if self.mask is not None:
            out["mask"] = self.mask
        out.update(id=self.id, cam=self.cam, split=self.split)
        return out


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=False) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    ManifestRecord(
                        image=obj["image"], id=obj["id"], cam=obj["cam"],
                        split=obj.get("split", "train"), mask=obj.get("mask"),
                    )
                )
            except (KeyError, json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return records


# ----------------------------------------------------------------- rasters


def write_raster(path, array) -> None:
    """Write a [0, 1] raster as 8-bit PGM (H x W or H x W x 1) or PPM (H x W x 3)."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if not (a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 3)):
        raise DataError(f"only 1- or 3-channel rasters can be written, got shape {a.shape}")
    u8 = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L" if u8.ndim == 2 else "RGB").save(path, format="PPM")


def read_raster(path) -> np.ndarray:
    """Read a portable pixmap as float64 in [0, 1], always H x W x C."""
    try:
        with Image.open(path) as im:
            a = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    a = a.astype(np.float64) / 255.0
    return a[:, :, None] if a.ndim == 2 else a


def quantize(a) -> np.ndarray:
    """Round to the 8-bit grid so in-memory rasters equal their file round trip."""
    return np.clip(np.rint(np.asarray(a) * 255.0), 0, 255) / 255.0


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic re-id corpus.

    Each identity has a latent center; each image perturbs it by ``sigma``.
    The centered foreground box is painted with two colors decoded from the
    latent (upper and lower half). The background left and right of the box
    holds two distractor patches decoded the same way from a camera-specific
    latent plus ``background_noise``, so per pixel they are indistinguishable
    from foreground colors. Images alternate between two cameras.
    With ``sigma``, ``background_noise``, ``pixel_noise`` and ``camera_shift``
    all zero, every image of an identity is the same raster.
    ``test_identities`` extra identities go to query (first image of each
    camera) and gallery (the rest).
    """

    identities: int = 60
    images_per_identity: int = 8
    latent_dim: int = 8
    sigma: float = 0.5
    height: int = 8
    width: int = 8
    channels: int = 3
    seed: int = 0
    test_identities: int = 0
    box: tuple = (4, 4)
    background_noise: float = 1.0
    pixel_noise: float = 0.05
    camera_shift: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(int(v) for v in self.box))
        for name in ("identities", "images_per_identity", "latent_dim", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.sigma, self.background_noise, self.pixel_noise, self.camera_shift) < 0:
            raise ValueError("noise levels must be >= 0")
        if self.test_identities < 0:
            raise ValueError("test_identities must be >= 0")
        bh, bw = self.box
        if not (1 <= bh <= self.height and 1 <= bw <= self.width):
            raise ValueError("foreground box must fit in the image")

    def foreground(self) -> np.ndarray:
        bh, bw = self.box
        top, left = (self.height - bh) // 2, (self.width - bw) // 2
        fg = np.zeros((self.height, self.width), dtype=bool)
        fg[top:top + bh, left:left + bw] = True
        return fg


@dataclass
class Corpus:
    images: np.ndarray  # (n, H, W, C) in [0, 1]
    masks: np.ndarray | None  # (n, H, W) in {0, 1}, or None
    identity: np.ndarray
    camera: np.ndarray
    split: np.ndarray

    def __len__(self):
        return len(self.identity)

    def subset(self, split: str) -> "Corpus":
        rows = np.flatnonzero(self.split == split)
        return Corpus(
            self.images[rows],
            None if self.masks is None else self.masks[rows],
            self.identity[rows],
            self.camera[rows],
            self.split[rows],
        )

    def masked(self) -> np.ndarray:
        """Masked-stream input; all zeros when the corpus carries no masks."""
        if self.masks is None:
            return np.zeros_like(self.images)
        return np.where(self.masks[..., None] > MASK_THRESHOLD, self.images, 0.0)

    def without_masks(self) -> "Corpus":
        return Corpus(self.images, None, self.identity, self.camera, self.split)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gen_synthetic(spec: SyntheticSpec) -> Corpus:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    H, W, C, L = spec.height, spec.width, spec.channels, spec.latent_dim
    fg = spec.foreground()
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    top_rows = fg.any(axis=1).nonzero()[0]
    upper = fg & (rows < top_rows[0] + (len(top_rows) + 1) // 2)
    lower = fg & ~upper
    bg_left = ~fg & (cols < W // 2)
    bg_right = ~fg & ~bg_left

    gain = 1.5 / np.sqrt(L)
    decode = rng.normal(0.0, gain, size=(2, C, L))
    cam_latent = rng.normal(0.0, 1.0, size=(2, L))
    n_ids = spec.identities + spec.test_identities
    centers = rng.normal(0.0, 1.0, size=(n_ids, L))

    n = n_ids * spec.images_per_identity
    images = np.empty((n, H, W, C))
    masks = np.empty((n, H, W))
    identity, camera, split = [], [], []
    width = len(str(max(n_ids - 1, 0)))
    k = 0
    for i in range(n_ids):
        test = i >= spec.identities
        label = f"t{i - spec.identities:0{width}d}" if test else f"p{i:0{width}d}"
        for j in range(spec.images_per_identity):
            cam = j % 2
            z = centers[i] + spec.sigma * rng.normal(size=L)
            b = spec.camera_shift * cam_latent[cam] + spec.background_noise * rng.normal(size=(2, L))
            raw = np.zeros((H, W, C))
            raw[upper] = decode[0] @ z
            raw[lower] = decode[1] @ z
            raw[bg_left] = decode[0] @ b[0]
            raw[bg_right] = decode[1] @ b[1]
            raw += spec.pixel_noise * rng.normal(size=raw.shape)
            images[k] = quantize(_sigmoid(raw))
            masks[k] = fg
            identity.append(label)
            camera.append(f"c{cam}")
            split.append("train" if not test else ("query" if j < 2 else "gallery"))
            k += 1
    return Corpus(images, masks, np.array(identity), np.array(camera), np.array(split))


def write_corpus(corpus: Corpus, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write rasters, masks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if corpus.masks is not None:
        (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    ext = "ppm" if corpus.images.shape[-1] == 3 else "pgm"
    for k in range(len(corpus)):
        img_rel = f"images/{k:06d}.{ext}"
        write_raster(out / img_rel, corpus.images[k])
        mask_rel = None
        if corpus.masks is not None:
            mask_rel = f"masks/{k:06d}.pgm"
            write_raster(out / mask_rel, corpus.masks[k])
        records.append(
            ManifestRecord(image=img_rel, id=corpus.identity[k], cam=corpus.camera[k],
                           split=corpus.split[k], mask=mask_rel)
        )
    path = out / manifest_name
    write_manifest(path, records)
    return path


def load_corpus(manifest_path, use_masks: bool = True) -> Corpus:
    """Load every record of a manifest into memory.

    Records without a mask get an all-zero mask (the masked stream sees zeros).
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = read_manifest(manifest_path)
    if not records:
        raise DataError(f"{manifest_path}: manifest is empty")
    images, masks = [], []
    for rec in records:
        img = read_raster(root / rec.image)
        if rec.mask is not None and use_masks:
            m = read_raster(root / rec.mask)[:, :, 0]
            if m.shape != img.shape[:2]:
                raise DataError(f"{rec.mask}: mask shape {m.shape} does not match image {img.shape[:2]}")
            m = (m > MASK_THRESHOLD).astype(np.float64)
        else:
            m = np.zeros(img.shape[:2])
        if images and img.shape != images[0].shape:
            raise DataError(f"{rec.image}: raster shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        masks.append(m)
    return Corpus(
        np.stack(images),
        np.stack(masks),
        np.array([r.id for r in records]),
        np.array([r.cam for r in records]),
        np.array([r.split for r in records]),
    )


# ------------------------------------------------------------ feature files


def write_features(path, fs: FeatureSet) -> None:
    n = len(fs)
    d = fs.features.shape[1] if fs.features.ndim == 2 else 0
    parts = [_HEADER.pack(FEATURE_MAGIC, n, d)]
    feats = np.ascontiguousarray(fs.features, dtype="<f8")
    for k in range(n):
        for label in (fs.identity[k], fs.camera[k]):
            raw = str(label).encode("utf-8")
            parts.append(_U32.pack(len(raw)))
            parts.append(raw)
        parts.append(feats[k].tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> FeatureSet:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"truncated header at byte {len(buf)} (need {_HEADER.size})")
    magic, n, d = _HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r} at byte 0")
    off = _HEADER.size
    ids, cams = [], []
    feats = np.empty((n, d))

    def need(k):
        if off + k > len(buf):
            raise FeatureFormatError(f"truncated record at byte {off} (need {k} bytes, have {len(buf) - off})")

    for k in range(n):
        labels = []
        for _ in range(2):
            need(4)
            (length,) = _U32.unpack_from(buf, off)
            off += 4
            need(length)
            try:
                labels.append(buf[off:off + length].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FeatureFormatError(f"invalid UTF-8 label at byte {off}") from exc
            off += length
        need(8 * d)
        feats[k] = np.frombuffer(buf, dtype="<f8", count=d, offset=off)
        off += 8 * d
        ids.append(labels[0])
        cams.append(labels[1])
    if off != len(buf):
        raise FeatureFormatError(f"trailing bytes at byte {off}")
    return FeatureSet(feats, np.array(ids, dtype=str), np.array(cams, dtype=str))


def spec_to_json(spec: SyntheticSpec) -> dict:
    out = asdict(spec)
    out["box"] = list(spec.box)
    return out
