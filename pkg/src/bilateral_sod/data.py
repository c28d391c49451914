"""NetPBM image IO, the synthetic saliency corpus, augmentation and batching.

Corpus layout::

    <root>/images/<stem>.ppm   binary P6, maxval 255
    <root>/masks/<stem>.pgm    binary P5, maxval 255
    <root>/manifest.txt        one stem per line
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .autograd.functional import bilinear_matrix

SCALES = (0.75, 1.0, 1.25)
CROP_RATIO = 0.9
FG_FRACTION = (0.05, 0.6)


class NetpbmError(ValueError):
    pass


# ---------------------------------------------------------------- netpbm

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError("header ends early")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode a binary P5/P6 byte string into an (H, W) or (H, W, 3) uint8 array."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic number {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(buf, pos)
        if not token.isdigit():
            raise NetpbmError(f"malformed header field {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = buf[pos:pos + expected]
    if len(payload) < expected:
        raise NetpbmError(f"truncated payload: {len(payload)} of {expected} bytes")
    data = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def encode_netpbm(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {array.dtype}")
    if array.ndim == 2:
        magic = b"P5"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {array.shape}")
    h, w = array.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(array).tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    img = decode_netpbm(Path(path).read_bytes())
    if img.ndim != 3:
        raise NetpbmError(f"{path} is not a colour (P6) image")
    return img


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    img = decode_netpbm(Path(path).read_bytes())
    if img.ndim != 2:
        raise NetpbmError(f"{path} is not a greyscale (P5) image")
    return img


def write_netpbm(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(array))


def to_uint8(values: np.ndarray) -> np.ndarray:
    """``round(255 v)`` of values in [0, 1]."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_saliency(path: str | os.PathLike, p: np.ndarray) -> None:
    write_netpbm(path, to_uint8(p))


# ---------------------------------------------------------------- samples

@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray   # (H, W) in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape[:2]} and mask {self.mask.shape} differ in size")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")


@dataclass
class DatasetManifest:
    root: Path
    stems: list[str]
    split: str = "train"

    @property
    def pairs(self) -> list[tuple[Path, Path]]:
        return [(self.root / "images" / f"{s}.ppm", self.root / "masks" / f"{s}.pgm") for s in self.stems]

    def write(self) -> None:
        (self.root / "manifest.txt").write_text("".join(f"{s}\n" for s in self.stems))

    @classmethod
    def read(cls, root: str | os.PathLike, split: str = "train") -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.txt"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.txt in {root}")
        stems = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        return cls(root, stems, split)


def load_sample(image_path: Path, mask_path: Path) -> Sample:
    image = read_ppm(image_path).astype(np.float32) / 255.0
    mask = (read_pgm(mask_path) >= 128).astype(np.float32)
    return Sample(image, mask, Path(image_path).stem)


def load_dataset(root: str | os.PathLike, split: str = "train") -> list[Sample]:
    manifest = DatasetManifest.read(root, split)
    return [load_sample(img, msk) for img, msk in manifest.pairs]


def save_sample(root: Path, sample: Sample) -> None:
    write_netpbm(root / "images" / f"{sample.id}.ppm", to_uint8(sample.image))
    write_netpbm(root / "masks" / f"{sample.id}.pgm", to_uint8(sample.mask))


# ---------------------------------------------------------------- synthetic corpus

def _ellipse(yy, xx, rng, size):
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.1, 0.3, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _rounded_rect(yy, xx, rng, size):
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    hy, hx = rng.uniform(0.1, 0.28, size=2) * size
    r = rng.uniform(0.1, 0.5) * min(hy, hx)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.abs(dx * np.cos(theta) + dy * np.sin(theta)) - (hx - r)
    v = np.abs(-dx * np.sin(theta) + dy * np.cos(theta)) - (hy - r)
    outside = np.hypot(np.maximum(u, 0), np.maximum(v, 0))
    inside = np.minimum(np.maximum(u, v), 0)
    return outside + inside - r <= 0.0


def synthesize(rng: np.random.Generator, size: int, max_tries: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair: textured gradient background with 1-3 solid-ish shapes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(max_tries):
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = ((xx * np.cos(angle) + yy * np.sin(angle)) / size + 1) / 2
        freq = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / size
        wave = 0.08 * np.sin(xx * freq[0] + rng.uniform(0, 2 * np.pi)) * np.cos(yy * freq[1])
        background = c0 + (c1 - c0) * ramp[..., None] + wave[..., None]
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            draw = _ellipse if rng.random() < 0.5 else _rounded_rect
            mask |= draw(yy, xx, rng, size)
        fraction = mask.mean()
        if not FG_FRACTION[0] <= fraction <= FG_FRACTION[1]:
            continue
        bg_mean = background.mean(axis=(0, 1))
        for _ in range(100):
            fg_color = rng.uniform(0.0, 1.0, size=3)
            if np.linalg.norm(fg_color - bg_mean) >= 0.5:
                break
        else:
            continue
        shade = 0.06 * np.sin(yy * freq[1] * 2)[..., None]
        image = np.where(mask[..., None], fg_color + shade, background)
        image = image + rng.normal(0.0, 0.03, size=image.shape)
        return np.clip(image, 0.0, 1.0), mask.astype(np.float32)
    raise RuntimeError(f"could not draw a valid sample in {max_tries} tries")


def generate_synthetic(out: str | os.PathLike, n: int, size: int = 64, seed: int = 0,
                       split: str = "train") -> DatasetManifest:
    """Write ``n`` synthetic samples under ``out``; sample ``i`` depends only on ``(seed, i)``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if size % 32:
        raise ValueError(f"size {size} is not a multiple of 32")
    root = Path(out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    stems = []
    for i in range(n):
        image, mask = synthesize(np.random.default_rng([seed, i]), size)
        stem = f"{i:05d}"
        save_sample(root, Sample(image, mask, stem))
        stems.append(stem)
    manifest = DatasetManifest(root, stems, split)
    manifest.write()
    return manifest


# ---------------------------------------------------------------- augmentation

def resize_array(a: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Half-pixel bilinear resize of an (H, W) or (H, W, C) array."""
    a = np.asarray(a)
    out_h, out_w = size
    rows = bilinear_matrix(a.shape[0], out_h)
    cols = bilinear_matrix(a.shape[1], out_w)
    flat = a.reshape(a.shape[0], a.shape[1], -1).astype(np.float64)
    out = np.einsum("ih,hwc,jw->ijc", rows, flat, cols)
    return out.reshape((out_h, out_w) + a.shape[2:])


def choose_scale(rng: np.random.Generator, base: int) -> int:
    """One jittered side length per batch, rounded to a multiple of 32."""
    scale = SCALES[int(rng.integers(len(SCALES)))]
    return max(32, int(np.floor(base * scale / 32 + 0.5)) * 32)


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_ratio: float = CROP_RATIO
    enabled: bool = True


def augment(sample: Sample, rng: np.random.Generator, out_size: int,
            cfg: AugmentConfig = AugmentConfig(), force_flip: Optional[bool] = None) -> Sample:
    """Flip, crop to ``crop_ratio`` of each side, and resize to ``out_size``.

    The same geometry is applied to image and mask; the mask is thresholded at
    0.5 afterwards.
    """
    image, mask = sample.image, sample.mask
    flip = rng.random() < cfg.flip_prob if force_flip is None else force_flip
    if flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    h, w = mask.shape
    ch, cw = max(1, int(round(h * cfg.crop_ratio))), max(1, int(round(w * cfg.crop_ratio)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    image = image[top:top + ch, left:left + cw]
    mask = mask[top:top + ch, left:left + cw]
    image = np.clip(resize_array(image, (out_size, out_size)), 0.0, 1.0).astype(np.float32)
    mask = (resize_array(mask, (out_size, out_size)) >= 0.5).astype(np.float32)
    return Sample(image, mask, sample.id)


def flip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)


# ---------------------------------------------------------------- batching

def normalize_image(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> (3, H, W) with mean 0.5 and std 0.5 removed."""
    return ((np.asarray(image, dtype=np.float32) - 0.5) / 0.5).transpose(2, 0, 1)


@dataclass
class SampleBatch:
    images: np.ndarray  # (B, 3, H, W), normalised
    masks: np.ndarray   # (B, 1, H, W)
    ids: list[str]
    meta: dict = field(default_factory=dict)


def collate(samples: Sequence[Sample], size: Optional[int] = None, dtype=np.float32) -> SampleBatch:
    images, masks = [], []
    for s in samples:
        image, mask = s.image, s.mask
        if size is not None and mask.shape != (size, size):
            image = np.clip(resize_array(image, (size, size)), 0, 1)
            mask = (resize_array(mask, (size, size)) >= 0.5).astype(np.float32)
        images.append(normalize_image(image))
        masks.append(mask[None])
    return SampleBatch(np.stack(images).astype(dtype), np.stack(masks).astype(dtype), [s.id for s in samples])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def iterate_batches(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int, base_size: int,
                    augment_cfg: Optional[AugmentConfig] = None, dtype=np.float32) -> Iterator[SampleBatch]:
    """Deterministic batches for one epoch; a partial final batch is dropped unless it is the only one.

    Shuffling and augmentation randomness are derived from ``(seed, epoch)``
    alone, so any epoch can be replayed without the preceding ones.
    """
    order = epoch_order(len(samples), seed, epoch)
    rng = np.random.default_rng([seed, epoch, 1])
    n_batches = max(1, len(samples) // batch_size)
    for b in range(n_batches):
        chunk = [samples[i] for i in order[b * batch_size:(b + 1) * batch_size]]
        meta = {"epoch": epoch, "batch": b}
        if augment_cfg is not None and augment_cfg.enabled:
            size = choose_scale(rng, base_size)
            chunk = [augment(s, rng, size, augment_cfg) for s in chunk]
            meta["size"] = size
        batch = collate(chunk, None if augment_cfg is not None and augment_cfg.enabled else base_size, dtype)
        batch.meta = meta
        yield batch
