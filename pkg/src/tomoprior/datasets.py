"""Image sources: MNIST-format IDX files and random ellipse phantoms."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from . import ntc

IDX_IMAGE_MAGIC = 2051


class IdxFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class ImageSet:
    images: np.ndarray  # (n, d, d) float32 in [0, 1]
    source: str = "idx"
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"images must be (n, d, d), got {self.images.shape}")
        if self.images.shape[0] < 1:
            raise ValueError("an image set needs at least one image")
        if not (np.all(self.images >= 0) and np.all(self.images <= 1)):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def side(self):
        return self.images.shape[1]

    def subset(self, n, seed=0):
        """``n`` images chosen by a seeded shuffle."""
        if not 1 <= n <= len(self):
            raise ValueError(f"cannot draw {n} images from a set of {len(self)}")
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return ImageSet(self.images[idx], self.source, self.seed)

    def split(self, n_first):
        return (ImageSet(self.images[:n_first], self.source, self.seed),
                ImageSet(self.images[n_first:], self.source, self.seed))


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def parse_idx_images(buf: bytes) -> np.ndarray:
    """Decode an IDX rank-3 unsigned-byte image file into uint8 (n, rows, cols)."""
    if len(buf) < 4:
        raise IdxFormatError("truncated magic", len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"expected image magic {IDX_IMAGE_MAGIC}, found {magic}", 0)
    if len(buf) < 16:
        raise IdxFormatError("truncated header", len(buf))
    n, rows, cols = struct.unpack(">III", buf[4:16])
    need = n * rows * cols
    have = len(buf) - 16
    if have < need:
        raise IdxFormatError(f"truncated payload: {need} pixel bytes declared, {have} present", len(buf))
    if have > need:
        raise IdxFormatError(f"{have - need} unexpected trailing bytes", 16 + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=16).reshape(n, rows, cols)


def load_idx(path, limit=None) -> ImageSet:
    """Load an MNIST/Fashion-MNIST image file (optionally gzip-compressed)."""
    raw = parse_idx_images(_open(path))
    if limit is not None:
        raw = raw[:limit]
    return ImageSet(raw.astype(np.float32) / np.float32(255.0), "idx", None)


def write_idx(path, images_u8):
    images_u8 = np.asarray(images_u8)
    if images_u8.dtype != np.uint8 or images_u8.ndim != 3:
        raise ValueError("write_idx expects a uint8 (n, rows, cols) array")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images_u8.shape))
        fh.write(images_u8.tobytes())


def gen_phantoms(n, d=28, seed=0) -> ImageSet:
    """Random ellipse phantoms: 1-4 additive ellipses per image, clamped to [0, 1]."""
    if n < 1 or d < 8:
        raise ValueError(f"need n >= 1 and d >= 8 (got n={n}, d={d})")
    rng = np.random.default_rng(seed)
    c = (np.arange(d) - (d - 1) / 2.0) / (d / 2.0)
    yy, xx = np.meshgrid(-c, c, indexing="ij")
    out = np.zeros((n, d, d), dtype=np.float64)
    for i in range(n):
        for _ in range(rng.integers(1, 5)):
            cx, cy = rng.uniform(-0.4, 0.4, 2)
            a = rng.uniform(0.15, 0.6)
            b = rng.uniform(0.08, 0.35)
            phi = rng.uniform(0, np.pi)
            val = rng.uniform(0.3, 1.0)
            u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
            v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
            out[i][(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
    return ImageSet(np.clip(out, 0.0, 1.0).astype(np.float32), "phantom", seed)


def save_imageset(path, data: ImageSet, extra=None):
    tensors = {
        "images": data.images,
        "source": ntc.text_tensor(data.source),
        "seed": np.int64(-1 if data.seed is None else data.seed),
    }
    tensors.update(extra or {})
    ntc.save(path, tensors)


def imageset_from_tensors(t, key="images") -> ImageSet:
    if key not in t:
        raise KeyError(f"no {key!r} tensor in file (have {sorted(t)})")
    source = ntc.tensor_text(t["source"]) if "source" in t else "ntc"
    seed = int(t["seed"]) if "seed" in t and int(t["seed"]) >= 0 else None
    return ImageSet(t[key], source, seed)


def load_imageset(path, key="images") -> ImageSet:
    return imageset_from_tensors(ntc.load(path), key)
