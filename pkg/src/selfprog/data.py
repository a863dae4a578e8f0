"""Image dataset loading, synthesis and persistence."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DatasetError(ValueError):
    pass


class BadMagic(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


@dataclass
class ImageDataset:
    """Images as float32 N x H x W x C in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.images.shape[1:])

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(self.images[indices], self.labels[indices], self.class_count, self.provenance, dict(self.meta))


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFile(f"{what} file shorter than its header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagic(f"{what} magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{what} header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise TruncatedFile(f"{what} payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(image_path, label_path, class_count: Optional[int] = None) -> ImageDataset:
    """Read an MNIST/EMNIST-style IDX image/label pair (``.gz`` accepted)."""
    img_raw, lbl_raw = _read_bytes(image_path), _read_bytes(label_path)
    images = _parse_idx(img_raw, IDX_IMAGES_MAGIC, "image")
    labels = _parse_idx(lbl_raw, IDX_LABELS_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    digest = hashlib.sha256(img_raw + lbl_raw).hexdigest()
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    x = (images.astype(np.float32) / 255.0)[..., None]
    return ImageDataset(x, labels, class_count, f"sha256:{digest}")


def write_idx(images: np.ndarray, labels: np.ndarray, image_path, label_path) -> None:
    """Write uint8 N x H x W images and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be N x H x W")
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar_batch(path) -> ImageDataset:
    """CIFAR-10 binary batch: 3073-byte records (label, 3x32x32 planes)."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise TruncatedFile(f"{len(raw)} bytes is not a whole number of CIFAR records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise DatasetError("CIFAR-10 labels must be < 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageDataset(images, labels, 10, "sha256:" + hashlib.sha256(raw).hexdigest())


# --------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class BlobConfig:
    classes: int = 10
    samples: int = 2048
    noise: float = 0.5
    shape: tuple[int, int, int] = (8, 8, 1)


def synth_dataset(config: BlobConfig, seed: int = 0) -> ImageDataset:
    """Gaussian blobs in pixel space around random class prototypes.

    ``meta["nearest_centroid_accuracy"]`` records how often the true
    prototype nearest to a sample is its own class prototype.
    """
    rng = np.random.default_rng(seed)
    dim = int(np.prod(config.shape))
    centroids = rng.uniform(0.0, 1.0, (config.classes, dim))
    labels = rng.integers(0, config.classes, config.samples)
    x = centroids[labels] + config.noise * rng.normal(0.0, 1.0, (config.samples, dim))
    x = np.clip(x, 0.0, 1.0)
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    nc_acc = float((d2.argmin(axis=1) == labels).mean())
    images = x.reshape((config.samples,) + tuple(config.shape)).astype(np.float32)
    ds = ImageDataset(images, labels.astype(np.int64), config.classes, f"blobs:seed={seed}:{config}")
    ds.meta["nearest_centroid_accuracy"] = nc_acc
    return ds


def _glyph_fonts(size: int):
    from PIL import ImageFont

    fonts = []
    for name in ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf", "DejaVuSansMono.ttf", "DejaVuSerif-Bold.ttf"):
        try:
            fonts.append(ImageFont.truetype(name, size))
        except OSError:
            pass
    if not fonts:
        fonts.append(ImageFont.load_default(size=size))
    return fonts


def glyph_digits(count: int, seed: int = 0, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Rendered, randomly distorted digits 0-9 as uint8 ``count x side x side``.

    An offline MNIST-shaped stand-in: each sample draws a font, size,
    rotation, shear and stroke width, is centred by centre of mass with a
    small jitter, then gets pixel noise.
    """
    from PIL import Image, ImageDraw, ImageFilter

    rng = np.random.default_rng(seed)
    big = side * 3
    fonts = _glyph_fonts(int(big * 0.7))
    images = np.zeros((count, side, side), dtype=np.uint8)
    labels = rng.integers(0, 10, count).astype(np.uint8)
    for i in range(count):
        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        font = fonts[rng.integers(len(fonts))]
        stroke = int(rng.integers(0, 4))
        draw.text((big / 2, big / 2), str(labels[i]), fill=255, font=font, anchor="mm", stroke_width=stroke, stroke_fill=255)
        angle = rng.uniform(-25, 25)
        shear = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.75, 1.15)
        canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(big / 2, big / 2))
        canvas = canvas.transform(
            (big, big), Image.AFFINE, (1 / scale, shear, -shear * big / 2 + (1 - 1 / scale) * big / 2, 0, 1 / scale, (1 - 1 / scale) * big / 2),
            resample=Image.BILINEAR,
        )
        canvas = canvas.filter(ImageFilter.GaussianBlur(rng.uniform(0.5, 2.0)))
        small = np.asarray(canvas.resize((side, side), Image.BILINEAR), dtype=np.float32)
        # centre of mass to the middle as MNIST does, then a small jitter
        total = small.sum()
        if total > 0:
            cy = (small.sum(axis=1) * np.arange(side)).sum() / total
            cx = (small.sum(axis=0) * np.arange(side)).sum() / total
            dy, dx = rng.integers(-2, 3, 2)
            small = np.roll(small, (int(round(side / 2 - cy)) + dy, int(round(side / 2 - cx)) + dx), axis=(0, 1))
        small += rng.normal(0, 10, small.shape)
        images[i] = np.clip(small, 0, 255).astype(np.uint8)
    return images, labels


def disjoint_split(n: int, train_size: int, eval_size: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if train_size + eval_size > n:
        raise ValueError(f"need {train_size + eval_size} samples, dataset has {n}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:train_size]), np.sort(order[train_size:train_size + eval_size])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()
