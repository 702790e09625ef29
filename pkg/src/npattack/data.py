"""Dataset ingestion: IDX files, downscaling, and the synthetic generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, IdxFormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Images as N x H x W x C float64 in [0,1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ContractViolation("image/label counts differ")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices):
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx])


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(fh.read())
        return fh.read()


def _unpack_u32(buf, offset, what):
    if len(buf) < offset + 4:
        raise IdxFormatError(f"truncated while reading {what}", offset)
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into a LabeledDataset.

    Big-endian container: magic 0x00000803 for images (count, rows, cols
    dimension header) and 0x00000801 for labels, then raw unsigned bytes.
    Pixel bytes are scaled to [0,1] by /255. Gzip-compressed files are
    accepted transparently.
    """
    img_buf = _read_bytes(images_path)
    magic = _unpack_u32(img_buf, 0, "image magic")
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad magic 0x{magic:08x} in image file (expected 0x{IMAGE_MAGIC:08x})", 0)
    n_images = _unpack_u32(img_buf, 4, "image count")
    rows = _unpack_u32(img_buf, 8, "row count")
    cols = _unpack_u32(img_buf, 12, "column count")
    need = 16 + n_images * rows * cols
    if len(img_buf) < need:
        raise IdxFormatError(
            f"truncated image payload: need {need} bytes, have {len(img_buf)}", len(img_buf))
    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n_images * rows * cols, offset=16)
    images = pixels.astype(np.float64).reshape(n_images, rows, cols, 1) / 255.0

    lab_buf = _read_bytes(labels_path)
    magic = _unpack_u32(lab_buf, 0, "label magic")
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad magic 0x{magic:08x} in label file (expected 0x{LABEL_MAGIC:08x})", 0)
    n_labels = _unpack_u32(lab_buf, 4, "label count")
    if len(lab_buf) < 8 + n_labels:
        raise IdxFormatError(
            f"truncated label payload: need {8 + n_labels} bytes, have {len(lab_buf)}", len(lab_buf))
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)

    if n_images != n_labels:
        raise IdxFormatError(
            f"image count {n_images} does not match label count {n_labels}", 4)
    return LabeledDataset(images, labels)


def downscale(dataset, side):
    """Mean-pool square images down to side x side (factor must divide)."""
    h = dataset.images.shape[1]
    w = dataset.images.shape[2]
    if h == side and w == side:
        return dataset
    if h % side or w % side:
        raise ContractViolation(f"cannot downscale {h}x{w} to {side}x{side}")
    fh, fw = h // side, w // side
    n, _, _, c = dataset.images.shape
    pooled = dataset.images.reshape(n, side, fh, side, fw, c).mean(axis=(2, 4))
    return LabeledDataset(pooled, dataset.labels)


def synth_dataset(classes, size, samples, seed):
    """Deterministic class-distinct stripe/blob patterns with per-sample noise.

    Even classes are oriented stripe gratings, odd classes are Gaussian
    blobs on a ring; each sample gets a brightness jitter and additive
    pixel noise, clipped back into [0,1]. Identical seeds give identical
    datasets byte for byte.
    """
    if classes < 2:
        raise ContractViolation("synthetic dataset needs at least 2 classes")
    if size < 2 or samples < 1:
        raise ContractViolation("synthetic dataset needs size >= 2 and samples >= 1")
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size),
                       indexing="ij")

    protos = np.zeros((classes, size, size))
    for k in range(classes):
        if k % 2 == 0:
            theta = np.pi * k / classes
            freq = 1.0 + 0.25 * (k % 3)
            wave = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)))
            protos[k] = 0.5 + 0.45 * wave
        else:
            ang = 2.0 * np.pi * k / classes
            cx, cy = 0.5 + 0.28 * np.cos(ang), 0.5 + 0.28 * np.sin(ang)
            d1 = (u - cx) ** 2 + (v - cy) ** 2
            d2 = (u - (1.0 - cx)) ** 2 + (v - (1.0 - cy)) ** 2
            protos[k] = 0.9 * np.exp(-d1 / 0.06) + 0.5 * np.exp(-d2 / 0.03)

    labels = (np.arange(samples) % classes).astype(np.int64)
    brightness = rng.uniform(0.9, 1.0, size=samples)
    noise = rng.normal(0.0, 0.03, size=(samples, size, size))
    images = np.clip(protos[labels] * brightness[:, None, None] + noise, 0.0, 1.0)
    return LabeledDataset(images.reshape(samples, size, size, 1), labels)
