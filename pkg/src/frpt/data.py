"""Dataset loading, normalization, and a synthetic generator for fast tests."""

import struct
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .exceptions import BadMagic, CountMismatch, LabelOutOfRange, TruncatedFile

__all__ = [
    "LabeledDataset",
    "load_idx",
    "save_idx",
    "instance_normalize",
    "synth_dataset",
    "save_labeled_dataset",
    "load_labeled_dataset",
    "SYNTH_MAGIC",
    "IDX_IMAGE_MAGIC",
    "IDX_LABEL_MAGIC",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SYNTH_MAGIC = b"FRSY"

NORM_EPS = 1e-6


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) as float64 with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise CountMismatch(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatch(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.shape[0] == 0:
            raise CountMismatch("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelOutOfRange(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices):
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count)


def _read_be_words(raw, count, path):
    if len(raw) < 4 * count:
        raise TruncatedFile(f"{path}: header truncated")
    return struct.unpack(f">{count}I", raw[: 4 * count])


def load_idx(images_path, labels_path, class_count=10):
    """Parse the big-endian IDX pair used for MNIST-style datasets.

    Pixels are scaled into [0, 1]; images come back as (N, 1, H, W).
    """
    with open(images_path, "rb") as fh:
        raw = fh.read()
    magic, count, rows, cols = _read_be_words(raw, 4, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"{images_path}: magic {magic:#010x} != {IDX_IMAGE_MAGIC:#010x}")
    if len(raw) < 16 + count * rows * cols:
        raise TruncatedFile(f"{images_path}: pixel payload truncated")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0

    with open(labels_path, "rb") as fh:
        raw = fh.read()
    magic, label_count = _read_be_words(raw, 2, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise BadMagic(f"{labels_path}: magic {magic:#010x} != {IDX_LABEL_MAGIC:#010x}")
    if label_count != count:
        raise CountMismatch(f"{count} images but {label_count} labels")
    if len(raw) < 8 + label_count:
        raise TruncatedFile(f"{labels_path}: label payload truncated")
    labels = np.frombuffer(raw, dtype=np.uint8, count=label_count, offset=8)
    return LabeledDataset(images, labels.astype(np.int64), class_count)


def save_idx(dataset, images_path, labels_path):
    """Write a dataset back to IDX bytes; inverse of :func:`load_idx`."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise CountMismatch("IDX images are single-channel")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def instance_normalize(dataset):
    """Standardize each instance per channel: subtract mean, divide by std + 1e-6."""
    images = dataset.images
    mean = images.mean(axis=(2, 3), keepdims=True)
    std = images.std(axis=(2, 3), keepdims=True)
    return LabeledDataset((images - mean) / (std + NORM_EPS),
                          dataset.labels, dataset.class_count)


def synth_dataset(classes, per_class, height, width, seed, channels=1,
                  blob_sigma=0.15, noise=0.05):
    """Gaussian blobs at class-specific locations plus pixel noise.

    Blob centers sit on a circle around the image center, one per class,
    so classes are linearly separable at high signal-to-noise ratio.
    Deterministic for a fixed seed; labels are balanced and interleaved.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    radius = 0.3 * min(height, width)
    centers = np.stack([
        height / 2.0 + radius * np.sin(angles),
        width / 2.0 + radius * np.cos(angles),
    ], axis=1)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    sigma = blob_sigma * min(height, width)
    n = classes * per_class
    labels = np.tile(np.arange(classes), per_class)
    images = np.empty((n, channels, height, width))
    for i, label in enumerate(labels):
        cy, cx = centers[label] + rng.normal(scale=0.5, size=2)
        blob = np.exp(-(((rows - cy) ** 2) + ((cols - cx) ** 2)) / (2.0 * sigma**2))
        amplitude = 1.0 + 0.1 * rng.standard_normal()
        sample = amplitude * blob + noise * rng.standard_normal((channels, height, width))
        images[i] = sample
    return LabeledDataset(images, labels, classes)


def save_labeled_dataset(dataset, path):
    """Serialize a dataset under the shared container framing."""
    header = {"class_count": dataset.class_count, "count": len(dataset)}
    write_container(path, SYNTH_MAGIC, header, {
        "images": dataset.images,
        "labels": dataset.labels.astype(np.float64),
    })


def load_labeled_dataset(path):
    header, blocks = read_container(path, SYNTH_MAGIC)
    return LabeledDataset(blocks["images"], blocks["labels"].astype(np.int64),
                          header["class_count"])
