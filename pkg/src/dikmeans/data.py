"""Dataset ingestion and the synthetic warped-digit generators.

Every loader produces float64 images at unit Euclidean norm with labels in
[0, n_classes). The synthetic generators start from one exemplar per class
and emit random affine warps, optionally composed with random landmark
jitter, splitting a third of the samples into a test set. Generation is
deterministic for a given seed, with separate rng streams for the affine
draws, the jitter draws and the split so the jitter-free generator and the
affine generator produce byte-identical datasets under the same seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tps, warp
from .errors import BadMagic, CountMismatch, EmptyClass, TruncatedFile, UnreadableImage

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LabeledDataset:
    images: np.ndarray   # (N, H, W) float64, each unit norm
    labels: np.ndarray   # (N,) int64
    split: str           # "train" or "test"
    provenance: str = ""

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def unit_normalized(images: np.ndarray) -> np.ndarray:
    """Scale each image to unit Euclidean norm; rejects all-zero images."""
    images = np.asarray(images, dtype=float)
    flat = images.reshape(images.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot normalize an all-zero image")
    return (flat / norms[:, None]).reshape(images.shape)


def _read_exact(fh, count, path):
    data = fh.read(count)
    if len(data) < count:
        raise TruncatedFile(f"{path}: expected {count} more bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Decode a big-endian IDX image/label file pair.

    Pixels are scaled to [0, 1] and then each image is normalized to unit
    Euclidean norm.
    """
    with open(images_path, "rb") as fh:
        magic, count, h, w = struct.unpack(">iiii", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        raw = _read_exact(fh, count * h * w, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, h, w).astype(float) / 255.0

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">ii", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path), dtype=np.uint8)
    if label_count != count:
        raise CountMismatch(f"{count} images vs {label_count} labels")

    return LabeledDataset(
        images=unit_normalized(images),
        labels=labels.astype(np.int64),
        split=split,
        provenance=f"idx:{images_path}",
    )


def save_idx(images, labels, images_path, labels_path) -> None:
    """Write images/labels as big-endian IDX, rescaling each image to 8 bits.

    Loading normalizes per image, so the per-image max rescale used here is
    lossless up to the 8-bit quantization.
    """
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    peaks = images.reshape(n, -1).max(axis=1)
    peaks[peaks <= 0] = 1.0
    quantized = np.clip(np.rint(images / peaks[:, None, None] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(quantized.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


def _to_gray(array: np.ndarray) -> np.ndarray:
    if array.ndim == 2:
        return array.astype(float)
    return array[..., :3].astype(float) @ LUMA


def _resize_bilinear(image: np.ndarray, shape) -> np.ndarray:
    from PIL import Image

    if image.shape == tuple(shape):
        return image
    pil = Image.fromarray(image.astype(np.float32), mode="F")
    resized = pil.resize((shape[1], shape[0]), Image.BILINEAR)
    return np.asarray(resized, dtype=float)


def load_png_dir(root, class_subdirs=None, resize_to=None) -> LabeledDataset:
    """Directory-per-class image ingestion (PNG or anything Pillow reads).

    Class index follows the sorted subdirectory order; color images are
    converted with the 0.299/0.587/0.114 luma weights and optionally
    bilinearly resized before per-image unit normalization.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if class_subdirs is None:
        class_subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    images = []
    labels = []
    for class_idx, sub in enumerate(class_subdirs):
        files = sorted(p for p in (root / sub).iterdir() if p.is_file())
        loaded = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "I", "F") else img)
            except (UnidentifiedImageError, OSError) as exc:
                raise UnreadableImage(f"{path}: {exc}") from exc
            gray = _to_gray(arr)
            if gray.max() > 1.0:
                gray = gray / 255.0
            if resize_to is not None:
                gray = _resize_bilinear(gray, resize_to)
            images.append(gray)
            labels.append(class_idx)
            loaded += 1
        if loaded == 0:
            raise EmptyClass(f"class directory {root / sub} holds no images")
    stack = np.stack(images)
    return LabeledDataset(
        images=unit_normalized(stack),
        labels=np.asarray(labels, dtype=np.int64),
        split="train",
        provenance=f"pngdir:{root}",
    )


@dataclass(frozen=True)
class AffineRanges:
    """Generator draw ranges; defaults keep 28x28 digit content in frame."""

    rotation: float = math.radians(25.0)  # max |angle|
    scale_low: float = 0.8
    scale_high: float = 1.2
    shear: float = 0.15                   # max |shear|
    shift: float = 3.0                    # max |shift| per axis, pixels


@dataclass(frozen=True)
class AffineSample:
    """One random affine draw: rotation . shear . scale about the frame center, plus shift."""

    rotation: float
    scale_u: float
    scale_v: float
    shear: float
    shift_u: float
    shift_v: float

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        scale = np.diag([self.scale_u, self.scale_v])
        return rot @ shear @ scale

    def shift(self) -> np.ndarray:
        return np.array([self.shift_u, self.shift_v])


def draw_affine(rng: np.random.Generator, ranges: AffineRanges) -> AffineSample:
    return AffineSample(
        rotation=rng.uniform(-ranges.rotation, ranges.rotation),
        scale_u=rng.uniform(ranges.scale_low, ranges.scale_high),
        scale_v=rng.uniform(ranges.scale_low, ranges.scale_high),
        shear=rng.uniform(-ranges.shear, ranges.shear),
        shift_u=rng.uniform(-ranges.shift, ranges.shift),
        shift_v=rng.uniform(-ranges.shift, ranges.shift),
    )


def affine_target_landmarks(sample: AffineSample, source: np.ndarray, frame_shape) -> np.ndarray:
    """Source grid pushed through the affine map, in displacement form."""
    h, w = frame_shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = sample.matrix() - np.eye(2)
    return source + (source - center) @ a.T + sample.shift()


def _generate_warped(base_digits, per_class, ranges, diffeo_sigma, rng_seed, grid_side, name):
    base_digits = np.asarray(base_digits, dtype=float)
    n_classes, h, w = base_digits.shape
    system = tps.shared_system((h, w), grid_side * grid_side)
    rng_affine = np.random.default_rng([int(rng_seed), 0])
    rng_jitter = np.random.default_rng([int(rng_seed), 1])
    rng_split = np.random.default_rng([int(rng_seed), 2])

    images = np.empty((n_classes * per_class, h, w))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    pos = 0
    for cls in range(n_classes):
        for _ in range(per_class):
            sample = draw_affine(rng_affine, ranges)
            jitter = rng_jitter.standard_normal((system.n_landmarks, 2)) * diffeo_sigma
            target = affine_target_landmarks(sample, system.source, (h, w)) + jitter
            images[pos] = warp.warp_image(base_digits[cls], system, target)
            labels[pos] = cls
            pos += 1
    images = unit_normalized(images)

    n = len(images)
    perm = rng_split.permutation(n)
    n_test = n // 3
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    prov = f"{name}(seed={rng_seed},per_class={per_class},sigma={diffeo_sigma})"
    train = LabeledDataset(images[train_idx], labels[train_idx], "train", prov)
    test = LabeledDataset(images[test_idx], labels[test_idx], "test", prov)
    if len(np.unique(train.labels)) != n_classes:
        raise ValueError("train split lost a class; increase per_class")
    return train, test


def gen_affine_mnist(base_digits, per_class: int, ranges: AffineRanges = AffineRanges(), rng_seed=0):
    """Random affine warps of one exemplar per class; a third held out as test.

    Returns (train, test) LabeledDatasets. Deterministic per seed.
    """
    return _generate_warped(base_digits, per_class, ranges, 0.0, rng_seed, 4, "affine-mnist")


def gen_diffeo_mnist(
    base_digits,
    per_class: int,
    ranges: AffineRanges = AffineRanges(),
    diffeo_sigma: float = 1.5,
    rng_seed=0,
    grid_side: int = 4,
):
    """Random affine warps composed with Gaussian landmark jitter.

    jitter offsets are drawn per landmark with standard deviation
    diffeo_sigma pixels on a grid_side x grid_side grid; sigma = 0
    reproduces gen_affine_mnist byte for byte under the same seed.
    """
    return _generate_warped(
        base_digits, per_class, ranges, diffeo_sigma, rng_seed, grid_side, "diffeo-mnist"
    )


def load_builtin_digits(resize_to=(28, 28)) -> LabeledDataset:
    """The bundled scikit-learn handwritten digit corpus, upscaled.

    1797 real 8x8 digit images distributed with scikit-learn; serves as the
    offline stand-in wherever a real MNIST-family corpus is called for but
    no IDX files are available.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images / 16.0
    if resize_to is not None:
        images = np.stack([_resize_bilinear(im, resize_to) for im in images])
    images = np.clip(images, 0.0, None)
    return LabeledDataset(
        images=unit_normalized(images),
        labels=raw.target.astype(np.int64),
        split="train",
        provenance=f"sklearn-digits(resize={resize_to})",
    )


def base_exemplars(dataset: LabeledDataset, n_classes=None) -> np.ndarray:
    """First occurrence of each class, as the deterministic generator seeds."""
    if n_classes is None:
        n_classes = dataset.n_classes
    out = []
    for cls in range(n_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) == 0:
            raise EmptyClass(f"class {cls} missing from dataset")
        out.append(dataset.images[idx[0]])
    return np.stack(out)


def stratified_subset(dataset: LabeledDataset, total: int, rng_seed=0) -> LabeledDataset:
    """Class-balanced random subset of up to `total` samples."""
    rng = np.random.default_rng(rng_seed)
    classes = np.unique(dataset.labels)
    per = total // len(classes)
    picks = []
    for cls in classes:
        idx = np.flatnonzero(dataset.labels == cls)
        take = min(per, len(idx))
        picks.append(rng.choice(idx, size=take, replace=False))
    picks = np.sort(np.concatenate(picks))
    return LabeledDataset(
        images=dataset.images[picks],
        labels=dataset.labels[picks],
        split=dataset.split,
        provenance=dataset.provenance + f"+subset({total},seed={rng_seed})",
    )


def split_train_test(dataset: LabeledDataset, test_fraction: float = 1.0 / 3.0, rng_seed=0):
    """Random disjoint train/test split of one dataset."""
    rng = np.random.default_rng(rng_seed)
    n = len(dataset)
    perm = rng.permutation(n)
    n_test = int(n * test_fraction)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    train = LabeledDataset(
        dataset.images[train_idx], dataset.labels[train_idx], "train", dataset.provenance
    )
    test = LabeledDataset(
        dataset.images[test_idx], dataset.labels[test_idx], "test", dataset.provenance
    )
    return train, test
