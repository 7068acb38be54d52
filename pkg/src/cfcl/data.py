"""Datasets, IDX parsing, non-i.i.d. partitioning and augmentations.

Labels travel with the points but only the partitioner and the evaluation
code in :mod:`cfcl.metrics` read them; training never does.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError, IDXFormatError, InfeasibleKError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    class_count: int
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 2:
            raise DataError(f"points must be 2-D, got shape {pts.shape}")
        if len(pts) != len(lab):
            raise DataError(f"{len(pts)} points but {len(lab)} labels")
        if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
            raise DataError("labels outside [0, class_count)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.points[idx], self.labels[idx], self.class_count, self.image_shape)


# ------------------------------------------------------------- synthetic --

def class_centers(classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Centres on a circle in the first two coordinates (2-D) or on a scaled simplex."""
    if dim == 2 or classes > dim:
        ang = 2 * np.pi * np.arange(classes) / classes
        c = np.zeros((classes, dim))
        c[:, 0] = radius * np.cos(ang)
        c[:, 1] = radius * np.sin(ang)
        return c
    c = np.zeros((classes, dim))
    c[np.arange(classes), np.arange(classes)] = radius
    return c - c.mean(axis=0)


def gen_synthetic(classes: int, per_class: int, dim: int, spread: float,
                  rng: np.random.Generator, radius: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian blobs, ``per_class`` points around each class centre."""
    if classes < 2:
        raise DataError("need at least two classes")
    if dim < 2:
        raise DataError("need dim >= 2")
    if per_class <= 0:
        raise DataError("per_class must be positive; an empty dataset is not allowed")
    centers = class_centers(classes, dim, radius)
    labels = np.repeat(np.arange(classes), per_class)
    pts = centers[labels] + spread * rng.standard_normal((classes * per_class, dim))
    return LabeledDataset(pts, labels, classes)


# ------------------------------------------------------------------- IDX --

def _read_idx(path, expected_magic):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: truncated header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    n = int(np.prod(shape))
    if len(raw) - header < n:
        raise IDXFormatError(f"{path}: truncated payload ({len(raw) - header} of {n} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(shape)


def load_idx_bytes(images_path, labels_path):
    """Raw ``uint8`` image array ``(n, rows, cols)`` and label array."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def load_idx(images_path, labels_path, class_count: Optional[int] = None) -> LabeledDataset:
    images, labels = load_idx_bytes(images_path, labels_path)
    pts = images.reshape(len(images), -1).astype(np.float64) / 255.0
    k = class_count if class_count is not None else int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(pts, labels.astype(np.int64), k, tuple(images.shape[1:]))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``uint8`` images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise DataError("IDX writer expects uint8 arrays")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">" + "I" * 3, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def data_dir(override: Optional[str] = None) -> str:
    return override or os.environ.get("CFCL_DATA_DIR", os.path.join(os.getcwd(), "data"))


# ------------------------------------------------------------ partition --

def assign_class_subsets(devices: int, class_count: int, classes_per_device: int,
                         rng: np.random.Generator, max_tries: int = 1000) -> List[np.ndarray]:
    """Random class subsets per device with every class held by (nearly) equally many devices.

    Class "slots" are shuffled and dealt out; deals that give a device the same
    class twice are rejected.  Balanced holder counts keep per-device dataset
    sizes equal when classes have equal sizes.
    """
    if classes_per_device < 1 or classes_per_device > class_count:
        raise InfeasibleKError(f"classes_per_device={classes_per_device} not in [1, {class_count}]")
    if devices * classes_per_device < class_count:
        raise InfeasibleKError(f"{devices} devices x {classes_per_device} classes cannot cover "
                               f"{class_count} classes")
    total = devices * classes_per_device
    for _ in range(max_tries):
        extra = rng.choice(class_count, total % class_count, replace=False)
        slots = np.concatenate([np.tile(np.arange(class_count), total // class_count), extra])
        slots = rng.permutation(slots).reshape(devices, classes_per_device)
        if all(len(np.unique(s)) == classes_per_device for s in slots):
            return [np.sort(s) for s in slots]
    # cyclic fallback is always valid
    perm = rng.permutation(class_count)
    return [np.sort(perm[(i * classes_per_device + np.arange(classes_per_device)) % class_count])
            for i in range(devices)]


def partition_noniid(ds: LabeledDataset, devices: int, classes_per_device: int,
                     rng: np.random.Generator) -> List[LabeledDataset]:
    """Split ``ds`` across devices so each device only sees a few classes.

    Every class's points are shuffled and split as evenly as possible among the
    devices that hold that class; the union of the parts is exactly ``ds``.
    """
    subsets = assign_class_subsets(devices, ds.class_count, classes_per_device, rng)
    parts: List[List[np.ndarray]] = [[] for _ in range(devices)]
    for c in range(ds.class_count):
        holders = [i for i, s in enumerate(subsets) if c in s]
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for i, chunk in zip(holders, np.array_split(idx, len(holders))):
            parts[i].append(chunk)
    return [ds.subset(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64)) for p in parts]


# ---------------------------------------------------------- augmentation --

FAMILIES = ("gaussian_noise", "random_scale", "random_crop_pad", "horizontal_flip", "blur")


@dataclass(frozen=True)
class AugmentationSpec:
    """Parameters for one augmentation family.

    ``image_shape`` is required by the image families (crop-pad, flip, blur).
    """
    family: str = "gaussian_noise"
    sigma: float = 0.1
    scale_range: tuple = (1.0, 1.0)
    max_shift: int = 0
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown augmentation family {self.family!r}")
        if self.family in ("random_crop_pad", "horizontal_flip", "blur") and self.image_shape is None:
            raise ValueError(f"{self.family} needs image_shape")


def _crop_pad(img, shift, rng):
    rows, cols = img.shape
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    padded = np.pad(img, shift)
    y0, x0 = shift + dy, shift + dx
    return padded[y0:y0 + rows, x0:x0 + cols]


def _blur(img):
    k = np.array([0.25, 0.5, 0.25])
    p = np.pad(img, 1, mode="edge")
    p = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    return k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]


def augment(x, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Dimension-preserving random transform of one vector or a batch of rows."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if spec.family == "gaussian_noise":
        out = X + spec.sigma * rng.standard_normal(X.shape) if spec.sigma > 0 else X.copy()
    elif spec.family == "random_scale":
        lo, hi = spec.scale_range
        out = X * rng.uniform(lo, hi, size=(len(X), 1))
    else:
        shape = tuple(spec.image_shape)
        out = np.empty_like(X)
        for r, row in enumerate(X):
            img = row.reshape(shape)
            if spec.family == "random_crop_pad":
                img = _crop_pad(img, spec.max_shift, rng) if spec.max_shift > 0 else img
            elif spec.family == "horizontal_flip":
                img = img[:, ::-1] if rng.random() < spec.flip_prob else img
            else:
                img = _blur(img) if rng.random() < spec.blur_prob else img
            out[r] = img.ravel()
    return out[0] if single else out
