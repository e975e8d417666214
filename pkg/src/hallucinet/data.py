"""Datasets: binary containers, stratified splits, normalization and the
synthetic complementary-modality generator.

Container layouts (all integers little-endian, reals float32 LE):

``HNIM`` raw tensor::

    b"HNIM" u8 rank, rank * u32 dims, payload

``HNDC`` datacube::

    b"HNDC" u16 version, u32 height, u32 width, u32 bands, u32 label_count,
    u8 layout (0 = pixel-interleaved h*w*bands, 1 = band-sequential bands*h*w),
    payload (height*width*bands reals), labels (label_count u16, 0 = unlabeled)

Manifest: UTF-8 text, first line ``C=<int>``, then ``path1<TAB>path2<TAB>label``
per sample. Paths are relative to the manifest; ``-`` in a path column marks
that modality as absent (it must then be absent for every sample).
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes

log = logging.getLogger(__name__)

HNIM_MAGIC = b"HNIM"
HNDC_MAGIC = b"HNDC"
HNDC_VERSION = 1
LAYOUT_BIP = 0
LAYOUT_BSQ = 1


class DataError(ValueError):
    pass


class TruncatedError(DataError):
    pass


@dataclass
class MultimodalDataset:
    """Paired samples; either modality may be absent (``None``) for inference-only data."""

    x1: np.ndarray | None
    x2: np.ndarray | None
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.x1 is None and self.x2 is None:
            raise DataError("dataset needs at least one modality")
        for m, x in ((1, self.x1), (2, self.x2)):
            if x is not None and len(x) != n:
                raise DataError(f"modality {m} has {len(x)} samples but there are {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape1(self) -> tuple[int, ...] | None:
        return None if self.x1 is None else tuple(self.x1.shape[1:])

    @property
    def shape2(self) -> tuple[int, ...] | None:
        return None if self.x2 is None else tuple(self.x2.shape[1:])

    def modality(self, m: int) -> np.ndarray | None:
        return self.x1 if m == 1 else self.x2

    def drop_modality(self, m: int) -> MultimodalDataset:
        x1, x2 = (None, self.x2) if m == 1 else (self.x1, None)
        return MultimodalDataset(x1, x2, self.labels, self.num_classes, dict(self.meta))


@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


# --- HNIM ---------------------------------------------------------------------

def encode_hnim(array) -> bytes:
    array = np.asarray(array)
    header = HNIM_MAGIC + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_hnim(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != HNIM_MAGIC:
        raise DataError(f"{source}: bad magic {blob[:4]!r}")
    try:
        (rank,) = struct.unpack_from("<B", blob, 4)
        dims = struct.unpack_from(f"<{rank}I", blob, 5)
    except struct.error:
        raise TruncatedError(f"{source}: truncated header") from None
    offset = 5 + 4 * rank
    expected = 4 * int(np.prod(dims))
    if len(blob) - offset != expected:
        raise TruncatedError(f"{source}: expected {expected} payload bytes, got {len(blob) - offset}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def write_hnim(path, array) -> None:
    atomic_write_bytes(path, encode_hnim(array))


def read_hnim(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    return decode_hnim(path.read_bytes(), str(path))


# --- HNDC ---------------------------------------------------------------------

@dataclass
class DatacubeHeader:
    height: int
    width: int
    bands: int
    label_count: int
    layout: int = LAYOUT_BIP
    version: int = HNDC_VERSION

    STRUCT = struct.Struct("<4sHIIIIB")

    @property
    def candidate_pixels(self) -> int:
        return self.height * self.width

    @property
    def payload_bytes(self) -> int:
        return 4 * self.height * self.width * self.bands

    @property
    def total_bytes(self) -> int:
        return self.STRUCT.size + self.payload_bytes + 2 * self.label_count

    def pack(self) -> bytes:
        return self.STRUCT.pack(HNDC_MAGIC, self.version, self.height, self.width,
                                self.bands, self.label_count, self.layout)

    @classmethod
    def unpack(cls, blob: bytes, source: str = "<bytes>") -> DatacubeHeader:
        if len(blob) < cls.STRUCT.size:
            raise TruncatedError(f"{source}: header needs {cls.STRUCT.size} bytes, got {len(blob)}")
        magic, version, h, w, b, n_labels, layout = cls.STRUCT.unpack_from(blob, 0)
        if magic != HNDC_MAGIC:
            raise DataError(f"{source}: bad magic {magic!r}")
        if version != HNDC_VERSION:
            raise DataError(f"{source}: unsupported datacube version {version}")
        if layout not in (LAYOUT_BIP, LAYOUT_BSQ):
            raise DataError(f"{source}: unknown payload layout {layout}")
        if n_labels != h * w:
            raise DataError(f"{source}: label map has {n_labels} entries, expected {h * w}")
        return cls(h, w, b, n_labels, layout, version)


@dataclass
class LabeledPixels:
    """Labeled datacube pixels as independent band vectors; labels 0-based."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    coords: np.ndarray


def write_datacube(path, cube, label_map, layout: int = LAYOUT_BIP) -> None:
    cube = np.asarray(cube, dtype=np.float32)
    label_map = np.asarray(label_map, dtype=np.uint16)
    h, w, b = cube.shape
    if label_map.shape != (h, w):
        raise DataError(f"label map shape {label_map.shape} does not match cube {cube.shape}")
    header = DatacubeHeader(h, w, b, h * w, layout)
    payload = cube if layout == LAYOUT_BIP else cube.transpose(2, 0, 1)
    blob = header.pack() + np.ascontiguousarray(payload, dtype="<f4").tobytes() \
        + np.ascontiguousarray(label_map, dtype="<u2").tobytes()
    atomic_write_bytes(path, blob)


def load_datacube(path) -> LabeledPixels:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    blob = path.read_bytes()
    header = DatacubeHeader.unpack(blob, str(path))
    if len(blob) != header.total_bytes:
        raise TruncatedError(f"{path}: expected {header.total_bytes} bytes, got {len(blob)}")
    h, w, b = header.height, header.width, header.bands
    offset = header.STRUCT.size
    raw = np.frombuffer(blob, dtype="<f4", count=h * w * b, offset=offset)
    cube = raw.reshape(h, w, b) if header.layout == LAYOUT_BIP else raw.reshape(b, h, w).transpose(1, 2, 0)
    labels = np.frombuffer(blob, dtype="<u2", count=h * w, offset=offset + header.payload_bytes).reshape(h, w)
    rows, cols = np.nonzero(labels)
    if rows.size == 0:
        warnings.warn(f"{path}: datacube has no labeled pixels", stacklevel=2)
        return LabeledPixels(np.zeros((0, b), np.float32), np.zeros(0, np.int64), 0, np.zeros((0, 2), np.int64))
    num_classes = int(labels.max())
    return LabeledPixels(
        pixels=np.ascontiguousarray(cube[rows, cols], dtype=np.float32),
        labels=labels[rows, cols].astype(np.int64) - 1,
        num_classes=num_classes,
        coords=np.stack([rows, cols], axis=1).astype(np.int64),
    )


def band_split(pixels: LabeledPixels, cut_index: int) -> MultimodalDataset:
    """Bands [0, cut) become modality 1, bands [cut, bands) modality 2."""
    bands = pixels.pixels.shape[1]
    if not 0 < cut_index < bands:
        raise DataError(f"cut index must satisfy 0 < cut < {bands}, got {cut_index}")
    return MultimodalDataset(
        x1=np.ascontiguousarray(pixels.pixels[:, :cut_index]),
        x2=np.ascontiguousarray(pixels.pixels[:, cut_index:]),
        labels=pixels.labels,
        num_classes=pixels.num_classes,
        meta={"cut_index": cut_index},
    )


# --- paired-image manifests -----------------------------------------------------

def write_manifest(path, num_classes: int, rows) -> None:
    lines = [f"C={num_classes}"] + [f"{p1}\t{p2}\t{label}" for p1, p2, label in rows]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _stack(arrays: list[np.ndarray], paths: list[str], modality: int) -> np.ndarray:
    ref = arrays[0].shape
    for arr, p in zip(arrays, paths):
        if arr.shape != ref:
            raise DataError(f"modality {modality}: {p} has shape {arr.shape}, expected {ref}")
    return np.stack(arrays).astype(np.float32)


def load_paired_images(manifest_path) -> MultimodalDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"missing file: {manifest_path}")
    lines = [ln for ln in manifest_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("C="):
        raise DataError(f"{manifest_path}: first line must be 'C=<int>'")
    try:
        num_classes = int(lines[0][2:])
    except ValueError:
        raise DataError(f"{manifest_path}: bad class count {lines[0]!r}") from None
    root = manifest_path.parent
    seen: set[tuple[str, str]] = set()
    p1s, p2s, labels = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        p1, p2, label = parts
        if (p1, p2) in seen:
            raise DataError(f"{manifest_path}:{lineno}: duplicate sample {p1!r}, {p2!r}")
        seen.add((p1, p2))
        try:
            y = int(label)
        except ValueError:
            raise DataError(f"{manifest_path}:{lineno}: bad label {label!r}") from None
        if not 0 <= y < num_classes:
            raise DataError(f"{manifest_path}:{lineno}: label {y} outside [0, {num_classes})")
        p1s.append(p1)
        p2s.append(p2)
        labels.append(y)
    if not labels:
        return MultimodalDataset(np.zeros((0,), np.float32), None, np.zeros(0, np.int64), num_classes)
    arrays = []
    for m, paths in ((1, p1s), (2, p2s)):
        absent = [p == "-" for p in paths]
        if any(absent) and not all(absent):
            raise DataError(f"{manifest_path}: modality {m} must be present for all samples or none")
        arrays.append(None if all(absent) else _stack([read_hnim(root / p) for p in paths], paths, m))
    x1, x2 = arrays
    return MultimodalDataset(x1, x2, np.asarray(labels), num_classes, {"paths": list(zip(p1s, p2s))})


# --- synthetic ------------------------------------------------------------------

def _orthonormal(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return (q * np.sign(np.diag(r))).T  # k x d, rows orthonormal


def generate_synthetic(num_classes: int, n_per_class: int, d1: int, d2: int,
                       noise_sigma: float, leak: float, rng: np.random.Generator) -> MultimodalDataset:
    """Two-modality task whose class information is split across modalities.

    Class ``c`` factors into a coarse group ``c // (C/2)`` and a fine index
    ``c % (C/2)``. Modality 1 always shows the coarse group and shows the fine
    index with probability ``leak``; modality 2 always shows the fine index
    and shows the group with probability ``leak``. A withheld component is
    rendered as the normalized mean of the prototypes it cannot tell apart.
    """
    C = num_classes
    if C < 2 or C % 2:
        raise ValueError(f"number of classes must be even and >= 2, got {C}")
    if d1 < C or d2 < C:
        raise ValueError(f"dimensions must be >= C={C}, got d1={d1}, d2={d2}")
    if not 0.0 <= leak <= 1.0:
        raise ValueError(f"leak must lie in [0, 1], got {leak}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    half = C // 2
    proto1 = _orthonormal(rng, d1, C)
    proto2 = _orthonormal(rng, d2, C)
    classes = np.arange(C)
    group, fine = classes // half, classes % half
    # centroid rendering of "fine withheld" (mod 1) and "group withheld" (mod 2)
    blur1 = np.stack([proto1[group == group[c]].mean(axis=0) for c in classes])
    blur2 = np.stack([proto2[fine == fine[c]].mean(axis=0) for c in classes])
    blur1 /= np.linalg.norm(blur1, axis=1, keepdims=True)
    blur2 /= np.linalg.norm(blur2, axis=1, keepdims=True)

    labels = np.repeat(classes, n_per_class)
    n = labels.size
    leak1 = rng.random(n) < leak
    leak2 = rng.random(n) < leak
    x1 = np.where(leak1[:, None], proto1[labels], blur1[labels]) + noise_sigma * rng.standard_normal((n, d1))
    x2 = np.where(leak2[:, None], proto2[labels], blur2[labels]) + noise_sigma * rng.standard_normal((n, d2))
    order = rng.permutation(n)
    return MultimodalDataset(
        x1=x1[order].astype(np.float32),
        x2=x2[order].astype(np.float32),
        labels=labels[order],
        num_classes=C,
        meta={
            "prototypes1": proto1.astype(np.float32),
            "prototypes2": proto2.astype(np.float32),
            "leak1": leak1[order],
            "leak2": leak2[order],
        },
    )


def analytic_ceiling(num_classes: int, leak: float, modality: int) -> float:
    """Bayes-optimal single-modality accuracy (percent) of the noiseless generator."""
    ambiguous = num_classes // 2 if modality == 1 else 2
    return 100.0 * (leak + (1.0 - leak) / ambiguous)


# --- splitting and normalization --------------------------------------------------

def split(dataset, train_ratio: float, val_fraction_of_train: float, rng: np.random.Generator) -> SplitIndices:
    """Class-stratified train/validation/test split.

    Per class, ``round(n_c * train_ratio)`` samples go to training, of which
    ``round(n_train * val_fraction_of_train)`` are held out for validation.
    """
    labels = dataset.labels if hasattr(dataset, "labels") else np.asarray(dataset)
    if not 0 < train_ratio < 1 or not 0 < val_fraction_of_train < 1:
        raise ValueError("train_ratio and val_fraction_of_train must lie in (0, 1)")
    train, val, test = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} sample(s); cannot stratify")
        idx = rng.permutation(idx)
        n_train = int(np.floor(idx.size * train_ratio + 0.5))
        n_train = min(max(n_train, 1), idx.size - 1)
        n_val = int(np.floor(n_train * val_fraction_of_train + 0.5))
        val.append(idx[:n_val])
        train.append(idx[n_val:n_train])
        test.append(idx[n_train:])
    out = SplitIndices(*(np.sort(np.concatenate(part)) if part else np.zeros(0, np.int64)
                         for part in (train, val, test)))
    for name in ("train", "validation", "test"):
        if getattr(out, name).size == 0:
            raise DataError(f"{name} split is empty")
    return out


@dataclass
class Normalizer:
    """Per-channel (images) or per-band (vectors) standardization statistics."""

    stats: dict[int, tuple[np.ndarray, np.ndarray]]

    def apply_modality(self, m: int, x: np.ndarray) -> np.ndarray:
        if m not in self.stats:
            return x
        mean, std = self.stats[m]
        if x.ndim < 2 or x.shape[1] != mean.size:
            raise DataError(f"modality {m}: normalization expects {mean.size} channels, data has shape {x.shape[1:]}")
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)

    def apply(self, dataset: MultimodalDataset) -> MultimodalDataset:
        x1, x2 = (None if x is None else self.apply_modality(m, x)
                  for m, x in ((1, dataset.x1), (2, dataset.x2)))
        return MultimodalDataset(x1, x2, dataset.labels, dataset.num_classes, dict(dataset.meta))

    def to_dict(self) -> dict:
        return {str(m): {"mean": mean.tolist(), "std": std.tolist()} for m, (mean, std) in self.stats.items()}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls({int(m): (np.asarray(v["mean"], np.float32), np.asarray(v["std"], np.float32))
                    for m, v in d.items()})


def _channel_stats(x: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, dtype=np.float64)
    std = x.std(axis=axes, dtype=np.float64)
    flat = std <= 1e-12
    if flat.any():
        warnings.warn(f"modality {m}: zero-variance channel(s) {np.flatnonzero(flat).tolist()}; std set to 1",
                      stacklevel=3)
        std = np.where(flat, 1.0, std)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(dataset: MultimodalDataset, train_indices, policy: str = "standardize"):
    """Standardize each channel/band with statistics from the training split only."""
    train_indices = np.asarray(train_indices)
    if policy == "none":
        return dataset, Normalizer({})
    if policy != "standardize":
        raise ValueError(f"unknown normalization policy {policy!r}")
    if train_indices.size == 0:
        raise DataError("normalization needs a non-empty training split")
    stats = {m: _channel_stats(x[train_indices], m)
             for m, x in ((1, dataset.x1), (2, dataset.x2)) if x is not None}
    norm = Normalizer(stats)
    return norm.apply(dataset), norm
