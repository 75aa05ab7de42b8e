"""Datasets: CIFAR-10 binary container, synthetic blobs, crop/flip augmentation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import structlog

from m2at.errors import DatasetError
from m2at.seeding import BatchStreams, substream

log = structlog.get_logger(__name__)

CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_FILE = 10_000
FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CROP_PADDING = 4


@dataclass
class LabeledImageSet:
    """Images [n, c, h, w] in [0, 1] with integer labels below ``num_classes``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"images {self.images.shape} and labels {self.labels.shape} do not pair up")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def take(self, indices: np.ndarray, split: Optional[str] = None) -> "LabeledImageSet":
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes, split or self.split)


# --- CIFAR-10 binary -----------------------------------------------------------


def parse_cifar_bytes(payload: bytes, source: str = "<bytes>", split: str = "train") -> LabeledImageSet:
    """Parse whole 3073-byte records: label byte, then R, G, B planes of 32x32."""
    full = len(payload) // RECORD_BYTES
    if len(payload) % RECORD_BYTES:
        raise DatasetError(
            f"{source}: truncated record at byte offset {full * RECORD_BYTES} "
            f"({len(payload) % RECORD_BYTES} of {RECORD_BYTES} bytes present)"
        )
    records = np.frombuffer(payload, dtype=np.uint8).reshape(full, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        index = int(bad[0])
        raise DatasetError(f"{source}: label byte {labels[index]} > 9 at byte offset {index * RECORD_BYTES}")
    images = records[:, 1:].reshape(full, *CIFAR_SHAPE).astype(np.float32) / np.float32(255.0)
    return LabeledImageSet(images, labels, CIFAR_CLASSES, split)


def read_cifar_file(path: Path, split: str = "train") -> LabeledImageSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 file not found: {path}")
    return parse_cifar_bytes(path.read_bytes(), source=str(path), split=split)


def cifar_bytes(dataset: LabeledImageSet) -> bytes:
    if dataset.input_shape != CIFAR_SHAPE or dataset.num_classes > 256:
        raise DatasetError(f"only {CIFAR_SHAPE} images with byte labels fit the CIFAR-10 container")
    pixels = np.rint(dataset.images.astype(np.float64) * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def write_cifar_file(dataset: LabeledImageSet, path: Path) -> Path:
    """Write the CIFAR-10 container; reloading gives back the same set bit for bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(cifar_bytes(dataset))
    return path


def _read_member(directory: Path, name: str, split: str) -> LabeledImageSet:
    path = directory / name
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 file not found: {path}")
    size = path.stat().st_size
    if size != FILE_BYTES:
        raise DatasetError(f"{path}: expected {FILE_BYTES} bytes, found {size}")
    return read_cifar_file(path, split)


def load_cifar10(directory: Path) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Load the five training batches and the test batch of CIFAR-10."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    parts = [_read_member(directory, name, "train") for name in TRAIN_FILES]
    train = LabeledImageSet(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        CIFAR_CLASSES,
        "train",
    )
    test = _read_member(directory, TEST_FILE, "test")
    log.info("data.cifar10_loaded", directory=str(directory), n_train=len(train), n_test=len(test))
    return train, test


def sha256_file(path: Path) -> str:
    """Hex digest of a file, read in 1 MiB chunks."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1024 * 1024), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checksums(directory: Path, manifest: Path) -> Dict[str, str]:
    """Check files against a ``sha256sum``-style manifest (``<hex>  <name>`` per line).

    Returns:
        Mapping of file name to verified digest.

    Raises:
        FileNotFoundError: If the manifest or a listed file is missing.
        DatasetError: If the manifest is malformed or any digest differs.
    """
    directory, manifest = Path(directory), Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"Checksum manifest not found: {manifest}")
    verified: Dict[str, str] = {}
    mismatched: List[str] = []
    for number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or len(parts[0]) != 64:
            raise DatasetError(f"{manifest}:{number}: expected '<sha256>  <file>'")
        expected, name = parts[0].lower(), parts[1].strip().lstrip("*")
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"Listed file not found: {path}")
        actual = sha256_file(path)
        if actual != expected:
            mismatched.append(name)
        verified[name] = actual
    if mismatched:
        raise DatasetError(f"checksum mismatch: {', '.join(mismatched)}")
    return verified


# --- synthetic sets ------------------------------------------------------------


def blob_templates(seed: int, num_classes: int, shape: Tuple[int, int, int]) -> np.ndarray:
    """Distinct per-class sign templates in {-1, +1}^(c*h*w)."""
    if num_classes < 2:
        raise DatasetError(f"synth_blobs needs K >= 2, got {num_classes}")
    size = int(np.prod(shape))
    if num_classes > 2**min(size, 62):
        raise DatasetError(f"{num_classes} distinct templates do not fit {shape}")
    rng = np.random.default_rng([seed, 0])
    for _ in range(100):
        templates = rng.choice(np.array([-1.0, 1.0]), size=(num_classes, size))
        if len(np.unique(templates, axis=0)) == num_classes:
            return templates.reshape(num_classes, *shape)
    raise DatasetError(f"could not draw {num_classes} distinct templates for {shape}")


def synth_blobs(
    seed: int,
    num_classes: int,
    n: int,
    c: int = 3,
    h: int = 16,
    w: int = 16,
    margin: float = 0.5,
    noise: float = 0.25,
    split: str = "train",
) -> LabeledImageSet:
    """Class template plus bounded uniform noise, clipped to [0, 1]; balanced labels.

    Templates depend on ``seed`` only, so splits drawn with the same seed share them.
    """
    templates = blob_templates(seed, num_classes, (c, h, w))
    rng = substream(seed, 1, purpose=split)
    labels = rng.permutation(np.arange(n) % num_classes)
    jitter = rng.uniform(-1.0, 1.0, size=(n, c, h, w))
    images = np.clip(0.5 + 0.5 * margin * templates[labels] + noise * jitter, 0.0, 1.0)
    return LabeledImageSet(images.astype(np.float32), labels, num_classes, split)


def nearest_template(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Index of the closest template (squared distance) per image."""
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    centers = 0.5 + 0.5 * templates.reshape(templates.shape[0], -1)
    distances = ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1)


# --- selection and batching ----------------------------------------------------


def subset(dataset: LabeledImageSet, n: int, seed: int) -> LabeledImageSet:
    if n >= len(dataset):
        return dataset
    indices = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:n])
    return dataset.take(indices)


def iter_batches(size: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Index batches over ``size`` samples; shuffled when ``rng`` is given."""
    order = rng.permutation(size) if rng is not None else np.arange(size)
    for start in range(0, size, batch_size):
        yield order[start : start + batch_size]


# --- augmentation --------------------------------------------------------------


def crop_and_flip(image: np.ndarray, offset: Tuple[int, int], flip: bool, padding: int = CROP_PADDING) -> np.ndarray:
    """Zero-pad, crop back to the original extents at ``offset`` (row, col), optionally mirror."""
    _, h, w = image.shape
    row, col = offset
    if not (0 <= row <= 2 * padding and 0 <= col <= 2 * padding):
        raise DatasetError(f"crop offset {offset} outside [0, {2 * padding}]")
    padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)))
    out = padded[:, row : row + h, col : col + w]
    return out[:, :, ::-1].copy() if flip else out.copy()


def augment(image: np.ndarray, rng: np.random.Generator, padding: int = CROP_PADDING) -> np.ndarray:
    """Random crop from the 4-pixel zero-padded image plus a fair-coin horizontal flip."""
    row = int(rng.integers(0, 2 * padding + 1))
    col = int(rng.integers(0, 2 * padding + 1))
    flip = bool(rng.random() < 0.5)
    return crop_and_flip(image, (row, col), flip, padding)


def augment_batch(images: np.ndarray, streams: BatchStreams) -> np.ndarray:
    return np.stack([augment(image, rng) for image, rng in zip(images, streams.each("augment"))])
