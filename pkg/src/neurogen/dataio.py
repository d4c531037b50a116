"""Dataset loading: IDX image files, "label,text" CSV, synthetic blobs."""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from neurogen.archspec import PAD_ID, TEXT_VOCAB

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DatasetHandle:
    """One split of a classification dataset."""

    id: str
    modality: str  # image | text | vector
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{self.id}: {len(self.x)} inputs but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"{self.id}: labels outside [0, {self.num_classes})")
        object.__setattr__(self, "x", _frozen(self.x))
        object.__setattr__(self, "y", _frozen(self.y.astype(np.int64)))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def limit(self, n: int | None) -> "DatasetHandle":
        """First ``n`` samples (the whole split when ``n`` is None or larger)."""
        if n is None or n >= len(self):
            return self
        return DatasetHandle(self.id, self.modality, self.x[:n], self.y[:n], self.num_classes, self.split)


@dataclass(frozen=True)
class Dataset:
    train: DatasetHandle
    test: DatasetHandle
    centers: np.ndarray | None = None  # synthetic data only

    def __post_init__(self):
        if self.train.num_classes != self.test.num_classes or self.train.input_shape != self.test.input_shape:
            raise DataError("train and test splits disagree on classes or input shape")

    @property
    def id(self) -> str:
        return self.train.id

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def modality(self) -> str:
        return self.train.modality

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.train.input_shape

    def majority_baseline(self) -> float:
        """Test accuracy of always predicting the most frequent training class."""
        top = np.bincount(self.train.y, minlength=self.num_classes).argmax()
        return float(np.mean(self.test.y == top))


# IDX ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header (offset 0)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(raw) - start != need:
        raise DataError(f"{path}: header declares {need} bytes of data at offset {start}, found {len(raw) - start}")
    return np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(dims)


def area_downsample(images: np.ndarray, side: int) -> np.ndarray:
    """Average non-overlapping blocks; the source side must be a multiple of ``side``."""
    n, h, w = images.shape[-3], images.shape[-2], images.shape[-1]
    if h % side or w % side:
        raise DataError(f"cannot area-average {h}×{w} down to {side}×{side}")
    fh, fw = h // side, w // side
    lead = images.shape[:-2]
    return images.reshape(*lead, side, fh, side, fw).mean(axis=(-3, -1))


def load_idx(images_path, labels_path, downsample_to: int | None = None,
             dataset_id: str | None = None, split: str = "train", num_classes: int = 10) -> DatasetHandle:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected N×H×W images, got {images.shape}")
    if len(labels) != len(images):
        raise DataError(
            f"{labels_path}: {len(labels)} labels (offset 4 count) but {images_path} has {len(images)} images"
        )
    x = images.astype(np.float32) / 255.0
    if downsample_to is not None and downsample_to != x.shape[-1]:
        x = area_downsample(x, downsample_to).astype(np.float32)
    x = x[:, None, :, :]
    return DatasetHandle(dataset_id or Path(images_path).name.split("-")[0], "image", x,
                         labels.astype(np.int64), num_classes, split)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", *images.shape)
    _write_maybe_gz(path, header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">I", IDX_LABELS) + struct.pack(">I", labels.shape[0])
    _write_maybe_gz(path, header + labels.tobytes())


def _write_maybe_gz(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx_dataset(directory, prefix: str = "", downsample_to: int | None = None,
                     dataset_id: str = "mnist", num_classes: int = 10) -> Dataset:
    """Load the standard four-file layout (train/t10k images and labels)."""
    d = Path(directory)

    def find(stem):
        for suffix in ("", ".gz"):
            p = d / f"{prefix}{stem}{suffix}"
            if p.exists():
                return p
        raise FileNotFoundError(d / f"{prefix}{stem}")

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
                     downsample_to, dataset_id, "train", num_classes)
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"),
                    downsample_to, dataset_id, "test", num_classes)
    return Dataset(train, test)


def export_mnist5k(directory, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write mlxtend's bundled 5,000-digit MNIST subset in the four-file IDX layout.

    The split is stratified: ``test_per_class`` digits of each class go to
    ``t10k-*``, the rest to ``train-*``. Needs the optional ``mlxtend`` package.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise DataError("exporting the MNIST subset needs mlxtend (pip install mlxtend)") from exc
    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng([seed, 0x3157])
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(y == c))[:test_per_class]
                               for c in range(10)])
    is_test = np.zeros(len(y), dtype=bool)
    is_test[test_idx] = True
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for prefix, sel in (("train", ~is_test), ("t10k", is_test)):
        idx = np.flatnonzero(sel)
        idx = idx[rng.permutation(len(idx))]
        write_idx_images(d / f"{prefix}-images-idx3-ubyte", x[idx])
        write_idx_labels(d / f"{prefix}-labels-idx1-ubyte", y[idx])
    return d


# text ------------------------------------------------------------------------------

def encode_text(text: str, max_len: int) -> np.ndarray:
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)[:max_len]
    ids[: raw.size] = raw
    return ids


def decode_text(ids) -> str:
    ids = [int(i) for i in ids if int(i) != PAD_ID]
    return bytes(ids).decode("utf-8", errors="replace")


def load_text_csv(path, max_len: int = 64, num_classes: int | None = None, label_base: int = 0,
                  vocab: int = TEXT_VOCAB, dataset_id: str | None = None, split: str = "train") -> DatasetHandle:
    """Rows are ``label,text``; further columns are joined into the text with spaces.

    ``label_base`` is subtracted from every label (AG News ships 1-based labels).
    """
    if vocab != TEXT_VOCAB:
        raise DataError(f"only the byte-level vocabulary ({TEXT_VOCAB}) is supported")
    raw = _read_bytes(path).decode("utf-8")
    ids, labels = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(raw)), start=1):
        if not row:
            continue
        if len(row) < 2:
            raise DataError(f"{path}:{lineno}: expected label,text")
        try:
            label = int(row[0]) - label_base
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {row[0]!r} is not an integer") from None
        text = " ".join(col.strip() for col in row[1:]).strip()
        if not text:
            raise DataError(f"{path}:{lineno}: empty text")
        if label < 0:
            raise DataError(f"{path}:{lineno}: label {label + label_base} below base {label_base}")
        ids.append(encode_text(text, max_len))
        labels.append(label)
    if not labels:
        raise DataError(f"{path}: no rows")
    y = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    if y.max() >= k:
        raise DataError(f"{path}: label {int(y.max())} out of range for {k} classes")
    return DatasetHandle(dataset_id or Path(path).stem, "text", np.stack(ids), y, k, split)


# synthetic ---------------------------------------------------------------------

def blob_centers(k: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Random centers with pairwise distance at least ``separation``."""
    if k == 2:
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        return np.stack([u, -u]) * (separation / 2)
    radius = separation * max(1.0, k ** (1.0 / dim))
    while True:
        c = rng.normal(size=(k, dim)) * radius
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= separation:
            return c


def synth_blobs(k: int = 3, n_per_class: int = 200, dim: int = 8, separation: float = 6.0,
                seed: int = 0, sigma: float = 1.0) -> Dataset:
    """Gaussian clusters (std ``sigma``) with a stratified 80/20 train/test split."""
    if k < 2:
        raise DataError("need at least two classes")
    if separation <= 0:
        raise DataError("separation must be positive")
    rng = np.random.default_rng([seed, 0xB10B])
    centers = blob_centers(k, dim, separation * sigma, rng)
    n_train = int(round(0.8 * n_per_class))
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(k):
        pts = centers[c] + sigma * rng.normal(size=(n_per_class, dim))
        parts["train"][0].append(pts[:n_train])
        parts["train"][1].append(np.full(n_train, c))
        parts["test"][0].append(pts[n_train:])
        parts["test"][1].append(np.full(n_per_class - n_train, c))
    handles = {}
    for split, (xs, ys) in parts.items():
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        handles[split] = DatasetHandle(f"blobs{k}", "vector", x[order], y[order], k, split)
    return Dataset(handles["train"], handles["test"], centers)


def sample_subset(handle: DatasetHandle | Dataset, m: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """``m`` distinct training samples drawn uniformly; ``seed`` may be an int or a Generator."""
    if isinstance(handle, Dataset):
        handle = handle.train
    if m < 1 or m > len(handle):
        raise DataError(f"subset size {m} outside [1, {len(handle)}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(handle), size=m, replace=False)
    return handle.x[idx], handle.y[idx]
