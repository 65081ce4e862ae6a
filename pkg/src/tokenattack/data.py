"""MNIST (IDX) and CIFAR-10 (binary batch) ingestion, normalization and
deterministic evaluation subsets."""

from dataclasses import dataclass, replace
import gzip
from pathlib import Path
import struct
import zlib

import numpy as np

from .errors import ConsistencyError, ContractError, FormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

# Conventional per-channel statistics of the raw [0, 1] pixel range.
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "identity": ((0.0,), (1.0,)),
}


@dataclass(frozen=True)
class Normalization:
    mean: tuple
    std: tuple

    def _stats(self, channels, dtype=np.float32):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.size == 1 and channels > 1:
            mean = np.repeat(mean, channels)
            std = np.repeat(std, channels)
        if mean.size != channels:
            raise ContractError(f"normalization has {mean.size} channels, images have {channels}")
        return mean.reshape(-1, 1, 1), std.reshape(-1, 1, 1)

    def normalize(self, raw):
        """``uint8 [..., C, H, W] -> float32`` via ``(raw/255 - mean_c) / std_c``."""
        raw = np.asarray(raw)
        mean, std = self._stats(raw.shape[-3])
        return ((raw.astype(np.float64) / 255.0 - mean) / std).astype(np.float32)

    def denormalize(self, x):
        """Inverse of :meth:`normalize`, returned in raw 0..255 units (float)."""
        x = np.asarray(x, dtype=np.float64)
        mean, std = self._stats(x.shape[-3])
        return (x * std + mean) * 255.0

    def to_bytes(self, x):
        return np.clip(np.rint(self.denormalize(x)), 0, 255).astype(np.uint8)

    def gray_level(self, count=1.0, channels=None):
        """Per-channel normalized size of ``count`` raw gray levels, shape ``[C, 1, 1]``."""
        channels = channels or len(self.std)
        _, std = self._stats(channels)
        return (count / (255.0 * std)).astype(np.float32)

    def pixel_range(self, channels=None):
        """Normalized images of raw 0 and raw 255, each shaped ``[C, 1, 1]``."""
        channels = channels or len(self.std)
        mean, std = self._stats(channels)
        return ((0.0 - mean) / std).astype(np.float32), ((1.0 - mean) / std).astype(np.float32)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W], normalized
    labels: np.ndarray  # int64 [N]
    normalization: Normalization
    split: str = ""
    name: str = ""
    num_classes: int = 10
    indices: np.ndarray = None  # original indices when this is a subset

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError(f"labels outside [0, {self.num_classes})")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self, images=self.images[idx], labels=self.labels[idx], indices=self.indices[idx]
        )


# ------------------------------------------------------------------ parsing


def _read(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def parse_idx(data, expected_magic, name="<bytes>"):
    """Parse one IDX u8 buffer into an ndarray with the header's dims."""
    if len(data) < 4:
        raise TruncatedFileError(f"{name}: {len(data)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{name}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(data) < header:
        raise TruncatedFileError(f"{name}: header needs {header} bytes, file has {len(data)}")
    dims = struct.unpack(f">{rank}I", data[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - header
    if have < need:
        raise TruncatedFileError(f"{name}: payload has {have} bytes, dims {dims} need {need}")
    if have > need:
        raise FormatError(f"{name}: {have - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_raw(images_path, labels_path):
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    return images[:, None, :, :], labels


def load_idx(images_path, labels_path, normalization=None, split="", num_classes=10):
    raw, labels = load_idx_raw(images_path, labels_path)
    if labels.size and labels.max() >= num_classes:
        raise ConsistencyError(f"{labels_path}: label {labels.max()} >= {num_classes}")
    norm = normalization or Normalization(*NORMALIZATION["mnist"])
    return Dataset(norm.normalize(raw), labels.astype(np.int64), norm, split, "mnist", num_classes)


def parse_cifar10(data, name="<bytes>"):
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        whole = len(data) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(
            f"{name}: length {len(data)} is not a positive multiple of {CIFAR_RECORD}; "
            f"partial record at byte offset {whole}"
        )
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(
            f"{name}: label byte {labels[bad[0]]} at byte offset {bad[0] * CIFAR_RECORD}"
        )
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_raw(batch_paths):
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    parts = [parse_cifar10(Path(p).read_bytes(), str(p)) for p in batch_paths]
    if not parts:
        raise ContractError("no CIFAR-10 batch files given")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_cifar10(batch_paths, normalization=None, split=""):
    raw, labels = load_cifar10_raw(batch_paths)
    norm = normalization or Normalization(*NORMALIZATION["cifar10"])
    return Dataset(norm.normalize(raw), labels, norm, split, "cifar10", 10)


def load_dataset(name, root, split="test"):
    """Load a canonical split from ``root`` (standard upstream file names)."""
    root = Path(root)
    if name == "mnist":
        prefix = "train" if split == "train" else "t10k"
        img = _first_existing(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
        lab = _first_existing(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
        return load_idx(img, lab, split=split)
    if name == "cifar10":
        if split == "train":
            files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
        else:
            files = [root / "test_batch.bin"]
        return load_cifar10(files, split=split)
    raise ContractError(f"unknown dataset {name!r}")


def _first_existing(root, names):
    for n in names:
        for cand in (root / n, root / (n + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {names} (optionally .gz) found in {root}")


def select_eval_subset(data, n, seed):
    """``n`` distinct examples drawn with a seeded RNG, kept in ascending index order."""
    if n > len(data):
        raise ContractError(f"subset of {n} requested from {len(data)} examples")
    if n < 0:
        raise ContractError("subset size must be non-negative")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(data), size=n, replace=False))
    return data.take(idx)
