"""MNIST (IDX) and CIFAR-10 (binary version) readers, normalization and batching."""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DATA_ROOT_ENV = "MINMAX_LENET_DATA"


class DatasetError(Exception):
    code = "dataset"


class BadMagicError(DatasetError):
    code = "bad-magic"


class TruncatedFileError(DatasetError):
    code = "truncated"


class CountMismatchError(DatasetError):
    code = "count-mismatch"


class RecordError(DatasetError):
    code = "bad-record"


@dataclass(frozen=True)
class NormSpec:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std need one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive")

    def arrays(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        shape = (1, len(self.mean), 1, 1)
        return (np.asarray(self.mean, dtype=dtype).reshape(shape),
                np.asarray(self.std, dtype=dtype).reshape(shape))


MNIST_NORM = NormSpec((0.1307,), (0.3081,))
CIFAR10_NORM = NormSpec((0.4914, 0.4822, 0.4465), (0.2023, 0.1994, 0.2010))
DEFAULT_NORMS = {"mnist": MNIST_NORM, "cifar10": CIFAR10_NORM}


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W)
    labels: np.ndarray          # (N,) int64
    name: str
    norm: NormSpec | None = None  # set once normalized
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name, self.norm, dict(self.info))


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(buf: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than the IDX magic")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than the IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise TruncatedFileError(f"{path}: need {count} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, dtype=np.float32) -> Dataset:
    """Parse a pair of MNIST IDX files (optionally gzipped) into raw [0, 1] images."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise RecordError(f"{labels_path}: label {labels.max()} out of range")
    x = (images.astype(dtype) / dtype(255))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), "mnist")


def load_cifar10_bin(batch_paths: Sequence, dtype=np.float32) -> Dataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record)."""
    xs, ys = [], []
    for path in batch_paths:
        buf = _read_bytes(path)
        if len(buf) % CIFAR_RECORD:
            raise TruncatedFileError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0]
        if labels.size and labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise RecordError(f"{path}: record {bad} has label byte {labels[bad]}")
        ys.append(labels.astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if xs:
        x = np.concatenate(xs).astype(dtype) / dtype(255)
        y = np.concatenate(ys)
    else:
        x, y = np.zeros((0, 3, 32, 32), dtype), np.zeros(0, np.int64)
    return Dataset(x, y, "cifar10")


def normalize(d: Dataset, n: NormSpec) -> Dataset:
    """``(raw - mean) / std`` per channel."""
    if d.norm is not None:
        raise ValueError("dataset is already normalized")
    if len(n.mean) != d.channels:
        raise ValueError(f"NormSpec has {len(n.mean)} channels, dataset has {d.channels}")
    mean, std = n.arrays(d.images.dtype)
    return Dataset(((d.images - mean) / std).astype(d.images.dtype), d.labels, d.name, n, dict(d.info))


def denormalize(d: Dataset) -> Dataset:
    if d.norm is None:
        return d
    mean, std = d.norm.arrays(d.images.dtype)
    return Dataset((d.images * std + mean).astype(d.images.dtype), d.labels, d.name, None, dict(d.info))


def permutation(n: int, seed: int) -> np.ndarray:
    """Seeded Fisher-Yates shuffle of ``range(n)``."""
    rng = np.random.default_rng(seed)
    # swap partner for position i is drawn uniformly from [0, i]
    partners = rng.integers(0, np.arange(1, n + 1)).tolist() if n else []
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = partners[i]
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def batches(d: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) minibatches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = permutation(len(d), seed) if shuffle else np.arange(len(d))
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        yield d.images[idx], d.labels[idx]


# ---------------------------------------------------------------- locating / fetching

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "minmax_lenet"))


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name}[.gz] not found in {directory}")


def load_mnist(split: str, root=None) -> Dataset:
    directory = data_root(root) / "mnist"
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(_find(directory, img), _find(directory, lab))


def load_cifar10(split: str, root=None) -> Dataset:
    base = data_root(root) / "cifar10"
    directory = base / "cifar-10-batches-bin" if (base / "cifar-10-batches-bin").is_dir() else base
    names = CIFAR_TRAIN if split == "train" else CIFAR_TEST
    return load_cifar10_bin([_find(directory, n) for n in names])


def load_dataset(name: str, split: str, root=None) -> Dataset:
    if name == "mnist":
        return load_mnist(split, root)
    if name == "cifar10":
        return load_cifar10(split, root)
    raise ValueError(f"unknown dataset {name!r}")


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, md5: str) -> Path:
    if not (dest.exists() and _md5(dest) == md5):
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_suffix(dest.suffix + ".part")
        urllib.request.urlretrieve(url, tmp)
        got = _md5(tmp)
        if got != md5:
            tmp.unlink()
            raise DatasetError(f"checksum mismatch for {url}: {got} != {md5}")
        tmp.replace(dest)
    return dest


def fetch(name: str, root=None) -> Path:
    """Download the canonical archives into the data root, verifying MD5 sums."""
    base = data_root(root)
    if name == "mnist":
        for fname, md5 in MNIST_MD5.items():
            _download(MNIST_URL + fname, base / "mnist" / fname, md5)
        return base / "mnist"
    if name == "cifar10":
        archive = _download(CIFAR_URL, base / "cifar10" / "cifar-10-binary.tar.gz", CIFAR_MD5)
        with tarfile.open(archive) as tar:
            tar.extractall(base / "cifar10")
        return base / "cifar10" / "cifar-10-batches-bin"
    raise ValueError(f"unknown dataset {name!r}")
