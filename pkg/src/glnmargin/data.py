"""Dataset handling: MNIST IDX files, the binary digit task, synthetic fixtures."""

from __future__ import annotations

import dataclasses
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_MAGIC_IMAGES = 2051
IDX_MAGIC_LABELS = 2049

_MAGIC_NDIM = {IDX_MAGIC_IMAGES: 3, IDX_MAGIC_LABELS: 1}


class IdxFormatError(ValueError):
    """Raised for malformed IDX byte streams."""


@dataclass(frozen=True)
class RawMnist:
    """Parsed MNIST file pair: uint8 images (N, 28, 28) and digit labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be 3-d, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )
        if self.labels.size and int(self.labels.max()) > 9:
            raise ValueError("labels must be digits 0-9")

    @property
    def n(self) -> int:
        return self.images.shape[0]


def parse_idx(data: bytes) -> np.ndarray:
    """Decode one IDX byte stream into a uint8 array.

    Magic 2051 yields an image tensor (count, rows, cols); magic 2049 a label
    vector (count,). All header integers are big-endian.
    """
    if len(data) < 4:
        raise IdxFormatError("truncated header")
    (magic,) = struct.unpack(">i", data[:4])
    if magic not in _MAGIC_NDIM:
        raise IdxFormatError(f"malformed magic number {magic}")
    ndim = _MAGIC_NDIM[magic]
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError("truncated header")
    dims = struct.unpack(f">{ndim}i", data[4:header_len])
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"dimension overflow in header: {dims}")
    count = int(np.prod([int(d) for d in dims], dtype=object))
    payload = data[header_len:]
    if len(payload) < count:
        raise IdxFormatError(
            f"truncated payload: header declares {count} bytes, got {len(payload)}"
        )
    if len(payload) > count:
        raise IdxFormatError(
            f"payload size mismatch: header declares {count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()


def write_idx(arr: np.ndarray) -> bytes:
    """Encode a uint8 array back into IDX bytes. Inverse of :func:`parse_idx`."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_MAGIC_IMAGES
    elif arr.ndim == 1:
        magic = IDX_MAGIC_LABELS
    else:
        raise ValueError(f"only 1-d labels or 3-d images supported, got ndim {arr.ndim}")
    header = struct.pack(">i", magic) + struct.pack(f">{arr.ndim}i", *arr.shape)
    return header + arr.tobytes()


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_raw_mnist(images_path: str | Path, labels_path: str | Path) -> RawMnist:
    """Read an IDX image/label file pair (plain or gzipped)."""
    images = parse_idx(_read_bytes(images_path))
    labels = parse_idx(_read_bytes(labels_path))
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path} is not an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path} is not a label file")
    return RawMnist(images=images, labels=labels)


@dataclass(frozen=True)
class Dataset:
    """Labeled inputs with optional per-sample global contexts.

    ``inputs`` is (N, D) float64 and ``labels`` (N,) with values in {-1, +1}.
    ``contexts`` is (N, H) when assigned: entries in 1..C for gated linear
    networks, in {0, 1} for frozen-gate ReLU models. ``witness`` carries the
    separating direction a synthetic generator used, when there is one.
    """

    inputs: np.ndarray
    labels: np.ndarray
    contexts: np.ndarray | None = None
    witness: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be (N, D), got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input row required")
        bad = np.setdiff1d(np.unique(self.labels), [-1, 1])
        if bad.size:
            raise ValueError(f"labels must be -1 or +1, found {bad.tolist()}")
        if self.contexts is not None and self.contexts.shape[0] != self.inputs.shape[0]:
            raise ValueError("one context per sample required")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def with_contexts(self, contexts: np.ndarray) -> "Dataset":
        return dataclasses.replace(self, contexts=np.asarray(contexts))

    def subset(self, idx: np.ndarray) -> "Dataset":
        ctx = None if self.contexts is None else self.contexts[idx]
        return Dataset(self.inputs[idx], self.labels[idx], ctx, self.witness)

    def to_csv(self, path: str | Path) -> None:
        """Write ``row,label,feat_0..feat_{D-1}`` rows, 17 significant digits."""
        cols = ",".join(f"feat_{i}" for i in range(self.dim))
        with open(path, "w") as fh:
            fh.write(f"row,label,{cols}\n")
            for i in range(self.n):
                feats = ",".join(f"{v:.17g}" for v in self.inputs[i])
                fh.write(f"{i},{int(self.labels[i])},{feats}\n")


def make_binary_task(
    raw: RawMnist, n_train: int, n_val: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Build the two-class digit task: digits 0-4 map to +1, digits 5-9 to -1.

    Pixels are scaled to [0, 1] and a constant 1 feature is appended so the
    predictors stay homogeneous in the weights. Train and validation rows are
    disjoint draws from one seeded permutation of the file.
    """
    if n_train + n_val > raw.n:
        raise ValueError(
            f"insufficient samples: requested {n_train}+{n_val} of {raw.n}"
        )
    perm = np.random.default_rng(seed).permutation(raw.n)
    flat = raw.images.reshape(raw.n, -1).astype(np.float64) / 255.0
    inputs = np.hstack([flat, np.ones((raw.n, 1))])
    labels = np.where(raw.labels <= 4, 1, -1).astype(np.int64)

    train_idx = perm[:n_train]
    val_idx = perm[n_train : n_train + n_val]
    train = Dataset(inputs[train_idx], labels[train_idx])
    val = Dataset(inputs[val_idx], labels[val_idx])
    return train, val


def gen_synthetic(n: int, d: int, margin: float, seed: int) -> Dataset:
    """Generate a linearly separable dataset with geometric margin >= ``margin``.

    Labels alternate so counts are balanced up to one. Each point sits at a
    distance drawn from [margin, margin + 1] along a random unit witness
    direction, on the side its label dictates, plus noise orthogonal to the
    witness. The witness is attached to the returned dataset.
    """
    if n < 1 or d < 1 or margin <= 0:
        raise ValueError("need n >= 1, d >= 1, margin > 0")
    rng = np.random.default_rng(seed)
    witness = rng.normal(size=d)
    witness /= np.linalg.norm(witness)
    labels = np.where(np.arange(n) % 2 == 0, 1, -1).astype(np.int64)
    dist = rng.uniform(margin, margin + 1.0, size=n)
    noise = rng.normal(size=(n, d))
    noise -= np.outer(noise @ witness, witness)
    inputs = labels[:, None] * dist[:, None] * witness[None, :] + noise
    return Dataset(inputs=inputs, labels=labels, witness=witness)
