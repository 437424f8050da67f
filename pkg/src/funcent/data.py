"""MNIST IDX I/O, the biased Colored-MNIST construction, and synthetic blobs.

A colored sample has two modalities: a 3-entry RGB color and the 784 pixel
intensities of the digit. In the train split the color is drawn around a
per-digit palette color; in the test split it is gray, so only the shape
carries label information.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .measures import ModalPoint, SeededSampler

IDX_IMAGES = 2051
IDX_LABELS = 2049
CMN_MAGIC = b"CMN1"
CMN_VERSION = 1
MNIST_DIR_ENV = "FUNCENT_MNIST_DIR"

# corners of the RGB cube plus two mid-edge points, indexed by digit
DEFAULT_PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
        [1.0, 0.5, 0.0],
        [0.0, 0.5, 1.0],
    ]
)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class RawMnist:
    images: np.ndarray  # (count, 28, 28) uint8
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1:] != (28, 28):
            raise IdxError(f"MNIST images must be 28x28, got {self.images.shape[1:]}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxError("image count does not match label count")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def head(self, count: int) -> "RawMnist":
        return RawMnist(self.images[:count], self.labels[:count])


# IDX


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file (images 2051 or labels 2049)."""
    if len(blob) < 8:
        raise IdxError("truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic == IDX_IMAGES:
        if len(blob) < 16:
            raise IdxError("truncated IDX header")
        count, rows, cols = struct.unpack(">III", blob[4:16])
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_LABELS:
        (count,) = struct.unpack(">I", blob[4:8])
        shape, offset = (count,), 8
    else:
        raise IdxError(f"unknown IDX magic {magic}")
    expected = int(np.prod(shape))
    payload = blob[offset:]
    if len(payload) != expected:
        raise IdxError(f"IDX payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def write_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError("only unsigned-byte IDX payloads are supported")
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS, array.shape[0])
    else:
        raise IdxError(f"cannot write a rank-{array.ndim} array as MNIST IDX")
    return header + np.ascontiguousarray(array).tobytes()


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing MNIST file {path} (or {gz.name})")


def load_mnist_split(directory, split: str) -> tuple[RawMnist, str]:
    """Read one split from a directory of standard MNIST files; returns data and digest."""
    img_name, lbl_name = MNIST_FILES[split]
    directory = Path(directory)
    img_bytes = _read_maybe_gz(directory / img_name)
    lbl_bytes = _read_maybe_gz(directory / lbl_name)
    digest = hashlib.sha256(img_bytes + lbl_bytes).hexdigest()
    images, labels = parse_idx(img_bytes), parse_idx(lbl_bytes)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxError(f"{split}: expected an image file and a label file")
    return RawMnist(images, labels), digest


def mnist_dir(explicit=None) -> Path:
    value = explicit or os.environ.get(MNIST_DIR_ENV)
    if not value:
        raise FileNotFoundError(f"no MNIST directory given and {MNIST_DIR_ENV} is not set")
    return Path(value)


# datasets


@dataclass
class ModalDataset:
    """A split stored column-wise: one ``(N, d_i)`` array per modality."""

    modalities: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.modalities = [np.asarray(m, dtype=np.float64) for m in self.modalities]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if any(m.shape[0] != self.labels.shape[0] for m in self.modalities):
            raise ValueError("modality row counts must match the label count")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> list[int]:
        return [m.shape[1] for m in self.modalities]

    def batch(self, idx) -> tuple[list[np.ndarray], np.ndarray]:
        return [m[idx] for m in self.modalities], self.labels[idx]

    def point(self, k: int) -> ModalPoint:
        return ModalPoint([m[k] for m in self.modalities], int(self.labels[k]))

    def points(self) -> list[ModalPoint]:
        return [self.point(k) for k in range(len(self))]

    @classmethod
    def from_points(cls, points: Sequence[ModalPoint]) -> "ModalDataset":
        n = points[0].n
        mods = [np.stack([p.modalities[i] for p in points]) for i in range(n)]
        return cls(mods, np.array([p.label for p in points]))


@dataclass
class DatasetManifest:
    palette: list[list[float]]
    color_std: float
    seed: int
    counts: dict[str, int]
    source_digests: dict[str, str] = field(default_factory=dict)
    gray_mode: str = "foreground_mean"
    payload_digest: str = ""
    kind: str = "colored_mnist"
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.shape != (10, 3):
            raise ValueError("palette must have 10 RGB entries")
        if len({tuple(row) for row in pal.tolist()}) != 10:
            raise ValueError("palette entries must be pairwise distinct")
        if self.color_std <= 0:
            raise ValueError("color std must be positive")
        if self.gray_mode not in ("foreground_mean", "fixed"):
            raise ValueError(f"unknown gray mode {self.gray_mode!r}")
        if self.kind not in ("colored_mnist", "blobs"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ColoredMnist:
    train: ModalDataset
    test: ModalDataset
    manifest: DatasetManifest


def _gray_color(images: np.ndarray, mode: str) -> np.ndarray:
    if mode == "fixed":
        g = np.full(images.shape[0], 0.5)
    else:
        flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        fg = flat > 0
        g = np.where(fg.any(axis=1), (flat * fg).sum(axis=1) / np.maximum(fg.sum(axis=1), 1), 0.0)
    return np.repeat(g[:, None], 3, axis=1)


def colorize_dataset(
    train_raw: RawMnist,
    test_raw: RawMnist,
    palette: np.ndarray = DEFAULT_PALETTE,
    color_std: float = 0.02,
    seed: int = 0,
    gray_mode: str = "foreground_mean",
    source_digests: dict[str, str] | None = None,
) -> ColoredMnist:
    """Split MNIST into (color, shape) modalities with a label-correlated train color."""
    palette = np.asarray(palette, dtype=np.float64)
    manifest = DatasetManifest(
        palette.tolist(),
        float(color_std),
        int(seed),
        {"train": len(train_raw), "test": len(test_raw)},
        dict(source_digests or {}),
        gray_mode,
    )
    s = SeededSampler(seed, 0xC010)
    centers = palette[train_raw.labels.astype(np.int64)]
    train_color = np.clip(centers + color_std * s.normal(centers.shape), 0.0, 1.0)
    train = ModalDataset(
        [train_color, train_raw.images.reshape(len(train_raw), -1) / 255.0], train_raw.labels
    )
    test = ModalDataset(
        [_gray_color(test_raw.images, gray_mode), test_raw.images.reshape(len(test_raw), -1) / 255.0],
        test_raw.labels,
    )
    return ColoredMnist(train, test, manifest)


def raw_train_colors(raw: RawMnist, palette=DEFAULT_PALETTE, color_std=0.02, seed=0) -> np.ndarray:
    """The unclamped train colors :func:`colorize_dataset` draws for the same seed."""
    s = SeededSampler(seed, 0xC010)
    centers = np.asarray(palette)[raw.labels.astype(np.int64)]
    return centers + color_std * s.normal(centers.shape)


def nearest_palette(colors: np.ndarray, palette=DEFAULT_PALETTE) -> np.ndarray:
    d = ((colors[:, None, :] - np.asarray(palette)[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def synth_blobs(
    n_modalities: int = 2,
    dims: Sequence[int] = (4, 16),
    classes: int = 4,
    bias_strength: float = 1.0,
    count: int = 1000,
    seed: int = 0,
    split: str = "train",
    spread: Sequence[float] = (0.05, 0.35),
) -> list[ModalPoint]:
    """Gaussian class clusters; modality 0 is the shortcut modality.

    In the train split modality 0 sits at the label's cluster with probability
    ``bias_strength`` (otherwise a random cluster); in the test split its
    cluster is drawn independently of the label. Every other modality is at the
    label's cluster in both splits, with noise ``spread[i]``. Cluster centers
    depend only on ``seed``, so train and test built from one seed share them.
    """
    if n_modalities < 1 or classes < 1 or count < 1 or any(d < 1 for d in dims):
        raise ValueError("sizes must be positive")
    if not 0.0 <= bias_strength <= 1.0:
        raise ValueError("bias_strength must be in [0, 1]")
    if len(dims) != n_modalities:
        raise ValueError("one dimension per modality is required")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    spread = list(spread) + [spread[-1]] * (n_modalities - len(spread))
    center_rng = SeededSampler(seed, 0xB10B)
    centers = [center_rng.uniform((classes, d)) for d in dims]
    s = SeededSampler(seed, 0xB10B, 1 if split == "train" else 2)
    labels = (s.uniform(count) * classes).astype(np.int64)
    if split == "train":
        keep = s.uniform(count) < bias_strength
        shortcut = np.where(keep, labels, (s.uniform(count) * classes).astype(np.int64))
    else:
        shortcut = (s.uniform(count) * classes).astype(np.int64)
    mods = []
    for i, d in enumerate(dims):
        ids = shortcut if i == 0 else labels
        mods.append(centers[i][ids] + spread[i] * s.normal((count, d)))
    return [ModalPoint([m[k] for m in mods], int(labels[k])) for k in range(count)]


def blob_dataset(seed=0, count_train=2000, count_test=1000, **kw) -> tuple[ModalDataset, ModalDataset]:
    train = ModalDataset.from_points(synth_blobs(count=count_train, seed=seed, split="train", **kw))
    test = ModalDataset.from_points(synth_blobs(count=count_test, seed=seed, split="test", **kw))
    return train, test


def build_blobs(seed=0, count_train=2000, count_test=1000, bias_strength=1.0) -> ColoredMnist:
    """Blob splits in the same container type as Colored MNIST, for the CLI."""
    train, test = blob_dataset(seed, count_train, count_test, bias_strength=bias_strength)
    manifest = DatasetManifest(
        DEFAULT_PALETTE.tolist(),
        1.0,
        int(seed),
        {"train": count_train, "test": count_test},
        kind="blobs",
        params={"bias_strength": float(bias_strength)},
    )
    return ColoredMnist(train, test, manifest)


# CMN1 container


def _split_payload(ds: ModalDataset) -> bytes:
    out = bytearray(struct.pack("<II", len(ds), len(ds.modalities)))
    out += struct.pack(f"<{len(ds.modalities)}I", *ds.dims)
    for m in ds.modalities:
        out += np.ascontiguousarray(m, dtype="<f8").tobytes()
    out += np.ascontiguousarray(ds.labels, dtype="<f8").tobytes()
    return bytes(out)


def dataset_bytes(data: ColoredMnist) -> bytes:
    payload = _split_payload(data.train) + _split_payload(data.test)
    manifest = asdict(data.manifest)
    manifest["payload_digest"] = hashlib.sha256(payload).hexdigest()
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = CMN_MAGIC + struct.pack("<II", CMN_VERSION, len(header)) + header + payload
    return body + hashlib.sha256(body).digest()


def save_dataset(data: ColoredMnist, path) -> None:
    Path(path).write_bytes(dataset_bytes(data))


def load_dataset(path) -> ColoredMnist:
    return dataset_from_bytes(Path(path).read_bytes())


def dataset_from_bytes(blob: bytes) -> ColoredMnist:
    if blob[:4] != CMN_MAGIC:
        raise DatasetFormatError("not a CMN1 dataset (bad magic)")
    if len(blob) < 12 + 32:
        raise DatasetFormatError("truncated CMN1 dataset")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DatasetFormatError("CMN1 digest mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CMN_VERSION:
        raise DatasetFormatError(f"unsupported CMN1 version {version}")
    manifest_dict = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    payload = body[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != manifest_dict.get("payload_digest"):
        raise DatasetFormatError("CMN1 payload digest mismatch")
    pos = 0
    splits = []
    for _ in range(2):
        count, n = struct.unpack_from("<II", payload, pos)
        pos += 8
        dims = struct.unpack_from(f"<{n}I", payload, pos)
        pos += 4 * n
        mods = []
        for d in dims:
            mods.append(np.frombuffer(payload, "<f8", count * d, pos).reshape(count, d).copy())
            pos += 8 * count * d
        labels = np.frombuffer(payload, "<f8", count, pos).astype(np.int64)
        pos += 8 * count
        splits.append(ModalDataset(mods, labels))
    if pos != len(payload):
        raise DatasetFormatError("trailing bytes in CMN1 payload")
    return ColoredMnist(splits[0], splits[1], DatasetManifest(**manifest_dict))


def build_colored_mnist(
    directory=None,
    n_train: int = 10_000,
    n_test: int = 2_000,
    color_std: float = 0.02,
    seed: int = 0,
    gray_mode: str = "foreground_mean",
    palette=DEFAULT_PALETTE,
) -> ColoredMnist:
    directory = mnist_dir(directory)
    train_raw, d_train = load_mnist_split(directory, "train")
    test_raw, d_test = load_mnist_split(directory, "test")
    return colorize_dataset(
        train_raw.head(n_train),
        test_raw.head(n_test),
        palette,
        color_std,
        seed,
        gray_mode,
        {"train": d_train, "test": d_test},
    )


def write_mnist_dir(train: RawMnist, test: RawMnist, directory) -> Path:
    """Write both splits as uncompressed IDX files under their standard names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, raw in (("train", train), ("test", test)):
        img_name, lbl_name = MNIST_FILES[split]
        (directory / img_name).write_bytes(write_idx(raw.images))
        (directory / lbl_name).write_bytes(write_idx(raw.labels))
    return directory


def stratified_split(images, labels, train_per_class: int, seed: int = 0) -> tuple[RawMnist, RawMnist]:
    """Per-class train/test split of raw MNIST arrays in a seeded shuffled order."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 28, 28)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    s = SeededSampler(seed, 0x5B17)
    train_idx, test_idx = [], []
    for digit in np.unique(labels):
        idx = np.flatnonzero(labels == digit)
        idx = idx[np.argsort(s.uniform(idx.size), kind="stable")]
        if idx.size <= train_per_class:
            raise ValueError(f"digit {digit} has only {idx.size} images")
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    train_idx = train_idx[np.argsort(s.uniform(train_idx.size), kind="stable")]
    test_idx = test_idx[np.argsort(s.uniform(test_idx.size), kind="stable")]
    return (
        RawMnist(images[train_idx], labels[train_idx]),
        RawMnist(images[test_idx], labels[test_idx]),
    )
