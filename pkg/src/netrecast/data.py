"""Datasets, augmentation, synthetic data and batching.

Supported on-disk formats:

* ``idx``: the big-endian IDX layout (magic ``00 00 <dtype> <ndim>``, uint32
  dims, raw values).  Images come from one file, labels from a sibling file.
* ``cifar-binary``: fixed records of label byte(s) followed by 3072 pixel
  bytes stored channel-planar (R plane, G plane, B plane; row-major 32x32).
* ``raw-tensor``: the netrecast container from :mod:`netrecast.checkpoint`
  holding ``images`` and ``labels``.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .checkpoint import read_container, write_container
from .errors import CheckpointFormatError, DatasetFormatError, LabelOverflowError, TruncatedRecordError
from .ops import channels_last


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOverflowError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def with_stats_from(self, train: "Dataset") -> "Dataset":
        return replace(self, mean=train.mean, std=train.std)


def compute_stats(ds: Dataset) -> Dataset:
    """Attach per-channel mean/std computed from ``ds`` (call on the train split)."""
    mean = ds.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = ds.images.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = np.where(std > 1e-6, std, 1.0).astype(np.float32)
    return replace(ds, mean=mean, std=std)


def split_dataset(ds: Dataset, n_val: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    val, train = perm[:n_val], perm[n_val:]
    tr = compute_stats(ds.subset(np.sort(train), "train"))
    return tr, ds.subset(np.sort(val), "val").with_stats_from(tr)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype, ndim = np.dtype(_IDX_TYPES[raw[2]]), raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedRecordError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    body = raw[4 + 4 * ndim:]
    if len(body) < count * dtype.itemsize:
        raise TruncatedRecordError(f"{path}: expected {count} values, file holds {len(body) // dtype.itemsize}")
    if len(body) > count * dtype.itemsize:
        raise DatasetFormatError(f"{path}: {len(body) - count * dtype.itemsize} trailing bytes")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B, np.dtype("i4"): 0x0C,
            np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}[arr.dtype.newbyteorder("=")]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def _idx_labels_path(images_path: Path) -> Path | None:
    name = images_path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels"), ("-img", "-lbl")):
        if a in name:
            cand = images_path.with_name(name.replace(a, b))
            if cand.exists():
                return cand
    return None


def _scale_pixels(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind in "ui" and arr.dtype.itemsize == 1:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def load_idx(images_path, labels_path=None, num_classes: int | None = None, split: str = "train") -> Dataset:
    images_path = Path(images_path)
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise DatasetFormatError(f"{images_path}: IDX images need 3 or 4 dims, got {imgs.ndim}")
    labels_path = Path(labels_path) if labels_path else _idx_labels_path(images_path)
    if labels_path is not None:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if len(labels) != len(imgs):
            raise DatasetFormatError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images")
    else:
        labels = np.zeros(len(imgs), dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 1
    if labels.size and labels.max() >= k:
        raise LabelOverflowError(f"{labels_path}: label {labels.max()} >= num_classes {k}")
    return Dataset(_scale_pixels(imgs), labels, k, split)


def load_cifar_binary(path, num_classes: int = 10, label_bytes: int = 1, split: str = "train",
                      image_shape=(3, 32, 32)) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    pixels = int(np.prod(image_shape))
    rec = label_bytes + pixels
    if raw.size == 0 or raw.size % rec:
        raise TruncatedRecordError(f"{path}: {raw.size} bytes is not a whole number of {rec}-byte records")
    recs = raw.reshape(-1, rec)
    labels = recs[:, label_bytes - 1].astype(np.int64)  # the fine label is the last label byte
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise LabelOverflowError(f"{path}: record {bad} has label {labels[bad]} >= {num_classes}")
    images = recs[:, label_bytes:].reshape(-1, *image_shape).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes, split)


def write_cifar_binary(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    recs = np.concatenate([np.asarray(labels, np.uint8)[:, None], images_u8.reshape(len(labels), -1)], axis=1)
    recs.astype(np.uint8).tofile(path)


def export_raw(ds: Dataset, path) -> None:
    header = {"kind": "dataset", "num_classes": ds.num_classes, "split": ds.split}
    write_container(path, header, [("images", ds.images), ("labels", ds.labels.astype(np.float32))])


def load_raw(path, split: str | None = None) -> Dataset:
    try:
        header, arrays = read_container(path)
    except CheckpointFormatError as exc:
        raise DatasetFormatError(str(exc)) from exc
    if header.get("kind") != "dataset":
        raise DatasetFormatError(f"{path}: container holds {header.get('kind')!r}, not a dataset")
    d = dict(arrays)
    return Dataset(d["images"], d["labels"].astype(np.int64), int(header["num_classes"]), split or header.get("split", "train"))


def load_dataset(path, format: str, **kw) -> Dataset:  # noqa: A002
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file {path} does not exist")
    if format == "idx":
        return load_idx(path, **kw)
    if format == "cifar-binary":
        return load_cifar_binary(path, **kw)
    if format == "raw-tensor":
        return load_raw(path, **kw)
    raise DatasetFormatError(f"unknown dataset format {format!r} (idx, cifar-binary, raw-tensor)")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, rng: np.random.Generator | None = None, pad: int = 4,
            offset: tuple[int, int] | None = None, flip: bool | None = None) -> np.ndarray:
    """Zero-pad by ``pad``, crop back at a random offset, flip horizontally with p=0.5.

    ``offset``/``flip`` override the random draws; offset ``(pad, pad)`` is the
    untouched center crop.
    """
    c, h, w = image.shape
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    oy, ox = offset
    out = padded[:, oy:oy + h, ox:ox + w]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Vectorized :func:`augment` with the same draw order per image (offsets, then flips)."""
    from numpy.lib.stride_tricks import sliding_window_view

    b, c, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < 0.5
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    win = sliding_window_view(padded, (h, w), axis=(2, 3))
    out = win[np.arange(b), :, offsets[:, 0], offsets[:, 1]]
    return np.where(flips[:, None, None, None], out[..., ::-1], out)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(seed: int, n: int, num_classes: int = 4, size: int = 16, channels: int = 3,
                  noise: float = 0.2, split: str = "train") -> Dataset:
    """Procedural images whose class is the orientation of a symmetric plaid.

    Class ``c`` superimposes two gratings at angles +theta_c and -theta_c
    (theta evenly spaced over [0, pi/2]), so horizontal flips and crop shifts
    keep the class.  Frequency, phase, contrast, tint and Gaussian pixel noise
    vary per image.  Labels are exactly balanced when ``num_classes`` divides ``n``.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got {n} < {num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    span = num_classes - 1 if num_classes > 1 else 1
    theta = labels * (np.pi / 2) / span
    freq = rng.uniform(2 * np.pi / 5.5, 2 * np.pi / 3.5, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=(n, 2))
    contrast = rng.uniform(0.35, 1.0, size=n)
    tint = rng.uniform(0.4, 1.0, size=(n, channels))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ct, st = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    f = freq[:, None, None]
    g1 = np.cos(f * (xx * ct + yy * st) + phase[:, 0, None, None])
    g2 = np.cos(f * (-xx * ct + yy * st) + phase[:, 1, None, None])
    pattern = 0.5 * (g1 + g2) * contrast[:, None, None]
    imgs = 0.5 + 0.45 * pattern[:, None] * tint[:, :, None, None]
    imgs = imgs + noise * rng.standard_normal((n, channels, size, size))
    imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
    return Dataset(imgs, labels.astype(np.int64), num_classes, split)


def synth_splits(seed: int, n_train: int, n_val: int, **kw) -> tuple[Dataset, Dataset]:
    """Train/validation pair drawn independently; stats come from the train split."""
    train = compute_stats(synth_dataset(seed, n_train, split="train", **kw))
    val = synth_dataset(seed + 7919, n_val, split="val", **kw).with_stats_from(train)
    return train, val


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class BatchStream:
    """Deterministic batch sequence: same (seed, epoch) -> same batches and augmentations."""

    dataset: Dataset
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    shuffle: bool = True
    prefetch: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        ds = self.dataset
        if ds.mean is not None:
            x = (x - ds.mean[None, :, None, None]) / ds.std[None, :, None, None]
        return channels_last(x.astype(np.float32, copy=False))

    def _batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        ds = self.dataset
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(ds)) if self.shuffle else np.arange(len(ds))
        for start in range(0, len(ds), self.batch_size):
            idx = order[start:start + self.batch_size]
            x = ds.images[idx]
            if self.augment:
                x = augment_batch(x, rng)
            yield self._normalize(x), ds.labels[idx]

    def epoch(self, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if not self.prefetch:
            yield from self._batches(epoch)
            return
        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        sentinel = object()

        def worker():
            for item in self._batches(epoch):
                q.put(item)
            q.put(sentinel)

        threading.Thread(target=worker, daemon=True).start()
        while (item := q.get()) is not sentinel:
            yield item

    __call__ = epoch

    def eval_view(self) -> "BatchStream":
        """Same data in fixed order without augmentation (normalization only)."""
        return BatchStream(self.dataset, self.batch_size, self.seed, augment=False, shuffle=False)
