"""Image ingestion and conditional-density task construction.

An image is split by two disjoint boolean masks into an observed part x and
a target part y, each gathered in row-major order. Labeled training pairs
keep x and y together; the remaining pairs are decoupled into separate pools
of unpaired x's and y's.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .container import decode_str, encode_str, read_container, write_container

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TASKS = ("quadrant1", "quadrant2", "quadrant3", "topdown")
SHIFT_TASKS = {"shift-sensitive": "pairwise", "shift-invariant": "x-only"}


class DataFormatError(ValueError):
    pass


@dataclass
class ImageSet:
    images: np.ndarray  # (n, H, W) in [0, 1]
    labels: np.ndarray | None = None
    shifts: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (n, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> ImageSet:
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return ImageSet(self.images[index], pick(self.labels), pick(self.shifts))


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, expected: int):
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected:
        raise DataFormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) < int(np.prod(dims)):
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, header declares {int(np.prod(dims))}")
    return dims, np.frombuffer(body, dtype=np.uint8, count=int(np.prod(dims)))


def load_idx(path) -> ImageSet:
    """Read an IDX image file (optionally gzip-compressed), scaling pixels to [0, 1]."""
    dims, payload = _idx_header(_read_bytes(path), path, IMAGE_MAGIC)
    return ImageSet(payload.reshape(dims).astype(np.float64) / 255.0)


def load_idx_labels(path) -> np.ndarray:
    dims, payload = _idx_header(_read_bytes(path), path, LABEL_MAGIC)
    return payload.reshape(dims).astype(np.int64)


def write_idx(path, images: np.ndarray) -> None:
    """Write uint8 images as an uncompressed IDX file (fixtures and tools)."""
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">I", IMAGE_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape)
    with open(path, "wb") as fh:
        fh.write(header + images.tobytes())


def downsample(data: ImageSet, factor: int) -> ImageSet:
    """Average-pool gray values over factor x factor blocks."""
    if factor == 1:
        return data
    n, h, w = data.images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    pooled = data.images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return ImageSet(pooled, data.labels, data.shifts)


def binarize_static(data: ImageSet, seed: int) -> ImageSet:
    """Sample every pixel once from Bernoulli(gray value)."""
    rng = np.random.default_rng([seed, 0xB1])
    bits = (rng.random(data.images.shape) < data.images).astype(np.float64)
    return ImageSet(bits, data.labels, data.shifts)


@dataclass(frozen=True)
class TaskGeometry:
    task: str
    x_mask: np.ndarray
    y_mask: np.ndarray

    @classmethod
    def make(cls, task: str, height: int, width: int) -> TaskGeometry:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        if height % 2 or width % 2:
            raise ValueError(f"image size {height}x{width} must be even")
        rows, cols = np.indices((height, width))
        bottom, left = rows >= height // 2, cols < width // 2
        x_mask = {
            "quadrant1": bottom & left,
            "quadrant2": left,
            "quadrant3": ~(bottom & ~left),
            "topdown": ~bottom,
        }[task]
        return cls(task, x_mask, ~x_mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_mask.shape

    @property
    def x_dim(self) -> int:
        return int(self.x_mask.sum())

    @property
    def y_dim(self) -> int:
        return int(self.y_mask.sum())


@dataclass
class SplitSample:
    x: np.ndarray
    y: np.ndarray
    label_status: str = "paired"


@dataclass
class TaskSplit:
    """Images split into x and y rows; indexing yields :class:`SplitSample`."""

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray | None = None
    shifts: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i) -> SplitSample:
        return SplitSample(self.x[i], self.y[i])

    def subset(self, index) -> TaskSplit:
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return TaskSplit(self.x[index], self.y[index], pick(self.labels), pick(self.shifts))


def split_task(data: ImageSet, geom: TaskGeometry) -> TaskSplit:
    if geom.shape != (data.height, data.width):
        raise ValueError(f"mask shape {geom.shape} does not match images {data.height}x{data.width}")
    flat = data.images.reshape(len(data), -1)
    return TaskSplit(flat[:, geom.x_mask.ravel()], flat[:, geom.y_mask.ravel()], data.labels, data.shifts)


def reassemble(x: np.ndarray, y: np.ndarray, geom: TaskGeometry) -> np.ndarray:
    """Inverse of :func:`split_task`: scatter x and y back into images."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    h, w = geom.shape
    out = np.zeros((len(x), h * w))
    out[:, geom.x_mask.ravel()] = x
    out[:, geom.y_mask.ravel()] = y
    return out.reshape(len(x), h, w)


@dataclass
class SemiSplit:
    labeled: TaskSplit
    unlabeled_x: np.ndarray
    unlabeled_y: np.ndarray
    validation: TaskSplit
    test: TaskSplit | None = None
    labeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    validation_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_l(self) -> int:
        return len(self.labeled)

    @property
    def n_u(self) -> int:
        return len(self.unlabeled_x)


def make_semi_split(samples: TaskSplit, n_l: int, seed: int, val_size: int, n_u: int | None = None) -> SemiSplit:
    """Hold out a validation set, then draw n_l labeled pairs; the rest become unpaired pools.

    ``n_u`` caps the number of decoupled pairs (default: all that remain).
    """
    total = len(samples)
    if n_l < 1:
        raise ValueError("n_l must be at least 1")
    if n_l + val_size > total:
        raise ValueError(f"n_l={n_l} plus val_size={val_size} exceeds the {total} available pairs")
    perm = np.random.default_rng([seed, 0x5E]).permutation(total)
    val_idx = np.sort(perm[:val_size])
    rest = perm[val_size:]
    lab_idx = np.sort(rest[:n_l])
    unl = rest[n_l:]
    if n_u is not None and n_u >= 0:
        unl = unl[:n_u]
    unl_idx = np.sort(unl)
    return SemiSplit(
        labeled=samples.subset(lab_idx),
        unlabeled_x=samples.x[unl_idx],
        unlabeled_y=samples.y[unl_idx],
        validation=samples.subset(val_idx),
        labeled_index=lab_idx,
        unlabeled_index=unl_idx,
        validation_index=val_idx,
    )


def shift_columns(images: np.ndarray, shifts: np.ndarray, rows: slice = slice(None)) -> np.ndarray:
    """Shift each image horizontally by its own amount, zero-filling vacated columns."""
    out = np.array(images, dtype=np.float64)
    width = out.shape[2]
    for i, s in enumerate(np.asarray(shifts, dtype=np.int64)):
        if s == 0:
            continue
        band = out[i, rows].copy()
        out[i, rows] = 0.0
        if s > 0:
            out[i, rows, s:] = band[:, : width - s]
        else:
            out[i, rows, : width + s] = band[:, -s:]
    return out


def draw_shifts(n: int, seed: int, max_shift: int = 4) -> np.ndarray:
    return np.random.default_rng([seed, 0x5F]).integers(-max_shift, max_shift + 1, size=n)


def apply_shift(data: ImageSet, geom: TaskGeometry, mode: str, seed: int, max_shift: int = 4) -> ImageSet:
    """Random horizontal shifts for the top-down task.

    ``pairwise`` shifts whole images (x and y share the shift); ``x-only``
    shifts only the observed top half and leaves y centered.
    """
    if geom.task != "topdown":
        raise ValueError(f"shift tasks require the topdown geometry, got {geom.task!r}")
    shifts = draw_shifts(len(data), seed, max_shift)
    if mode == "pairwise":
        rows = slice(None)
    elif mode == "x-only":
        rows = slice(0, data.height // 2)
    else:
        raise ValueError(f"unknown shift mode {mode!r}")
    return ImageSet(shift_columns(data.images, shifts, rows), data.labels, shifts)


@dataclass
class Batch:
    x_l: np.ndarray
    y_l: np.ndarray
    x_u: np.ndarray | None = None
    y_u: np.ndarray | None = None


def steps_per_epoch(n_l: int, batch: int) -> int:
    return math.ceil(n_l / batch)


class _Cycler:
    """Position-addressable infinite stream over a pool, reshuffled each pass."""

    def __init__(self, n: int, seed: int, stream: int):
        self.n, self.seed, self.stream = n, seed, stream
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, cycle: int) -> np.ndarray:
        if cycle not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            self._perms[cycle] = np.random.default_rng([self.seed, cycle, self.stream]).permutation(self.n)
        return self._perms[cycle]

    def take(self, start: int, count: int) -> np.ndarray:
        pos = np.arange(start, start + count)
        cycles, offsets = pos // self.n, pos % self.n
        return np.array([self._perm(int(c))[o] for c, o in zip(cycles, offsets)])


def minibatches(split: SemiSplit, batch: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Deterministic minibatch stream for one epoch (one pass over the labeled set)."""
    if batch < 1:
        raise ValueError("batch size must be at least 1")
    n_l = split.n_l
    order = np.random.default_rng([seed, epoch, 0x1AB]).permutation(n_l)
    steps = steps_per_epoch(n_l, batch)
    n_u = split.n_u
    cx = _Cycler(n_u, seed, 1) if n_u else None
    cy = _Cycler(n_u, seed, 2) if n_u else None
    for j in range(steps):
        idx = order[j * batch : (j + 1) * batch]
        b = Batch(split.labeled.x[idx], split.labeled.y[idx])
        if n_u:
            start = (epoch * steps + j) * batch
            b.x_u = split.unlabeled_x[cx.take(start, batch)]
            b.y_u = split.unlabeled_y[cy.take(start, batch)]
        yield b


# -- prepared-split cache ---------------------------------------------------------


def save_split_cache(path, split: SemiSplit, header: dict) -> None:
    arrays = {
        "header/task": encode_str(header["task"]),
        "header/n_l": np.array([header["n_l"]], dtype=np.float64),
        "header/n_u": np.array([split.n_u], dtype=np.float64),
        "header/data_seed": np.array([header["data_seed"]], dtype=np.float64),
        "header/downsample": np.array([header.get("downsample", 1)], dtype=np.float64),
        "header/height": np.array([header["height"]], dtype=np.float64),
        "header/width": np.array([header["width"]], dtype=np.float64),
        "labeled/index": split.labeled_index.astype(np.float64),
        "unlabeled/x": split.unlabeled_x.reshape(split.n_u, -1) if split.n_u else np.zeros((0, split.labeled.x.shape[1])),
        "unlabeled/y": split.unlabeled_y.reshape(split.n_u, -1) if split.n_u else np.zeros((0, split.labeled.y.shape[1])),
        "unlabeled/index": split.unlabeled_index.astype(np.float64),
        "validation/index": split.validation_index.astype(np.float64),
    }
    for part, ts in (("labeled", split.labeled), ("validation", split.validation), ("test", split.test)):
        if ts is None:
            continue
        arrays[f"{part}/x"], arrays[f"{part}/y"] = ts.x, ts.y
        if ts.labels is not None:
            arrays[f"{part}/labels"] = ts.labels.astype(np.float64)
        if ts.shifts is not None:
            arrays[f"{part}/shifts"] = ts.shifts.astype(np.float64)
    write_container(path, arrays)


def load_split_cache(path) -> tuple[SemiSplit, dict]:
    a = read_container(path)
    header = {
        "task": decode_str(a["header/task"]),
        "n_l": int(a["header/n_l"][0]),
        "n_u": int(a["header/n_u"][0]),
        "data_seed": int(a["header/data_seed"][0]),
        "downsample": int(a["header/downsample"][0]),
        "height": int(a["header/height"][0]),
        "width": int(a["header/width"][0]),
    }

    def part(name):
        if f"{name}/x" not in a:
            return None
        lab = a.get(f"{name}/labels")
        sh = a.get(f"{name}/shifts")
        return TaskSplit(
            a[f"{name}/x"], a[f"{name}/y"],
            None if lab is None else lab.astype(np.int64),
            None if sh is None else sh.astype(np.int64),
        )

    split = SemiSplit(
        labeled=part("labeled"),
        unlabeled_x=a["unlabeled/x"],
        unlabeled_y=a["unlabeled/y"],
        validation=part("validation"),
        test=part("test"),
        labeled_index=a["labeled/index"].astype(np.int64),
        unlabeled_index=a["unlabeled/index"].astype(np.int64),
        validation_index=a["validation/index"].astype(np.int64),
    )
    return split, header


def write_pgm(path, image: np.ndarray) -> None:
    """Plain (P2) PGM with maxval 255; ``image`` holds values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(int)
    h, w = img.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in img)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = [t for line in fh if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise DataFormatError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4 : 4 + w * h], dtype=np.float64).reshape(h, w) / maxval
