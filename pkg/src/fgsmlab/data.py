"""Datasets, augmentation and fixed per-example pattern stores."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR100_RECORD = 2 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


class DatasetHandle:
    """In-memory image classification dataset.

    Images are float32 N x C x H x W in [0, 1].  ``indices`` holds the stable
    example index of every row; subsets keep the indices of the parent, so
    fixed masks and noise stay bound to the same image.
    """

    def __init__(self, name: str, images: np.ndarray, labels: np.ndarray, num_classes: int,
                 indices: np.ndarray | None = None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError("images must be N x C x H x W with one label each")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.name = name
        self.images = images
        self.labels = labels
        self.num_classes = int(num_classes)
        self.indices = np.arange(len(images)) if indices is None else np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int):
        return int(self.indices[i]), self.images[i], int(self.labels[i])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def select(self, rows) -> "DatasetHandle":
        rows = np.asarray(rows)
        return DatasetHandle(self.name, self.images[rows], self.labels[rows], self.num_classes,
                             self.indices[rows])

    def first(self, n: int) -> "DatasetHandle":
        return self.select(np.arange(min(n, len(self))))

    def stratified(self, n: int, seed: int = 0) -> "DatasetHandle":
        """Class-balanced subset of ``n`` rows (as balanced as ``n`` allows)."""
        rng = np.random.default_rng(seed)
        per = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]
        per = [rng.permutation(p) for p in per]
        take = [n // self.num_classes + (1 if c < n % self.num_classes else 0)
                for c in range(self.num_classes)]
        rows = np.concatenate([p[:k] for p, k in zip(per, take)])
        return self.select(np.sort(rows))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield ``(indices, images, labels)``; shuffles visit order if ``rng``."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for lo in range(0, len(order), batch_size):
            rows = order[lo : lo + batch_size]
            yield self.indices[rows], self.images[rows], self.labels[rows]


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------

_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}


def _parse_cifar(raw: bytes, which: str, source: str) -> tuple[np.ndarray, np.ndarray]:
    rec = CIFAR10_RECORD if which == "cifar10" else CIFAR100_RECORD
    if len(raw) == 0 or len(raw) % rec:
        raise DataFormatError(f"{source}: length {len(raw)} is not a multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    if which == "cifar10":
        labels = arr[:, 0].astype(np.int64)
        limit = 10
    else:
        labels = arr[:, 1].astype(np.int64)  # fine label; byte 0 is the coarse one
        limit = 100
    if labels.max() >= limit:
        raise DataFormatError(f"{source}: label {labels.max()} out of range for {which}")
    pixels = arr[:, rec - 3 * 32 * 32 :].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar_binary(path, which: str = "cifar10", split: str = "train") -> DatasetHandle:
    """Read the published CIFAR binary layout.

    ``path`` may be a single ``.bin`` file or a directory holding the standard
    batch files (``data_batch_1..5.bin``/``test_batch.bin`` for CIFAR-10,
    ``train.bin``/``test.bin`` for CIFAR-100).
    """
    if which not in ("cifar10", "cifar100"):
        raise ValueError("which must be 'cifar10' or 'cifar100'")
    path = Path(path).expanduser()
    if path.is_dir():
        files = [path / f for f in _CIFAR_FILES[(which, split)]]
    else:
        files = [path]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR files: {missing}")
    pix, lab = [], []
    for f in files:
        p, l = _parse_cifar(f.read_bytes(), which, str(f))
        pix.append(p)
        lab.append(l)
    images = np.concatenate(pix).astype(np.float32) / np.float32(255.0)
    return DatasetHandle(f"{which}-{split}", images, np.concatenate(lab), 10 if which == "cifar10" else 100)


def find_cifar10() -> Path | None:
    """Locate CIFAR-10 binaries via ``FGSMLAB_CIFAR10`` or common locations."""
    candidates = []
    if os.environ.get("FGSMLAB_CIFAR10"):
        candidates.append(Path(os.environ["FGSMLAB_CIFAR10"]))
    candidates += [Path.home() / "data" / "cifar-10-batches-bin", Path("data/cifar-10-batches-bin")]
    for c in candidates:
        if (c / "data_batch_1.bin").exists():
            return c
    return None


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(n: int, classes: int = 10, image_size: int = 32, seed: int = 0,
                  channels: int = 3, noise: float = 0.15, contrast: float = 0.25) -> DatasetHandle:
    """Class-template images plus pixel noise, clipped to [0, 1].

    Each class owns a smooth random template; an image is
    ``0.5 + contrast * template + noise * N(0, 1)``.  Classes are balanced
    (counts differ by at most one) and the set is linearly separable up to
    the noise.
    """
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    coarse = max(2, image_size // 8)
    base = rng.normal(size=(classes, channels, coarse, coarse))
    rep = -(-image_size // coarse)
    templates = np.kron(base, np.ones((1, 1, rep, rep)))[:, :, :image_size, :image_size]
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    labels = rng.permutation(np.arange(n) % classes)
    images = 0.5 + contrast * templates[labels] + noise * rng.normal(size=(n, channels, image_size, image_size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return DatasetHandle(f"synth-{classes}c-{image_size}px-s{seed}", images, labels, classes)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentSpec:
    random_flip: bool = True
    random_crop: bool = True
    pad: int = 4


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
            force_flip: bool | None = None, offsets: np.ndarray | None = None) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and random crop from a zero-padded canvas.

    ``force_flip`` overrides the coin, ``offsets`` (N x 2) the crop positions;
    both exist for testing.
    """
    if spec.pad < 0:
        raise ValueError("pad must be non-negative")
    out = np.array(x, copy=True)
    n, _, h, w = out.shape
    if spec.random_flip:
        flip = np.full(n, force_flip) if force_flip is not None else rng.random(n) < 0.5
        out[flip] = out[flip, :, :, ::-1]
    if spec.random_crop and spec.pad > 0:
        p = spec.pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        if offsets is None:
            offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


# ---------------------------------------------------------------------------
# fixed per-example patterns (masks, noise)
# ---------------------------------------------------------------------------
#
# Sidecar layout (little-endian):
#   magic   4 bytes b"FGFX"
#   version uint32  (1)
#   kind    uint16 length + UTF-8 string (e.g. "mask:0.3" or "noise:0.0313725")
#   seed    uint64
#   count   uint32
#   entries count times: index uint64, ndim uint8, ndim x uint32 extents,
#           float32 row-major values

SIDECAR_MAGIC = b"FGFX"
SIDECAR_VERSION = 1


class FixedPatternStore:
    """Lazily generated, persistable map from example index to a tensor.

    The pattern for index ``i`` is drawn from a generator seeded by
    ``(seed, i)``, so it does not depend on visiting order; once drawn it is
    cached and returned unchanged on every later lookup.
    """

    def __init__(self, kind: str, seed: int, make: Callable[[np.random.Generator], np.ndarray],
                 path: str | os.PathLike | None = None):
        self.kind = kind
        self.seed = int(seed)
        self._make = make
        self._table: dict[int, np.ndarray] = {}
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self.load(self.path)

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, index: int) -> bool:
        return int(index) in self._table

    def get(self, index: int) -> np.ndarray:
        index = int(index)
        pat = self._table.get(index)
        if pat is None:
            rng = np.random.default_rng([self.seed, index])
            pat = np.asarray(self._make(rng), dtype=np.float32)
            pat.setflags(write=False)
            self._table[index] = pat
        return pat

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.get(i) for i in indices])

    def save(self, path=None) -> Path:
        path = Path(path or self.path)
        kind = self.kind.encode()
        with open(path, "wb") as fh:
            fh.write(SIDECAR_MAGIC)
            fh.write(struct.pack("<IH", SIDECAR_VERSION, len(kind)))
            fh.write(kind)
            fh.write(struct.pack("<QI", self.seed, len(self._table)))
            for idx in sorted(self._table):
                arr = self._table[idx]
                fh.write(struct.pack("<QB", idx, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f4").tobytes())
        return path

    def load(self, path) -> None:
        buf = Path(path).read_bytes()
        if buf[:4] != SIDECAR_MAGIC:
            raise DataFormatError(f"{path} is not a pattern sidecar")
        version, klen = struct.unpack_from("<IH", buf, 4)
        if version != SIDECAR_VERSION:
            raise DataFormatError(f"unsupported sidecar version {version}")
        off = 10
        kind = buf[off : off + klen].decode()
        off += klen
        seed, count = struct.unpack_from("<QI", buf, off)
        off += 12
        if kind != self.kind or seed != self.seed:
            raise DataFormatError(
                f"sidecar holds {kind!r}/seed {seed}, store expects {self.kind!r}/seed {self.seed}"
            )
        for _ in range(count):
            idx, ndim = struct.unpack_from("<QB", buf, off)
            off += 9
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            arr.setflags(write=False)
            off += 4 * size
            self._table[int(idx)] = arr


def fixed_noise_store(epsilon: float, image_shape, seed: int, path=None) -> FixedPatternStore:
    """Uniform(-eps, eps) noise drawn once per example."""
    def make(rng):
        return rng.uniform(-epsilon, epsilon, size=image_shape)

    return FixedPatternStore(f"noise:{epsilon:.10g}", seed, make, path)


def fixed_mask_store(ratio: float, image_shape, seed: int, path=None) -> FixedPatternStore:
    """One spatial mask per example, shaped 1 x H x W."""
    from .tricks import make_mask

    _, h, w = image_shape

    def make(rng):
        return make_mask((h, w), ratio, rng)[None]

    return FixedPatternStore(f"mask:{ratio:.10g}", seed, make, path)
