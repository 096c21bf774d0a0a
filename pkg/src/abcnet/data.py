"""Datasets: IDX (MNIST layout) files and a seeded synthetic blob generator.

Dataset specs accepted by :func:`load_dataset`:

* ``synth:blobs:<n>[:<classes>[:<size>[:<blobs>]]]`` - n images of Gaussian blobs
* ``idx:<images>,<labels>`` - a pair of IDX files (optionally gzipped)
* ``mnist:<dir>[:train|t10k]`` - the standard MNIST file names in a directory
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import FormatError, make_rng

IDX_TYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header", 0)
    zero, type_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or type_code not in IDX_TYPES:
        raise FormatError(f"{path}: bad IDX magic", 0)
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimensions", 4)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = np.dtype(IDX_TYPES[type_code])
    offset = 4 + 4 * ndim
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset != need:
        raise FormatError(f"{path}: expected {need} data bytes, found {len(raw) - offset}", offset)
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    codes = {np.dtype(v).str.lstrip("<>|="): k for k, v in IDX_TYPES.items()}
    a = np.asarray(array)
    key = a.dtype.str.lstrip("<>|=")
    if key not in codes:
        raise ValueError(f"dtype {a.dtype} has no IDX type code")
    big = a.astype(a.dtype.newbyteorder(">")) if a.dtype.itemsize > 1 else a
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, codes[key], a.ndim))
        f.write(struct.pack(f">{a.ndim}I", *a.shape))
        f.write(big.tobytes())


def from_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None]
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    return Dataset((images.astype(np.float32) / scale), labels.astype(np.int64))


def load_mnist(directory, split: str = "train") -> Dataset:
    def find(stem):
        for name in (stem, stem + ".gz"):
            p = os.path.join(directory, name)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(os.path.join(directory, stem))

    return from_idx(find(f"{split}-images-idx3-ubyte"), find(f"{split}-labels-idx1-ubyte"))


def synth_blobs(n: int, rng: np.random.Generator, classes: int = 2, size: int = 8,
                blobs: int = 1, jitter: float = 0.05, noise: float = 0.1) -> Dataset:
    """Images of Gaussian bumps whose arrangement encodes the class.

    With ``blobs == 1`` the class centres sit evenly on a circle around the
    image centre. With more blobs, every class gets a template of ``blobs``
    random centres; templates depend only on (classes, size, blobs), so
    differently seeded draws share the same classes. Each sample jitters
    the centres (``jitter`` is a fraction of the image size), width and
    amplitude, then adds Gaussian pixel noise.
    """
    if blobs == 1:
        angles = 2 * np.pi * np.arange(classes) / classes
        radius = size / 4.0
        centres = (np.stack([np.sin(angles), np.cos(angles)], axis=1) * radius + (size - 1) / 2.0)[:, None]
    else:
        template_rng = np.random.Generator(np.random.PCG64([classes, size, blobs]))
        centres = template_rng.uniform(1.0, size - 2.0, size=(classes, blobs, 2))
    labels = rng.integers(0, classes, size=n)
    shift = rng.normal(0.0, jitter * size, size=(n, 1, 2))
    sigma = rng.uniform(0.8, 1.6, size=(n, 1)) * size / 8.0 / np.sqrt(blobs)
    amp = rng.uniform(0.6, 1.0, size=(n, blobs))
    yy, xx = np.mgrid[0:size, 0:size]
    c = centres[labels] + shift  # (n, blobs, 2)
    d2 = (yy[None, None] - c[..., 0, None, None]) ** 2 + (xx[None, None] - c[..., 1, None, None]) ** 2
    img = (amp[..., None, None] * np.exp(-d2 / (2 * sigma[..., None, None] ** 2))).max(axis=1)
    img += rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Dataset(img[:, None].astype(np.float32), labels.astype(np.int64))


def load_dataset(spec: str, seed: int = 0) -> Dataset:
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        parts = rest.split(":")
        if parts[0] != "blobs" or len(parts) < 2:
            raise ValueError(f"unknown synthetic dataset {spec!r}; use synth:blobs:<n>[:<classes>[:<size>[:<blobs>]]]")
        n, classes, size, blobs = (int(p) for p in parts[1:] + ["2", "8", "1"][len(parts) - 2:])
        ds = synth_blobs(n, make_rng(seed), classes, size, blobs)
    elif kind == "idx":
        images, _, labels = rest.partition(",")
        ds = from_idx(images, labels)
    elif kind == "mnist":
        directory, _, split = rest.partition(":")
        ds = load_mnist(directory, split or "train")
    else:
        raise ValueError(f"unknown dataset spec {spec!r}")
    if len(ds) == 0:
        raise EmptyDatasetError(f"dataset {spec!r} is empty")
    return ds


def train_val_split(ds: Dataset, val_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    order = rng.permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])
