"""Synthetic desk-scale datasets and the ".nnds" dataset container.

Generators are deterministic in (name, seed, split). The file format shares
the framing of ".nnmod": magic, u32 header length, JSON header, raw payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .container import _NNDS_MAGIC, ContainerError, _frame, _read_frame, write_atomic

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [N, ...] float64
    labels: np.ndarray  # [N] int64
    split: str

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.shape[0] < 1 or inputs.shape[0] != labels.shape[0]:
            raise ContainerError("dataset needs N >= 1 inputs with matching labels")
        if labels.min() < 0:
            raise ContainerError("negative label")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, n: int | None) -> "Dataset":
        """Deterministic evaluation subset: the first n examples."""
        if n is None or n >= self.n:
            return self
        return Dataset(self.inputs[:n], self.labels[:n], self.split)


def make_blobs(n: int, seed: int, split: str = TRAIN, classes: int = 3,
               dim: int = 16, spread: float = 1.0) -> Dataset:
    """Gaussian blobs around per-class means drawn once from the seed."""
    g_means = rng.stream(seed, "blobs-means", classes, dim)
    means = g_means.normal(0.0, 2.0, size=(classes, dim))
    g = rng.stream(seed, "blobs", split)
    labels = np.arange(n) % classes
    labels = labels[g.permutation(n)]
    x = means[labels] + g.normal(0.0, spread, size=(n, dim))
    return Dataset(x, labels, split)


def make_textures(n: int, seed: int, split: str = TRAIN, noise: float = 0.45) -> Dataset:
    """8x8 two-class oriented stripe textures with pixel noise.

    Class 0 stripes run horizontally, class 1 vertically; frequency, phase
    and amplitude jitter per sample keep the task learnable but not trivial.
    """
    g = rng.stream(seed, "textures", split)
    labels = np.arange(n) % 2
    labels = labels[g.permutation(n)]
    freq = g.uniform(0.9, 1.7, size=n)
    phase = g.uniform(0.0, 2 * np.pi, size=n)
    amp = g.uniform(0.6, 1.2, size=n)
    idx = np.arange(8, dtype=np.float64)
    rows = np.sin(2 * np.pi * freq[:, None] * idx[None, :] / 8.0 + phase[:, None])
    imgs = np.where(
        (labels == 0)[:, None, None],
        rows[:, :, None] * np.ones((1, 1, 8)),
        rows[:, None, :] * np.ones((1, 8, 1)),
    )
    imgs = amp[:, None, None] * imgs + g.normal(0.0, noise, size=(n, 8, 8))
    return Dataset(imgs[:, None, :, :], labels, split)


_GENERATORS = {"blobs": make_blobs, "textures": make_textures}


def generate(name: str, n: int, seed: int, split: str) -> Dataset:
    if name not in _GENERATORS:
        raise ContainerError(f"unknown dataset generator {name!r}")
    return _GENERATORS[name](n, seed, split)


def save_dataset(ds: Dataset, path) -> int:
    inputs = ds.inputs.astype("<f4")
    labels = ds.labels.astype("<u4")
    header = {
        "format": "nnds",
        "version": 1,
        "split": ds.split,
        "shape": list(ds.inputs.shape),
        "inputs_length": inputs.nbytes,
        "labels_length": labels.nbytes,
    }
    return write_atomic(path, _frame(_NNDS_MAGIC, header, [inputs.tobytes(), labels.tobytes()]))


def load_dataset(path) -> Dataset:
    header, payload = _read_frame(path, _NNDS_MAGIC)
    if header.get("format") != "nnds" or header.get("version") != 1:
        raise ContainerError(f"unsupported dataset version in {path}")
    ni, nl = header["inputs_length"], header["labels_length"]
    if ni + nl > len(payload):
        raise ContainerError(f"truncated dataset payload in {path}")
    shape = tuple(header["shape"])
    inputs = np.frombuffer(payload[:ni], dtype="<f4").astype(np.float64).reshape(shape)
    labels = np.frombuffer(payload[ni : ni + nl], dtype="<u4").astype(np.int64)
    return Dataset(inputs, labels, header["split"])
