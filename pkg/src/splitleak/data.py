"""Datasets: IDX and CIFAR-10 binary loaders, the synthetic generator, and splits."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetEmpty, IoFailure, MalformedHeader


@dataclass
class Dataset:
    """Images in [0,1] as [N,C,H,W], integer labels, and stable sample ids."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("images, labels and ids must be aligned")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        t = torch.as_tensor(index)
        return Dataset(self.images[t], self.labels[t], self.ids[index])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise DatasetEmpty("dataset has no samples")


_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian magic 0x0000TTRR, then RR u32 dims)."""
    raw = _read_bytes(path)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise MalformedHeader(f"{path}: bad IDX magic")
    code, rank = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise MalformedHeader(f"{path}: unknown IDX element type 0x{code:02x}")
    if len(raw) < 4 + 4 * rank:
        raise MalformedHeader(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{rank}I", raw[4 : 4 + 4 * rank])
    dtype, size = _IDX_TYPES[code]
    count = int(np.prod(dims)) if rank else 1
    body = raw[4 + 4 * rank :]
    if len(body) != count * size:
        raise MalformedHeader(f"{path}: body has {len(body)} bytes, header implies {count * size}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; 3-D image arrays get a singleton channel axis."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or labels.ndim != 1 or len(images) != len(labels):
        raise MalformedHeader("IDX images must be [N,H,W] or [N,C,H,W] with N labels")
    x = images.astype(np.float32)
    if images.dtype.kind in "ui":
        x /= 255.0
    return Dataset(torch.from_numpy(x), torch.from_numpy(labels.astype(np.int64)))


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_binary(directory, files=None) -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record)."""
    directory = Path(directory)
    if files is None:
        files = sorted(p.name for p in directory.glob("*_batch*.bin"))
    if not files:
        raise IoFailure(f"no CIFAR-10 batch files in {directory}")
    xs, ys = [], []
    for name in files:
        raw = _read_bytes(directory / name)
        if len(raw) % CIFAR_RECORD:
            raise MalformedHeader(f"{name}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)))


def _cosine_bases(h: int, w: int, max_freq: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    out = []
    for u in range(max_freq + 1):
        for v in range(max_freq + 1):
            out.append(np.outer(np.cos(np.pi * u * ys), np.cos(np.pi * v * xs)))
    return np.stack(out)


def pink_noise(rng, shape) -> np.ndarray:
    """Unit-variance stationary noise with a 1/f amplitude spectrum over the last two axes."""
    h, w = shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fy**2 + fx**2)
    f[0, 0] = np.inf
    spec = np.fft.rfft2(rng.normal(size=shape)) / f
    out = np.fft.irfft2(spec, s=(h, w))
    return out / out.std(axis=(-2, -1), keepdims=True)


def synth_dataset(
    n: int,
    num_classes: int = 10,
    shape=(3, 16, 16),
    separation: float = 1.0,
    max_freq: int = 3,
    pixel_noise: float = 0.03,
    dc_scale: float = 0.3,
    texture: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian class clusters in the coefficient space of low-frequency cosine images.

    Class means are drawn once per ``seed``; each sample adds isotropic
    coefficient noise and a little pixel noise, then is squashed into [0, 1].
    The smooth bases give the spatially correlated statistics real images have;
    ``dc_scale`` damps the global-brightness coefficient, which otherwise
    dominates every feature's covariance.
    Sample ``i`` has label ``i % num_classes`` so every prefix is class-balanced.
    """
    if n <= 0:
        raise DatasetEmpty("n must be positive")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    bases = _cosine_bases(h, w, max_freq)  # [B,h,w]
    nb = len(bases)
    scale = 1.0 / (1.0 + np.arange(nb) // (max_freq + 1) + np.arange(nb) % (max_freq + 1))
    scale[0] *= dc_scale
    means = rng.normal(size=(num_classes, c, nb)) * scale * separation
    labels = np.arange(n) % num_classes
    coef = means[labels] + rng.normal(size=(n, c, nb)) * scale
    img = np.einsum("ncb,bhw->nchw", coef, bases)
    if texture:
        img += texture * pink_noise(rng, (n, c, h, w))
    img += rng.normal(size=img.shape) * pixel_noise
    img = 1.0 / (1.0 + np.exp(-img))
    return Dataset(torch.from_numpy(img.astype(np.float32)), torch.from_numpy(labels.astype(np.int64)))


def pattern_dataset(
    n: int,
    num_classes: int = 10,
    shape=(3, 16, 16),
    amplitude: float = 0.3,
    texture: float = 1.0,
    smooth: float = 1.0,
    max_freq: int = 3,
    pixel_noise: float = 0.03,
    seed: int = 1,
) -> Dataset:
    """Faint per-class texture patterns buried in smooth clutter and 1/f noise.

    The class signal is a fixed random image per class, added at low
    ``amplitude`` under class-independent smooth and pink-noise clutter.
    Models must pick up a weak, spatially spread cue, so they share little
    beyond what the data forces on them; this is the regime where matching
    a target's internal features pays off for transfer attacks.
    Labels are ``i % num_classes``.
    """
    if n <= 0:
        raise DatasetEmpty("n must be positive")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    patterns = rng.normal(size=(num_classes, c, h, w))
    bases = _cosine_bases(h, w, max_freq)
    nb = len(bases)
    scale = 1.0 / (1.0 + np.arange(nb) // (max_freq + 1) + np.arange(nb) % (max_freq + 1))
    labels = np.arange(n) % num_classes
    coef = rng.normal(size=(n, c, nb)) * scale * smooth
    img = np.einsum("ncb,bhw->nchw", coef, bases)
    img = img + texture * pink_noise(rng, (n, c, h, w)) + amplitude * patterns[labels]
    img = img + pixel_noise * rng.normal(size=(n, c, h, w))
    img = 1.0 / (1.0 + np.exp(-img))
    return Dataset(torch.from_numpy(img.astype(np.float32)), torch.from_numpy(labels.astype(np.int64)))


def balanced_halves(data: Dataset, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-balanced random split into two disjoint halves (surrogate-train, attack-eval)."""
    data.require_nonempty()
    rng = np.random.default_rng(seed)
    labels = data.labels.numpy()
    first, second = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        half = len(idx) // 2
        first.extend(idx[:half])
        second.extend(idx[half:])
    return data.subset(np.sort(first)), data.subset(np.sort(second))
