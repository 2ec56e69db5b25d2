"""Datasets: binary loaders for the two standard image corpora, global
normalization with recorded factors, block resizing for input-dimension
sweeps, and seeded synthetic families for machines without the real data.

Real data is looked up under GRADLAB_DATA_DIR (expected layout:
cifar-10-batches-bin/ with the usual data_batch_*.bin, and mnist/ with the
four idx files). Loaders are byte-faithful: they validate magic numbers and
exact file sizes, and can check a sha256 digest when one is supplied.
Everything returns float64 arrays; labels are int64.

The synthetic families are the fallback the experiment fixtures use when no
corpus is installed: a two-class isotropic Gaussian pair with a known exact
Bayes accuracy, and an image-like mixture of smooth class templates plus
pixel noise for convolutional runs. Both are fully determined by their seed.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

DATA_DIR_ENV = "GRADLAB_DATA_DIR"


@dataclass
class Dataset:
    """Feature array (N, ...), int labels (N,), provenance metadata."""

    x: np.ndarray
    y: np.ndarray
    name: str
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, n: int, seed: int = 0) -> "Dataset":
        """Random subsample without replacement (seeded, order-stable)."""
        if n > self.n:
            raise ValueError(f"asked for {n} of {self.n} samples")
        idx = np.sort(np.random.default_rng(seed).permutation(self.n)[:n])
        return Dataset(self.x[idx], self.y[idx], self.name, self.classes,
                       dict(self.meta, subsample={"n": n, "seed": seed}))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.x.shape).encode())
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


def data_dir():
    return os.environ.get(DATA_DIR_ENV)


def _check_digest(path, sha256):
    if sha256 is None:
        return
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    if h.hexdigest() != sha256:
        raise ValueError(f"{path}: sha256 mismatch, got {h.hexdigest()}, "
                         f"expected {sha256}")


# -- real corpora ---------------------------------------------------------------


def load_cifar10(root, train: bool = True, sha256=None) -> Dataset:
    """The 32x32 color corpus from its binary batch files: each record is a
    label byte followed by 3072 pixel bytes, 10000 records per file."""
    base = os.path.join(root, "cifar-10-batches-bin")
    names = ([f"data_batch_{i}.bin" for i in range(1, 6)] if train
             else ["test_batch.bin"])
    xs, ys = [], []
    for name in names:
        path = os.path.join(base, name)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"missing {path}; point {DATA_DIR_ENV} at a directory holding "
                f"cifar-10-batches-bin/")
        _check_digest(path, sha256.get(name) if isinstance(sha256, dict) else sha256)
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size != 10000 * 3073:
            raise ValueError(f"{path}: {raw.size} bytes, expected {10000 * 3073}")
        rec = raw.reshape(10000, 3073)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(10000, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys),
                   "cifar10-train" if train else "cifar10-test", 10,
                   {"source": "file", "pixel_range": 1.0})


def _read_idx(path, want_dims, sha256=None) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing {path}; point {DATA_DIR_ENV} at a directory holding mnist/")
    _check_digest(path, sha256)
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0 or head[2] != 0x08:
            raise ValueError(f"{path}: bad idx magic {head!r}")
        ndim = head[3]
        if ndim != want_dims:
            raise ValueError(f"{path}: {ndim} dimensions, expected {want_dims}")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        payload = f.read()
    want = int(np.prod(dims))
    if len(payload) != want:
        raise ValueError(f"{path}: {len(payload)} payload bytes, expected {want}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist(root, train: bool = True, sha256=None) -> Dataset:
    """The 28x28 digit corpus from its idx files (big-endian, magic checked,
    exact payload length required)."""
    stem = "train" if train else "t10k"
    base = os.path.join(root, "mnist")
    digest = sha256 if isinstance(sha256, dict) else {}
    images = _read_idx(os.path.join(base, f"{stem}-images-idx3-ubyte"), 3,
                       digest.get("images", sha256 if not isinstance(sha256, dict) else None))
    labels = _read_idx(os.path.join(base, f"{stem}-labels-idx1-ubyte"), 1,
                       digest.get("labels"))
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64),
                   "mnist-train" if train else "mnist-test", 10,
                   {"source": "file", "pixel_range": 1.0})


# -- normalization and resizing ---------------------------------------------------


def normalize(ds: Dataset) -> Dataset:
    """Center and scale features to zero mean and unit standard deviation
    with one global factor, recorded in meta so perturbation budgets can be
    mapped back to raw units."""
    mu = float(ds.x.mean())
    sigma = float(ds.x.std())
    if sigma == 0.0:
        raise ValueError("cannot normalize a constant dataset")
    x = (ds.x - mu) / sigma
    return Dataset(x, ds.y, ds.name, ds.classes,
                   dict(ds.meta, norm_mean=mu, norm_scale=1.0 / sigma))


def upsample_copy(x: np.ndarray, factor: int) -> np.ndarray:
    """Pixel duplication on the trailing two axes; preserves content while
    multiplying the input dimension by factor**2."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping block means on the trailing two axes."""
    h, w = x.shape[-2], x.shape[-1]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide extents {(h, w)}")
    shape = x.shape[:-2] + (h // factor, factor, w // factor, factor)
    return x.reshape(shape).mean(axis=(-3, -1))


def resize_images(x: np.ndarray, size: int) -> np.ndarray:
    """Duplicate or block-average to a target square extent (must be an
    integer ratio of the current one)."""
    h = x.shape[-2]
    if x.shape[-1] != h:
        raise ValueError(f"expected square images, got {x.shape[-2:]}")
    if size == h:
        return x.copy()
    if size > h:
        if size % h:
            raise ValueError(f"cannot upsample {h} -> {size}: not an integer ratio")
        return upsample_copy(x, size // h)
    if h % size:
        raise ValueError(f"cannot downsample {h} -> {size}: not an integer ratio")
    return downsample_mean(x, h // size)


# -- synthetic families ------------------------------------------------------------


def synth_gaussian(d: int, n_train: int, n_test: int, delta: float = 2.0,
                   classes: int = 2, seed: int = 0) -> tuple:
    """Isotropic Gaussian classes with orthonormal mean directions scaled so
    neighboring means sit delta apart. For two classes the exact Bayes
    accuracy is Phi(delta / 2). Returns (train, test)."""
    if classes < 2 or classes > d:
        raise ValueError(f"need 2 <= classes <= d, got {classes} and {d}")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, classes)))
    means = basis.T * (delta / np.sqrt(2.0))

    def draw(n, tag):
        y = rng.integers(0, classes, size=n)
        x = rng.standard_normal((n, d)) + means[y]
        return Dataset(x, y, f"synth-gauss-{tag}", classes,
                       {"source": "synthetic", "delta": delta, "seed": seed,
                        "bayes_accuracy": _phi(delta / 2.0) if classes == 2 else None})

    return draw(n_train, "train"), draw(n_test, "test")


def _phi(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def synth_images(n_train: int, n_test: int, size: int = 32, channels: int = 3,
                 classes: int = 10, margin: float = 1.0, noise: float = 1.0,
                 coarse_noise: float = 0.0, seed: int = 0) -> tuple:
    """Image-like classes: one smooth template per class (coarse random grid
    blown up by pixel duplication, unit rms) times margin, plus white pixel
    noise, plus optional low-frequency nuisance noise drawn on the same
    coarse grid. White noise averages away under the class templates, so
    high margins are linearly easy regardless of dimension; the coarse
    nuisance lives in the template subspace and is what actually caps
    attainable accuracy. Returns (train, test)."""
    if size % 4:
        raise ValueError(f"size must be a multiple of 4, got {size}")
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((classes, channels, 4, 4))
    templates = upsample_copy(coarse, size // 4)
    templates /= np.sqrt((templates ** 2).sum(axis=(1, 2, 3), keepdims=True))
    templates *= np.sqrt(templates[0].size)  # unit rms per pixel

    def draw(n, tag):
        y = rng.integers(0, classes, size=n)
        x = margin * templates[y] + noise * rng.standard_normal(
            (n, channels, size, size))
        if coarse_noise:
            nu = rng.standard_normal((n, channels, 4, 4))
            x += coarse_noise * upsample_copy(nu, size // 4)
        return Dataset(x, y, f"synth-image-{tag}", classes,
                       {"source": "synthetic", "margin": margin, "noise": noise,
                        "coarse_noise": coarse_noise, "seed": seed, "size": size})

    return draw(n_train, "train"), draw(n_test, "test")


def image_dataset(size: int = 32, n_train: int = 10000, n_test: int = 2000,
                  seed: int = 0, root=None) -> tuple:
    """The image pair the experiment fixtures run on: the real 32x32 corpus
    resized to `size` when installed, the synthetic image family otherwise.
    meta['source'] records which one was used."""
    root = root if root is not None else data_dir()
    if root:
        train = normalize(load_cifar10(root, train=True))
        test = normalize(load_cifar10(root, train=False))
        scale = train.meta["norm_scale"]
        out = []
        for ds, n in ((train, n_train), (test, n_test)):
            ds = ds.take(min(n, ds.n), seed=seed)
            x = resize_images(ds.x, size)
            out.append(Dataset(x, ds.y, ds.name + f"-{size}", 10,
                               dict(ds.meta, size=size, norm_scale=scale)))
        return out[0], out[1]
    # Margin and nuisance levels picked so small nets plateau well below
    # perfect accuracy with a measurable adversarial flip rate, mimicking
    # the regime real image corpora put these experiments in.
    train, test = synth_images(n_train, n_test, size=size, seed=seed,
                               margin=0.2, coarse_noise=0.4)
    return normalize(train), normalize(test)
