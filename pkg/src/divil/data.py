"""Environment datasets: Gaussian synthetic environments and ColoredMNIST."""

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "SynthConfig",
    "EnvDataset",
    "CmnistSpec",
    "IdxError",
    "gen_synthetic",
    "reference_synth_config",
    "SIGMA_C_DEFAULT",
    "parse_idx",
    "encode_idx",
    "load_mnist",
    "build_cmnist",
    "augment_mask",
    "subset_mask",
    "write_dataset_csv",
]

SIGMA_C_DEFAULT = (5.0, 5.0, 3.0, 3.0, 1.0, 1.0, 0.1, 0.1)


@dataclass(frozen=True)
class SynthConfig:
    d_c: int = 8
    d_s: int = 8
    mu_c: tuple = (10.0,) * 8
    sigma_c: tuple = SIGMA_C_DEFAULT
    mu_s: tuple = (10.0,) * 8
    sigma_s: float = 1.0
    s: float = 0.3
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"flip probability s must be in [0, 1], got {self.s}")
        if len(self.mu_c) != self.d_c or len(self.sigma_c) != self.d_c:
            raise ValueError("mu_c and sigma_c must have length d_c")
        if len(self.mu_s) != self.d_s:
            raise ValueError("mu_s must have length d_s")
        if min(self.sigma_c) <= 0 or self.sigma_s <= 0:
            raise ValueError("standard deviations must be positive")
        if self.n < 0:
            raise ValueError("n must be non-negative")

    @property
    def input_dim(self):
        return self.d_c + self.d_s


def reference_synth_config(sigma_s, s, n=2000, seed=0):
    """d_c = d_s = 8, means 10, invariant stdevs (5,5,3,3,1,1,0.1,0.1)."""
    return SynthConfig(sigma_s=float(sigma_s), s=float(s), n=n, seed=seed)


@dataclass
class EnvDataset:
    x: np.ndarray
    y: np.ndarray
    env_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.y) != len(self.x):
            raise ValueError("x and y must have the same number of rows")

    def __len__(self):
        return len(self.y)

    @property
    def labels01(self):
        """Labels mapped to {0, 1} (synthetic -1 becomes 0)."""
        return (self.y > 0).astype(np.float64)


def gen_synthetic(cfg, env_id=None):
    """Draw ``cfg.n`` samples.

    y is uniform on {-1, 1}; the spurious label is ``-y`` with probability
    ``cfg.s``.  x = [x_c | x_s] with x_c ~ N(mu_c y, diag(sigma_c)^2) and
    x_s ~ N(mu_s y_s, sigma_s^2 I).
    """
    env_id = env_id or f"s={cfg.s:g}"
    rng = stream(cfg.seed, "data/" + env_id, int(round(cfg.sigma_s * 1e9)))
    n = cfg.n
    y = rng.choice(np.array([-1.0, 1.0]), size=n)
    rad = np.where(rng.random(n) < cfg.s, -1.0, 1.0)
    y_s = rad * y
    mu_c, sigma_c = np.asarray(cfg.mu_c), np.asarray(cfg.sigma_c)
    mu_s = np.asarray(cfg.mu_s)
    x_c = y[:, None] * mu_c + rng.standard_normal((n, cfg.d_c)) * sigma_c
    x_s = y_s[:, None] * mu_s + rng.standard_normal((n, cfg.d_s)) * cfg.sigma_s
    meta = {"kind": "synthetic", "s": cfg.s, "sigma_s": cfg.sigma_s,
            "seed": cfg.seed, "y_s": y_s}
    return EnvDataset(np.hstack([x_c, x_s]), y, env_id, meta)


# ---------------------------------------------------------------------------
# IDX


class IdxError(ValueError):
    pass


_IDX_TYPES = {0x08: np.uint8}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def parse_idx(buf):
    """Decode an unsigned-byte IDX buffer.

    Image files (3 dims) come back as float64 in [0, 1]; label files as
    float64 class ids.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxError(f"truncated IDX header: {len(buf)} bytes")
    zero, dtype_code, ndim = struct.unpack(">HBB", buf[:4])
    magic = struct.unpack(">I", buf[:4])[0]
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise IdxError(f"bad IDX magic 0x{magic:08x}")
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxError(f"unsupported IDX magic 0x{magic:08x} "
                       "(expected 0x00000803 images or 0x00000801 labels)")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxError(f"truncated IDX header: need {header} bytes, got {len(buf)}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > len(buf):
            raise IdxError(f"IDX dimensions {dims} exceed buffer size")
    if len(buf) - header < count:
        raise IdxError(f"truncated IDX payload: need {count} bytes, "
                       f"got {len(buf) - header}")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header)
    data = data.reshape(dims).astype(np.float64)
    if magic == IMAGE_MAGIC:
        data /= 255.0
    return data


def encode_idx(array):
    """Inverse of :func:`parse_idx` for uint8 payloads (used by tests)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if arr.ndim == 3 else LABEL_MAGIC
    if arr.ndim not in (1, 3):
        raise IdxError("only 1-d labels and 3-d images are supported")
    return struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) \
        + arr.tobytes()


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
}


def load_mnist(data_dir):
    """Read the MNIST training images and labels from ``data_dir``.

    Accepts the plain or ``.gz`` file names.  Returns ``(images, labels)``.
    """
    import gzip

    out = []
    for key in ("train_images", "train_labels"):
        base = os.path.join(data_dir, MNIST_FILES[key])
        if os.path.exists(base):
            with open(base, "rb") as f:
                raw = f.read()
        elif os.path.exists(base + ".gz"):
            with gzip.open(base + ".gz", "rb") as f:
                raw = f.read()
        else:
            raise FileNotFoundError(f"MNIST file not found: {base}[.gz]")
        try:
            out.append(parse_idx(raw))
        except IdxError as e:
            raise IdxError(f"{base}: {e}") from None
    images, labels = out
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IdxError(f"unexpected MNIST shapes {images.shape} / {labels.shape}")
    return images, labels


# ---------------------------------------------------------------------------
# ColoredMNIST


@dataclass(frozen=True)
class CmnistSpec:
    train_color_flip_probs: tuple = (0.1, 0.2)
    test_color_flip_prob: float = 0.9
    label_flip_prob: float = 0.25
    n_train: int = 50000
    seed: int = 0

    def __post_init__(self):
        probs = (*self.train_color_flip_probs, self.test_color_flip_prob,
                 self.label_flip_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("CMNIST probabilities must lie in [0, 1]")


def _pool2(images):
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _colorize(images, colors, grayscale=False):
    """Two channels: red (0) and green (1).  Colour 1 means green."""
    n = len(images)
    flat = images.reshape(n, -1)
    if grayscale:
        return np.hstack([flat, flat])
    green = colors[:, None]
    return np.hstack([flat * (1.0 - green), flat * green])


def _make_env(images, digits, color_flip, label_flip, rng, env_id, grayscale=False):
    labels = (digits >= 5).astype(np.float64)
    labels = np.abs(labels - (rng.random(len(labels)) < label_flip))
    colors = np.abs(labels - (rng.random(len(labels)) < color_flip))
    x = _colorize(_pool2(images), colors, grayscale)
    meta = {"kind": "cmnist", "color_flip": color_flip, "label_flip": label_flip,
            "colors": colors, "grayscale": grayscale}
    return EnvDataset(x, labels, env_id, meta)


def build_cmnist(images, labels, spec):
    """Two training environments, a colour-reversed test set and a gray set.

    The first ``spec.n_train`` MNIST rows are shuffled and dealt alternately
    to the training environments; the remaining rows form the test set.  The
    gray set reuses the test rows and their (flipped) labels with the digit
    copied into both channels.
    """
    rng = stream(spec.seed, "data", 1)
    n_train = min(spec.n_train, len(labels))
    order = rng.permutation(n_train)
    tr_img, tr_lab = images[:n_train][order], labels[:n_train][order]
    envs = []
    k = len(spec.train_color_flip_probs)
    for e, p in enumerate(spec.train_color_flip_probs):
        sel = slice(e, None, k)
        envs.append(_make_env(tr_img[sel], tr_lab[sel], p, spec.label_flip_prob,
                              stream(spec.seed, "data", 2, e), f"train{e}:{p:g}"))
        envs[-1].meta["rows"] = order[sel]
    te_img, te_lab = images[n_train:], labels[n_train:]
    test = _make_env(te_img, te_lab, spec.test_color_flip_prob, spec.label_flip_prob,
                     stream(spec.seed, "data", 3), f"test:{spec.test_color_flip_prob:g}")
    gray = EnvDataset(np.hstack([_pool2(te_img).reshape(len(te_img), -1)] * 2),
                      test.y.copy(), "gray",
                      {**test.meta, "grayscale": True})
    return envs + [test, gray]


# ---------------------------------------------------------------------------
# masks


def augment_mask(x, p, seed, *keys):
    """Zero each coordinate independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must be in [0, 1], got {p}")
    x = np.asarray(x, dtype=np.float64)
    if p == 0.0:
        return x.copy()
    keep = stream(seed, "augment", *keys).random(x.shape) >= p
    return x * keep


def subset_mask(x, keep):
    """Zero every column of ``x`` not listed in ``keep``."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.intp)
    if keep.size and (keep[0] < 0 or keep[-1] >= d):
        raise IndexError(f"keep indices {keep.tolist()} out of range for {d} columns")
    out = np.zeros_like(x)
    out[..., keep] = x[..., keep]
    return out


def write_dataset_csv(path, datasets):
    """Snapshot datasets as ``env_id,y,x_0..x_{d-1}`` rows."""
    d = datasets[0].x.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["env_id", "y", *(f"x_{j}" for j in range(d))])
        for ds in datasets:
            for xi, yi in zip(ds.x, ds.y):
                w.writerow([ds.env_id, repr(float(yi)), *(repr(float(v)) for v in xi)])
