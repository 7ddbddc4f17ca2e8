"""Synthetic toy datasets and the on-disk dataset formats (CSV and IDX).

Two deterministic built-in sets back the desk-scale experiments:

* ``blobs``  -- 4 Gaussian clusters in R^32, for the MLP victims.
* ``images`` -- 8x8 grayscale bar/diagonal patterns, for the CNN victim.

Dataset specs accepted everywhere a dataset path appears: a ``.csv`` file
(one row = label, then flattened features), an IDX file pair prefix
(``<prefix>.images.idx`` + ``<prefix>.labels.idx``), or the literal strings
``synthetic:blobs`` / ``synthetic:images`` which regenerate the built-in
sets from their fixed seeds.
"""

from __future__ import annotations

import struct

import numpy as np

BLOBS_SEED = 7
IMAGES_SEED = 11
BLOBS_SIZE = 4000
IMAGES_SIZE = 3200


class DatasetUnreadable(ValueError):
    """A dataset path or spec could not be read or parsed."""


def make_blobs(n_samples=BLOBS_SIZE, num_classes=4, dim=32, seed=BLOBS_SEED,
               spread=1.0, mean_norm=4.0):
    """Gaussian clusters with well-separated random means (norm ``mean_norm``)."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= mean_norm / np.linalg.norm(means, axis=1, keepdims=True)
    per = n_samples // num_classes
    xs, ys = [], []
    for c in range(num_classes):
        xs.append(means[c] + spread * rng.normal(size=(per, dim)))
        ys.append(np.full(per, c, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def make_bar_images(n_samples=IMAGES_SIZE, size=8, seed=IMAGES_SEED, noise=0.35):
    """8x8 single-channel patterns: horizontal bar, vertical bar, main
    diagonal, anti-diagonal; class signal 2.0 plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    num_classes = 4
    per = n_samples // num_classes
    templates = np.zeros((num_classes, size, size), dtype=np.float32)
    templates[0, size // 2, :] = 2.0
    templates[1, :, size // 2] = 2.0
    templates[2, np.arange(size), np.arange(size)] = 2.0
    templates[3, np.arange(size), size - 1 - np.arange(size)] = 2.0
    xs, ys = [], []
    for c in range(num_classes):
        base = np.tile(templates[c], (per, 1, 1))
        shift = rng.integers(-1, 2, size=per)  # jitter bar position by one pixel
        imgs = np.stack([np.roll(img, s, axis=c % 2) for img, s in zip(base, shift)])
        imgs += noise * rng.normal(size=imgs.shape)
        xs.append(imgs[:, None, :, :])
        ys.append(np.full(per, c, dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys)
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def train_test_split(x, y, test_fraction=0.25, seed=0):
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


# --- CSV: one row per sample, label first then flattened features ---------

def save_csv(path, x, y, feature_shape=None) -> None:
    x = np.asarray(x, dtype=np.float32)
    flat = x.reshape(x.shape[0], -1)
    with open(path, "w") as fh:
        for label, row in zip(np.asarray(y).ravel(), flat):
            fh.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path):
    labels, rows = [], []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetUnreadable(f"cannot parse CSV dataset {path}: {exc}") from exc
    if not rows:
        raise DatasetUnreadable(f"dataset {path} is empty")
    return np.array(rows, dtype=np.float32), np.array(labels, dtype=np.int64)


# --- IDX: classic big-endian magic + dims header, float32/uint8 payload ---

_IDX_FLOAT32 = 0x0D
_IDX_UINT8 = 0x08


def _write_idx(path, array, type_code, dtype):
    array = np.ascontiguousarray(array, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, type_code, array.ndim))
        for dim in array.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(array.tobytes())


def _read_idx(path):
    with open(path, "rb") as fh:
        zero1, zero2, type_code, ndim = struct.unpack(">BBBB", fh.read(4))
        if zero1 or zero2:
            raise DatasetUnreadable(f"{path}: bad IDX magic")
        shape = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        dtype = {_IDX_FLOAT32: ">f4", _IDX_UINT8: "u1"}.get(type_code)
        if dtype is None:
            raise DatasetUnreadable(f"{path}: unsupported IDX type 0x{type_code:02x}")
        data = np.frombuffer(fh.read(), dtype=dtype)
    return data.reshape(shape)


def save_idx(prefix, x, y) -> None:
    """Write ``<prefix>.images.idx`` (float32 features) and
    ``<prefix>.labels.idx`` (uint8 labels)."""
    _write_idx(f"{prefix}.images.idx", x, _IDX_FLOAT32, ">f4")
    _write_idx(f"{prefix}.labels.idx", np.asarray(y).ravel(), _IDX_UINT8, np.uint8)


def load_idx(prefix):
    try:
        x = _read_idx(f"{prefix}.images.idx").astype(np.float32)
        y = _read_idx(f"{prefix}.labels.idx").astype(np.int64)
    except OSError as exc:
        raise DatasetUnreadable(f"cannot read IDX pair {prefix}: {exc}") from exc
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise DatasetUnreadable(f"IDX pair {prefix}: bad sample counts")
    return x, y


def load_dataset(spec):
    """Resolve a dataset spec (synthetic name, CSV path, or IDX prefix)."""
    spec = str(spec)
    if spec == "synthetic:blobs":
        return make_blobs()
    if spec == "synthetic:images":
        return make_bar_images()
    if spec.startswith("synthetic:"):
        raise DatasetUnreadable(f"unknown synthetic dataset {spec!r}")
    if spec.endswith(".csv"):
        return load_csv(spec)
    return load_idx(spec)
