"""Synthetic stand-in datasets, spike encoding and the on-disk tensor/event formats.

``synthetic_rate`` samples are static intensity vectors in [0, 1] (an RGB
stand-in) that step mode encodes as Bernoulli spike trains. ``synthetic_event``
samples are ON/OFF event tensors ``[dims, T]`` of a bar drifting across a
square grid (a DVS stand-in).

Binary tensor file (``.snnt``)::

    b"SNNT" | u32 version | u8 rank | rank x u64 dims | little-endian f32 payload

Event text file: one ``t x y polarity`` line per event, polarity in {0, 1}.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetSpec

SNNT_MAGIC = b"SNNT"
SNNT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray  # [N, dims] intensities or [N, dims, T] spikes
    y: np.ndarray  # [N] int labels

    @property
    def is_spikes(self) -> bool:
        return self.x.ndim == 3

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    val: Split
    id_test: Split
    ood_test: Split


def _rng(spec: DatasetSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))


def generate_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "file":
        return load_file_dataset(spec)
    if spec.classes < 2 or spec.samples_per_class < 2 or spec.test_per_class < 1 or spec.input_dims < 1:
        raise DatasetError("need >= 2 classes, >= 2 samples per class and positive sizes")
    if spec.noise_level < 0:
        raise DatasetError("noise_level must be nonnegative")
    make = _rate_samples if spec.kind == "synthetic_rate" else _event_samples
    protos = _prototypes(spec, _rng(spec, 0))
    ood_protos = _prototypes(spec, _rng(spec, 1))
    x, y = make(spec, protos, spec.samples_per_class, spec.noise_level, _rng(spec, 2))
    perm = _rng(spec, 3).permutation(len(y))
    n_val = max(1, len(y) // 10)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    xt, yt = make(spec, protos, spec.test_per_class, spec.noise_level, _rng(spec, 4))
    if spec.ood_mode == "prototypes":
        xo, yo = make(spec, ood_protos, spec.test_per_class, spec.noise_level, _rng(spec, 5))
    else:
        xo, yo = make(spec, protos, spec.test_per_class, max(3 * spec.noise_level, 0.5), _rng(spec, 5))
    return Dataset(Split(x[train_idx], y[train_idx]), Split(x[val_idx], y[val_idx]),
                   Split(xt, yt), Split(xo, yo))


def _prototypes(spec: DatasetSpec, rng):
    if spec.kind == "synthetic_rate":
        return rng.random((spec.classes, spec.input_dims))
    side = _grid_side(spec)
    # bar orientation (0 vertical, 1 horizontal), start offset and velocity per class
    return [(int(rng.integers(2)), int(rng.integers(side)), int(rng.choice([-2, -1, 1, 2])))
            for _ in range(spec.classes)]


def _rate_samples(spec, protos, per_class, noise, rng):
    n = spec.classes * per_class
    y = np.repeat(np.arange(spec.classes), per_class)
    x = protos[y] + noise * rng.standard_normal((n, spec.input_dims))
    return np.clip(x, 0.0, 1.0), y


def _grid_side(spec: DatasetSpec) -> int:
    side = math.isqrt(spec.input_dims // 2)
    if 2 * side * side != spec.input_dims:
        raise DatasetError("synthetic_event needs input_dims = 2 * side^2")
    return side


def _event_samples(spec, protos, per_class, noise, rng):
    side = _grid_side(spec)
    T = spec.encode_T
    n = spec.classes * per_class
    y = np.repeat(np.arange(spec.classes), per_class)
    x = np.zeros((n, 2, side, side, T))
    for i, c in enumerate(y):
        orient, start, vel = protos[c]
        jitter = int(rng.integers(-1, 2))
        prev = None
        for t in range(T):
            pos = (start + jitter + vel * t) % side
            frame = np.zeros((side, side))
            if orient == 0:
                frame[:, pos] = 1
            else:
                frame[pos, :] = 1
            if prev is not None:
                x[i, 0, :, :, t] = np.maximum(frame - prev, 0)  # ON
                x[i, 1, :, :, t] = np.maximum(prev - frame, 0)  # OFF
            else:
                x[i, 0, :, :, t] = frame
            prev = frame
    if noise > 0:
        flips = rng.random(x.shape) < noise * 0.1
        x = np.where(flips, 1.0 - x, x)
    return x.reshape(n, spec.input_dims, T), y


def bernoulli_encode(intensity, T: int, rng: np.random.Generator) -> np.ndarray:
    """``[N, dims]`` intensities -> ``[N, dims, T]`` binary spikes."""
    p = np.asarray(intensity, dtype=np.float64)
    return (rng.random(p.shape + (T,)) < p[..., None]).astype(np.float64)


def as_step_input(x, T, rng):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] != T:
            raise DatasetError(f"event tensor has {x.shape[2]} timesteps, network wants {T}")
        return x
    return bernoulli_encode(x, T, rng)


def as_rate_input(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=2) if x.ndim == 3 else x


# -- file formats -----------------------------------------------------------------


def write_tensor(path, arr) -> None:
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(SNNT_MAGIC)
        fh.write(struct.pack("<IB", SNNT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SNNT_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    if len(data) < 9:
        raise DatasetError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<IB", data, 4)
    if version != SNNT_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    off = 9 + 8 * rank
    if len(data) < off:
        raise DatasetError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, 9)
    n = int(np.prod(shape)) if rank else 1
    if len(data) != off + 4 * n:
        raise DatasetError(f"{path}: payload has {len(data) - off} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64).reshape(shape)


def read_events(path, height: int, width: int, T: int) -> np.ndarray:
    """Bin an event text file into a ``[2*height*width, T]`` binary tensor.

    Timestamps are split into ``T`` equal bins over ``[min t, max t]``.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 't x y polarity'")
        t, xx, yy, pol = float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        if not (0 <= xx < width and 0 <= yy < height and pol in (0, 1)):
            raise DatasetError(f"{path}:{lineno}: event out of range")
        rows.append((t, xx, yy, pol))
    out = np.zeros((2, height, width, T))
    if rows:
        ev = np.array(rows)
        t0, t1 = ev[:, 0].min(), ev[:, 0].max()
        span = t1 - t0 if t1 > t0 else 1.0
        bins = np.minimum(((ev[:, 0] - t0) / span * T).astype(int), T - 1)
        out[1 - ev[:, 3].astype(int), ev[:, 2].astype(int), ev[:, 1].astype(int), bins] = 1.0
    return out.reshape(2 * height * width, T)


def load_file_dataset(spec: DatasetSpec) -> Dataset:
    """Directory holding ``x.snnt``/``y.snnt`` and optionally ``ood_x.snnt``.

    The train pool is split 80/10/10 into train/val/id_test by ``spec.seed``;
    without ``ood_x.snnt`` the OOD split is the id_test split with added noise.
    """
    root = Path(spec.path)
    x = read_tensor(root / "x.snnt")
    y = read_tensor(root / "y.snnt").astype(int).reshape(-1)
    if len(x) != len(y) or len(y) < 10:
        raise DatasetError("x and y must have equal length (>= 10 samples)")
    perm = _rng(spec, 3).permutation(len(y))
    n10 = len(y) // 10
    val, test, train = np.sort(perm[:n10]), np.sort(perm[n10:2 * n10]), np.sort(perm[2 * n10:])
    if (root / "ood_x.snnt").exists():
        xo = read_tensor(root / "ood_x.snnt")
    else:
        xo = np.clip(x[test] + 0.5 * _rng(spec, 5).standard_normal(x[test].shape), 0, 1)
    return Dataset(Split(x[train], y[train]), Split(x[val], y[val]), Split(x[test], y[test]),
                   Split(xo, np.zeros(len(xo), dtype=int)))
