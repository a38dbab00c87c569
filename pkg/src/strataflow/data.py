"""Synthetic class-conditional datasets at two scales.

Point mode emits single-token 2D samples for distribution metrics; grid
mode emits 8x8 single-channel procedural images for attention exercise.
Every sample is a pure function of (spec, index): the generator re-seeds
from the index, so any sample can be regenerated bitwise without storing
anything. Labels cycle round-robin, which keeps classes balanced within
one sample and makes train/eval splits disjoint by index range.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import textkv
from .errors import ConfigError, InputError
from .rng import indexed_rng

EXPORT_MAGIC = b"LTTD"
EXPORT_VERSION = 1

GRID_SIDE = 8

# (mode, family) -> (default class count, max class count)
_FAMILIES = {
    ("points2d", "gauss8"): (8, 64),
    ("points2d", "checker"): (8, 8),
    ("points2d", "moons"): (2, 2),
    ("points2d", "rings"): (4, 8),
    ("grid8", "blobs"): (8, 9),
    ("grid8", "bars"): (8, 8),
    ("grid8", "checker"): (4, 6),
}


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "points2d"
    family: str = "gauss8"
    classes: int = 0  # 0 means the family default
    n_train: int = 8192
    n_eval: int = 2048
    seed: int = 0

    def __post_init__(self):
        key = (self.mode, self.family)
        if key not in _FAMILIES:
            known = ", ".join(f"{m}/{f}" for m, f in sorted(_FAMILIES))
            raise ConfigError(
                f"unknown family {self.family!r} for mode {self.mode!r}; "
                f"choose from {known}"
            )
        default, cmax = _FAMILIES[key]
        if self.classes == 0:
            object.__setattr__(self, "classes", default)
        if not 1 <= self.classes <= cmax:
            raise ConfigError(
                f"{self.mode}/{self.family} supports 1..{cmax} classes, got {self.classes}"
            )
        if self.family == "moons" and self.classes != 2:
            raise ConfigError("moons is a two-class family")
        if self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("n_train must be positive and n_eval non-negative")

    @property
    def num_tokens(self) -> int:
        return 1 if self.mode == "points2d" else GRID_SIDE * GRID_SIDE

    @property
    def latent_dim(self) -> int:
        return 2 if self.mode == "points2d" else 1

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (1, 1) if self.mode == "points2d" else (GRID_SIDE, GRID_SIDE)

    def to_text(self) -> str:
        return textkv.to_text(self)

    @staticmethod
    def from_text(text: str) -> "DatasetSpec":
        return textkv.from_text(DatasetSpec, text)


# ---------------------------------------------------------------------------
# family generators; each is (rng, label, classes) -> float array


def _gauss8(rng, label, classes):
    ang = 2.0 * math.pi * label / classes
    center = np.array([2.0 * math.cos(ang), 2.0 * math.sin(ang)])
    return center + 0.1 * rng.standard_normal(2)


_DARK_CELLS = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]


def _checker_points(rng, label, classes):
    # class c fills the c-th dark cell of a 4x4 board over [-2, 2]^2
    i, j = _DARK_CELLS[label]
    return np.array([
        rng.uniform(-2.0 + j, -1.0 + j),
        rng.uniform(-2.0 + i, -1.0 + i),
    ])


def _moons(rng, label, classes):
    theta = rng.uniform(0.0, math.pi)
    if label == 0:
        base = np.array([math.cos(theta), math.sin(theta)])
    else:
        base = np.array([1.0 - math.cos(theta), 0.5 - math.sin(theta)])
    return base + 0.1 * rng.standard_normal(2)


def _rings(rng, label, classes):
    radius = 2.0 * (label + 1) / classes + 0.05 * rng.standard_normal()
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return radius * np.array([math.cos(theta), math.sin(theta)])


_GRID_ROWS = np.arange(GRID_SIDE, dtype=np.float64)[:, None]
_GRID_COLS = np.arange(GRID_SIDE, dtype=np.float64)[None, :]


def _blobs(rng, label, classes):
    # bump centers on the 3x3 lattice of rows/cols (1, 4, 7), jittered
    cr = 1.0 + 3.0 * (label // 3) + 0.4 * rng.standard_normal()
    cc = 1.0 + 3.0 * (label % 3) + 0.4 * rng.standard_normal()
    d2 = (_GRID_ROWS - cr) ** 2 + (_GRID_COLS - cc) ** 2
    return 2.0 * np.exp(-d2 / 2.0) - 1.0


def _bars(rng, label, classes):
    # even classes are vertical bars, odd horizontal, at stride-2 offsets
    pos = 2.0 * (label // 2) + 0.5 + 0.3 * rng.standard_normal()
    coord = _GRID_COLS if label % 2 == 0 else _GRID_ROWS
    d2 = (coord - pos) ** 2
    return np.broadcast_to(
        2.0 * np.exp(-d2 / (2.0 * 0.6 ** 2)) - 1.0, (GRID_SIDE, GRID_SIDE)
    ).copy()


_CHECKER_GRID_STYLES = [(1, 0), (1, 1), (2, 0), (2, 1), (4, 0), (4, 1)]


def _checker_grid(rng, label, classes):
    # class picks cell size and phase; amplitude varies within the class
    cell, phase = _CHECKER_GRID_STYLES[label]
    amp = rng.uniform(0.7, 1.0)
    parity = (_GRID_ROWS // cell + _GRID_COLS // cell + phase) % 2
    return amp * (1.0 - 2.0 * parity)


_GENERATORS = {
    ("points2d", "gauss8"): _gauss8,
    ("points2d", "checker"): _checker_points,
    ("points2d", "moons"): _moons,
    ("points2d", "rings"): _rings,
    ("grid8", "blobs"): _blobs,
    ("grid8", "bars"): _bars,
    ("grid8", "checker"): _checker_grid,
}


def sample(spec: DatasetSpec, index: int):
    """The index-th sample as ([tokens, channels] float32, label)."""
    if index < 0:
        raise InputError(f"sample index must be non-negative, got {index}")
    label = index % spec.classes
    rng = indexed_rng(spec.seed, f"data.{spec.mode}.{spec.family}", index)
    x = _GENERATORS[(spec.mode, spec.family)](rng, label, spec.classes)
    return x.reshape(spec.num_tokens, spec.latent_dim).astype(np.float32), label


def batch(spec: DatasetSpec, indices):
    """Stack samples for the given indices: ([B, tokens, channels], [B])."""
    xs, labels = [], []
    for i in indices:
        x, c = sample(spec, int(i))
        xs.append(x)
        labels.append(c)
    return np.stack(xs), np.array(labels, dtype=np.int64)


def train_indices(spec: DatasetSpec) -> range:
    return range(spec.n_train)


def eval_indices(spec: DatasetSpec) -> range:
    return range(spec.n_train, spec.n_train + spec.n_eval)


# ---------------------------------------------------------------------------
# normalization

_NORM_CACHE: dict = {}
_NORM_DRAWS = 8192


def _norm_stats(spec: DatasetSpec):
    """Global (mean, std) per family, from a fixed dedicated stream.

    Independent of spec.seed so every dataset of a family shares one
    affine map; estimated once over enough draws to pin the scale.
    """
    key = (spec.mode, spec.family, spec.classes)
    if key not in _NORM_CACHE:
        name = f"data.norm.{spec.mode}.{spec.family}.{spec.classes}"
        gen = _GENERATORS[(spec.mode, spec.family)]
        vals = [
            gen(indexed_rng(0, name, i), i % spec.classes, spec.classes)
            for i in range(_NORM_DRAWS)
        ]
        flat = np.stack(vals).ravel()
        _NORM_CACHE[key] = (float(flat.mean()), float(flat.std()) or 1.0)
    return _NORM_CACHE[key]


def normalize(x: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    if not np.isfinite(x).all():
        raise InputError("normalize: input contains NaN or Inf")
    mu, sd = _norm_stats(spec)
    return ((x - mu) / sd).astype(x.dtype)


def denormalize(x: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    mu, sd = _norm_stats(spec)
    return (x * sd + mu).astype(x.dtype)


# ---------------------------------------------------------------------------
# binary export


def write_export(spec: DatasetSpec, xs: np.ndarray, labels: np.ndarray, path) -> int:
    """Write arbitrary samples (generated sets included) under a spec header.

    Header: magic, u32 version, u32 length, spec text. Body: all samples
    as little-endian float32 in index order, then all labels as u32.
    Returns the number of samples written.
    """
    n = spec.n_train + spec.n_eval
    xs = np.asarray(xs, dtype=np.float32)
    want = (n, spec.num_tokens, spec.latent_dim)
    if xs.shape != want:
        raise InputError(f"sample block shaped {xs.shape}, spec demands {want}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= spec.classes:
        raise InputError(f"labels outside 0..{spec.classes - 1}")
    with open(path, "wb") as f:
        f.write(EXPORT_MAGIC)
        f.write(struct.pack("<I", EXPORT_VERSION))
        text = spec.to_text().encode()
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(np.ascontiguousarray(xs, dtype="<f4").tobytes())
        f.write(labels.astype("<u4").tobytes())
    return n


def export_dataset(spec: DatasetSpec, path) -> int:
    """Generate the full train + eval corpus and write it via write_export."""
    n = spec.n_train + spec.n_eval
    xs, labels = batch(spec, range(n))
    return write_export(spec, xs, labels, path)


def read_export(path):
    """Parse a file written by export_dataset; returns (spec, x, labels)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != EXPORT_MAGIC:
        raise InputError(f"{path}: not a dataset export")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != EXPORT_VERSION:
        raise InputError(f"{path}: unsupported export version {version}")
    tlen = struct.unpack_from("<I", blob, 8)[0]
    spec = DatasetSpec.from_text(blob[12:12 + tlen].decode())
    n = spec.n_train + spec.n_eval
    off = 12 + tlen
    xsize = n * spec.num_tokens * spec.latent_dim * 4
    x = np.frombuffer(blob[off:off + xsize], dtype="<f4").reshape(
        n, spec.num_tokens, spec.latent_dim
    )
    labels = np.frombuffer(blob[off + xsize:off + xsize + 4 * n], dtype="<u4")
    if off + xsize + 4 * n != len(blob):
        raise InputError(f"{path}: unexpected file size")
    return spec, x.copy(), labels.astype(np.int64)
