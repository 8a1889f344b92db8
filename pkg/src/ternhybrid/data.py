"""Feature datasets: KWSF binary files, CSV import and the synthetic generator.

KWSF layout (little-endian): ``"KWSF"``, version u16, N u32, H u16, W u16,
L u16, then N records of H*W float32 (row-major) followed by a u8 label.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError

MAGIC = b"KWSF"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")


@dataclass
class FeatureDataset:
    x: np.ndarray  # [N, 1, H, W] float32
    y: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.ndim == 3:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or self.x.shape[1] != 1:
            raise ConfigError(f"features must be [N, 1, H, W], got {self.x.shape}")
        if len(self.x) != len(self.y):
            raise ConfigError("feature and label counts differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if self.num_classes > 255:
            raise ConfigError("at most 255 classes fit a u8 label")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def hw(self) -> tuple[int, int]:
        return self.x.shape[2], self.x.shape[3]


def to_bytes(ds: FeatureDataset) -> bytes:
    h, w = ds.hw
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(ds), h, w, ds.num_classes))
    rec = np.zeros(len(ds), dtype=[("x", "<f4", (h * w,)), ("y", "u1")])
    rec["x"] = ds.x.reshape(len(ds), h * w)
    rec["y"] = ds.y
    out += rec.tobytes()
    return bytes(out)


def from_bytes(buf: bytes, split: str = "train") -> FeatureDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, h, w, L = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    rec_size = 4 * h * w + 1
    need = _HEADER.size + n * rec_size
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for {n} records, found {len(buf)}", min(len(buf), need))
    rec = np.frombuffer(buf, dtype=[("x", "<f4", (h * w,)), ("y", "u1")], count=n, offset=_HEADER.size)
    bad = np.flatnonzero(rec["y"] >= L)
    if len(bad):
        raise FormatError(f"label {rec['y'][bad[0]]} out of range", _HEADER.size + int(bad[0] + 1) * rec_size - 1)
    x = rec["x"].astype(np.float32).reshape(n, 1, h, w)
    return FeatureDataset(x, rec["y"].astype(np.int64), L, split)


def save(ds: FeatureDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path, split: str | None = None) -> FeatureDataset:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"data file not found: {path}")
    if split is None:
        split = next((s for s in ("train", "val", "test") if s in p.stem), "train")
    return from_bytes(p.read_bytes(), split)


def import_csv(path, shape: tuple[int, int] = (49, 10), num_classes: int | None = None) -> FeatureDataset:
    """Rows of ``label, f_0, ..., f_{H*W-1}``; a non-numeric first row is a header."""
    h, w = shape
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                label = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                if lineno == 1:
                    continue
                raise ConfigError(f"{path}:{lineno}: non-numeric value") from None
            if len(vals) != h * w:
                raise ConfigError(f"{path}:{lineno}: expected {h * w} features, got {len(vals)}")
            xs.append(vals)
            ys.append(label)
    if not ys:
        raise ConfigError(f"{path}: no samples")
    L = num_classes if num_classes is not None else max(ys) + 1
    return FeatureDataset(np.array(xs).reshape(-1, 1, h, w), np.array(ys), L)


def export_csv(ds: FeatureDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for x, y in zip(ds.x.reshape(len(ds), -1), ds.y):
            wr.writerow([int(y)] + [repr(float(v)) for v in x])


# --- synthetic data ---------------------------------------------------------

def prototypes(classes: int, shape: tuple[int, int], rng: np.random.Generator, smooth: float = 2.0) -> np.ndarray:
    """Smooth random patterns, each normalized to zero mean and unit variance."""
    raw = rng.normal(size=(classes, *shape))
    protos = np.stack([gaussian_filter(p, sigma=smooth, mode="wrap") for p in raw])
    protos -= protos.mean(axis=(1, 2), keepdims=True)
    protos /= protos.std(axis=(1, 2), keepdims=True)
    return protos


def gen_data(
    classes: int = 12,
    per_class: int = 100,
    seed: int = 0,
    difficulty: float = 1.0,
    shape: tuple[int, int] = (49, 10),
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, FeatureDataset]:
    """Prototype-plus-noise dataset split train/val/test, deterministic in ``seed``.

    Sample = prototype of its class + ``difficulty`` * N(0, 1) noise.
    """
    if per_class < 1 or classes < 2:
        raise ConfigError("need at least 2 classes and 1 sample per class")
    if difficulty < 0:
        raise ConfigError("difficulty must be non-negative")
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("split fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    protos = prototypes(classes, shape, rng)
    y = np.repeat(np.arange(classes), per_class)
    x = protos[y] + difficulty * rng.normal(size=(len(y), *shape))
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n = len(y)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    cuts = {"train": slice(0, n_train), "val": slice(n_train, n_train + n_val), "test": slice(n_train + n_val, n)}
    meta = {"seed": seed, "difficulty": difficulty, "per_class": per_class}
    out = {k: FeatureDataset(x[s], y[s], classes, k, dict(meta)) for k, s in cuts.items()}
    out["train"].meta["prototypes"] = protos
    return out


def nearest_prototype_accuracy(ds: FeatureDataset, protos: np.ndarray) -> float:
    """Accuracy of assigning each sample to its closest prototype (Euclidean)."""
    flat = ds.x.reshape(len(ds), -1).astype(np.float64)
    p = protos.reshape(len(protos), -1)
    d = ((flat[:, None, :] - p[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == ds.y))
