"""Ternary matrices: 2-bit packing, TWN ternarization and counted application.

Packing codes: ``0b00 -> 0``, ``0b01 -> +1``, ``0b10 -> -1``; ``0b11`` is
rejected. Entry ``i`` of the row-major stream sits in bits ``2*(i % 4)`` and
``2*(i % 4) + 1`` of byte ``i // 4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import opcount
from .errors import FormatError, ShapeError

TWN_THRESHOLD = 0.7


def pack_ternary(values) -> bytes:
    flat = np.asarray(values).reshape(-1)
    if not np.isin(flat, (-1, 0, 1)).all():
        raise ValueError("ternary values must be in {-1, 0, 1}")
    codes = np.where(flat == 1, 1, np.where(flat == -1, 2, 0)).astype(np.uint8)
    pad = (-len(codes)) % 4
    codes = np.concatenate([codes, np.zeros(pad, np.uint8)]).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_ternary(data: bytes, count: int, base_offset: int = 0) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if len(raw) != (2 * count + 7) // 8:
        raise FormatError(f"packed ternary payload has {len(raw)} bytes for {count} entries", base_offset)
    codes = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    bad = np.flatnonzero(codes == 0b11)
    if len(bad):
        raise FormatError("invalid ternary code 0b11", base_offset + int(bad[0]) // 4)
    lut = np.array([0, 1, -1, 0], dtype=np.int8)
    return lut[codes]


@dataclass(eq=False)
class TernaryMatrix:
    """Matrix over {-1, 0, +1} with an optional (training-time) scale."""

    values: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise ShapeError(f"ternary matrix must be 2-D, got shape {v.shape}")
        if not np.isin(v, (-1, 0, 1)).all():
            raise ValueError("ternary values must be in {-1, 0, 1}")
        self.values = v.astype(np.int8)
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def packed_nbytes(self) -> int:
        return (2 * self.rows * self.cols + 7) // 8

    def pack(self) -> bytes:
        return pack_ternary(self.values)

    @classmethod
    def unpack(cls, data: bytes, rows: int, cols: int, scale: float | None = None) -> TernaryMatrix:
        return cls(unpack_ternary(data, rows * cols).reshape(rows, cols), scale)

    def dense(self) -> np.ndarray:
        """Float matrix including the scale, if any."""
        out = self.values.astype(np.float64)
        return out * self.scale if self.scale is not None else out

    def __eq__(self, other):
        if not isinstance(other, TernaryMatrix):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.values, other.values)


def twn_pattern(w) -> tuple[np.ndarray, float]:
    """Ternary pattern and scale for ``w`` (any shape)."""
    w = np.asarray(w, dtype=np.float64)
    mag = np.abs(w)
    delta = TWN_THRESHOLD * mag.mean() if mag.size else 0.0
    keep = mag > delta
    if not keep.any():
        return np.zeros(w.shape, np.int8), 1.0
    return (np.sign(w) * keep).astype(np.int8), float(mag[keep].mean())


def ternarize_twn(w) -> TernaryMatrix:
    """Threshold 0.7 * mean|w|; scale = mean magnitude of the surviving entries."""
    pattern, alpha = twn_pattern(w)
    return TernaryMatrix(pattern, alpha)


def ternary_apply(w, x, groups: int = 1) -> np.ndarray:
    """``w @ x`` for a ternary (or float) ``w`` with counted additions.

    ``x`` is ``[cols, P]`` or batched ``[N, cols, P]``. With ``groups > 1``
    the rows and columns of ``w`` describe one group and ``x`` carries
    ``groups * cols`` rows; group ``g`` of the output reads only group ``g``
    of the input. One addition is recorded per nonzero coefficient per
    column and group (``rows*cols`` in dense-estimate mode).
    """
    mat = w.values if isinstance(w, TernaryMatrix) else np.asarray(w)
    x = np.asarray(x, dtype=np.float64)
    rows, cols = mat.shape
    if rows % groups or x.shape[-2] != cols * groups:
        raise ShapeError(f"matrix {mat.shape} x {groups} groups cannot be applied to {x.shape}")
    counter = opcount.active()
    if counter is not None:
        columns = int(np.prod(x.shape)) // x.shape[-2]
        touched = mat.size if counter.mode == "dense_estimate" else int(np.count_nonzero(mat))
        opcount.record(adds=touched * columns)
    m = mat.astype(np.float64)
    if groups == 1:
        out = m @ x
    else:
        lead = x.shape[:-2]
        xg = x.reshape(*lead, groups, cols, x.shape[-1])
        mg = m.reshape(groups, rows // groups, cols)
        out = np.einsum("gok,...gkp->...gop", mg, xg).reshape(*lead, rows, x.shape[-1])
    if isinstance(w, TernaryMatrix) and w.scale is not None:
        out = out * w.scale
    return out
