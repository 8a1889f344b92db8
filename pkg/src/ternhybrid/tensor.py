"""Reference linear algebra, convolution, fixed-point numbers and tensor blobs.

Arrays are plain numpy arrays. Activations are laid out ``[N, C, H, W]`` (a
single sample may drop ``N``), filters ``[C_out, C_in / groups, K_h, K_w]``,
and every flattening is row-major. Reference kernels compute in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import opcount
from .errors import FormatError, ShapeError

# Tensor blob element kinds. Fixed-point kinds are coded by their bit width.
KIND_FLOAT32 = 0
KIND_TERNARY = 1
FIXED_KINDS = {8: np.int8, 16: np.int16, 32: np.int32}


@dataclass(frozen=True)
class QFormat:
    """Symmetric power-of-two fixed-point format Q(total_bits, frac_bits)."""

    total_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.total_bits not in FIXED_KINDS:
            raise ValueError(f"total_bits must be 8, 16 or 32, got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(f"frac_bits must be in [0, {self.total_bits}), got {self.frac_bits}")

    @property
    def int_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def int_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.int_min * self.step

    @property
    def max_value(self) -> float:
        return self.int_max * self.step

    @property
    def dtype(self):
        return FIXED_KINDS[self.total_bits]


@dataclass(frozen=True)
class FixedPoint:
    """Integer payload plus the format that gives it a real value."""

    values: np.ndarray
    fmt: QFormat

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def fx_quantize(x, q: QFormat) -> FixedPoint:
    """Round half-to-even onto the Q grid, saturating at the format bounds."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * (2.0 ** q.frac_bits))
    ints = np.clip(scaled, q.int_min, q.int_max).astype(q.dtype)
    return FixedPoint(ints, q)


def fx_dequantize(t: FixedPoint) -> np.ndarray:
    return (t.values.astype(np.float64) * t.fmt.step).astype(np.float32)


def fx_round(x, q: QFormat) -> np.ndarray:
    """quantize-then-dequantize in float64 (no float32 narrowing)."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * (2.0 ** q.frac_bits))
    return np.clip(scaled, q.int_min, q.int_max) * q.step


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    in_channels: int = 1
    out_channels: int = 1
    depthwise: bool = False

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride_h", "stride_w", "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be non-negative")
        if self.depthwise and self.out_channels % self.in_channels:
            raise ShapeError("depthwise out_channels must be a multiple of in_channels")

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> ConvGeometry:
        return cls(1, 1, in_channels=in_channels, out_channels=out_channels)

    @property
    def groups(self) -> int:
        return self.in_channels if self.depthwise else 1

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    @property
    def patch_len(self) -> int:
        """Length of one group's receptive-field vector."""
        return self.kernel_h * self.kernel_w * self.in_per_group

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_h == 1 and self.kernel_w == 1 and not self.depthwise

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"geometry {self} leaves no output positions for input {h}x{w}")
        return oh, ow

    def filter_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_per_group, self.kernel_h, self.kernel_w)


def matmul_ref(a, b) -> np.ndarray:
    """Plain matrix product; records ``n*m*p`` MACs when counting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    opcount.record(macs=a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    return x, False


def _windows(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """[N,C,H,W] -> [N,C,OH,OW,KH,KW] view of the receptive fields."""
    if x.shape[1] != g.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects {g.in_channels}")
    g.output_hw(x.shape[2], x.shape[3])
    xp = np.pad(x, ((0, 0), (0, 0), (g.pad_h, g.pad_h), (g.pad_w, g.pad_w)))
    win = sliding_window_view(xp, (g.kernel_h, g.kernel_w), axis=(2, 3))
    return win[:, :, :: g.stride_h, :: g.stride_w]


def conv2d_ref(x, filters, geometry: ConvGeometry) -> np.ndarray:
    """Cross-correlation with zero padding; depthwise geometries convolve per channel group."""
    xb, single = _batched(x)
    g = geometry
    filters = np.asarray(filters, dtype=np.float64)
    if filters.shape != g.filter_shape():
        raise ShapeError(f"filters {filters.shape} do not match geometry {g.filter_shape()}")
    win = _windows(xb, g)
    n, _, oh, ow = win.shape[:4]
    win = win.reshape(n, g.groups, g.in_per_group, oh, ow, g.kernel_h, g.kernel_w)
    f = filters.reshape(g.groups, g.out_per_group, g.in_per_group, g.kernel_h, g.kernel_w)
    out = np.einsum("ngchwij,gocij->ngohw", win, f, optimize=True).reshape(n, g.out_channels, oh, ow)
    opcount.record(macs=n * oh * ow * g.patch_len * g.out_channels)
    return out[0] if single else out


def im2col(x, geometry: ConvGeometry) -> np.ndarray:
    """Patch matrix ``[C*KH*KW, OH*OW]`` (batched: ``[N, C*KH*KW, OH*OW]``).

    Rows are channel-major so that ``filters.reshape(C_out, -1) @ im2col(x)``
    reproduces :func:`conv2d_ref` for ungrouped geometries.
    """
    xb, single = _batched(x)
    g = geometry
    if g.is_pointwise and g.stride_h == g.stride_w == 1 and g.pad_h == g.pad_w == 0:
        if xb.shape[1] != g.in_channels:
            raise ShapeError(f"input has {xb.shape[1]} channels, geometry expects {g.in_channels}")
        cols = xb.reshape(xb.shape[0], xb.shape[1], -1)
        return cols[0] if single else cols
    win = _windows(xb, g)
    n, c, oh, ow, kh, kw = win.shape
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return cols[0] if single else cols


# --- tensor blobs -----------------------------------------------------------

def encode_blob(array, kind: int) -> bytes:
    """Little-endian blob: kind u8, rank u8, dims u32 x rank, payload."""
    array = np.asarray(array)
    header = struct.pack("<BB", kind, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    if kind == KIND_FLOAT32:
        payload = array.astype("<f4").tobytes()
    elif kind == KIND_TERNARY:
        from .ternary import pack_ternary

        payload = pack_ternary(array)
    elif kind in FIXED_KINDS:
        payload = array.astype(np.dtype(FIXED_KINDS[kind]).newbyteorder("<")).tobytes()
    else:
        raise ValueError(f"unknown element kind {kind}")
    return header + payload


def payload_nbytes(kind: int, count: int) -> int:
    if kind == KIND_FLOAT32:
        return 4 * count
    if kind == KIND_TERNARY:
        return (2 * count + 7) // 8
    return count * kind // 8


def decode_blob(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int, int]:
    """Parse one blob at ``offset``; returns (array, kind, offset after blob)."""
    if len(buf) < offset + 2:
        raise FormatError("truncated tensor header", offset)
    kind, rank = struct.unpack_from("<BB", buf, offset)
    if kind not in (KIND_FLOAT32, KIND_TERNARY) and kind not in FIXED_KINDS:
        raise FormatError(f"unknown element kind {kind}", offset)
    pos = offset + 2
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated tensor dims", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = payload_nbytes(kind, count)
    if len(buf) < pos + nbytes:
        raise FormatError("truncated tensor payload", pos)
    raw = bytes(buf[pos : pos + nbytes])
    if kind == KIND_FLOAT32:
        array = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    elif kind == KIND_TERNARY:
        from .ternary import unpack_ternary

        array = unpack_ternary(raw, count, base_offset=pos).reshape(shape)
    else:
        dt = np.dtype(FIXED_KINDS[kind]).newbyteorder("<")
        array = np.frombuffer(raw, dtype=dt).astype(FIXED_KINDS[kind]).reshape(shape)
    return array, kind, pos + nbytes


@dataclass(eq=False)
class BatchNorm:
    """Inference-time batch norm over axis 1 (channels)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        self.gamma, self.beta, self.mean, self.var = (
            as_f32(v).reshape(-1) for v in (self.gamma, self.beta, self.mean, self.var)
        )
        if not len(self.gamma) == len(self.beta) == len(self.mean) == len(self.var):
            raise ShapeError("batch norm parameters must share one length")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-3) -> BatchNorm:
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """(s, t) such that ``bn(x) == s * x + t`` per channel."""
        s = np.asarray(self.gamma, np.float64) / np.sqrt(np.asarray(self.var, np.float64) + self.eps)
        return s, np.asarray(self.beta, np.float64) - s * np.asarray(self.mean, np.float64)

    def apply(self, x: np.ndarray) -> np.ndarray:
        s, t = self.scale_shift()
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x * s.reshape(shape) + t.reshape(shape)


def as_f32(x) -> np.ndarray:
    """C-ordered float64 array holding float32-representable values (the stored precision).

    The fixed layout keeps BLAS summation order, and so results, identical for
    a model and its deserialized copy.
    """
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32), dtype=np.float64)


def add_frac(a: int | None, b: int | None) -> int | None:
    """Fraction bits of a product, or None when either side is unquantized."""
    return None if a is None or b is None else a + b


class QuantSim:
    """Fixed-point rounding points for a forward pass.

    ``formats`` maps tensor names to formats; unnamed tensors stay float.
    Values are kept as float64 on the Q grid, which represents every
    intermediate exactly while magnitudes stay below 2**53. Accumulators are
    saturated to ``acc_bits`` two's complement at their own scale.
    """

    def __init__(self, formats: dict[str, QFormat] | None = None, prefix: str = "", acc_bits: int = 32):
        self.formats = formats or {}
        self.prefix = prefix
        self.acc_bits = acc_bits

    @property
    def active(self) -> bool:
        return bool(self.formats)

    def child(self, prefix: str) -> QuantSim:
        return QuantSim(self.formats, self.prefix + prefix, self.acc_bits)

    def fmt(self, name: str) -> QFormat | None:
        return self.formats.get(self.prefix + name)

    def frac(self, name: str) -> int | None:
        f = self.fmt(name)
        return None if f is None else f.frac_bits

    def weight(self, name: str, w):
        f = self.fmt(name)
        return w if f is None else fx_round(w, f)

    act = weight

    def acc(self, x, frac: int | None):
        if frac is None or not self.active:
            return x
        lim = 2.0 ** (self.acc_bits - 1)
        return np.clip(x, -lim * 2.0**-frac, (lim - 1) * 2.0**-frac)

    def align(self, name: str, b, frac: int | None):
        """Round a bias to its own format, then onto the accumulator grid."""
        b = self.weight(name, b)
        if frac is None or not self.active:
            return b
        return np.rint(np.asarray(b, np.float64) * 2.0**frac) * 2.0**-frac


NULL_SIM = QuantSim()
