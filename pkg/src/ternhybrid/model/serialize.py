"""THNT model container.

Layout (little-endian)::

    "THNT"  version:u16  n_sections:u16
    n_sections x { tag: 8 bytes, NUL padded; offset:u32; length:u32 }
    section payloads

Sections: ``ARCH`` (UTF-8 JSON layer/head descriptor), ``TENSORS`` (count:u32,
then per tensor name_len:u16, UTF-8 name, tensor blob) and ``QSPEC``
(count:u32, then per entry name_len:u16, name, total_bits:u8, frac_bits:u8).
Tensors with a resolved format are stored as fixed-point integers.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..bonsai import BonsaiTree
from ..errors import FormatError
from ..spn import SpnShadow, StrassenLayer
from ..ternary import TernaryMatrix
from ..tensor import (
    KIND_FLOAT32,
    KIND_TERNARY,
    BatchNorm,
    ConvGeometry,
    QFormat,
    decode_blob,
    encode_blob,
    fx_quantize,
)
from .graph import AvgPool, Conv2D, DenseHead, Flatten, HybridModel, tensors

MAGIC = b"THNT"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<8sII")


# --- descriptors ------------------------------------------------------------

def _geometry_desc(g: ConvGeometry) -> dict:
    return {
        "kernel": [g.kernel_h, g.kernel_w],
        "stride": [g.stride_h, g.stride_w],
        "pad": [g.pad_h, g.pad_w],
        "in": g.in_channels,
        "out": g.out_channels,
        "depthwise": g.depthwise,
    }


def _geometry(d: dict) -> ConvGeometry:
    return ConvGeometry(*d["kernel"], *d["stride"], *d["pad"], d["in"], d["out"], d["depthwise"])


def _strassen_desc(m: StrassenLayer) -> dict:
    return {
        "type": "strassen",
        "kind": m.kind,
        "geometry": _geometry_desc(m.geometry),
        "r": m.r,
        "relu": m.relu,
        "bias": m.bias is not None,
        "bn_eps": None if m.bn is None else m.bn.eps,
        "inference": m.a_hat is not None,
        "shadow_quantized": None if m.shadow is None else m.shadow.quantized,
        "meta": m.meta,
    }


def _layer_desc(layer) -> dict:
    if isinstance(layer, StrassenLayer):
        return _strassen_desc(layer)
    if isinstance(layer, Conv2D):
        return {
            "type": "conv",
            "geometry": _geometry_desc(layer.geometry),
            "relu": layer.relu,
            "bias": layer.bias is not None,
            "bn_eps": None if layer.bn is None else layer.bn.eps,
        }
    if isinstance(layer, AvgPool):
        return {"type": "avg_pool", "kernel": [layer.kernel_h, layer.kernel_w]}
    return {"type": "flatten"}


def _matrix_desc(m) -> dict:
    return _strassen_desc(m) if isinstance(m, StrassenLayer) else {"type": "dense"}


def describe(model: HybridModel) -> dict:
    head = model.head
    if isinstance(head, BonsaiTree):
        head_desc = {
            "type": "bonsai",
            "depth": head.depth,
            "sigma": head.sigma,
            "sigma_I": head.sigma_I,
            "Z": _matrix_desc(head.Z),
            "W": [_matrix_desc(w) for w in head.W],
            "V": [_matrix_desc(v) for v in head.V],
        }
    else:
        head_desc = {"type": "dense", "bias": head.bias is not None}
    return {
        "name": model.name,
        "version": model.version,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "tree_mode": model.tree_mode,
        "meta": model.meta,
        "layers": [_layer_desc(layer) for layer in model.layers],
        "head": head_desc,
    }


# --- writing ----------------------------------------------------------------

def _tensor_blob(name: str, value, qspec: dict[str, QFormat]) -> bytes:
    if isinstance(value, TernaryMatrix):
        return encode_blob(value.values, KIND_TERNARY)
    fmt = qspec.get(name)
    if fmt is not None:
        return encode_blob(fx_quantize(value, fmt).values, fmt.total_bits)
    return encode_blob(np.asarray(value, dtype=np.float32), KIND_FLOAT32)


def _name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def to_bytes(model: HybridModel) -> bytes:
    qspec = model.qspec or {}
    arch = json.dumps(describe(model), sort_keys=True).encode("utf-8")
    items = list(tensors(model))
    tens = bytearray(struct.pack("<I", len(items)))
    for name, value, _ in items:
        tens += _name(name) + _tensor_blob(name, value, qspec)
    qs = bytearray(struct.pack("<I", len(qspec)))
    for name, fmt in sorted(qspec.items()):
        qs += _name(name) + struct.pack("<BB", fmt.total_bits, fmt.frac_bits)
    sections = [(b"ARCH", arch), (b"TENSORS", bytes(tens)), (b"QSPEC", bytes(qs))]
    offset = _HEADER.size + _ENTRY.size * len(sections)
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(sections)))
    for tag, payload in sections:
        out += _ENTRY.pack(tag, offset, len(payload))
        offset += len(payload)
    for _, payload in sections:
        out += payload
    return bytes(out)


def save(model: HybridModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


# --- reading ----------------------------------------------------------------

def _read_name(buf: bytes, pos: int, end: int) -> tuple[str, int]:
    if pos + 2 > end:
        raise FormatError("truncated name length", pos)
    (n,) = struct.unpack_from("<H", buf, pos)
    if pos + 2 + n > end:
        raise FormatError("truncated name", pos + 2)
    try:
        return buf[pos + 2 : pos + 2 + n].decode("utf-8"), pos + 2 + n
    except UnicodeDecodeError:
        raise FormatError("name is not valid UTF-8", pos + 2) from None


def _sections(buf: bytes) -> dict[str, tuple[int, int]]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    table_end = _HEADER.size + _ENTRY.size * count
    if len(buf) < table_end:
        raise FormatError("truncated section table", len(buf))
    out = {}
    for i in range(count):
        at = _HEADER.size + _ENTRY.size * i
        tag, off, length = _ENTRY.unpack_from(buf, at)
        if off < table_end or off + length > len(buf):
            raise FormatError("section extends outside the file", at + 8)
        out[tag.rstrip(b"\0").decode("ascii", "replace")] = (off, length)
    for tag in ("ARCH", "TENSORS", "QSPEC"):
        if tag not in out:
            raise FormatError(f"missing {tag} section", _HEADER.size)
    return out


def _read_tensors(buf: bytes, off: int, length: int) -> dict[str, tuple[np.ndarray, int, int]]:
    end = off + length
    if length < 4:
        raise FormatError("truncated tensor count", off)
    (count,) = struct.unpack_from("<I", buf, off)
    pos = off + 4
    out = {}
    view = buf[:end]
    for _ in range(count):
        start = pos
        name, pos = _read_name(buf, pos, end)
        array, kind, pos = decode_blob(view, pos)
        out[name] = (array, kind, start)
    if pos != end:
        raise FormatError("trailing bytes in tensor section", pos)
    return out


def _read_qspec(buf: bytes, off: int, length: int) -> dict[str, QFormat]:
    end = off + length
    if length < 4:
        raise FormatError("truncated qspec count", off)
    (count,) = struct.unpack_from("<I", buf, off)
    pos = off + 4
    out = {}
    for _ in range(count):
        name, pos = _read_name(buf, pos, end)
        if pos + 2 > end:
            raise FormatError("truncated qspec entry", pos)
        bits, frac = struct.unpack_from("<BB", buf, pos)
        try:
            out[name] = QFormat(bits, frac)
        except ValueError as exc:
            raise FormatError(str(exc), pos) from None
        pos += 2
    return out


class _Tensors:
    def __init__(self, raw, qspec: dict[str, QFormat], arch_offset: int):
        self.raw = raw
        self.qspec = qspec
        self.arch_offset = arch_offset

    def _get(self, name: str):
        if name not in self.raw:
            raise FormatError(f"missing tensor {name!r}", self.arch_offset)
        return self.raw[name]

    def has(self, name: str) -> bool:
        return name in self.raw

    def float(self, name: str) -> np.ndarray:
        array, kind, at = self._get(name)
        if kind == KIND_TERNARY:
            raise FormatError(f"tensor {name!r} should not be ternary", at)
        if kind == KIND_FLOAT32:
            return array.astype(np.float64)
        fmt = self.qspec.get(name)
        if fmt is None or fmt.total_bits != kind:
            raise FormatError(f"fixed-point tensor {name!r} has no matching format", at)
        return array.astype(np.float64) * fmt.step

    def ternary(self, name: str) -> TernaryMatrix:
        array, kind, at = self._get(name)
        if kind != KIND_TERNARY:
            raise FormatError(f"tensor {name!r} should be ternary", at)
        return TernaryMatrix(array)

    def bn(self, prefix: str, eps) -> BatchNorm | None:
        if eps is None:
            return None
        return BatchNorm(*(self.float(f"{prefix}.bn.{k}") for k in ("gamma", "beta", "mean", "var")), eps)


def _build_strassen(d: dict, prefix: str, t: _Tensors) -> StrassenLayer:
    kw = {}
    if d["inference"]:
        kw = dict(W_b=t.ternary(f"{prefix}.W_b"), W_c=t.ternary(f"{prefix}.W_c"), a_hat=t.float(f"{prefix}.a_hat"))
    shadow = None
    if d["shadow_quantized"] is not None:
        parts = [t.float(f"{prefix}.shadow.{k}") for k in ("W_a", "W_b", "W_c", "vec_a")]
        shadow = SpnShadow(*parts, quantized=d["shadow_quantized"])
    return StrassenLayer(
        kind=d["kind"],
        geometry=_geometry(d["geometry"]),
        r=d["r"],
        bias=t.float(f"{prefix}.bias") if d["bias"] else None,
        bn=t.bn(prefix, d["bn_eps"]),
        shadow=shadow,
        relu=d["relu"],
        meta=d.get("meta", {}),
        **kw,
    )


def _build_layer(d: dict, i: int, t: _Tensors):
    prefix = f"layers.{i}"
    kind = d["type"]
    if kind == "strassen":
        return _build_strassen(d, prefix, t)
    if kind == "conv":
        return Conv2D(
            _geometry(d["geometry"]),
            t.float(f"{prefix}.weight"),
            t.float(f"{prefix}.bias") if d["bias"] else None,
            t.bn(prefix, d["bn_eps"]),
            d["relu"],
        )
    if kind == "avg_pool":
        return AvgPool(*d["kernel"])
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer type {kind!r}")


def _build_matrix(d: dict, name: str, t: _Tensors):
    return _build_strassen(d, name, t) if d["type"] == "strassen" else t.float(name)


def from_bytes(buf: bytes) -> HybridModel:
    buf = bytes(buf)
    sec = _sections(buf)
    a_off, a_len = sec["ARCH"]
    try:
        arch = json.loads(buf[a_off : a_off + a_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"architecture descriptor is not valid JSON ({exc})", a_off) from None
    qspec = _read_qspec(buf, *sec["QSPEC"])
    t = _Tensors(_read_tensors(buf, *sec["TENSORS"]), qspec, a_off)
    try:
        layers = [_build_layer(d, i, t) for i, d in enumerate(arch["layers"])]
        h = arch["head"]
        if h["type"] == "bonsai":
            n = 2 ** (h["depth"] + 1) - 1
            n_int = 2 ** h["depth"] - 1
            Z = _build_matrix(h["Z"], "head.Z", t)
            proj = Z.out_features if isinstance(Z, StrassenLayer) else Z.shape[0]
            head = BonsaiTree(
                depth=h["depth"],
                Z=Z,
                W=[_build_matrix(h["W"][k], f"head.W.{k}", t) for k in range(n)],
                V=[_build_matrix(h["V"][k], f"head.V.{k}", t) for k in range(n)],
                theta=t.float("head.theta") if n_int else np.zeros((0, proj)),
                sigma=h["sigma"],
                sigma_I=h["sigma_I"],
            )
        else:
            head = DenseHead(t.float("head.weight"), t.float("head.bias") if h["bias"] else None)
        return HybridModel(
            layers=layers,
            head=head,
            input_shape=tuple(arch["input_shape"]),
            num_classes=arch["num_classes"],
            name=arch["name"],
            version=arch["version"],
            tree_mode=arch["tree_mode"],
            qspec=qspec or None,
            meta=arch.get("meta", {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"inconsistent architecture descriptor: {exc}", a_off) from None


def load(path) -> HybridModel:
    return from_bytes(Path(path).read_bytes())
