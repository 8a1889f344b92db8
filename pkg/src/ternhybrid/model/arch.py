"""Architecture / config text files and the model builder.

Grammar (one stanza per ``[section]``; stanzas may repeat and keep their
order)::

    file     := (blank | comment | stanza)*
    comment  := '#' text
    stanza   := '[' name ']' NEWLINE (key '=' value NEWLINE)*
    value    := int | float | bool | INTxINT[xINT] | word

Layer stanzas: ``conv``, ``ds_conv`` (depthwise 3x3 + pointwise 1x1),
``avg_pool``, ``flatten``. Head stanzas: ``bonsai`` or ``dense``. ``model``
holds global settings and ``train`` the training options.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..bonsai import BonsaiTree
from ..errors import ConfigError
from ..spn import SpnShadow, StrassenLayer, hidden_width
from ..tensor import BatchNorm, ConvGeometry
from .graph import AvgPool, Conv2D, DenseHead, Flatten, HybridModel

LAYER_SECTIONS = ("conv", "ds_conv", "avg_pool", "flatten")
HEAD_SECTIONS = ("bonsai", "dense")
KNOWN_SECTIONS = LAYER_SECTIONS + HEAD_SECTIONS + ("model", "train", "quant")

_TUPLE = re.compile(r"^\d+(x\d+)+$")


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if _TUPLE.match(low):
        return tuple(int(v) for v in low.split("x"))
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config(text: str, source: str = "<config>") -> list[tuple[str, dict]]:
    """Ordered ``(section, {key: value})`` stanzas."""
    stanzas: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header")
            name = line[1:-1].strip().lower()
            if name not in KNOWN_SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{name}]")
            stanzas.append((name, {}))
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if not stanzas:
            raise ConfigError(f"{source}:{lineno}: key outside any section")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        body = stanzas[-1][1]
        if key in body:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        body[key] = parse_value(value)
    return stanzas


def resolve_path(path) -> Path:
    """A path on disk, or the name of a bundled config (e.g. ``hybrid.cfg``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("ternhybrid") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config file not found: {path}")


def read_config(path) -> list[tuple[str, dict]]:
    p = resolve_path(path)
    return parse_config(p.read_text(), str(path))


def section(stanzas, name: str) -> dict:
    found = [body for sec, body in stanzas if sec == name]
    if len(found) > 1:
        raise ConfigError(f"section [{name}] may appear only once")
    return dict(found[0]) if found else {}


# --- architecture spec ------------------------------------------------------

def _pair(v, key: str) -> tuple[int, int]:
    if isinstance(v, bool):
        raise ConfigError(f"{key} must be an int or AxB")
    if isinstance(v, int):
        return (v, v)
    if isinstance(v, tuple) and len(v) == 2:
        return v
    raise ConfigError(f"{key} must be an int or AxB, got {v!r}")


@dataclass
class LayerSpec:
    kind: str
    opts: dict


@dataclass
class ArchSpec:
    name: str = "model"
    input_shape: tuple[int, int, int] = (1, 49, 10)
    num_classes: int = 12
    strassen: bool = False
    r_ratio: float = 0.75
    tree_mode: str = "soft"
    layers: list[LayerSpec] = field(default_factory=list)
    head_kind: str = "bonsai"
    head: dict = field(default_factory=dict)

    @classmethod
    def from_stanzas(cls, stanzas) -> ArchSpec:
        model = section(stanzas, "model")
        allowed = {"name", "input", "classes", "strassen", "r_ratio", "tree_mode"}
        if set(model) - allowed:
            raise ConfigError(f"unknown [model] keys: {sorted(set(model) - allowed)}")
        spec = cls(
            name=str(model.get("name", "model")),
            input_shape=tuple(model.get("input", (1, 49, 10))),
            num_classes=int(model.get("classes", 12)),
            strassen=bool(model.get("strassen", False)),
            r_ratio=float(model.get("r_ratio", 0.75)),
            tree_mode=str(model.get("tree_mode", "soft")),
        )
        if len(spec.input_shape) != 3:
            raise ConfigError("input must be CxHxW")
        heads = [(s, b) for s, b in stanzas if s in HEAD_SECTIONS]
        if len(heads) != 1:
            raise ConfigError("exactly one [bonsai] or [dense] head is required")
        spec.head_kind, spec.head = heads[0][0], dict(heads[0][1])
        spec.layers = [LayerSpec(s, dict(b)) for s, b in stanzas if s in LAYER_SECTIONS]
        return spec

    @classmethod
    def from_file(cls, path) -> ArchSpec:
        return cls.from_stanzas(read_config(path))

    @classmethod
    def from_text(cls, text: str) -> ArchSpec:
        return cls.from_stanzas(parse_config(text))


# --- builder ----------------------------------------------------------------

def _he(rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def init_shadow(kind: str, g: ConvGeometry, r: int, rng: np.random.Generator) -> SpnShadow:
    """Full-precision SPN factors with uniform [-1, 1] ternary shadows.

    ``vec_a`` is scaled so the composed map has He-like gain (output variance
    about twice the input variance).
    """
    mk = g.out_per_group * g.patch_len
    rg = r // g.groups
    std_a = math.sqrt(54.0 / (rg * g.patch_len * mk))
    return SpnShadow(
        W_a=rng.uniform(-1, 1, (r, mk)),
        W_b=rng.uniform(-1, 1, (r, g.patch_len)),
        W_c=rng.uniform(-1, 1, (g.out_channels, rg)),
        vec_a=rng.normal(0.0, std_a, (g.groups, mk)),
    )


def _make_conv(g: ConvGeometry, opts: dict, rng, strassen: bool, r_ratio: float, r_key: str = "r"):
    kind = "conv_depthwise" if g.depthwise else ("conv_pointwise" if g.is_pointwise else "conv_standard")
    bn = bool(opts.get("bn", True))
    relu = bool(opts.get("relu", True))
    if strassen:
        r = int(opts[r_key]) if r_key in opts else hidden_width(kind, g.out_channels, r_ratio, g.groups)
        return StrassenLayer(
            kind=kind,
            geometry=g,
            r=r,
            bias=np.zeros(g.out_channels),
            bn=BatchNorm.identity(r) if bn else None,
            shadow=init_shadow(kind, g, r, rng),
            relu=relu,
        )
    return Conv2D(
        g,
        _he(rng, g.filter_shape(), g.patch_len),
        np.zeros(g.out_channels),
        BatchNorm.identity(g.out_channels) if bn else None,
        relu,
    )


def _tree_matrix(rows: int, cols: int, r: int, rng, strassen: bool):
    """Dense ``[rows, cols]`` matrix, or a matmul-kind layer mapping ``cols -> rows``."""
    if not strassen:
        return _he(rng, (rows, cols), cols)
    g = ConvGeometry.pointwise(cols, rows)
    return StrassenLayer(kind="matmul", geometry=g, r=r, shadow=init_shadow("matmul", g, r, rng))


def _node_matrix(d_hat: int, L: int, r: int, rng, strassen: bool):
    m = _tree_matrix(L, d_hat, r, rng, strassen)
    return m if strassen else m.T


def build_model(spec: ArchSpec, seed: int = 0, strassen: bool | None = None) -> HybridModel:
    """Freshly initialized model (training form when strassenified)."""
    rng = np.random.default_rng(seed)
    st_default = spec.strassen if strassen is None else strassen
    layers = []
    c, h, w = spec.input_shape
    shape = (c, h, w)
    for ls in spec.layers:
        o = ls.opts
        st = bool(o.get("strassen", st_default)) if strassen is None else strassen
        ratio = float(o.get("r_ratio", spec.r_ratio))
        if ls.kind in ("conv", "ds_conv"):
            if len(shape) != 3:
                raise ConfigError("convolution after flatten")
            default_k = (3, 3) if ls.kind == "ds_conv" else (1, 1)
            kh, kw = _pair(o.get("kernel", default_k), "kernel")
            sh, sw = _pair(o.get("stride", 1), "stride")
            ph, pw = _pair(o.get("pad", (kh // 2, kw // 2) if ls.kind == "ds_conv" else 0), "pad")
            out = int(o.get("out", shape[0]))
            if ls.kind == "conv":
                g = ConvGeometry(kh, kw, sh, sw, ph, pw, shape[0], out)
                layers.append(_make_conv(g, o, rng, st, ratio))
            else:
                mult = int(o.get("multiplier", 1))
                gd = ConvGeometry(kh, kw, sh, sw, ph, pw, shape[0], shape[0] * mult, depthwise=True)
                layers.append(_make_conv(gd, o, rng, st, ratio, "r_dw"))
                gp = ConvGeometry.pointwise(shape[0] * mult, out)
                layers.append(_make_conv(gp, o, rng, st, ratio, "r_pw"))
                oh, ow = gd.output_hw(shape[1], shape[2])
                shape = (out, oh, ow)
                continue
            shape = (out, *g.output_hw(shape[1], shape[2]))
        elif ls.kind == "avg_pool":
            k = o.get("kernel", "global")
            pool = AvgPool() if k == "global" else AvgPool(*_pair(k, "kernel"))
            layers.append(pool)
            kh_, kw_ = pool.window(shape[1], shape[2])
            shape = (shape[0], shape[1] // kh_, shape[2] // kw_)
        else:
            layers.append(Flatten())
            shape = (int(np.prod(shape)),)
    d = int(np.prod(shape))
    L = spec.num_classes
    hd = spec.head
    if spec.head_kind == "dense":
        head = DenseHead(_he(rng, (L, d), d), np.zeros(L) if hd.get("bias", True) else None)
    else:
        depth = int(hd.get("depth", 2))
        d_hat = int(hd.get("proj", 16))
        st = bool(hd.get("strassen", st_default)) if strassen is None else strassen
        z_st = bool(hd.get("z_strassen", st))
        n = 2 ** (depth + 1) - 1
        node_r = int(hd.get("node_r", L))
        head = BonsaiTree(
            depth=depth,
            Z=_tree_matrix(d_hat, d, int(hd.get("z_r", d_hat)), rng, z_st),
            W=[_node_matrix(d_hat, L, node_r, rng, st) for _ in range(n)],
            V=[_node_matrix(d_hat, L, node_r, rng, st) for _ in range(n)],
            theta=rng.uniform(-0.1, 0.1, (2**depth - 1, d_hat)),
            sigma=float(hd.get("sigma", 1.0)),
            sigma_I=float(hd.get("sigma_I", 1.0)),
        )
    return HybridModel(
        layers=layers,
        head=head,
        input_shape=spec.input_shape,
        num_classes=L,
        name=spec.name,
        tree_mode=spec.tree_mode,
        meta={"strassen": st_default},
    )
