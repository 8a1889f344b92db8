"""Strassenified (sum-product network) matrix multiplication and convolution.

A product ``C = A @ B`` is computed as

    vec(C) = W_c [(W_b vec(B)) * (W_a vec(A))]

with ternary ``W_a, W_b`` (``r`` rows) and ``W_c`` (``r`` columns). For a
layer, ``A`` holds the weights and ``B`` the activations, so at inference
``a_hat = W_a vec(A)`` is a fixed vector and only the ``r`` elementwise
products remain as multiplications.

Grouped (depthwise) layers run one SPN per channel group. Their matrices are
stored stacked: ``W_b`` is ``[r, patch_len]`` with row ``j`` belonging to group
``j // (r / groups)``, and ``W_c`` is ``[out_channels, r / groups]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import opcount
from .errors import ShapeError, StateError
from .ternary import TernaryMatrix, ternary_apply, twn_pattern
from .tensor import NULL_SIM, BatchNorm, ConvGeometry, QuantSim, add_frac, as_f32, im2col

LAYER_KINDS = ("matmul", "conv_standard", "conv_depthwise", "conv_pointwise")


def strassen_2x2() -> tuple[TernaryMatrix, TernaryMatrix, TernaryMatrix]:
    """Strassen's 7-product scheme for 2x2 matrices (row-major vec order)."""
    # vec(A) = [A11, A12, A21, A22]
    w_a = [
        [1, 0, 0, 1],    # M1: A11 + A22
        [0, 0, 1, 1],    # M2: A21 + A22
        [1, 0, 0, 0],    # M3: A11
        [0, 0, 0, 1],    # M4: A22
        [1, 1, 0, 0],    # M5: A11 + A12
        [-1, 0, 1, 0],   # M6: A21 - A11
        [0, 1, 0, -1],   # M7: A12 - A22
    ]
    w_b = [
        [1, 0, 0, 1],    # B11 + B22
        [1, 0, 0, 0],    # B11
        [0, 1, 0, -1],   # B12 - B22
        [-1, 0, 1, 0],   # B21 - B11
        [0, 0, 0, 1],    # B22
        [1, 1, 0, 0],    # B11 + B12
        [0, 0, 1, 1],    # B21 + B22
    ]
    w_c = [
        [1, 0, 0, 1, -1, 0, 1],   # C11 = M1 + M4 - M5 + M7
        [0, 0, 1, 0, 1, 0, 0],    # C12 = M3 + M5
        [0, 1, 0, 1, 0, 0, 0],    # C21 = M2 + M4
        [1, -1, 1, 0, 0, 1, 0],   # C22 = M1 - M2 + M3 + M6
    ]
    return TernaryMatrix(np.array(w_a)), TernaryMatrix(np.array(w_b)), TernaryMatrix(np.array(w_c))


def spn_matmul(w_a: TernaryMatrix, w_b: TernaryMatrix, w_c: TernaryMatrix, a, b) -> np.ndarray:
    """SPN product of ``a [n x p]`` and ``b [p x m]``.

    Both operands are treated as dynamic: records ``r`` multiplications and
    ``nnz(W_a) + nnz(W_b) + nnz(W_c)`` additions. Scales, when present, are
    applied but not counted.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    r = w_a.rows
    if w_b.rows != r or w_c.cols != r:
        raise ShapeError("W_a, W_b rows and W_c columns must all equal r")
    if w_a.cols != a.size or w_b.cols != b.size:
        raise ShapeError(f"W_a/W_b columns ({w_a.cols}, {w_b.cols}) != operand sizes ({a.size}, {b.size})")
    n, m = a.shape[0], b.shape[1]
    if w_c.rows != n * m:
        raise ShapeError(f"W_c has {w_c.rows} rows, product has {n * m} entries")
    left = ternary_apply(w_a, a.reshape(-1, 1))
    right = ternary_apply(w_b, b.reshape(-1, 1))
    opcount.record(muls=r)
    return ternary_apply(w_c, left * right).reshape(n, m)


def collapse(w_a: TernaryMatrix, vec_a, alpha_b: float = 1.0, alpha_c: float = 1.0) -> np.ndarray:
    """``a_hat = alpha_a * alpha_b * alpha_c * (W_a^t vec(A))``."""
    vec_a = np.asarray(vec_a, dtype=np.float64).reshape(-1)
    if w_a.cols != len(vec_a):
        raise ShapeError(f"W_a has {w_a.cols} columns, vec(A) has {len(vec_a)} entries")
    alpha_a = 1.0 if w_a.scale is None else w_a.scale
    return (alpha_a * alpha_b * alpha_c) * (w_a.values.astype(np.float64) @ vec_a)


@dataclass(eq=False)
class SpnShadow:
    """Full-precision training state of a strassenified layer.

    ``W_a`` is ``[r, out_per_group * patch_len]`` and ``vec_a`` is
    ``[groups, out_per_group * patch_len]``; hidden unit ``j`` reads the
    weights of group ``j // (r / groups)``.
    """

    W_a: np.ndarray
    W_b: np.ndarray
    W_c: np.ndarray
    vec_a: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        self.W_a, self.W_b, self.W_c, self.vec_a = (as_f32(m) for m in (self.W_a, self.W_b, self.W_c, self.vec_a))

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Effective (W_a, W_b, W_c), TWN-quantized when ``quantized`` is set."""
        mats = (self.W_a, self.W_b, self.W_c)
        if not self.quantized:
            return tuple(np.asarray(m, np.float64) for m in mats)
        out = []
        for m in mats:
            pattern, alpha = twn_pattern(m)
            out.append(alpha * pattern.astype(np.float64))
        return tuple(out)


@dataclass(eq=False)
class StrassenLayer:
    kind: str
    geometry: ConvGeometry
    r: int
    W_b: TernaryMatrix | None = None
    W_c: TernaryMatrix | None = None
    a_hat: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn: BatchNorm | None = None
    shadow: SpnShadow | None = None
    relu: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown strassen layer kind {self.kind!r}")
        g = self.geometry
        if (self.kind == "conv_depthwise") != g.depthwise:
            raise ShapeError("conv_depthwise kind requires a depthwise geometry and vice versa")
        if self.kind in ("matmul", "conv_pointwise") and not g.is_pointwise:
            raise ShapeError(f"{self.kind} layers need a 1x1 ungrouped geometry")
        if self.r < 1 or self.r % g.groups:
            raise ShapeError(f"r={self.r} must be a positive multiple of groups={g.groups}")
        if self.a_hat is not None:
            self.a_hat = as_f32(self.a_hat).reshape(-1)
            if self.W_b is None or self.W_c is None:
                raise StateError("inference form needs W_b, W_c and a_hat together")
            self._check_shapes(self.W_b.shape, self.W_c.shape, len(self.a_hat))
        if self.shadow is not None:
            s = self.shadow
            self._check_shapes(np.shape(s.W_b), np.shape(s.W_c), np.shape(s.W_a)[0])
            mk = g.out_per_group * g.patch_len
            if np.shape(s.W_a) != (self.r, mk) or np.shape(s.vec_a) != (g.groups, mk):
                raise ShapeError("shadow W_a / vec_a shapes do not match the layer")
        if self.bias is not None:
            self.bias = as_f32(self.bias).reshape(-1)
            if len(self.bias) != g.out_channels:
                raise ShapeError("bias length must equal out_channels")
        if self.bn is not None and self.bn.channels != self.r:
            raise ShapeError("strassen batch norm acts on the r hidden channels")

    def _check_shapes(self, wb_shape, wc_shape, r):
        g = self.geometry
        if tuple(wb_shape) != (self.r, g.patch_len) or r != self.r:
            raise ShapeError(f"W_b must be [{self.r}, {g.patch_len}], got {tuple(wb_shape)}")
        if tuple(wc_shape) != (g.out_channels, self.r_per_group):
            raise ShapeError(f"W_c must be [{g.out_channels}, {self.r_per_group}], got {tuple(wc_shape)}")

    @property
    def groups(self) -> int:
        return self.geometry.groups

    @property
    def r_per_group(self) -> int:
        return self.r // self.groups

    @property
    def in_features(self) -> int:
        return self.geometry.in_channels

    @property
    def out_features(self) -> int:
        return self.geometry.out_channels

    @property
    def is_inference_form(self) -> bool:
        return self.a_hat is not None

    def effective(self):
        """(W_b, W_c, a_hat) used by forward: ternary in inference form, float from the shadow otherwise."""
        if self.a_hat is not None:
            return self.W_b, self.W_c, self.a_hat
        if self.shadow is None:
            raise StateError("strassen layer has neither a_hat nor a training shadow")
        w_a, w_b, w_c = self.shadow.matrices()
        rep = np.repeat(np.asarray(self.shadow.vec_a, np.float64), self.r_per_group, axis=0)
        a_hat = np.einsum("jk,jk->j", w_a, rep)
        return w_b, w_c, a_hat

    def hidden_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-hidden-unit (scale, shift) applied after ``W_b``: a_hat and batch norm combined."""
        _, _, a_hat = self.effective()
        if self.bn is None:
            return a_hat, np.zeros(self.r)
        s, t = self.bn.scale_shift()
        return s * a_hat, t

    def equivalent_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-precision (filters, bias) computing the same map: ``W_c diag(s) W_b``."""
        g = self.geometry
        w_b, w_c, _ = self.effective()
        wb = _dense(w_b).reshape(g.groups, self.r_per_group, g.patch_len)
        wc = _dense(w_c).reshape(g.groups, g.out_per_group, self.r_per_group)
        s, t = self.hidden_affine()
        s = s.reshape(g.groups, self.r_per_group)
        t = t.reshape(g.groups, self.r_per_group)
        filters = np.einsum("gor,gr,grk->gok", wc, s, wb).reshape(g.filter_shape())
        bias = np.einsum("gor,gr->go", wc, t).reshape(-1)
        if self.bias is not None:
            bias = bias + self.bias
        return filters, bias

    def collapsed(self) -> StrassenLayer:
        """Inference form: ternary patterns frozen, all scales absorbed into ``a_hat``."""
        if self.shadow is None:
            raise StateError("no training shadow to collapse")
        s = self.shadow
        (pa, alpha_a), (pb, alpha_b), (pc, alpha_c) = (twn_pattern(m) for m in (s.W_a, s.W_b, s.W_c))
        w_a = TernaryMatrix(pa, alpha_a)
        rep = np.repeat(np.asarray(s.vec_a, np.float64), self.r_per_group, axis=0)
        a_hat = np.array([collapse(TernaryMatrix(pa[j]), rep[j]) for j in range(self.r)]).reshape(-1)
        a_hat = a_hat * (w_a.scale * alpha_b * alpha_c)
        bn = self.bn
        if bn is not None:
            # alpha_c now enters before the norm: bn'(alpha_c * p) == alpha_c * bn(p)
            bn = BatchNorm(bn.gamma, alpha_c * np.asarray(bn.beta), alpha_c * np.asarray(bn.mean), bn.var, bn.eps)
        return replace(self, W_b=TernaryMatrix(pb), W_c=TernaryMatrix(pc), a_hat=a_hat, bn=bn, shadow=None)


def _dense(w) -> np.ndarray:
    return w.dense() if isinstance(w, TernaryMatrix) else np.asarray(w, np.float64)


def spn_columns(
    layer: StrassenLayer,
    cols: np.ndarray,
    q: QuantSim = NULL_SIM,
    name: str = "",
    in_frac: int | None = None,
    hidden_acts: bool = False,
) -> tuple[np.ndarray, np.ndarray, int | None]:
    """Run the SPN on patch columns ``[N, groups*patch_len, P]``.

    Returns ``(hidden, out, out_frac)``: the post-``W_b`` intermediate
    ``[N, r, P]``, the layer output ``[N, out, P]`` (bias added, no activation)
    and the fraction bits of ``out`` under ``q`` (None when float).
    ``hidden_acts`` rounds the intermediate and the product onto the
    ``{name}.h`` / ``{name}.p`` activation formats.
    """
    w_b, w_c, _ = layer.effective()
    hidden = q.acc(ternary_apply(w_b, cols, groups=layer.groups), in_frac)
    h_frac = in_frac
    if hidden_acts:
        hidden = q.act(f"{name}.h", hidden)
        h_frac = q.frac(f"{name}.h")
    if q.active and layer.bn is not None:
        raise StateError("fold batch norm before running quantized")
    s, t = layer.hidden_affine()
    s = q.weight(f"{name}.a_hat", s)
    opcount.record(muls=layer.r * hidden.shape[0] * hidden.shape[-1])
    p_frac = add_frac(h_frac, q.frac(f"{name}.a_hat"))
    prod = q.acc(hidden * s[:, None] + t[:, None], p_frac)
    if hidden_acts:
        prod = q.act(f"{name}.p", prod)
        p_frac = q.frac(f"{name}.p")
    out = ternary_apply(w_c, prod, groups=layer.groups)
    if layer.bias is not None:
        out = out + q.align(f"{name}.bias", layer.bias, p_frac)[:, None]
    return hidden, q.acc(out, p_frac), p_frac


def spn_conv_forward(layer: StrassenLayer, x, *, allow_shadow: bool = False) -> np.ndarray:
    """Strassenified convolution of ``[N,C,H,W]`` (or ``[C,H,W]``) input.

    Per output position: ternary conv with ``W_b`` (r filters), scale by
    ``a_hat``, ternary 1x1 conv with ``W_c``, add bias. ``allow_shadow`` lets
    training-form layers run through their full-precision shadow.
    """
    if layer.a_hat is None and not allow_shadow:
        raise StateError("layer is not in inference form (missing a_hat)")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    g = layer.geometry
    cols = im2col(xb, g)
    oh, ow = g.output_hw(xb.shape[2], xb.shape[3])
    _, out, _ = spn_columns(layer, cols)
    out = out.reshape(xb.shape[0], g.out_channels, oh, ow)
    if layer.relu:
        out = np.maximum(out, 0.0)
    return out[0] if single else out


def spn_linear(
    layer: StrassenLayer, x, q: QuantSim = NULL_SIM, name: str = "", in_frac: int | None = None
) -> np.ndarray:
    """``[N, in] -> [N, out]`` for matmul-kind layers."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"expected [N, {layer.in_features}] input, got {x.shape}")
    _, out, _ = spn_columns(layer, x[:, :, None], q, name, in_frac)
    out = out[:, :, 0]
    return np.maximum(out, 0.0) if layer.relu else out


def hidden_width(kind: str, out_channels: int, r_ratio: float, groups: int = 1) -> int:
    """Hidden width for a layer: ``round(r_ratio * c_out)``, per group for grouped layers."""
    if groups == 1:
        return max(1, int(round(r_ratio * out_channels)))
    per_group = max(1, math.ceil(r_ratio * out_channels / groups - 1e-9))
    return per_group * groups


def random_strassen_layer(
    kind: str,
    geometry: ConvGeometry,
    r: int,
    rng: np.random.Generator,
    *,
    density: float = 0.6,
    bias: bool = True,
    bn: bool = False,
    relu: bool = False,
) -> StrassenLayer:
    """Inference-form layer with random ternary patterns (for tests and planning)."""
    g = geometry
    rg = r // g.groups

    def tern(shape):
        v = rng.choice([-1, 1], size=shape) * (rng.random(shape) < density)
        return TernaryMatrix(v.astype(np.int8))

    norm = None
    if bn:
        norm = BatchNorm(
            rng.uniform(0.5, 1.5, r), rng.normal(0, 0.1, r), rng.normal(0, 0.1, r), rng.uniform(0.5, 1.5, r)
        )
    return StrassenLayer(
        kind=kind,
        geometry=g,
        r=r,
        W_b=tern((r, g.patch_len)),
        W_c=tern((g.out_channels, rg)),
        a_hat=rng.normal(0, 1.0 / math.sqrt(g.patch_len), r),
        bias=rng.normal(0, 0.1, g.out_channels) if bias else None,
        bn=norm,
        relu=relu,
    )
