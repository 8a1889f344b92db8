"""Hybrid conv + tree model: layer types, shape chaining and forward inference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import opcount
from ..bonsai import BonsaiTree, tree_predict
from ..errors import ShapeError, StateError
from ..spn import StrassenLayer, spn_columns
from ..ternary import TernaryMatrix
from ..tensor import BatchNorm, ConvGeometry, QFormat, QuantSim, add_frac, as_f32, conv2d_ref, im2col, matmul_ref


@dataclass(eq=False)
class Conv2D:
    """Dense convolution with optional batch norm and ReLU."""

    geometry: ConvGeometry
    weight: np.ndarray
    bias: np.ndarray | None = None
    bn: BatchNorm | None = None
    relu: bool = True

    def __post_init__(self):
        self.weight = as_f32(self.weight)
        if self.weight.shape != self.geometry.filter_shape():
            raise ShapeError(f"weight {self.weight.shape} != {self.geometry.filter_shape()}")
        if self.bias is not None:
            self.bias = as_f32(self.bias).reshape(-1)
            if len(self.bias) != self.geometry.out_channels:
                raise ShapeError("bias length must equal out_channels")
        if self.bn is not None and self.bn.channels != self.geometry.out_channels:
            raise ShapeError("batch norm channels must equal out_channels")

    @property
    def kind(self) -> str:
        g = self.geometry
        if g.depthwise:
            return "conv_depthwise"
        return "conv_pointwise" if g.is_pointwise else "conv_standard"


@dataclass(eq=False)
class AvgPool:
    """Average pooling with stride = window; ``None`` extents mean global."""

    kernel_h: int | None = None
    kernel_w: int | None = None

    kind = "avg_pool"

    def window(self, h: int, w: int) -> tuple[int, int]:
        kh = h if self.kernel_h is None else self.kernel_h
        kw = w if self.kernel_w is None else self.kernel_w
        if kh > h or kw > w or kh < 1 or kw < 1:
            raise ShapeError(f"pool window {kh}x{kw} does not fit {h}x{w}")
        return kh, kw


@dataclass(eq=False)
class Flatten:
    kind = "flatten"


@dataclass(eq=False)
class DenseHead:
    """Fully connected classifier ``[L, D]`` used by baseline models."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = as_f32(self.weight)
        if self.bias is not None:
            self.bias = as_f32(self.bias).reshape(-1)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def layer_kind(layer) -> str:
    if isinstance(layer, StrassenLayer):
        return "strassen_" + layer.kind
    return layer.kind


@dataclass(eq=False)
class HybridModel:
    layers: list
    head: BonsaiTree | DenseHead
    input_shape: tuple[int, int, int]
    num_classes: int
    name: str = "model"
    version: int = 1
    tree_mode: str = "soft"
    qspec: dict[str, QFormat] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of each layer (single sample); validates the chain into the head."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
            out.append(shape)
        d = int(np.prod(shape))
        head_in = self.head.in_dim
        if d != head_in:
            raise ShapeError(f"head expects {head_in} features, layers produce {shape}")
        if self.head.num_classes != self.num_classes:
            raise ShapeError("head class count disagrees with num_classes")
        return out

    @property
    def is_strassen(self) -> bool:
        return any(isinstance(m, StrassenLayer) for m in self.strassen_layers())

    def strassen_layers(self):
        """Every StrassenLayer in the model (conv layers, then tree matrices)."""
        for layer in self.layers:
            if isinstance(layer, StrassenLayer):
                yield layer
        if isinstance(self.head, BonsaiTree):
            for _, m in self.head.matrices():
                if isinstance(m, StrassenLayer):
                    yield m

    def activations(self) -> list[tuple[str, tuple[int, ...]]]:
        """Named activation tensors in execution order (single sample).

        ``layers.i.p`` (the scaled product of a strassen layer) overwrites
        ``layers.i.h`` in place and so is listed but never a separate buffer.
        """
        acts = [("input", self.input_shape)]
        shape = self.input_shape
        for i, (layer, out_shape) in enumerate(zip(self.layers, self.shapes())):
            name = f"layers.{i}"
            if isinstance(layer, StrassenLayer):
                positions = out_shape[1] * out_shape[2]
                acts.append((f"{name}.h", (layer.r, positions)))
                acts.append((f"{name}.p", (layer.r, positions)))
            if not isinstance(layer, Flatten):
                acts.append((f"{name}.out", out_shape))
            shape = out_shape
        if isinstance(self.head, BonsaiTree):
            acts.append(("head.proj", (self.head.proj_dim,)))
        acts.append(("head.out", (self.num_classes,)))
        return acts


def _layer_output_shape(layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if len(shape) != 3:
        raise ShapeError(f"layer {index} ({layer_kind(layer)}) needs a [C,H,W] input, got {shape}")
    c, h, w = shape
    if isinstance(layer, AvgPool):
        kh, kw = layer.window(h, w)
        return (c, h // kh, w // kw)
    g = layer.geometry
    if isinstance(layer, StrassenLayer) and layer.kind == "matmul":
        raise ShapeError("matmul-kind strassen layers belong in the tree head")
    if c != g.in_channels:
        raise ShapeError(f"layer {index} expects {g.in_channels} channels, gets {c}")
    return (g.out_channels, *g.output_hw(h, w))


def _run_layer(layer, x: np.ndarray, q: QuantSim, name: str, in_frac: int | None):
    """Returns (output, output_frac)."""
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), in_frac
    if isinstance(layer, AvgPool):
        n, c, h, w = x.shape
        kh, kw = layer.window(h, w)
        oh, ow = h // kh, w // kw
        y = x[:, :, : oh * kh, : ow * kw].reshape(n, c, oh, kh, ow, kw).mean(axis=(3, 5))
        y = q.act(f"{name}.out", y)
        return y, q.frac(f"{name}.out")
    g = layer.geometry
    oh, ow = g.output_hw(x.shape[2], x.shape[3])
    if isinstance(layer, StrassenLayer):
        _, y, _ = spn_columns(layer, im2col(x, g), q, name, in_frac, hidden_acts=True)
        y = y.reshape(x.shape[0], g.out_channels, oh, ow)
    else:
        y = conv2d_ref(x, q.weight(f"{name}.weight", layer.weight), g)
        acc_frac = add_frac(in_frac, q.frac(f"{name}.weight"))
        if layer.bias is not None:
            y = y + q.align(f"{name}.bias", layer.bias, acc_frac)[None, :, None, None]
        y = q.acc(y, acc_frac)
        if layer.bn is not None:
            if q.active:
                raise StateError("fold batch norm before running quantized")
            y = layer.bn.apply(y)
    if layer.relu:
        y = np.maximum(y, 0.0)
    y = q.act(f"{name}.out", y)
    return y, q.frac(f"{name}.out")


def run_prefix(model: HybridModel, x, q: QuantSim, stop: int) -> tuple[np.ndarray, int | None]:
    """Quantize the batched input and run ``layers[:stop]``; returns (activation, frac)."""
    xb = np.asarray(x, dtype=np.float64)
    if xb.ndim != 4 or tuple(xb.shape[1:]) != model.input_shape:
        raise ShapeError(f"model expects input {model.input_shape}, got {xb.shape}")
    cur = q.act("input", xb)
    frac = q.frac("input")
    for i, layer in enumerate(model.layers[:stop]):
        with opcount.scope(f"layers.{i}:{layer_kind(layer)}"):
            cur, frac = _run_layer(layer, cur, q, f"layers.{i}", frac)
    return cur, frac


def run_suffix(model: HybridModel, cur: np.ndarray, frac: int | None, q: QuantSim, start: int) -> np.ndarray:
    """Run ``layers[start:]`` and the head on a batched activation."""
    for i in range(start, len(model.layers)):
        layer = model.layers[i]
        with opcount.scope(f"layers.{i}:{layer_kind(layer)}"):
            cur, frac = _run_layer(layer, cur, q, f"layers.{i}", frac)
    cur = cur.reshape(cur.shape[0], -1)
    with opcount.scope("head"):
        head = model.head
        hq = q.child("head.")
        if isinstance(head, BonsaiTree):
            return tree_predict(head, cur, model.tree_mode, hq, frac)
        acc_frac = add_frac(frac, hq.frac("weight"))
        out = matmul_ref(cur, hq.weight("weight", head.weight).T)
        if head.bias is not None:
            out = out + hq.align("bias", head.bias, acc_frac)[None, :]
        return hq.act("out", hq.acc(out, acc_frac))


def run(model: HybridModel, x, q: QuantSim | None = None) -> np.ndarray:
    """Forward pass under explicit quantization hooks (used by calibration)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if q is None:
        q = QuantSim(model.qspec)
    cur, frac = run_prefix(model, x[None] if single else x, q, 0)
    out = run_suffix(model, cur, frac, q, 0)
    return out[0] if single else out


def densified(model: HybridModel) -> HybridModel:
    """Dense counterpart: each strassen layer becomes the float conv it computes.

    Batch norm inside strassen layers is absorbed into the dense filters, so
    the result may carry fewer norms than the source.
    """
    layers = []
    for layer in model.layers:
        if isinstance(layer, StrassenLayer):
            w, b = layer.equivalent_dense()
            layers.append(Conv2D(layer.geometry, w, b, None, layer.relu))
        else:
            layers.append(layer)
    head = model.head.densified() if isinstance(model.head, BonsaiTree) else model.head
    return replace(model, layers=layers, head=head, qspec=None, meta={**model.meta, "strassen": False})


def collapsed(model: HybridModel) -> HybridModel:
    """Inference form: every training-form strassen layer replaced by its collapse."""

    def fix(m):
        return m.collapsed() if isinstance(m, StrassenLayer) and m.a_hat is None else m

    layers = [fix(layer) for layer in model.layers]
    head = model.head
    if isinstance(head, BonsaiTree):
        head = replace(head, Z=fix(head.Z), W=[fix(w) for w in head.W], V=[fix(v) for v in head.V])
    return replace(model, layers=layers, head=head)


def forward(model: HybridModel, x) -> np.ndarray:
    """Class scores ``[L]`` for one ``[C,H,W]`` input or ``[N, L]`` for a batch.

    Quantized models (``qspec`` set) execute with fixed-point rounding and
    32-bit saturating accumulators.
    """
    return run(model, x)


def forward_counted(model: HybridModel, x, mode: str = "inference_nnz"):
    """Forward pass with instrumentation; returns ``(scores, OpReport)``."""
    from .analysis import report_from_counter

    with opcount.counting(mode) as counter:
        scores = run(model, x)
    return scores, report_from_counter(model, counter)


def predict(model: HybridModel, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def accuracy(model: HybridModel, x, y) -> float:
    return float(np.mean(np.argmax(predict(model, x), axis=1) == np.asarray(y)))


def _strassen_tensors(prefix: str, m: StrassenLayer, planned: bool = False):
    if m.a_hat is not None:
        yield f"{prefix}.W_b", m.W_b, "ternary"
        yield f"{prefix}.W_c", m.W_c, "ternary"
        yield f"{prefix}.a_hat", m.a_hat, "a_hat"
    elif planned:
        g = m.geometry
        yield f"{prefix}.W_b", TernaryMatrix(np.zeros((m.r, g.patch_len), np.int8)), "ternary"
        yield f"{prefix}.W_c", TernaryMatrix(np.zeros((g.out_channels, m.r_per_group), np.int8)), "ternary"
        yield f"{prefix}.a_hat", np.zeros(m.r), "a_hat"
    if m.bias is not None:
        yield f"{prefix}.bias", m.bias, "bias"
    if m.bn is not None:
        yield from _bn_tensors(prefix, m.bn)
    if m.shadow is not None and not planned:
        s = m.shadow
        for key in ("W_a", "W_b", "W_c", "vec_a"):
            yield f"{prefix}.shadow.{key}", np.asarray(getattr(s, key), np.float64), "shadow"


def _bn_tensors(prefix: str, bn: BatchNorm):
    for key in ("gamma", "beta", "mean", "var"):
        yield f"{prefix}.bn.{key}", np.asarray(getattr(bn, key), np.float64), "bn"


def _matrix_tensors(prefix: str, m, planned: bool):
    if isinstance(m, StrassenLayer):
        yield from _strassen_tensors(prefix, m, planned)
    else:
        yield prefix, m, "weight"


def tensors(model: HybridModel, planned: bool = False):
    """Every stored parameter as ``(name, value, category)``.

    ``value`` is an ndarray or a TernaryMatrix. Categories: ``ternary``,
    ``a_hat``, ``bias``, ``weight``, ``bn`` and ``shadow`` (training-only).
    With ``planned`` the training shadows are replaced by zero placeholders
    shaped like the inference tensors they will collapse into.
    """
    for i, layer in enumerate(model.layers):
        prefix = f"layers.{i}"
        if isinstance(layer, StrassenLayer):
            yield from _strassen_tensors(prefix, layer, planned)
        elif isinstance(layer, Conv2D):
            yield f"{prefix}.weight", layer.weight, "weight"
            if layer.bias is not None:
                yield f"{prefix}.bias", layer.bias, "bias"
            if layer.bn is not None:
                yield from _bn_tensors(prefix, layer.bn)
    head = model.head
    if isinstance(head, BonsaiTree):
        for name, m in head.matrices():
            yield from _matrix_tensors(f"head.{name}", m, planned)
        if head.num_internal:
            yield "head.theta", head.theta, "weight"
    else:
        yield "head.weight", head.weight, "weight"
        if head.bias is not None:
            yield "head.bias", head.bias, "bias"
