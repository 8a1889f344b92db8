"""Cost accounting: operation counts, model size and activation memory.

Counts are per single input. Dense layers contribute MACs; strassenified
layers contribute ``r`` multiplications per position and one addition per
(nonzero) ternary coefficient per position. Nonlinearities, pooling, batch
norm, bias additions and the tree's indicator weighting are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bonsai import BonsaiTree
from ..opcount import COUNT_MODES, OpCounter, OpCounts
from ..spn import StrassenLayer
from ..ternary import TernaryMatrix
from .graph import AvgPool, Conv2D, Flatten, HybridModel, layer_kind, tensors

KB = 1024


def kb(nbytes: float) -> float:
    return nbytes / KB


@dataclass
class SizeReport:
    ternary_bytes: int
    full_precision_bytes: int
    a_hat_bias_bytes: int
    per_tensor: dict[str, int] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.ternary_bytes + self.full_precision_bytes


@dataclass
class FootprintReport:
    model_bytes: int
    activation_bytes: int
    buffers: list[tuple[str, int]]
    peak_pair: tuple[int, int] | None

    @property
    def footprint_bytes(self) -> int:
        return self.model_bytes + self.activation_bytes


@dataclass
class OpReport:
    mode: str
    per_layer: dict[str, OpCounts]
    model_bytes: int = 0
    activation_bytes: int = 0

    def _sum(self, attr: str) -> int:
        return sum(getattr(c, attr) for c in self.per_layer.values())

    @property
    def muls(self) -> int:
        return self._sum("muls")

    @property
    def adds(self) -> int:
        return self._sum("adds")

    @property
    def macs(self) -> int:
        return self._sum("macs")

    @property
    def ops(self) -> int:
        return self.muls + self.adds + self.macs

    @property
    def footprint_bytes(self) -> int:
        return self.model_bytes + self.activation_bytes

    def counts(self) -> tuple[int, int, int]:
        return (self.muls, self.adds, self.macs)


# --- operation counts -------------------------------------------------------

def _touched(m, mode: str) -> int:
    mat = m.values if isinstance(m, TernaryMatrix) else np.asarray(m)
    return int(mat.size) if mode == "dense_estimate" else int(np.count_nonzero(mat))


def _spn_counts(layer: StrassenLayer, positions: int, mode: str) -> OpCounts:
    w_b, w_c, _ = layer.effective()
    adds = (_touched(w_b, mode) + _touched(w_c, mode)) * positions
    return OpCounts(muls=layer.r * positions, adds=adds)


def _matrix_counts(m, mode: str) -> OpCounts:
    if isinstance(m, StrassenLayer):
        return _spn_counts(m, 1, mode)
    rows, cols = np.shape(m)
    return OpCounts(macs=rows * cols)


def _layer_counts(layer, out_shape: tuple[int, ...], mode: str) -> OpCounts:
    if isinstance(layer, (AvgPool, Flatten)):
        return OpCounts()
    positions = out_shape[1] * out_shape[2]
    if isinstance(layer, StrassenLayer):
        return _spn_counts(layer, positions, mode)
    g = layer.geometry
    return OpCounts(macs=positions * g.patch_len * g.out_channels)


def _node_counts(tree: BonsaiTree, k: int, mode: str) -> OpCounts:
    c = _matrix_counts(tree.W[k], mode)
    c += _matrix_counts(tree.V[k], mode)
    c += OpCounts(muls=tree.num_classes)
    return c


def path_counts(tree: BonsaiTree, leaf: int, mode: str) -> OpCounts:
    """Hard-routing cost of reaching ``leaf``: node scores plus one branch test per internal node."""
    if not tree.num_internal <= leaf < tree.num_nodes:
        raise ValueError(f"node {leaf} is not a leaf")
    total = _matrix_counts(tree.Z, mode)
    k = leaf
    while True:
        total += _node_counts(tree, k, mode)
        if k == 0:
            return total
        k = (k - 1) // 2
        total += OpCounts(macs=tree.proj_dim)


def tree_counts(tree: BonsaiTree, mode: str, tree_mode: str = "soft") -> OpCounts:
    """Soft mode scores all nodes; hard mode the costliest root-to-leaf path."""
    if tree_mode == "hard":
        paths = [path_counts(tree, leaf, mode) for leaf in range(tree.num_internal, tree.num_nodes)]
        return max(paths, key=lambda c: c.ops)
    total = _matrix_counts(tree.Z, mode)
    total += OpCounts(macs=tree.num_internal * tree.proj_dim)
    for k in range(tree.num_nodes):
        total += _node_counts(tree, k, mode)
    return total


def count_ops(model: HybridModel, mode: str = "inference_nnz") -> OpReport:
    """Analytic per-input counts, broken down with the same scope names forward uses."""
    if mode not in COUNT_MODES:
        raise ValueError(f"unknown counting mode {mode!r}")
    per_layer: dict[str, OpCounts] = {}
    for i, (layer, shape) in enumerate(zip(model.layers, model.shapes())):
        per_layer[f"layers.{i}:{layer_kind(layer)}"] = _layer_counts(layer, shape, mode)
    head = model.head
    if isinstance(head, BonsaiTree):
        per_layer["head"] = tree_counts(head, mode, model.tree_mode)
    else:
        per_layer["head"] = OpCounts(macs=head.weight.size)
    return _attach_sizes(OpReport(mode, per_layer), model)


def report_from_counter(model: HybridModel, counter: OpCounter) -> OpReport:
    per_layer = {}
    for i, layer in enumerate(model.layers):
        key = f"layers.{i}:{layer_kind(layer)}"
        per_layer[key] = counter.per_scope.get(key, OpCounts())
    per_layer["head"] = counter.per_scope.get("head", OpCounts())
    return _attach_sizes(OpReport(counter.mode, per_layer), model)


def _attach_sizes(report: OpReport, model: HybridModel) -> OpReport:
    fp = memory_footprint(model)
    report.model_bytes = fp.model_bytes
    report.activation_bytes = fp.activation_bytes
    return report


# --- model size and activation memory ---------------------------------------

def _element_bytes(model: HybridModel, name: str, default: float) -> float:
    fmt = (model.qspec or {}).get(name)
    return default if fmt is None else fmt.total_bits / 8


def model_size(model: HybridModel, float_bytes: float = 4, ternary_bits: int = 2) -> SizeReport:
    """Stored bytes of the inference model.

    Ternary tensors are packed per tensor to ``ceil(n * ternary_bits / 8)``
    bytes; every other tensor costs its quantized width or ``float_bytes``
    per element. Training-form layers are sized as their collapsed form.
    """
    if float_bytes not in (4, 2, 1):
        raise ValueError("float_bytes must be 4, 2 or 1")
    tern = fp = ab = 0
    per = {}
    for name, value, cat in tensors(model, planned=True):
        if cat == "ternary":
            nbytes = -(-value.values.size * ternary_bits // 8)
            tern += nbytes
        else:
            nbytes = int(np.ceil(np.size(value) * _element_bytes(model, name, float_bytes)))
            fp += nbytes
            if cat in ("a_hat", "bias"):
                ab += nbytes
        per[name] = nbytes
    return SizeReport(tern, fp, ab, per)


def max_pair(sizes: list[int]) -> tuple[int, tuple[int, int] | None]:
    """Largest sum of two consecutive entries (a single buffer counts alone)."""
    if not sizes:
        return 0, None
    if len(sizes) == 1:
        return sizes[0], (0, 0)
    sums = [sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1)]
    i = int(np.argmax(sums))
    return sums[i], (i, i + 1)


def activation_buffers(model: HybridModel, act_bytes: float = 4) -> list[tuple[str, int]]:
    """Activation buffers in execution order with their byte sizes.

    A strassenified layer contributes its post-``W_b`` intermediate ``.h``; the
    scaled product ``.p`` is computed in place and adds no buffer.
    """
    out = []
    for name, shape in model.activations():
        if name.endswith(".p"):
            continue
        n = int(np.prod(shape))
        out.append((name, int(np.ceil(n * _element_bytes(model, name, act_bytes)))))
    return out


def memory_footprint(model: HybridModel, act_bytes: float = 4, float_bytes: float = 4) -> FootprintReport:
    buffers = activation_buffers(model, act_bytes)
    peak, pair = max_pair([b for _, b in buffers])
    return FootprintReport(model_size(model, float_bytes).total_bytes, peak, buffers, pair)


def format_report(report: OpReport, title: str = "") -> str:
    """Aligned text table of per-layer counts and totals."""
    rows = [("layer", "muls", "adds", "macs", "ops")]
    for key, c in report.per_layer.items():
        rows.append((key, str(c.muls), str(c.adds), str(c.macs), str(c.ops)))
    rows.append(("total", str(report.muls), str(report.adds), str(report.macs), str(report.ops)))
    widths = [max(len(r[j]) for r in rows) for j in range(5)]
    lines = [title] if title else []
    for r in rows:
        lines.append("  ".join(r[0].ljust(widths[0]) if j == 0 else r[j].rjust(widths[j]) for j in range(5)))
    lines.append(f"mode: {report.mode}")
    lines.append(f"model: {kb(report.model_bytes):.2f} KB  activations: {kb(report.activation_bytes):.2f} KB  "
                 f"footprint: {kb(report.footprint_bytes):.2f} KB")
    return "\n".join(lines)


def report_csv(report: OpReport) -> str:
    lines = ["layer,muls,adds,macs,ops"]
    for key, c in report.per_layer.items():
        lines.append(f"{key},{c.muls},{c.adds},{c.macs},{c.ops}")
    lines.append(f"total,{report.muls},{report.adds},{report.macs},{report.ops}")
    return "\n".join(lines) + "\n"
