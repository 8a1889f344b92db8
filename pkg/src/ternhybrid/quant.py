"""Post-training fixed-point quantization.

Workflow: :func:`fold_batchnorm`, then :func:`calibrate` to pick a Q format
per tensor, then :func:`quantize_model`. Formats are symmetric power-of-two
(no zero point); the total width of each tensor comes from a
:class:`QuantPolicy` and calibration chooses the fraction bits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bonsai import BonsaiTree
from .errors import ConfigError, NumericError, PolicyError, StateError
from .model.graph import Conv2D, HybridModel, run, run_prefix, run_suffix, tensors
from .spn import StrassenLayer
from .tensor import QFormat, QuantSim, as_f32, fx_round


# --- batch norm folding -------------------------------------------------------

def _bn_affine(bn) -> tuple[np.ndarray, np.ndarray]:
    denom = np.asarray(bn.var, np.float64) + bn.eps
    if not np.all(np.isfinite(denom)) or np.any(denom <= 0):
        raise NumericError("batch norm variance + eps must be positive")
    return bn.scale_shift()


def _fold_conv(layer: Conv2D) -> Conv2D:
    s, t = _bn_affine(layer.bn)
    bias = np.zeros(len(s)) if layer.bias is None else layer.bias
    return replace(layer, weight=layer.weight * s[:, None, None, None], bias=bias * s + t, bn=None)


def _fold_strassen(layer: StrassenLayer) -> StrassenLayer:
    if layer.a_hat is None:
        raise StateError("collapse strassen layers before folding batch norm")
    s, t = _bn_affine(layer.bn)
    g = layer.geometry
    wc = layer.W_c.dense().reshape(g.groups, g.out_per_group, layer.r_per_group)
    shift = np.einsum("gor,gr->go", wc, t.reshape(g.groups, layer.r_per_group)).reshape(-1)
    bias = shift if layer.bias is None else layer.bias + shift
    return replace(layer, a_hat=layer.a_hat * s, bias=bias, bn=None)


def has_batchnorm(model: HybridModel) -> bool:
    return any(getattr(layer, "bn", None) is not None for layer in model.layers)


def fold_batchnorm(model: HybridModel) -> HybridModel:
    """Absorb every batch norm: scale into weights / a_hat, shift into the bias."""
    if not has_batchnorm(model):
        raise StateError("no BN present")
    layers = []
    for layer in model.layers:
        if getattr(layer, "bn", None) is None:
            layers.append(layer)
        elif isinstance(layer, StrassenLayer):
            layers.append(_fold_strassen(layer))
        else:
            layers.append(_fold_conv(layer))
    return replace(model, layers=layers)


# --- policies ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantPolicy:
    name: str
    weight_bits: int = 8
    a_hat_bits: int = 16
    act_bits: int = 8
    dw_intermediate_bits: int = 16

    def bits_for(self, name: str, category: str, depthwise_spn: bool) -> int:
        if category == "act":
            return self.dw_intermediate_bits if depthwise_spn else self.act_bits
        if category == "a_hat":
            return self.a_hat_bits
        return self.weight_bits


POLICIES = {
    "mixed": QuantPolicy("mixed", 8, 16, 8, 16),
    "int8": QuantPolicy("int8", 8, 8, 8, 8),
    "int16": QuantPolicy("int16", 16, 16, 16, 16),
}


def get_policy(policy: str | QuantPolicy) -> QuantPolicy:
    if isinstance(policy, QuantPolicy):
        return policy
    if policy not in POLICIES:
        raise PolicyError(f"unknown policy {policy!r} (choose from {', '.join(POLICIES)})")
    return POLICIES[policy]


def quant_targets(model: HybridModel) -> list[tuple[str, str, bool]]:
    """``(name, category, depthwise_spn)`` for every tensor needing a format, in execution order.

    Categories are ``weight``, ``bias``, ``a_hat`` and ``act``. Ternary
    matrices keep their 2-bit codes and need no format.
    """
    params = [(n, c) for n, _, c in tensors(model) if c in ("weight", "bias", "a_hat")]
    if any(c in ("bn", "shadow") for _, _, c in tensors(model)):
        raise StateError("fold batch norm and collapse strassen layers before quantizing")
    acts = [n for n, _ in model.activations()]

    def owner(name: str) -> str:
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "layers" else "head"

    dw = {f"layers.{i}" for i, layer in enumerate(model.layers)
          if isinstance(layer, StrassenLayer) and layer.kind == "conv_depthwise"}
    out: list[tuple[str, str, bool]] = [("input", "act", False)]
    blocks = [f"layers.{i}" for i in range(len(model.layers))]
    for block in blocks:
        for n, c in params:
            if owner(n) == block:
                out.append((n, c, False))
        for n in acts:
            if n != "input" and owner(n) == block:
                out.append((n, "act", block in dw))
    head_params = [(n, c) for n, c in params if owner(n) == "head"]
    head = model.head
    if isinstance(head, BonsaiTree):
        # Z, projection output, branching, node matrices, scores
        z = [(n, c) for n, c in head_params if n.startswith("head.Z")]
        rest = [(n, c) for n, c in head_params if not n.startswith("head.Z") and n != "head.theta"]
        theta = [(n, c) for n, c in head_params if n == "head.theta"]
        seq = [(n, c, False) for n, c in z] + [("head.proj", "act", False)]
        seq += [(n, c, False) for n, c in theta + rest]
    else:
        seq = [(n, c, False) for n, c in head_params]
    out += seq + [("head.out", "act", False)]
    return out


# --- calibration ------------------------------------------------------------

def _objective(scores: np.ndarray, y: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    acc = float(np.mean(np.argmax(scores, axis=1) == y))
    mse = float(np.mean((scores - ref) ** 2))
    return acc, mse


def _block(name: str, n_layers: int) -> int:
    """Index of the first layer a tensor influences (-1: the input itself)."""
    if name == "input":
        return -1
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return n_layers


def calibrate(model: HybridModel, x, y, policy: str | QuantPolicy = "mixed") -> dict[str, QFormat]:
    """Greedy per-tensor format search in execution order.

    For each tensor every legal ``frac_bits`` is tried with earlier tensors
    fixed and later ones in float. Candidates rank by calibration accuracy,
    then by mean squared deviation of the scores from the float model, then
    by more fraction bits. The activation entering the searched layer depends
    only on formats already fixed, so it is computed once per layer.
    """
    pol = get_policy(policy)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ConfigError("calibration set is empty")
    if has_batchnorm(model):
        raise StateError("fold batch norm before calibrating")
    ref = run(model, x)
    n_layers = len(model.layers)
    fixed: dict[str, QFormat] = {}
    cache_block, cache = None, None
    for name, cat, dw in quant_targets(model):
        block = _block(name, n_layers)
        if block >= 0 and block != cache_block:
            cache_block, cache = block, run_prefix(model, x, QuantSim(fixed), block)
        bits = pol.bits_for(name, cat, dw)
        best_key, best_fmt = None, None
        for frac in range(bits):
            fmt = QFormat(bits, frac)
            trial = dict(fixed)
            trial[name] = fmt
            q = QuantSim(trial)
            if block < 0:
                scores = run(model, x, q)
            else:
                scores = run_suffix(model, cache[0], cache[1], q, block)
            if not np.all(np.isfinite(scores)):
                continue
            acc, mse = _objective(scores, y, ref)
            key = (acc, -mse, frac)
            if best_key is None or key > best_key:
                best_key, best_fmt = key, fmt
        if best_fmt is None:
            raise NumericError(f"no finite format found for {name}")
        fixed[name] = best_fmt
    return fixed


# --- quantized model --------------------------------------------------------

def _round_param(m, prefix: str, formats: dict[str, QFormat]):
    if isinstance(m, StrassenLayer):
        return replace(
            m,
            a_hat=fx_round(m.a_hat, formats[f"{prefix}.a_hat"]),
            bias=None if m.bias is None else fx_round(m.bias, formats[f"{prefix}.bias"]),
        )
    return fx_round(m, formats[prefix])


def quantize_model(model: HybridModel, formats: dict[str, QFormat]) -> HybridModel:
    """Model whose weights sit on their Q grids and whose forward runs in fixed point."""
    need = [n for n, _, _ in quant_targets(model)]
    missing = [n for n in need if n not in formats]
    if missing:
        raise PolicyError(f"unresolved tensors: {', '.join(missing[:5])}" + (" ..." if len(missing) > 5 else ""))
    layers = []
    for i, layer in enumerate(model.layers):
        p = f"layers.{i}"
        if isinstance(layer, StrassenLayer):
            layers.append(_round_param(layer, p, formats))
        elif isinstance(layer, Conv2D):
            bias = None if layer.bias is None else fx_round(layer.bias, formats[f"{p}.bias"])
            layers.append(replace(layer, weight=fx_round(layer.weight, formats[f"{p}.weight"]), bias=bias))
        else:
            layers.append(layer)
    head = model.head
    if isinstance(head, BonsaiTree):
        head = replace(
            head,
            Z=_round_param(head.Z, "head.Z", formats),
            W=[_round_param(w, f"head.W.{k}", formats) for k, w in enumerate(head.W)],
            V=[_round_param(v, f"head.V.{k}", formats) for k, v in enumerate(head.V)],
            theta=fx_round(head.theta, formats["head.theta"]) if head.num_internal else head.theta,
        )
    else:
        bias = None if head.bias is None else fx_round(head.bias, formats["head.bias"])
        head = replace(head, weight=fx_round(head.weight, formats["head.weight"]), bias=bias)
    qspec = {n: formats[n] for n in need}
    out = replace(model, layers=layers, head=head, qspec=qspec)
    _check_grid(out)
    return out


def _check_grid(model: HybridModel) -> None:
    # float32 storage must not move values off their grid
    for name, value, cat in tensors(model):
        fmt = model.qspec.get(name)
        if fmt is not None and not np.array_equal(as_f32(value), fx_round(value, fmt)):
            raise NumericError(f"{name} does not fit its format after rounding")


def post_training_quantize(model: HybridModel, x, y, policy: str | QuantPolicy = "mixed") -> HybridModel:
    """fold (when needed) + calibrate + quantize."""
    if has_batchnorm(model):
        model = fold_batchnorm(model)
    return quantize_model(model, calibrate(model, x, y, policy))
