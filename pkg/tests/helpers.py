"""Shared builders for tests: random architectures and small models."""

import numpy as np

from ternhybrid.model.arch import ArchSpec, build_model
from ternhybrid.model.graph import collapsed
from ternhybrid.spn import StrassenLayer
from ternhybrid.tensor import BatchNorm


def random_arch_text(rng: np.random.Generator) -> str:
    """Small architecture file text drawing every layer and head kind at random."""
    h, w = int(rng.integers(5, 11)), int(rng.integers(4, 8))
    lines = ["[model]", f"input = 1x{h}x{w}", f"classes = {int(rng.integers(2, 5))}",
             f"strassen = {bool(rng.random() < 0.5)}".lower(),
             f"tree_mode = {rng.choice(['soft', 'hard'])}"]
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "ds_conv"])
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        h = (h + 2 * (k // 2) - k) // stride + 1
        lines += [f"[{kind}]", f"out = {int(rng.integers(2, 6))}", f"kernel = {k}x{k}", f"pad = {k // 2}x{k // 2}",
                  f"stride = {stride}x1", f"bn = {bool(rng.random() < 0.5)}".lower(),
                  f"relu = {bool(rng.random() < 0.7)}".lower()]
        if rng.random() < 0.5:
            lines.append(f"strassen = {bool(rng.random() < 0.5)}".lower())
    if rng.random() < 0.4:
        lines += ["[avg_pool]", "kernel = global" if rng.random() < 0.5 or h < 2 else "kernel = 2x1"]
    if rng.random() < 0.5:
        lines.append("[flatten]")
    if rng.random() < 0.3:
        lines += ["[dense]", f"bias = {bool(rng.random() < 0.5)}".lower()]
    else:
        lines += ["[bonsai]", f"depth = {int(rng.integers(0, 3))}", f"proj = {int(rng.integers(2, 6))}",
                  f"sigma = {float(rng.uniform(0.5, 2)):.3f}"]
        if rng.random() < 0.5:
            lines.append(f"strassen = {bool(rng.random() < 0.5)}".lower())
    return "\n".join(lines) + "\n"


def randomize_bn(model, rng: np.random.Generator):
    """Replace identity norms with random ones (in place) so folding is exercised."""
    for layer in model.layers:
        bn = getattr(layer, "bn", None)
        if bn is not None:
            c = bn.channels
            layer.bn = BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                                 rng.uniform(0.5, 2.0, c))
    return model


def random_model(seed: int, inference: bool | None = None):
    """Random architecture, built; strassen layers collapsed when ``inference`` (random if None)."""
    rng = np.random.default_rng(seed)
    model = build_model(ArchSpec.from_text(random_arch_text(rng)), seed=seed)
    randomize_bn(model, rng)
    if inference is None:
        inference = bool(rng.random() < 0.5)
    return collapsed(model) if inference else model


def has_strassen(model) -> bool:
    return any(isinstance(m, StrassenLayer) for m in model.strassen_layers())
