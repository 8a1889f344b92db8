"""Integer reference executor for quantized models.

Every linear stage runs on int64 codes: inputs and weights are integers
``v * 2**frac``, accumulators saturate to int32 and requantization is an
arithmetic shift with round-half-to-even. Only the tree's tanh gates are
evaluated in floating point, on exactly dequantized accumulator values.
This path shares no arithmetic with the fake-quant forward and is used to
cross-check it bit for bit.
"""

from __future__ import annotations

import numpy as np

from .bonsai import BonsaiTree
from .errors import PolicyError, StateError
from .model.graph import AvgPool, Conv2D, Flatten, HybridModel
from .spn import StrassenLayer
from .tensor import QFormat, im2col

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


class Fixed:
    """int64 codes plus fraction bits."""

    __slots__ = ("v", "frac")

    def __init__(self, v: np.ndarray, frac: int):
        self.v = np.asarray(v, dtype=np.int64)
        self.frac = frac

    def real(self) -> np.ndarray:
        return self.v.astype(np.float64) * 2.0**-self.frac


def shift_round(v: np.ndarray, shift: int) -> np.ndarray:
    """``v * 2**shift`` rounded half-to-even (shift may be negative)."""
    v = np.asarray(v, dtype=np.int64)
    if shift >= 0:
        return v << shift
    k = -shift
    q = v >> k  # floor division
    r = v - (q << k)
    half = 1 << (k - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up


def requant(x: Fixed, fmt: QFormat) -> Fixed:
    v = shift_round(x.v, fmt.frac_bits - x.frac)
    return Fixed(np.clip(v, fmt.int_min, fmt.int_max), fmt.frac_bits)


def saturate(x: Fixed) -> Fixed:
    return Fixed(np.clip(x.v, INT32_MIN, INT32_MAX), x.frac)


def from_real(x, fmt: QFormat) -> Fixed:
    v = np.rint(np.asarray(x, np.float64) * 2.0**fmt.frac_bits)
    return Fixed(np.clip(v, fmt.int_min, fmt.int_max).astype(np.int64), fmt.frac_bits)


def aligned_bias(b, fmt: QFormat, acc_frac: int) -> np.ndarray:
    """Bias codes moved onto the accumulator grid."""
    return shift_round(from_real(b, fmt).v, acc_frac - fmt.frac_bits)


class IntExecutor:
    def __init__(self, model: HybridModel):
        if not model.qspec:
            raise StateError("model is not quantized")
        self.model = model
        self.fmt = model.qspec

    def f(self, name: str) -> QFormat:
        if name not in self.fmt:
            raise PolicyError(f"no format for {name}")
        return self.fmt[name]

    def w(self, name: str, value) -> Fixed:
        return from_real(value, self.f(name))

    # -- layers --

    def _spn(self, m: StrassenLayer, cols: np.ndarray, x_frac: int, name: str, acts: bool) -> Fixed:
        """cols: int64 ``[N, groups*patch_len, P]``."""
        g = m.geometry
        n, _, p = cols.shape
        wb = m.W_b.values.astype(np.int64).reshape(g.groups, m.r_per_group, g.patch_len)
        xg = cols.reshape(n, g.groups, g.patch_len, p)
        h = Fixed(np.einsum("grk,ngkp->ngrp", wb, xg).reshape(n, m.r, p), x_frac)
        h = saturate(h)
        if acts:
            h = requant(h, self.f(f"{name}.h"))
        a = self.w(f"{name}.a_hat", m.a_hat)
        prod = saturate(Fixed(h.v * a.v[None, :, None], h.frac + a.frac))
        if acts:
            prod = requant(prod, self.f(f"{name}.p"))
        wc = m.W_c.values.astype(np.int64).reshape(g.groups, g.out_per_group, m.r_per_group)
        pg = prod.v.reshape(n, g.groups, m.r_per_group, p)
        out = np.einsum("gor,ngrp->ngop", wc, pg).reshape(n, g.out_channels, p)
        if m.bias is not None:
            out = out + aligned_bias(m.bias, self.f(f"{name}.bias"), prod.frac)[None, :, None]
        return saturate(Fixed(out, prod.frac))

    def _conv(self, layer: Conv2D, x: Fixed, name: str) -> Fixed:
        g = layer.geometry
        wq = self.w(f"{name}.weight", layer.weight)
        cols = im2col(x.v.astype(np.float64), g).astype(np.int64)  # exact: small integers
        n, _, p = cols.shape
        wf = wq.v.reshape(g.groups, g.out_per_group, g.patch_len)
        out = np.einsum("gok,ngkp->ngop", wf, cols.reshape(n, g.groups, g.patch_len, p))
        out = out.reshape(n, g.out_channels, p)
        frac = x.frac + wq.frac
        if layer.bias is not None:
            out = out + aligned_bias(layer.bias, self.f(f"{name}.bias"), frac)[None, :, None]
        return saturate(Fixed(out, frac))

    def _dense(self, m, name: str, x: Fixed) -> Fixed:
        """``x [N, in] -> [N, out]`` for Z-like matrices ``[out, in]``."""
        if isinstance(m, StrassenLayer):
            out = self._spn(m, x.v[:, :, None], x.frac, name, acts=False)
            return Fixed(out.v[:, :, 0], out.frac)
        wq = self.w(name, m)
        return saturate(Fixed(x.v @ wq.v.T, x.frac + wq.frac))

    def _node(self, m, name: str, x: Fixed) -> Fixed:
        if isinstance(m, StrassenLayer):
            return self._dense(m, name, x)
        wq = self.w(name, m)
        return saturate(Fixed(x.v @ wq.v, x.frac + wq.frac))

    def _tree(self, tree: BonsaiTree, x: Fixed) -> Fixed:
        xh = requant(self._dense(tree.Z, "head.Z", x), self.f("head.proj"))
        n = xh.v.shape[0]
        total = np.zeros((n, tree.num_classes))

        def score(k, rows):
            u = self._node(tree.W[k], f"head.W.{k}", Fixed(xh.v[rows], xh.frac)).real()
            v = self._node(tree.V[k], f"head.V.{k}", Fixed(xh.v[rows], xh.frac)).real()
            return u * np.tanh(tree.sigma * v)

        if tree.num_internal:
            th = self.w("head.theta", tree.theta)
            margins = saturate(Fixed(xh.v @ th.v.T, xh.frac + th.frac))
        if self.model.tree_mode == "soft":
            ind = np.zeros((n, tree.num_nodes))
            ind[:, 0] = 1.0
            if tree.num_internal:
                p_left = 0.5 * (1.0 + np.tanh(tree.sigma_I * margins.real()))
                for k in range(tree.num_internal):
                    ind[:, 2 * k + 1] = ind[:, k] * p_left[:, k]
                    ind[:, 2 * k + 2] = ind[:, k] * (1.0 - p_left[:, k])
            for k in range(tree.num_nodes):
                total += ind[:, k : k + 1] * score(k, slice(None))
        else:
            node = np.zeros(n, dtype=np.int64)
            for level in range(tree.depth + 1):
                nxt = node.copy()
                for k in np.unique(node):
                    rows = np.flatnonzero(node == k)
                    total[rows] += score(k, rows)
                    if level < tree.depth:
                        nxt[rows] = np.where(margins.v[rows, k] >= 0, 2 * k + 1, 2 * k + 2)
                node = nxt
        return from_real(total, self.f("head.out"))

    def run(self, x) -> np.ndarray:
        """Dequantized class scores ``[N, L]``."""
        model = self.model
        x = np.asarray(x, np.float64)
        if x.ndim == 3:
            x = x[None]
        cur = from_real(x, self.f("input"))
        for i, layer in enumerate(model.layers):
            name = f"layers.{i}"
            if isinstance(layer, Flatten):
                cur = Fixed(cur.v.reshape(cur.v.shape[0], -1), cur.frac)
                continue
            if isinstance(layer, AvgPool):
                nb, c, h, w = cur.v.shape
                kh, kw = layer.window(h, w)
                oh, ow = h // kh, w // kw
                # the mean is formed in float64, which is exact for these sums
                y = cur.real()[:, :, : oh * kh, : ow * kw].reshape(nb, c, oh, kh, ow, kw).mean(axis=(3, 5))
                cur = from_real(y, self.f(f"{name}.out"))
                continue
            g = layer.geometry
            oh, ow = g.output_hw(cur.v.shape[2], cur.v.shape[3])
            if isinstance(layer, StrassenLayer):
                cols = im2col(cur.v.astype(np.float64), g).astype(np.int64)
                out = self._spn(layer, cols, cur.frac, name, acts=True)
            else:
                out = self._conv(layer, cur, name)
            v = out.v.reshape(out.v.shape[0], g.out_channels, oh, ow)
            if layer.relu:
                v = np.maximum(v, 0)
            cur = requant(Fixed(v, out.frac), self.f(f"{name}.out"))
        cur = Fixed(cur.v.reshape(cur.v.shape[0], -1), cur.frac)
        head = model.head
        if isinstance(head, BonsaiTree):
            out = self._tree(head, cur)
        else:
            wq = self.w("head.weight", head.weight)
            acc = cur.v @ wq.v.T
            frac = cur.frac + wq.frac
            if head.bias is not None:
                acc = acc + aligned_bias(head.bias, self.f("head.bias"), frac)[None, :]
            out = requant(saturate(Fixed(acc, frac)), self.f("head.out"))
        return out.real()


def int_forward(model: HybridModel, x) -> np.ndarray:
    return IntExecutor(model).run(x)
