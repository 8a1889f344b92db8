"""Trainable torch mirror of :class:`HybridModel` and conversion both ways.

Strassenified layers have three states: ``fp`` (full-precision shadows),
``ternary`` (shadows pass through TWN quantization with a straight-through
gradient) and ``fixed`` (ternary patterns frozen, scale-absorbed ``a_hat``
trained directly).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..bonsai import BonsaiTree
from ..model.graph import AvgPool, Conv2D, DenseHead, Flatten, HybridModel
from ..spn import SpnShadow, StrassenLayer
from ..ternary import TWN_THRESHOLD, TernaryMatrix
from ..tensor import BatchNorm


class TernarizeSTE(torch.autograd.Function):
    """TWN quantization forward; identity gradient inside [-1, 1], zero outside."""

    @staticmethod
    def forward(ctx, w):
        ctx.save_for_backward(w)
        mag = w.abs()
        keep = mag > TWN_THRESHOLD * mag.mean()
        if not bool(keep.any()):
            return torch.zeros_like(w)
        alpha = mag[keep].mean()
        return alpha * torch.sign(w) * keep

    @staticmethod
    def backward(ctx, grad):
        (w,) = ctx.saved_tensors
        return grad * (w.abs() <= 1.0)


def twn_torch(w: torch.Tensor) -> tuple[torch.Tensor, float]:
    """(pattern, alpha) like :func:`ternhybrid.ternary.twn_pattern`."""
    mag = w.detach().abs()
    keep = mag > TWN_THRESHOLD * mag.mean()
    if not bool(keep.any()):
        return torch.zeros_like(w), 1.0
    return torch.sign(w.detach()) * keep, float(mag[keep].mean())


def _t(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _bn_module(bn: BatchNorm | None, dtype) -> nn.BatchNorm2d | None:
    if bn is None:
        return None
    m = nn.BatchNorm2d(bn.channels, eps=bn.eps, momentum=0.1).to(dtype)
    with torch.no_grad():
        m.weight.copy_(_t(bn.gamma, dtype))
        m.bias.copy_(_t(bn.beta, dtype))
        m.running_mean.copy_(_t(bn.mean, dtype))
        m.running_var.copy_(_t(bn.var, dtype))
    return m


def _bn_export(m: nn.BatchNorm2d | None) -> BatchNorm | None:
    if m is None:
        return None
    arr = lambda t: t.detach().cpu().double().numpy()  # noqa: E731
    return BatchNorm(arr(m.weight), arr(m.bias), arr(m.running_mean), arr(m.running_var), m.eps)


def _bn_apply(bn: nn.BatchNorm2d, x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return bn(x[:, :, None, None])[:, :, 0, 0]
    return bn(x)


class TConv(nn.Module):
    def __init__(self, layer: Conv2D, dtype=torch.float32):
        super().__init__()
        self.geometry = layer.geometry
        self.relu = layer.relu
        self.weight = nn.Parameter(_t(layer.weight, dtype))
        self.bias = None if layer.bias is None else nn.Parameter(_t(layer.bias, dtype))
        self.bn = _bn_module(layer.bn, dtype)

    def forward(self, x):
        g = self.geometry
        y = F.conv2d(x, self.weight, self.bias, (g.stride_h, g.stride_w), (g.pad_h, g.pad_w), groups=g.groups)
        if self.bn is not None:
            y = self.bn(y)
        return F.relu(y) if self.relu else y

    def export(self) -> Conv2D:
        arr = lambda t: None if t is None else t.detach().cpu().double().numpy()  # noqa: E731
        return Conv2D(self.geometry, arr(self.weight), arr(self.bias), _bn_export(self.bn), self.relu)


class TStrassen(nn.Module):
    """SPN layer; conv kinds take ``[N, C, H, W]``, the matmul kind ``[N, in]``."""

    def __init__(self, layer: StrassenLayer, dtype=torch.float32):
        super().__init__()
        self.kind = layer.kind
        self.geometry = layer.geometry
        self.r = layer.r
        self.relu = layer.relu
        self.meta = dict(layer.meta)
        self.bias = None if layer.bias is None else nn.Parameter(_t(layer.bias, dtype))
        self.bn = _bn_module(layer.bn, dtype)
        if layer.a_hat is not None:
            self.state = "fixed"
            self.register_buffer("pat_b", _t(layer.W_b.values, dtype))
            self.register_buffer("pat_c", _t(layer.W_c.values, dtype))
            self.a_hat = nn.Parameter(_t(layer.a_hat, dtype))
        else:
            s = layer.shadow
            self.state = "ternary" if s.quantized else "fp"
            self.W_a = nn.Parameter(_t(s.W_a, dtype))
            self.W_b = nn.Parameter(_t(s.W_b, dtype))
            self.W_c = nn.Parameter(_t(s.W_c, dtype))
            self.vec_a = nn.Parameter(_t(s.vec_a, dtype))

    @property
    def groups(self) -> int:
        return self.geometry.groups

    def shadows(self) -> list[nn.Parameter]:
        return [self.W_a, self.W_b, self.W_c] if self.state != "fixed" else []

    def factors(self):
        """(W_b, W_c, a_hat) as used by the forward pass."""
        if self.state == "fixed":
            return self.pat_b, self.pat_c, self.a_hat
        mats = (self.W_a, self.W_b, self.W_c)
        if self.state == "ternary":
            mats = tuple(TernarizeSTE.apply(m) for m in mats)
        w_a, w_b, w_c = mats
        rep = self.vec_a.repeat_interleave(self.r // self.groups, dim=0)
        return w_b, w_c, (w_a * rep).sum(dim=1)

    def forward(self, x):
        g = self.geometry
        w_b, w_c, a_hat = self.factors()
        if self.kind == "matmul":
            h = x @ w_b.T
            p = h * a_hat
            if self.bn is not None:
                p = _bn_apply(self.bn, p)
            y = p @ w_c.T
            if self.bias is not None:
                y = y + self.bias
        else:
            wb = w_b.reshape(self.r, g.in_per_group, g.kernel_h, g.kernel_w)
            h = F.conv2d(x, wb, None, (g.stride_h, g.stride_w), (g.pad_h, g.pad_w), groups=g.groups)
            p = h * a_hat[None, :, None, None]
            if self.bn is not None:
                p = self.bn(p)
            y = F.conv2d(p, w_c[:, :, None, None], self.bias, groups=g.groups)
        return F.relu(y) if self.relu else y

    @torch.no_grad()
    def collapse(self) -> None:
        """Freeze ternary patterns and absorb all scales into ``a_hat``.

        Batch norm statistics are rescaled so the map is unchanged in eval mode.
        """
        if self.state == "fixed":
            return
        (pa, alpha_a), (pb, alpha_b), (pc, alpha_c) = (twn_torch(m) for m in (self.W_a, self.W_b, self.W_c))
        rep = self.vec_a.repeat_interleave(self.r // self.groups, dim=0)
        a_hat = (pa * rep).sum(dim=1) * (alpha_a * alpha_b * alpha_c)
        dtype = self.W_a.dtype
        del self.W_a, self.W_b, self.W_c, self.vec_a
        self.register_buffer("pat_b", pb.to(dtype))
        self.register_buffer("pat_c", pc.to(dtype))
        self.a_hat = nn.Parameter(a_hat.to(dtype))
        if self.bn is not None:
            self.bn.bias.mul_(alpha_c)
            self.bn.running_mean.mul_(alpha_c)
        self.state = "fixed"

    @torch.no_grad()
    def clamp_shadows(self) -> None:
        for m in self.shadows():
            m.clamp_(-1.0, 1.0)

    def export(self) -> StrassenLayer:
        arr = lambda t: None if t is None else t.detach().cpu().double().numpy()  # noqa: E731
        common = dict(
            kind=self.kind,
            geometry=self.geometry,
            r=self.r,
            bias=arr(self.bias),
            bn=_bn_export(self.bn),
            relu=self.relu,
            meta=dict(self.meta),
        )
        if self.state == "fixed":
            return StrassenLayer(
                W_b=TernaryMatrix(arr(self.pat_b).astype(np.int8)),
                W_c=TernaryMatrix(arr(self.pat_c).astype(np.int8)),
                a_hat=arr(self.a_hat),
                **common,
            )
        shadow = SpnShadow(arr(self.W_a), arr(self.W_b), arr(self.W_c), arr(self.vec_a), self.state == "ternary")
        return StrassenLayer(shadow=shadow, **common)


class TMatrix(nn.Module):
    """Dense tree matrix. ``transpose`` marks node matrices stored as [D_hat, L]."""

    def __init__(self, m: np.ndarray, transpose: bool, dtype=torch.float32):
        super().__init__()
        self.transpose = transpose
        self.weight = nn.Parameter(_t(m, dtype))

    def forward(self, x):
        return x @ self.weight if self.transpose else x @ self.weight.T

    def export(self) -> np.ndarray:
        return self.weight.detach().cpu().double().numpy()


def _tree_matrix(m, transpose: bool, dtype) -> nn.Module:
    return TStrassen(m, dtype) if isinstance(m, StrassenLayer) else TMatrix(m, transpose, dtype)


class TBonsai(nn.Module):
    def __init__(self, tree: BonsaiTree, dtype=torch.float32):
        super().__init__()
        self.depth = tree.depth
        self.n_nodes = tree.num_nodes
        self.n_internal = tree.num_internal
        self.sigma = tree.sigma
        self.sigma_I = tree.sigma_I
        self.proj_dim = tree.proj_dim
        self.Z = _tree_matrix(tree.Z, False, dtype)
        self.W = nn.ModuleList(_tree_matrix(w, True, dtype) for w in tree.W)
        self.V = nn.ModuleList(_tree_matrix(v, True, dtype) for v in tree.V)
        self.theta = nn.Parameter(_t(tree.theta, dtype))

    def indicators(self, x_hat):
        n = x_hat.shape[0]
        cols = [torch.ones(n, dtype=x_hat.dtype)] + [None] * (self.n_nodes - 1)
        if self.n_internal:
            p_left = 0.5 * (1.0 + torch.tanh(self.sigma_I * (x_hat @ self.theta.T)))
            for k in range(self.n_internal):
                cols[2 * k + 1] = cols[k] * p_left[:, k]
                cols[2 * k + 2] = cols[k] * (1.0 - p_left[:, k])
        return torch.stack(cols, dim=1)

    def forward(self, x):
        x_hat = self.Z(x)
        ind = self.indicators(x_hat)
        total = 0.0
        for k in range(self.n_nodes):
            score = self.W[k](x_hat) * torch.tanh(self.sigma * self.V[k](x_hat))
            total = total + ind[:, k : k + 1] * score
        return total

    def strassen(self) -> list[TStrassen]:
        return [m for m in [self.Z, *self.W, *self.V] if isinstance(m, TStrassen)]

    def export(self) -> BonsaiTree:
        return BonsaiTree(
            depth=self.depth,
            Z=self.Z.export(),
            W=[w.export() for w in self.W],
            V=[v.export() for v in self.V],
            theta=self.theta.detach().cpu().double().numpy(),
            sigma=self.sigma,
            sigma_I=self.sigma_I,
        )


class TDense(nn.Module):
    def __init__(self, head: DenseHead, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(_t(head.weight, dtype))
        self.bias = None if head.bias is None else nn.Parameter(_t(head.bias, dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def export(self) -> DenseHead:
        arr = lambda t: None if t is None else t.detach().cpu().double().numpy()  # noqa: E731
        return DenseHead(arr(self.weight), arr(self.bias))


class TPool(nn.Module):
    def __init__(self, pool: AvgPool):
        super().__init__()
        self.pool = pool

    def forward(self, x):
        kh, kw = self.pool.window(x.shape[2], x.shape[3])
        return F.avg_pool2d(x, (kh, kw))

    def export(self) -> AvgPool:
        return self.pool


class TFlatten(nn.Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def export(self) -> Flatten:
        return Flatten()


class THybrid(nn.Module):
    def __init__(self, model: HybridModel, dtype=torch.float32):
        super().__init__()
        if model.qspec:
            raise ValueError("quantized models cannot be trained")
        mods = []
        for layer in model.layers:
            if isinstance(layer, StrassenLayer):
                mods.append(TStrassen(layer, dtype))
            elif isinstance(layer, Conv2D):
                mods.append(TConv(layer, dtype))
            elif isinstance(layer, AvgPool):
                mods.append(TPool(layer))
            else:
                mods.append(TFlatten())
        self.layers = nn.ModuleList(mods)
        self.head = TBonsai(model.head, dtype) if isinstance(model.head, BonsaiTree) else TDense(model.head, dtype)
        self.template = model

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return self.head(x.reshape(x.shape[0], -1))

    def strassen(self) -> list[TStrassen]:
        out = [m for m in self.layers if isinstance(m, TStrassen)]
        if isinstance(self.head, TBonsai):
            out += self.head.strassen()
        return out

    def batchnorms(self) -> list[nn.BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]

    def set_sigma_I(self, value: float) -> None:
        if isinstance(self.head, TBonsai):
            self.head.sigma_I = float(value)

    def export(self) -> HybridModel:
        t = self.template
        return HybridModel(
            layers=[m.export() for m in self.layers],
            head=self.head.export(),
            input_shape=t.input_shape,
            num_classes=t.num_classes,
            name=t.name,
            version=t.version,
            tree_mode=t.tree_mode,
            meta=dict(t.meta),
        )


def to_torch(model: HybridModel, dtype=torch.float32) -> THybrid:
    return THybrid(model, dtype)

