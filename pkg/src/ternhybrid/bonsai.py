"""Bonsai tree classifier head.

Nodes are stored in heap order (root 0, children ``2k+1`` / ``2k+2``). Each
node scores a projected input ``x_hat = Z x`` as
``(W_k^T x_hat) * tanh(sigma * V_k^T x_hat)``; internal node ``k`` sends
probability ``p_k = (1 + tanh(sigma_I * theta_k . x_hat)) / 2`` to its left
child. Any of ``Z``, ``W_k``, ``V_k`` may be a matmul-kind
:class:`~ternhybrid.spn.StrassenLayer` instead of a dense array.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import opcount
from .errors import ShapeError
from .spn import StrassenLayer, spn_linear
from .tensor import NULL_SIM, QuantSim, add_frac, as_f32, matmul_ref

TREE_MODES = ("soft", "hard")


@dataclass(eq=False)
class BonsaiTree:
    depth: int
    Z: np.ndarray | StrassenLayer
    W: list
    V: list
    theta: np.ndarray
    sigma: float = 1.0
    sigma_I: float = 1.0

    def __post_init__(self):
        if self.depth < 0:
            raise ShapeError("tree depth must be >= 0")
        n = self.num_nodes
        if len(self.W) != n or len(self.V) != n:
            raise ShapeError(f"depth-{self.depth} tree needs {n} W and V matrices")
        if not isinstance(self.Z, StrassenLayer):
            self.Z = as_f32(self.Z)
        self.W = [w if isinstance(w, StrassenLayer) else as_f32(w) for w in self.W]
        self.V = [v if isinstance(v, StrassenLayer) else as_f32(v) for v in self.V]
        theta = as_f32(self.theta)
        self.theta = theta.reshape(self.num_internal, -1) if self.num_internal else theta.reshape(0, self.proj_dim)
        d_hat, l = self.proj_dim, self.num_classes
        for m in self.W + self.V:
            if _mat_shape(m, node=True) != (d_hat, l):
                raise ShapeError(f"node matrices must all be [{d_hat}, {l}], got {_mat_shape(m, node=True)}")
        if self.num_internal and self.theta.shape[1] != d_hat:
            raise ShapeError("branching vectors must have length D_hat")
        if not (self.sigma > 0 and self.sigma_I > 0):
            raise ValueError("sigma and sigma_I must be positive")

    @property
    def num_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def num_internal(self) -> int:
        return 2**self.depth - 1

    @property
    def in_dim(self) -> int:
        return _mat_shape(self.Z)[1]

    @property
    def proj_dim(self) -> int:
        return _mat_shape(self.Z)[0]

    @property
    def num_classes(self) -> int:
        return _mat_shape(self.W[0], node=True)[1]

    def matrices(self):
        """(name, matrix) pairs for Z and every node's W and V."""
        yield "Z", self.Z
        for k in range(self.num_nodes):
            yield f"W.{k}", self.W[k]
            yield f"V.{k}", self.V[k]

    def densified(self) -> BonsaiTree:
        """Same tree with every strassenified matrix replaced by its dense equivalent."""
        return replace(
            self,
            Z=_densify(self.Z, transpose=False),
            W=[_densify(w, transpose=True) for w in self.W],
            V=[_densify(v, transpose=True) for v in self.V],
        )


def _mat_shape(m, node: bool = False) -> tuple[int, int]:
    """Logical shape: Z is [D_hat, D]; node matrices are [D_hat, L].

    A strassenified node matrix maps D_hat -> L, so its logical shape is
    (in_features, out_features).
    """
    if isinstance(m, StrassenLayer):
        return (m.in_features, m.out_features) if node else (m.out_features, m.in_features)
    return tuple(np.shape(m))


def _densify(m, transpose: bool):
    if not isinstance(m, StrassenLayer):
        return m
    filters, bias = m.equivalent_dense()
    if np.any(bias != 0):
        raise ValueError("tree matrices carry no bias")
    dense = filters[:, :, 0, 0]
    return dense.T if transpose else dense


def _apply_node(m, x_hat: np.ndarray, q: QuantSim, name: str, in_frac: int | None) -> np.ndarray:
    """``x_hat @ m`` for a node matrix (``[N, D_hat] -> [N, L]``)."""
    if isinstance(m, StrassenLayer):
        return spn_linear(m, x_hat, q, name, in_frac)
    out = matmul_ref(x_hat, q.weight(name, m))
    return q.acc(out, add_frac(in_frac, q.frac(name)))


def _as_rows(x, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x[None] if single else x
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"expected input of width {width}, got shape {x.shape}")
    return x, single


def project(tree: BonsaiTree, x, q: QuantSim = NULL_SIM, in_frac: int | None = None) -> np.ndarray:
    """``x_hat = Z x`` for ``x`` of shape ``[D]`` or ``[N, D]``."""
    xb, single = _as_rows(x, tree.in_dim)
    if isinstance(tree.Z, StrassenLayer):
        out = spn_linear(tree.Z, xb, q, "Z", in_frac)
    else:
        out = q.acc(matmul_ref(xb, q.weight("Z", tree.Z).T), add_frac(in_frac, q.frac("Z")))
    out = q.act("proj", out)
    return out[0] if single else out


def node_score(
    W, V, x_hat, sigma: float, q: QuantSim = NULL_SIM, names: tuple[str, str] = ("W", "V"), in_frac: int | None = None
) -> np.ndarray:
    """``(W^T x_hat) * tanh(sigma * V^T x_hat)``; records ``L`` multiplications per row."""
    xb, single = _as_rows(x_hat, _mat_shape(W, node=True)[0])
    u = _apply_node(W, xb, q, names[0], in_frac)
    v = _apply_node(V, xb, q, names[1], in_frac)
    opcount.record(muls=u.size)
    out = u * np.tanh(sigma * v)
    return out[0] if single else out


def path_indicators(
    tree: BonsaiTree, x_hat, sigma_I: float | None = None, q: QuantSim = NULL_SIM, in_frac: int | None = None
) -> np.ndarray:
    """Soft reach probability of every node, ``[N, num_nodes]`` (or ``[num_nodes]``)."""
    sigma_I = tree.sigma_I if sigma_I is None else sigma_I
    xb, single = _as_rows(x_hat, tree.proj_dim)
    ind = np.zeros((xb.shape[0], tree.num_nodes))
    ind[:, 0] = 1.0
    if tree.num_internal:
        margins = matmul_ref(xb, q.weight("theta", tree.theta).T)
        margins = q.acc(margins, add_frac(in_frac, q.frac("theta")))
        p_left = 0.5 * (1.0 + np.tanh(sigma_I * margins))
        for k in range(tree.num_internal):
            ind[:, 2 * k + 1] = ind[:, k] * p_left[:, k]
            ind[:, 2 * k + 2] = ind[:, k] * (1.0 - p_left[:, k])
    return ind[0] if single else ind


def tree_predict(
    tree: BonsaiTree, x, mode: str = "soft", q: QuantSim = NULL_SIM, in_frac: int | None = None
) -> np.ndarray:
    """Class scores ``[L]`` / ``[N, L]``.

    Soft mode weights every node's score by its path indicator. Hard mode
    follows ``sign(theta_k . x_hat)`` from the root (ties go left) and sums
    the scores of the visited nodes only. ``q`` names its tensors ``Z``,
    ``theta``, ``W.k``, ``V.k`` and the activations ``proj`` and ``out``.
    """
    if mode not in TREE_MODES:
        raise ValueError(f"unknown tree mode {mode!r}")
    xb, single = _as_rows(x, tree.in_dim)
    x_hat = project(tree, xb, q, in_frac)
    f_proj = q.frac("proj")
    n = x_hat.shape[0]
    total = np.zeros((n, tree.num_classes))

    def score(k, rows):
        return node_score(tree.W[k], tree.V[k], x_hat[rows], tree.sigma, q, (f"W.{k}", f"V.{k}"), f_proj)

    if mode == "soft":
        ind = path_indicators(tree, x_hat, None, q, f_proj)
        for k in range(tree.num_nodes):
            total += ind[:, k : k + 1] * score(k, slice(None))
    else:
        theta = q.weight("theta", tree.theta)
        node = np.zeros(n, dtype=np.int64)
        for level in range(tree.depth + 1):
            nxt = node.copy()
            for k in np.unique(node):
                rows = np.flatnonzero(node == k)
                total[rows] += score(k, rows)
                if level < tree.depth:
                    margin = matmul_ref(x_hat[rows], theta[k][:, None])[:, 0]
                    nxt[rows] = np.where(margin >= 0, 2 * k + 1, 2 * k + 2)
            node = nxt
    total = q.act("out", total)
    return total[0] if single else total


def hard_leaf(tree: BonsaiTree, x) -> np.ndarray:
    """Leaf reached by each row of ``x`` under hard routing (ties go left)."""
    xb, _ = _as_rows(x, tree.in_dim)
    x_hat = project(tree, xb)
    node = np.zeros(len(xb), dtype=np.int64)
    for _ in range(tree.depth):
        margin = np.einsum("nd,nd->n", x_hat, tree.theta[node])
        node = np.where(margin >= 0, 2 * node + 1, 2 * node + 2)
    return node


def random_tree(
    depth: int,
    in_dim: int,
    proj_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    *,
    sigma: float = 1.0,
    sigma_I: float = 1.0,
) -> BonsaiTree:
    """Dense tree with He-style random matrices."""
    n = 2 ** (depth + 1) - 1
    scale = np.sqrt(2.0 / proj_dim)
    return BonsaiTree(
        depth=depth,
        Z=rng.normal(0, np.sqrt(2.0 / in_dim), (proj_dim, in_dim)),
        W=[rng.normal(0, scale, (proj_dim, num_classes)) for _ in range(n)],
        V=[rng.normal(0, scale, (proj_dim, num_classes)) for _ in range(n)],
        theta=rng.uniform(-0.5, 0.5, (2**depth - 1, proj_dim)),
        sigma=sigma,
        sigma_I=sigma_I,
    )
