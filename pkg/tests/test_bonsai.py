import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternhybrid import opcount
from ternhybrid.bonsai import BonsaiTree, node_score, path_indicators, project, random_tree, tree_predict
from ternhybrid.errors import ShapeError
from ternhybrid.spn import random_strassen_layer
from ternhybrid.tensor import ConvGeometry


def _oracle_soft(tree, x):
    """Direct transcription of the soft tree: sum_k I_k(x) * W_k^T x_hat * tanh(sigma V_k^T x_hat)."""
    x_hat = tree.Z @ x
    out = np.zeros(tree.num_classes)
    for k in range(tree.num_nodes):
        reach, node = 1.0, k
        while node > 0:
            parent = (node - 1) // 2
            p_left = 0.5 * (1 + np.tanh(tree.sigma_I * tree.theta[parent] @ x_hat))
            reach *= p_left if node == 2 * parent + 1 else 1 - p_left
            node = parent
        out += reach * (tree.W[k].T @ x_hat) * np.tanh(tree.sigma * (tree.V[k].T @ x_hat))
    return out


def _oracle_hard(tree, x):
    x_hat = tree.Z @ x
    out, k = np.zeros(tree.num_classes), 0
    while True:
        out += (tree.W[k].T @ x_hat) * np.tanh(tree.sigma * (tree.V[k].T @ x_hat))
        if k >= tree.num_internal:
            return out
        k = 2 * k + 1 if tree.theta[k] @ x_hat >= 0 else 2 * k + 2


class TestPrediction:
    @pytest.mark.parametrize("depth", [0, 1, 2, 3])
    def test_soft_matches_oracle(self, depth):
        rng = np.random.default_rng(depth)
        tree = random_tree(depth, 12, 5, 4, rng, sigma=0.7, sigma_I=2.0)
        x = rng.normal(size=(6, 12))
        out = tree_predict(tree, x)
        for i in range(6):
            np.testing.assert_allclose(out[i], _oracle_soft(tree, x[i]), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("depth", [1, 2])
    def test_hard_matches_oracle(self, depth):
        rng = np.random.default_rng(10 + depth)
        tree = random_tree(depth, 9, 4, 3, rng)
        x = rng.normal(size=(8, 9))
        out = tree_predict(tree, x, mode="hard")
        for i in range(8):
            np.testing.assert_allclose(out[i], _oracle_hard(tree, x[i]), rtol=1e-10, atol=1e-12)

    def test_single_sample_shape(self):
        rng = np.random.default_rng(0)
        tree = random_tree(2, 6, 3, 5, rng)
        assert tree_predict(tree, rng.normal(size=6)).shape == (5,)
        assert project(tree, np.ones(6)).shape == (3,)

    def test_zero_score_matrices(self):
        rng = np.random.default_rng(1)
        tree = random_tree(1, 4, 3, 2, rng)
        tree = BonsaiTree(1, tree.Z, [np.zeros((3, 2))] * 3, tree.V, tree.theta)
        np.testing.assert_array_equal(tree_predict(tree, rng.normal(size=(3, 4))), 0.0)

    def test_strassen_nodes_match_dense(self):
        rng = np.random.default_rng(2)
        d, d_hat, L = 10, 6, 4

        def layer(i, o):
            return random_strassen_layer("matmul", ConvGeometry.pointwise(i, o), o, rng, bias=False)

        tree = BonsaiTree(
            2, layer(d, d_hat), [layer(d_hat, L) for _ in range(7)], [layer(d_hat, L) for _ in range(7)],
            rng.normal(size=(3, d_hat)), sigma=0.5,
        )
        x = rng.normal(size=(5, d))
        dense = tree.densified()
        for mode in ("soft", "hard"):
            # the dense copy stores float32 matrices
            np.testing.assert_allclose(tree_predict(tree, x, mode), tree_predict(dense, x, mode), atol=1e-6)

    def test_shape_validation(self):
        rng = np.random.default_rng(3)
        t = random_tree(1, 4, 3, 2, rng)
        with pytest.raises(ShapeError):
            BonsaiTree(1, t.Z, t.W[:2], t.V, t.theta)
        with pytest.raises(ShapeError):
            BonsaiTree(1, t.Z, [np.zeros((3, 5))] * 3, t.V, t.theta)
        with pytest.raises(ShapeError):
            tree_predict(t, np.ones(5))
        with pytest.raises(ValueError):
            tree_predict(t, np.ones(4), mode="fuzzy")

    def test_node_score_counts_muls(self):
        rng = np.random.default_rng(4)
        W, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        with opcount.counting() as c:
            node_score(W, V, rng.normal(size=(2, 3)), 1.0)
        assert c.total.muls == 8 and c.total.macs == 2 * 2 * 12


class TestIndicators:
    @given(st.integers(0, 4), st.floats(0.01, 50), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_level_sums_are_one(self, depth, sigma_I, seed):
        rng = np.random.default_rng(seed)
        tree = random_tree(depth, 5, 4, 2, rng, sigma_I=sigma_I)
        ind = path_indicators(tree, rng.normal(size=(7, 4)) * 3)
        for level in range(depth + 1):
            lo, hi = 2**level - 1, 2 ** (level + 1) - 1
            np.testing.assert_allclose(ind[:, lo:hi].sum(axis=1), 1.0, atol=1e-6)
        assert np.all(ind >= 0) and np.all(ind <= 1)

    def test_child_mass_splits_parent(self):
        rng = np.random.default_rng(5)
        tree = random_tree(3, 5, 4, 2, rng)
        ind = path_indicators(tree, rng.normal(size=(3, 4)))
        for k in range(tree.num_internal):
            np.testing.assert_allclose(ind[:, 2 * k + 1] + ind[:, 2 * k + 2], ind[:, k], atol=1e-12)

    def test_sharp_routing_approaches_hard(self):
        rng = np.random.default_rng(6)
        tree = random_tree(2, 6, 4, 3, rng, sigma_I=1e4)
        x = rng.normal(size=(50, 6))
        margins = (x @ tree.Z.T) @ tree.theta.T
        keep = np.all(np.abs(margins) > 0.01, axis=1)
        soft = tree_predict(tree, x[keep])
        hard = tree_predict(tree, x[keep], mode="hard")
        assert np.max(np.abs(soft - hard)) < 1e-3
