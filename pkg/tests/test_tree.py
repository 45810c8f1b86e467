"""Pytree traversal used by the optimizer and checkpoint code."""
import numpy as np

from octic import tree
from octic.layers import DenseWeights, init_equiv_linear
from octic.model import ModelConfig, build_model


def small_model():
    return build_model(ModelConfig("d8", 1, 1, 16, 1, 4, 16, seed=2))


def test_paths_are_dotted_and_unique():
    paths = [p for p, _ in tree.iter_arrays(small_model())]
    assert len(paths) == len(set(paths))
    assert "embed.kernel" in paths
    assert "blocks.0.wq.w_e" in paths
    assert "posenc" in paths
    assert "classifier.w" in paths


def test_map_identity_preserves_values_and_statics():
    m = small_model()
    m2 = tree.map_arrays(lambda a: a.copy(), m)
    assert m2.config == m.config
    assert m2.inv_head.method == m.inv_head.method
    for (p1, a1), (p2, a2) in zip(tree.iter_arrays(m), tree.iter_arrays(m2)):
        assert p1 == p2
        assert np.array_equal(a1, a2)
        assert a1 is not a2


def test_map_multi_tree_add():
    w = init_equiv_linear(np.random.default_rng(0), 16, 16)
    z = tree.zeros_like(w)
    s = tree.add(w, z)
    for (_, a), (_, b) in zip(tree.iter_arrays(w), tree.iter_arrays(s)):
        assert np.array_equal(a, b)


def test_zeros_like_shapes():
    w = DenseWeights(w=np.ones((3, 4)), bias=np.ones(3))
    z = tree.zeros_like(w)
    assert z.w.shape == (3, 4) and not z.w.any()
    assert z.bias.shape == (3,) and not z.bias.any()
