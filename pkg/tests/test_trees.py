import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapkit.errors import DimensionError
from lapkit.trees import flatten, leaf_paths, subtree_indices, tree_size, unflatten


def nested_tree():
    return {
        "a": {"w": np.arange(6.0).reshape(2, 3), "b": np.array([7.0, 8.0])},
        "c": np.array([[9.0]]),
    }


def test_flatten_order_is_depth_first_insertion():
    tree = nested_tree()
    np.testing.assert_array_equal(flatten(tree), [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0, 9.0])


def test_round_trip_exact():
    tree = nested_tree()
    vec = flatten(tree)
    back = unflatten(vec, tree)
    for path in leaf_paths(tree):
        node_a, node_b = tree, back
        for key in path:
            node_a, node_b = node_a[key], node_b[key]
        np.testing.assert_array_equal(node_a, node_b)


def test_figure1_declaration_order(fig1_params):
    np.testing.assert_array_equal(flatten(fig1_params), [1.6556547, 1.0420421])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=9, max_size=9))
def test_unflatten_then_flatten_is_identity(values):
    tree = nested_tree()
    vec = np.asarray(values)
    assert np.array_equal(flatten(unflatten(vec, tree)), vec)


def test_length_mismatch_raises():
    with pytest.raises(DimensionError):
        unflatten(np.zeros(3), nested_tree())


def test_tree_size_and_subtree_indices():
    tree = nested_tree()
    assert tree_size(tree) == 9
    np.testing.assert_array_equal(subtree_indices(tree, ("a", "b")), [6, 7])
    np.testing.assert_array_equal(subtree_indices(tree, ("c",)), [8])
    assert subtree_indices(tree, ("missing",)).size == 0


def test_three_layer_mlp_round_trip_bit_exact():
    from lapkit.nets import init_params, mlp

    model = mlp(4, [5, 3], 2)
    params = init_params(model, seed=9)
    vec = flatten(params)
    again = flatten(unflatten(vec, params))
    assert again.tobytes() == vec.tobytes()
