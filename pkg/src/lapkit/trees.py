"""Parameter trees: nested dicts of float64 arrays with a flat-vector view.

A ParamTree is any nesting of ``dict`` (string keys, insertion-ordered) whose
leaves are numpy arrays. ``flatten``/``unflatten`` form an exact bijection
between a tree and a length-P coordinate vector, with leaves visited
depth-first in insertion order. Everything downstream (gradients, curvature,
posteriors) works on the flat view and converts back only at the edges.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError

ParamTree = dict


def _iter_leaves(tree, prefix=()) -> Iterator[tuple[tuple, np.ndarray]]:
    if isinstance(tree, dict):
        for key, sub in tree.items():
            yield from _iter_leaves(sub, prefix + (key,))
    else:
        yield prefix, np.asarray(tree, dtype=np.float64)


def leaf_paths(tree) -> list[tuple]:
    """Paths of all leaves, depth-first in insertion order."""
    return [path for path, _ in _iter_leaves(tree)]


def tree_size(tree) -> int:
    """Total number of scalar entries P."""
    return int(sum(leaf.size for _, leaf in _iter_leaves(tree)))


def flatten(tree) -> np.ndarray:
    """Concatenate all leaves (row-major) into a single float64 vector."""
    leaves = [leaf.ravel() for _, leaf in _iter_leaves(tree)]
    if not leaves:
        return np.zeros(0)
    return np.concatenate(leaves)


def unflatten(vector, template) -> ParamTree:
    """Rebuild a tree shaped like ``template`` from a flat vector.

    Inverse of :func:`flatten` for any vector of matching length.
    """
    vector = np.asarray(vector, dtype=np.float64).ravel()
    expected = tree_size(template)
    if vector.size != expected:
        raise DimensionError(
            f"flat vector has {vector.size} entries, template holds {expected}"
        )
    pos = 0

    def rebuild(node):
        nonlocal pos
        if isinstance(node, dict):
            return {key: rebuild(sub) for key, sub in node.items()}
        leaf = np.asarray(node)
        chunk = vector[pos : pos + leaf.size]
        pos += leaf.size
        return chunk.reshape(leaf.shape).copy()

    return rebuild(template)


def tree_map(fn: Callable[[np.ndarray], np.ndarray], tree) -> ParamTree:
    """Apply ``fn`` to every leaf, preserving structure."""
    if isinstance(tree, dict):
        return {key: tree_map(fn, sub) for key, sub in tree.items()}
    return fn(np.asarray(tree, dtype=np.float64))


def subtree_indices(template, prefix: tuple) -> np.ndarray:
    """Flat-vector indices of all leaves whose path starts with ``prefix``.

    Used to build sub-network masks (e.g. last-layer Laplace): the returned
    indices select the masked coordinates out of the length-P flat vector.
    """
    prefix = tuple(prefix)
    offset = 0
    picked = []
    for path, leaf in _iter_leaves(template):
        if path[: len(prefix)] == prefix:
            picked.append(np.arange(offset, offset + leaf.size))
        offset += leaf.size
    if not picked:
        return np.zeros(0, dtype=np.intp)
    return np.concatenate(picked)
