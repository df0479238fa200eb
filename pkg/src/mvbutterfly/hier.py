"""Point sets and complete binary partition trees built by recursive bisection."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


class NodeRef(NamedTuple):
    level: int
    pos: int


def as_points(points) -> np.ndarray:
    """Validate a point set and return it as an ``(n, dim)`` float array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1 or not 1 <= pts.shape[1] <= 3:
        raise ValueError(f"expected n >= 1 points of dimension 1-3, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def read_points(path) -> np.ndarray:
    """Read one point per line; columns separated by commas and/or whitespace."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(tok) for tok in re.split(r"[,\s]+", line) if tok])
    return as_points(rows)


@dataclass(frozen=True, eq=False)
class PartitionTree:
    """Complete binary tree of depth ``L`` over ``n`` points.

    ``perm[i]`` is the original index of the point stored at tree position
    ``i``; every node owns a contiguous range of tree positions. ``bounds``
    holds the ``2**L + 1`` leaf boundaries.
    """

    perm: np.ndarray
    bounds: np.ndarray
    L: int

    def __post_init__(self):
        if self.bounds.shape != (2**self.L + 1,):
            raise ValueError("bounds must have 2**L + 1 entries")
        if self.bounds[0] != 0 or self.bounds[-1] != self.perm.size:
            raise ValueError("leaf bounds must cover [0, n)")
        if np.any(np.diff(self.bounds) < 1):
            raise ValueError("every leaf must hold at least one point")

    @property
    def n(self) -> int:
        return int(self.perm.size)

    @property
    def iperm(self) -> np.ndarray:
        """Original index -> tree position."""
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def _check(self, level: int, pos: int):
        if not 0 <= level <= self.L:
            raise ValueError(f"level {level} outside [0, {self.L}]")
        if not 0 <= pos < 2**level:
            raise ValueError(f"position {pos} outside [0, {2**level}) at level {level}")

    def node_range(self, level: int, pos: int) -> tuple[int, int]:
        self._check(level, pos)
        shift = self.L - level
        return int(self.bounds[pos << shift]), int(self.bounds[(pos + 1) << shift])

    def node_size(self, level: int, pos: int) -> int:
        a, b = self.node_range(level, pos)
        return b - a

    def level_sizes(self, level: int) -> np.ndarray:
        self._check(level, 0)
        return np.diff(self.bounds[:: 2 ** (self.L - level)])

    def indices(self, level: int, pos: int) -> np.ndarray:
        """Original indices of the points in a node."""
        a, b = self.node_range(level, pos)
        return self.perm[a:b]

    def children(self, node) -> tuple[NodeRef, NodeRef]:
        level, pos = node
        self._check(level, pos)
        if level >= self.L:
            raise ValueError(f"leaf node {tuple(node)} has no children")
        return NodeRef(level + 1, 2 * pos), NodeRef(level + 1, 2 * pos + 1)

    def parent(self, node) -> NodeRef:
        level, pos = node
        self._check(level, pos)
        if level == 0:
            raise ValueError("the root has no parent")
        return NodeRef(level - 1, pos // 2)


def node_children(tree: PartitionTree, node) -> tuple[NodeRef, NodeRef]:
    return tree.children(node)


def node_parent(tree: PartitionTree, node) -> NodeRef:
    return tree.parent(node)


def _split_sizes(n: int, L: int) -> np.ndarray:
    """Leaf boundaries of repeated floor/ceil halving."""
    sizes = [n]
    for _ in range(L):
        sizes = [h for s in sizes for h in ((s + 1) // 2, s // 2)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def build_tree(points, L: int) -> PartitionTree:
    """Bisect along the longest bounding-box axis until depth ``L``.

    Each split puts the ``ceil(k/2)`` smallest coordinates on the left. Points
    keep their incoming relative order inside each child, so running the
    builder on already tree-ordered points returns the identity permutation.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if L < 0 or 2**L > n:
        raise ValueError(f"cannot build a complete tree of depth {L} over {n} points")
    order = np.arange(n)
    segments = [(0, n)]
    for _ in range(L):
        nxt = []
        for a, b in segments:
            idx = order[a:b]
            sub = pts[idx]
            axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
            half = (b - a + 1) // 2
            ranked = np.argsort(sub[:, axis], kind="stable")
            left = np.zeros(b - a, dtype=bool)
            left[ranked[:half]] = True
            order[a:b] = np.concatenate([idx[left], idx[~left]])
            nxt += [(a, a + half), (a + half, b)]
        segments = nxt
    return PartitionTree(order, _split_sizes(n, L), L)


def uniform_tree(n: int, L: int) -> PartitionTree:
    """Identity-ordered tree with balanced leaves (same as bisecting sorted 1-D points)."""
    if L < 0 or 2**L > n:
        raise ValueError(f"cannot build a complete tree of depth {L} over {n} points")
    return PartitionTree(np.arange(n), _split_sizes(n, L), L)


def auto_levels(n: int, leaf_size: int = 32) -> int:
    """Depth putting leaf sizes in ``[leaf_size, 2 * leaf_size)``."""
    if n < 1 or leaf_size < 1:
        raise ValueError("n and leaf_size must be positive")
    if n < leaf_size:
        return 0
    return int(math.floor(math.log2(n / leaf_size)))
