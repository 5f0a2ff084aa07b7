"""Immutable tripartite adjacency over the training split.

Six directed relations connect users, bundles and items. The store is
built exclusively from train user-bundle pairs plus the full user-item
and bundle-item relations; test pairs never enter it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Split


class Relation(Enum):
    UB = ("user", "bundle")
    BU = ("bundle", "user")
    UI = ("user", "item")
    IU = ("item", "user")
    BI = ("bundle", "item")
    IB = ("item", "bundle")

    def __init__(self, src_class: str, dst_class: str):
        self.src_class = src_class
        self.dst_class = dst_class


# Fixed iteration order; extraction and propagation rely on it for determinism.
RELATIONS = (Relation.UB, Relation.BU, Relation.UI, Relation.IU, Relation.BI, Relation.IB)

_MIRROR = {
    Relation.UB: Relation.BU,
    Relation.BU: Relation.UB,
    Relation.UI: Relation.IU,
    Relation.IU: Relation.UI,
    Relation.BI: Relation.IB,
    Relation.IB: Relation.BI,
}


def mirror(rel: Relation) -> Relation:
    return _MIRROR[rel]


@dataclass(frozen=True)
class NodeRef:
    entity_class: str
    id: int


_EMPTY = np.empty(0, dtype=np.int64)


class GraphStore:
    """Relation-indexed adjacency with sorted target lists.

    Instances are immutable after construction and safe to share across
    any number of concurrent readers.
    """

    def __init__(self, adjacency, counts: dict[str, int]):
        self._adj = adjacency  # Relation -> list of sorted int64 arrays
        self._counts = counts
        self._bundle_items = [frozenset(targets.tolist()) for targets in adjacency[Relation.BI]]

    def count(self, entity_class: str) -> int:
        return self._counts[entity_class]

    @property
    def num_users(self) -> int:
        return self._counts["user"]

    @property
    def num_bundles(self) -> int:
        return self._counts["bundle"]

    @property
    def num_items(self) -> int:
        return self._counts["item"]

    def neighbors(self, node: NodeRef, rel: Relation) -> np.ndarray:
        """Sorted, duplicate-free targets of ``node`` under ``rel``."""
        if rel.src_class != node.entity_class:
            raise ValueError(
                f"relation {rel.name} starts at {rel.src_class!r}, not {node.entity_class!r}"
            )
        if not 0 <= node.id < self._counts[node.entity_class]:
            raise ValueError(f"{node.entity_class} id {node.id} out of range")
        return self._adj[rel][node.id]

    def targets(self, rel: Relation, src: int) -> np.ndarray:
        """Unchecked fast-path neighbor lookup (callers validated already)."""
        return self._adj[rel][src]

    def bundle_items(self, b: int) -> frozenset[int]:
        if not 0 <= b < self._counts["bundle"]:
            raise ValueError(f"bundle id {b} out of range")
        return self._bundle_items[b]

    def edge_count(self, rel: Relation) -> int:
        return int(sum(len(t) for t in self._adj[rel]))

    def dump_edges(self, path: str | os.PathLike) -> None:
        """Debug dump: one `RELATION src dst` line per directed edge."""
        with open(path, "w", encoding="utf-8") as fh:
            for rel in RELATIONS:
                for src, targets in enumerate(self._adj[rel]):
                    for dst in targets.tolist():
                        fh.write(f"{rel.name} {src} {dst}\n")


def _adjacency_from_pairs(pairs, n_src: int, n_dst: int):
    """Forward and reverse sorted adjacency for one undirected pair set."""
    fwd: list[list[int]] = [[] for _ in range(n_src)]
    rev: list[list[int]] = [[] for _ in range(n_dst)]
    for left, right in pairs:
        fwd[left].append(right)
        rev[right].append(left)
    fwd_arr = [np.array(sorted(t), dtype=np.int64) if t else _EMPTY for t in fwd]
    rev_arr = [np.array(sorted(t), dtype=np.int64) if t else _EMPTY for t in rev]
    return fwd_arr, rev_arr


def build_graph(split: Split) -> GraphStore:
    """Materialize the training-phase tripartite graph from a split."""
    counts = {
        "user": split.num_users,
        "bundle": split.num_bundles,
        "item": split.num_items,
    }
    ub, bu = _adjacency_from_pairs(split.train_ub.pairs, split.num_users, split.num_bundles)
    ui, iu = _adjacency_from_pairs(split.ui.pairs, split.num_users, split.num_items)
    bi, ib = _adjacency_from_pairs(split.bi.pairs, split.num_bundles, split.num_items)
    adjacency = {
        Relation.UB: ub,
        Relation.BU: bu,
        Relation.UI: ui,
        Relation.IU: iu,
        Relation.BI: bi,
        Relation.IB: ib,
    }
    return GraphStore(adjacency, counts)
