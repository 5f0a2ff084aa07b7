"""K-hop heterogeneous enclosing subgraphs around user-bundle pairs.

Extraction runs a joint BFS with both centers at level 0 over the
undirected view of the six relations; a node's hop is its first-discovery
level. Every store edge among included nodes is materialized (induced
semantics). In train mode the centered pair's own edge is removed in both
directions so the edge being predicted never participates in propagation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .graphstore import RELATIONS, GraphStore, NodeRef, Relation

CENTER_USER_TYPE = 0
CENTER_BUNDLE_TYPE = 1

# hop-k type codes per entity class: bundle 3k-1, user 3k, item 3k+1
_HOP_OFFSET = {"bundle": -1, "user": 0, "item": 1}


def type_code(entity_class: str, hop: int) -> int:
    if hop == 0:
        return CENTER_USER_TYPE if entity_class == "user" else CENTER_BUNDLE_TYPE
    return 3 * hop + _HOP_OFFSET[entity_class]


@dataclass(frozen=True)
class SamplingCaps:
    """Per-node per-relation neighbor cap during frontier expansion.

    ``None`` disables capping entirely (used by exactness tests).
    """

    per_relation: int | None = 50


@dataclass(frozen=True)
class TypedNode:
    node: NodeRef
    local_index: int
    hop: int
    type_code: int


@dataclass(frozen=True)
class EnclosingSubgraph:
    center_user: int
    center_bundle: int
    depth: int
    nodes: tuple[TypedNode, ...]
    edges: dict[Relation, np.ndarray]  # (E, 2) arrays of (src local, dst local)
    leakage_removed: bool
    bundle_item_sets: dict[int, frozenset[int]] = field(default_factory=dict, compare=False)

    def num_nodes(self) -> int:
        return len(self.nodes)

    def num_edges(self) -> int:
        return int(sum(len(e) for e in self.edges.values()))

    def local_indices(self, entity_class: str) -> np.ndarray:
        return np.array(
            [n.local_index for n in self.nodes if n.node.entity_class == entity_class],
            dtype=np.int64,
        )

    def identical_to(self, other: "EnclosingSubgraph") -> bool:
        """Field-by-field equality including edge arrays (bitwise comparison)."""
        if (
            self.center_user != other.center_user
            or self.center_bundle != other.center_bundle
            or self.depth != other.depth
            or self.leakage_removed != other.leakage_removed
            or self.nodes != other.nodes
        ):
            return False
        for rel in RELATIONS:
            if not np.array_equal(self.edges[rel], other.edges[rel]):
                return False
        return self.bundle_item_sets == other.bundle_item_sets

    def dump_text(self) -> str:
        """Debug form: node lines `local class id hop type`, edge lines `REL src dst`."""
        out = []
        for n in self.nodes:
            out.append(f"{n.local_index} {n.node.entity_class} {n.node.id} {n.hop} {n.type_code}")
        for rel in RELATIONS:
            for src, dst in self.edges[rel].tolist():
                out.append(f"{rel.name} {src} {dst}")
        return "\n".join(out) + "\n"


def _expand(store, node_id, rel, cap, rng, drop: int | None):
    """Neighbor list for frontier expansion, capped by uniform sampling."""
    targets = store.targets(rel, node_id)
    if drop is not None:
        targets = targets[targets != drop]
    if cap is not None and len(targets) > cap:
        chosen = rng.choice(len(targets), size=cap, replace=False)
        targets = targets[np.sort(chosen)]
    return targets


def extract_subgraph(
    store: GraphStore,
    u: int,
    b: int,
    k: int = 1,
    mode: str = "train",
    caps: SamplingCaps = SamplingCaps(),
    seed: int = 0,
) -> EnclosingSubgraph:
    """Extract the k-hop enclosing subgraph for the pair (u, b).

    In train mode the (u, b) edge and its mirror are absent from the result
    whether or not the store contains them, so extraction output is
    invariant to the presence of the target edge.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    if k < 1:
        raise ValueError(f"subgraph depth must be >= 1, got {k}")
    if not 0 <= u < store.num_users:
        raise ValueError(f"user id {u} out of range")
    if not 0 <= b < store.num_bundles:
        raise ValueError(f"bundle id {b} out of range")

    train_mode = mode == "train"
    rng = np.random.default_rng(seed)
    cap = caps.per_relation

    local: dict[tuple[str, int], int] = {("user", u): 0, ("bundle", b): 1}
    nodes = [
        TypedNode(NodeRef("user", u), 0, 0, CENTER_USER_TYPE),
        TypedNode(NodeRef("bundle", b), 1, 0, CENTER_BUNDLE_TYPE),
    ]
    frontier: list[tuple[str, int]] = [("user", u), ("bundle", b)]

    for hop in range(1, k + 1):
        discovered: list[tuple[str, int]] = []
        for cls, nid in frontier:
            for rel in RELATIONS:
                if rel.src_class != cls:
                    continue
                drop = None
                if train_mode:
                    # Keep train-mode output independent of the target edge:
                    # the centers never see each other through UB/BU.
                    if rel is Relation.UB and cls == "user" and nid == u:
                        drop = b
                    elif rel is Relation.BU and cls == "bundle" and nid == b:
                        drop = u
                for tgt in _expand(store, nid, rel, cap, rng, drop).tolist():
                    key = (rel.dst_class, tgt)
                    if key not in local:
                        local[key] = len(nodes)
                        nodes.append(
                            TypedNode(
                                NodeRef(rel.dst_class, tgt),
                                len(nodes),
                                hop,
                                type_code(rel.dst_class, hop),
                            )
                        )
                        discovered.append(key)
        frontier = discovered
        if not frontier:
            break

    # Induced edges: every store edge among included nodes. Per relation,
    # all source adjacency lists are concatenated once and matched against
    # the sorted included-id array of the destination class.
    by_class: dict[str, list[TypedNode]] = {"user": [], "bundle": [], "item": []}
    for n in nodes:
        by_class[n.node.entity_class].append(n)
    sorted_ids = {}
    sorted_locals = {}
    for cls, cls_nodes in by_class.items():
        ids = np.array([n.node.id for n in cls_nodes], dtype=np.int64)
        locs = np.array([n.local_index for n in cls_nodes], dtype=np.int64)
        order = np.argsort(ids)
        sorted_ids[cls] = ids[order]
        sorted_locals[cls] = locs[order]

    empty_edges = np.empty((0, 2), dtype=np.int64)
    edge_arrays: dict[Relation, np.ndarray] = {}
    for rel in RELATIONS:
        src_nodes = by_class[rel.src_class]
        if not src_nodes or not by_class[rel.dst_class]:
            edge_arrays[rel] = empty_edges
            continue
        adj_lists = [store.targets(rel, n.node.id) for n in src_nodes]
        lengths = np.array([len(a) for a in adj_lists], dtype=np.int64)
        if lengths.sum() == 0:
            edge_arrays[rel] = empty_edges
            continue
        cat = np.concatenate(adj_lists)
        src_rep = np.repeat(
            np.array([n.local_index for n in src_nodes], dtype=np.int64), lengths
        )
        ids = sorted_ids[rel.dst_class]
        pos = np.searchsorted(ids, cat)
        pos_clipped = np.minimum(pos, len(ids) - 1)
        hit = ids[pos_clipped] == cat
        src_local = src_rep[hit]
        dst_local = sorted_locals[rel.dst_class][pos_clipped[hit]]
        if train_mode:
            if rel is Relation.UB:
                keep = ~((src_local == 0) & (dst_local == 1))
                src_local, dst_local = src_local[keep], dst_local[keep]
            elif rel is Relation.BU:
                keep = ~((src_local == 1) & (dst_local == 0))
                src_local, dst_local = src_local[keep], dst_local[keep]
        edge_arrays[rel] = (
            np.stack([src_local, dst_local], axis=1)
            if len(src_local)
            else empty_edges
        )

    item_sets = {
        n.node.id: store.bundle_items(n.node.id)
        for n in nodes
        if n.node.entity_class == "bundle"
    }

    return EnclosingSubgraph(
        center_user=u,
        center_bundle=b,
        depth=k,
        nodes=tuple(nodes),
        edges=edge_arrays,
        leakage_removed=train_mode,
        bundle_item_sets=item_sets,
    )


def relation_edge_lists(sg: EnclosingSubgraph) -> dict[Relation, np.ndarray]:
    """Per-relation (E, 2) local-index edge arrays in deterministic order."""
    return {rel: sg.edges[rel] for rel in RELATIONS}


def pair_seed(base_seed: int, u: int, b: int) -> int:
    """Stable per-pair extraction seed derived from a base seed."""
    return int(np.random.SeedSequence((base_seed, u, b)).generate_state(1)[0])


def dump_subgraph(sg: EnclosingSubgraph, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sg.dump_text())
