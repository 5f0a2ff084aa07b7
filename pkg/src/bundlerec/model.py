"""Relational propagation over enclosing subgraphs.

A subgraph is mapped to a preference probability in four steps: node
features are initialized from the hop type one-hot plus a learned free
embedding, L two-part relational layers refine user/bundle/item
embeddings (with bundle-similarity factors reweighting bundle messages
into users), the centers' per-stage embeddings are concatenated, and a
two-layer MLP with a final sigmoid produces the score.

All heavy math goes through :mod:`bundlerec.autodiff` ops, so the same
code path serves plain inference (ndarrays in, ndarrays out) and traced
training (Vars in, gradient-ready graph out).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .graphstore import Relation
from .subgraph import EnclosingSubgraph

ENTITY_CLASSES = ("user", "bundle", "item")

# Per consumer class: (relation feeding it, weight attr, bias attr,
# whether messages are scaled by the bundle similarity factors).
PART_SPECS = {
    "bundle": (
        (Relation.IB, "w_item_bundle", "b_item_bundle", False),
        (Relation.UB, "w_user_bundle", "b_user_bundle", False),
    ),
    "user": (
        (Relation.IU, "w_item_user", "b_item_user", False),
        (Relation.BU, "w_bundle_user", "b_bundle_user", True),
    ),
    "item": (
        (Relation.UI, "w_user_item", "b_user_item", False),
        (Relation.BI, "w_bundle_item", "b_bundle_item", False),
    ),
}

WEIGHT_ATTRS = (
    ("w_item_bundle", "b_item_bundle"),
    ("w_user_bundle", "b_user_bundle"),
    ("w_item_user", "b_item_user"),
    ("w_bundle_user", "b_bundle_user"),
    ("w_user_item", "b_user_item"),
    ("w_bundle_item", "b_bundle_item"),
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    num_layers: int = 4
    depth: int = 1
    leaky_slope: float = 0.01
    type_dim: int = 32
    free_dim: int = 32
    mlp_hidden: int = 128
    sigma_init: float = 0.1

    def __post_init__(self):
        if self.embed_dim % 2 != 0:
            raise ModelError("embed_dim must be even")
        if self.num_layers < 1:
            raise ModelError("num_layers must be >= 1")
        if self.type_dim + self.free_dim != self.embed_dim:
            raise ModelError("type_dim + free_dim must equal embed_dim")
        if self.type_dim < 3 * self.depth + 2:
            raise ModelError(
                f"type_dim {self.type_dim} too small for depth {self.depth}: need >= {3 * self.depth + 2}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ModelError("leaky_slope must lie in (0, 1)")
        if self.mlp_hidden < 1:
            raise ModelError("mlp_hidden must be >= 1")

    @property
    def stage_count(self) -> int:
        return self.num_layers + 1

    @property
    def mlp_in(self) -> int:
        return 2 * self.stage_count * self.embed_dim


@dataclass(frozen=True)
class EntityCounts:
    num_users: int
    num_bundles: int
    num_items: int

    def for_class(self, entity_class: str) -> int:
        return {
            "user": self.num_users,
            "bundle": self.num_bundles,
            "item": self.num_items,
        }[entity_class]


@dataclass
class LayerParams:
    w_item_bundle: np.ndarray
    b_item_bundle: np.ndarray
    w_user_bundle: np.ndarray
    b_user_bundle: np.ndarray
    w_item_user: np.ndarray
    b_item_user: np.ndarray
    w_bundle_user: np.ndarray
    b_bundle_user: np.ndarray
    w_user_item: np.ndarray
    b_user_item: np.ndarray
    w_bundle_item: np.ndarray
    b_bundle_item: np.ndarray


@dataclass
class ModelParams:
    """All learnable tensors: free-embedding tables, per-layer relation
    weights/biases, and the shared two-layer scoring MLP."""

    user_free: np.ndarray
    bundle_free: np.ndarray
    item_free: np.ndarray
    layers: list[LayerParams]
    mlp_w1: np.ndarray
    mlp_w2: np.ndarray

    def free_table(self, entity_class: str) -> np.ndarray:
        return {
            "user": self.user_free,
            "bundle": self.bundle_free,
            "item": self.item_free,
        }[entity_class]

    def weight_items(self) -> list[tuple[str, np.ndarray]]:
        """Non-table tensors in a fixed order (layer weights, then the MLP)."""
        out = []
        for li, layer in enumerate(self.layers):
            for w_attr, b_attr in WEIGHT_ATTRS:
                out.append((f"layer{li}.{w_attr}", getattr(layer, w_attr)))
                out.append((f"layer{li}.{b_attr}", getattr(layer, b_attr)))
        out.append(("mlp.w1", self.mlp_w1))
        out.append(("mlp.w2", self.mlp_w2))
        return out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [
            ("free.user", self.user_free),
            ("free.bundle", self.bundle_free),
            ("free.item", self.item_free),
        ]
        out.extend(self.weight_items())
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            user_free=self.user_free.copy(),
            bundle_free=self.bundle_free.copy(),
            item_free=self.item_free.copy(),
            layers=[
                LayerParams(**{a: getattr(l, a).copy() for pair in WEIGHT_ATTRS for a in pair})
                for l in self.layers
            ],
            mlp_w1=self.mlp_w1.copy(),
            mlp_w2=self.mlp_w2.copy(),
        )


@dataclass(frozen=True)
class Score:
    logit: float
    probability: float


@dataclass(frozen=True)
class SubgraphState:
    """Per-node embeddings after each stage; stages[0] is the initial features."""

    stages: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SimilarityFactors:
    """delta per bundle node (keyed by local index) plus the chosen base."""

    deltas: dict[int, float]
    base_local: int
    degenerate: bool = False


def init_params(config: ModelConfig, counts: EntityCounts, seed: int) -> ModelParams:
    """Gaussian free embeddings, fan-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def table(n):
        return rng.normal(0.0, config.sigma_init, size=(n, config.free_dim))

    user_free = table(counts.num_users)
    bundle_free = table(counts.num_bundles)
    item_free = table(counts.num_items)

    def fan_normal(shape):
        std = np.sqrt(2.0 / (shape[0] + shape[1]))
        return rng.normal(0.0, std, size=shape)

    layers = []
    for _ in range(config.num_layers):
        fields = {}
        for w_attr, b_attr in WEIGHT_ATTRS:
            fields[w_attr] = fan_normal((d, d))
            fields[b_attr] = np.zeros(d)
        layers.append(LayerParams(**fields))

    mlp_w1 = fan_normal((config.mlp_hidden, config.mlp_in))
    mlp_w2 = fan_normal((1, config.mlp_hidden))
    return ModelParams(user_free, bundle_free, item_free, layers, mlp_w1, mlp_w2)


# ---------------------------------------------------------------------------
# Subgraph compute plan: index structures reused by every forward over the
# same subgraph. Cached on the subgraph instance.
# ---------------------------------------------------------------------------


class _PartPlan:
    __slots__ = (
        "w_name",
        "b_name",
        "src_local",
        "dst_pos",
        "src_bundle_pos",
        "indeg",
        "inv_deg",
        "has_edges",
        "dst_order",
        "dst_starts",
        "dst_rows",
        "src_order",
        "src_starts",
        "src_rows",
    )

    def __init__(self, sg, rel, w_attr, b_attr, delta_scaled, class_size, pos_in_class):
        self.w_name = w_attr
        self.b_name = b_attr
        edges = sg.edges[rel]
        self.src_local = edges[:, 0]
        self.dst_pos = pos_in_class[edges[:, 1]]
        self.src_bundle_pos = pos_in_class[edges[:, 0]] if delta_scaled else None
        self.indeg = np.bincount(self.dst_pos, minlength=class_size).astype(np.float64)
        with np.errstate(divide="ignore"):
            inv = 1.0 / self.indeg
        inv[self.indeg == 0] = 0.0
        self.inv_deg = inv
        self.has_edges = len(edges) > 0
        if self.has_edges:
            # Segment-sum layout for both directions: forward sums messages
            # into destinations, backward sums output grads into sources.
            self.dst_order, self.dst_starts, self.dst_rows = _segments(self.dst_pos)
            self.src_order, self.src_starts, self.src_rows = _segments(self.src_local)


def _segments(idx: np.ndarray):
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    is_start = np.empty(len(sorted_idx), dtype=bool)
    is_start[0] = True
    np.not_equal(sorted_idx[1:], sorted_idx[:-1], out=is_start[1:])
    starts = np.flatnonzero(is_start)
    return order, starts, sorted_idx[starts]


class _Plan:
    __slots__ = (
        "n",
        "class_idx",
        "global_ids",
        "pos_in_class",
        "parts",
        "comb_inv",
        "carry",
        "type_codes",
        "bundle_ids",
        "bundle_sets",
        "_onehots",
    )

    def __init__(self, sg: EnclosingSubgraph):
        self.n = len(sg.nodes)
        self.class_idx = {}
        self.global_ids = {}
        self.pos_in_class = np.zeros(self.n, dtype=np.int64)
        locals_by_cls = {cls: [] for cls in ENTITY_CLASSES}
        ids_by_cls = {cls: [] for cls in ENTITY_CLASSES}
        for nd in sg.nodes:
            locals_by_cls[nd.node.entity_class].append(nd.local_index)
            ids_by_cls[nd.node.entity_class].append(nd.node.id)
        for cls in ENTITY_CLASSES:
            idx = np.array(locals_by_cls[cls], dtype=np.int64)
            self.class_idx[cls] = idx
            self.global_ids[cls] = np.array(ids_by_cls[cls], dtype=np.int64)
            self.pos_in_class[idx] = np.arange(len(idx))

        self.parts = {}
        self.comb_inv = {}
        self.carry = {}
        for cls in ENTITY_CLASSES:
            size = len(self.class_idx[cls])
            plans = [
                _PartPlan(sg, rel, w, b, scaled, size, self.pos_in_class)
                for rel, w, b, scaled in PART_SPECS[cls]
            ]
            self.parts[cls] = plans
            n_present = sum((p.indeg > 0).astype(np.float64) for p in plans)
            self.comb_inv[cls] = 1.0 / np.maximum(n_present, 1.0)
            self.carry[cls] = (n_present == 0).astype(np.float64)

        self.type_codes = np.array([nd.type_code for nd in sg.nodes], dtype=np.int64)
        self.bundle_ids = self.global_ids["bundle"]
        self.bundle_sets = [sg.bundle_item_sets[int(b)] for b in self.bundle_ids]
        self._onehots = {}

    def onehot(self, type_dim: int) -> np.ndarray:
        cached = self._onehots.get(type_dim)
        if cached is None:
            if int(self.type_codes.max()) >= type_dim:
                raise ModelError(
                    f"type code {int(self.type_codes.max())} out of range for type_dim {type_dim}"
                )
            cached = np.zeros((self.n, type_dim))
            cached[np.arange(self.n), self.type_codes] = 1.0
            self._onehots[type_dim] = cached
        return cached


def _plan_for(sg: EnclosingSubgraph) -> _Plan:
    plan = getattr(sg, "_plan", None)
    if plan is None:
        plan = _Plan(sg)
        object.__setattr__(sg, "_plan", plan)
    return plan


# ---------------------------------------------------------------------------
# Forward pieces. Each takes Var-or-ndarray tensors and stays on whichever
# side its inputs are on.
# ---------------------------------------------------------------------------


def _features(plan: _Plan, config: ModelConfig, free_rows) -> object:
    """Stage-0 embeddings: [type one-hot || free embedding] per node."""
    type_block = plan.onehot(config.type_dim)
    free_block = None
    for cls in ENTITY_CLASSES:
        idx = plan.class_idx[cls]
        if len(idx) == 0:
            continue
        rows = free_rows(cls, plan.global_ids[cls])
        if value_of(rows).shape[1] != config.free_dim:
            raise ModelError(
                f"free table width {value_of(rows).shape[1]} != free_dim {config.free_dim}"
            )
        block = ad.scatter_rows(rows, idx, plan.n)
        free_block = block if free_block is None else ad.add(free_block, block)
    return ad.concat_cols([type_block, free_block])


def _fold_mlp_halves(w1: np.ndarray, d: int, reps: int):
    """Collapse the repeat-(L+1) structure of the similarity MLP input.

    Tiling a d-vector reps times and applying the left/right half of w1
    equals applying the sum of the corresponding d-column blocks once.
    """
    half = w1[:, : reps * d]
    fold_u = sum(half[:, j * d : (j + 1) * d] for j in range(reps))
    half = w1[:, reps * d :]
    fold_b = sum(half[:, j * d : (j + 1) * d] for j in range(reps))
    return fold_u, fold_b


def _similarity(plan: _Plan, h_val: np.ndarray, fold_u, fold_b, mlp_w2: np.ndarray):
    """Per-bundle similarity factors from the current stage embeddings.

    Value-only: the base-bundle argmax is piecewise constant in the
    parameters, so no gradient flows through this computation.
    """
    nb = len(plan.bundle_ids)
    if nb == 1:
        base_pos = 0
    else:
        bundle_rows = h_val[plan.class_idx["bundle"]]
        u_term = h_val[0] @ fold_u.T
        hidden = np.maximum(u_term[None, :] + bundle_rows @ fold_b.T, 0.0)
        ratings = ad.sigmoid(hidden @ mlp_w2.T)[:, 0]
        best = ratings.max()
        tied = np.flatnonzero(ratings == best)
        base_pos = int(tied[np.argmin(plan.bundle_ids[tied])])
    base_set = plan.bundle_sets[base_pos]
    if len(base_set) == 0:
        return np.ones(nb), base_pos, True
    denom = float(len(base_set))
    deltas = np.fromiter(
        (1.0 + len(s & base_set) / denom for s in plan.bundle_sets),
        dtype=np.float64,
        count=nb,
    )
    return deltas, base_pos, False


def _part_update(h, part: _PartPlan, class_idx: np.ndarray, w, b, deltas, slope: float):
    """Fused two-stage part update: out = inv_deg * leaky(W(e_self + sum msgs) + b).

    One tape node covering gather, optional delta scaling, segment sum,
    affine map, activation and degree normalization.
    """
    tape = ad.tape_of(h, w, b)
    hv, wv, bv = value_of(h), value_of(w), value_of(b)
    msgs = hv[part.src_local]
    edge_scale = None
    if part.src_bundle_pos is not None:
        edge_scale = deltas[part.src_bundle_pos][:, None]
        msgs = msgs * edge_scale
    sa = hv[class_idx].copy()
    seg = np.add.reduceat(msgs[part.dst_order], part.dst_starts, axis=0)
    sa[part.dst_rows] += seg
    pre = sa @ wv.T + bv
    act = np.where(pre > 0, pre, slope * pre)
    out = act * part.inv_deg[:, None]
    if tape is None:
        return out

    def back(g):
        g_pre = (g * part.inv_deg[:, None]) * np.where(pre > 0, 1.0, slope)
        if isinstance(b, ad.Var):
            ad.accumulate(b, g_pre.sum(axis=0))
        if isinstance(w, ad.Var):
            ad.accumulate(w, g_pre.T @ sa)
        if isinstance(h, ad.Var):
            g_sa = g_pre @ wv
            gh = np.zeros_like(hv)
            gh[class_idx] = g_sa
            gm = g_sa[part.dst_pos]
            if edge_scale is not None:
                gm = gm * edge_scale
            # sources and consumers live in different entity classes, so the
            # two writes never collide
            gh[part.src_rows] += np.add.reduceat(gm[part.src_order], part.src_starts, axis=0)
            ad.accumulate(h, gh)

    return ad.Var(out, tape, back)


def _combine(h, plan: _Plan, part_outputs: dict[str, list]):
    """Fused per-layer combine: mean of present parts per node, carry-through
    for fully isolated nodes, and reassembly of the full (n, d) stage."""
    parents = [p for parts in part_outputs.values() for p in parts]
    tape = ad.tape_of(h, *parents)
    hv = value_of(h)
    out = np.zeros_like(hv)
    for cls in ENTITY_CLASSES:
        idx = plan.class_idx[cls]
        if len(idx) == 0:
            continue
        parts = part_outputs.get(cls, [])
        if parts:
            summed = value_of(parts[0])
            if len(parts) == 2:
                summed = summed + value_of(parts[1])
            out[idx] = (
                summed * plan.comb_inv[cls][:, None]
                + hv[idx] * plan.carry[cls][:, None]
            )
        else:
            out[idx] = hv[idx]
    if tape is None:
        return out

    def back(g):
        gh = np.zeros_like(hv)
        for cls in ENTITY_CLASSES:
            idx = plan.class_idx[cls]
            if len(idx) == 0:
                continue
            gc = g[idx]
            parts = part_outputs.get(cls, [])
            if parts:
                scaled = gc * plan.comb_inv[cls][:, None]
                for p in parts:
                    if isinstance(p, ad.Var):
                        ad.accumulate(p, scaled)
                gh[idx] = gc * plan.carry[cls][:, None]
            else:
                gh[idx] = gc
        if isinstance(h, ad.Var):
            ad.accumulate(h, gh)

    return ad.Var(out, tape, back)


def _layer(plan: _Plan, h, weights, layer_idx: int, deltas: np.ndarray, config: ModelConfig):
    """One propagation layer: per class, mean of the present two-part updates;
    nodes with no neighbors at all carry their embedding through."""
    part_outputs: dict[str, list] = {}
    for cls in ENTITY_CLASSES:
        idx = plan.class_idx[cls]
        if len(idx) == 0:
            continue
        outs = []
        for part in plan.parts[cls]:
            if not part.has_edges:
                continue
            w = weights[f"layer{layer_idx}.{part.w_name}"]
            b = weights[f"layer{layer_idx}.{part.b_name}"]
            outs.append(_part_update(h, part, idx, w, b, deltas, config.leaky_slope))
        part_outputs[cls] = outs
    return _combine(h, plan, part_outputs)


def _center_concat(stages):
    """Fused aggregation: [user stage rows || bundle stage rows] as one (1, w) row."""
    tape = ad.tape_of(*stages)
    vals = [value_of(s) for s in stages]
    pieces = [v[0] for v in vals] + [v[1] for v in vals]
    out = np.concatenate(pieces)[None, :]
    if tape is None:
        return out
    d = vals[0].shape[1]
    n_stages = len(stages)

    def back(g):
        row = g[0]
        for j, s in enumerate(stages):
            if isinstance(s, ad.Var):
                gh = np.zeros_like(vals[j])
                gh[0] = row[j * d : (j + 1) * d]
                gh[1] = row[(n_stages + j) * d : (n_stages + j + 1) * d]
                ad.accumulate(s, gh)

    return ad.Var(out, tape, back)


@dataclass
class ForwardTrace:
    """Everything the training side needs from one traced forward."""

    score: Score
    state: SubgraphState
    logit_node: object  # Var in traced mode, (1,1) ndarray otherwise
    degenerate_delta_layers: int


def run_forward(
    sg: EnclosingSubgraph,
    config: ModelConfig,
    weights,
    free_rows,
    mlp_fold=None,
) -> ForwardTrace:
    """Shared forward path; ``weights`` maps tensor names to Var or ndarray,
    ``free_rows(cls, ids)`` yields the gathered free-embedding rows.
    ``mlp_fold`` lets callers reuse the folded similarity-MLP halves while
    the MLP weights are unchanged."""
    plan = _plan_for(sg)
    h = _features(plan, config, free_rows)
    stages = [h]
    w1v = value_of(weights["mlp.w1"])
    w2v = value_of(weights["mlp.w2"])
    if w1v.shape[1] != config.mlp_in:
        raise ModelError(f"mlp.w1 expects input width {w1v.shape[1]}, config says {config.mlp_in}")
    fold_u, fold_b = mlp_fold if mlp_fold is not None else _fold_mlp_halves(
        w1v, config.embed_dim, config.stage_count
    )
    degenerate = 0
    for li in range(config.num_layers):
        deltas, _, degen = _similarity(plan, value_of(h), fold_u, fold_b, w2v)
        degenerate += int(degen)
        h = _layer(plan, h, weights, li, deltas, config)
        stages.append(h)

    e_sub = _center_concat(stages)
    hidden = ad.relu(ad.linear(e_sub, weights["mlp.w1"]))
    logit_node = ad.linear(hidden, weights["mlp.w2"])

    logit = float(value_of(logit_node)[0, 0])
    probability = float(ad.sigmoid(np.array([logit]))[0])
    state = SubgraphState(stages=tuple(np.asarray(value_of(st)) for st in stages))
    return ForwardTrace(
        score=Score(logit=logit, probability=probability),
        state=state,
        logit_node=logit_node,
        degenerate_delta_layers=degenerate,
    )


def _value_weights(params: ModelParams) -> dict[str, np.ndarray]:
    return dict(params.weight_items())


def _value_free_rows(params: ModelParams):
    def lookup(cls, ids):
        return params.free_table(cls)[ids]

    return lookup


def forward(
    sg: EnclosingSubgraph, params: ModelParams, config: ModelConfig, _fold=None
) -> tuple[Score, SubgraphState]:
    """Plain inference forward: subgraph in, (score, per-stage state) out."""
    trace = run_forward(
        sg, config, _value_weights(params), _value_free_rows(params), mlp_fold=_fold
    )
    return trace.score, trace.state


# ---------------------------------------------------------------------------
# Public single-step operations (plain-value wrappers over the same code the
# full forward uses).
# ---------------------------------------------------------------------------


def node_features(sg: EnclosingSubgraph, params: ModelParams, config: ModelConfig) -> np.ndarray:
    return np.asarray(_features(_plan_for(sg), config, _value_free_rows(params)))


def similarity_factors(
    sg: EnclosingSubgraph, h: np.ndarray, params: ModelParams, config: ModelConfig
) -> SimilarityFactors:
    plan = _plan_for(sg)
    fold_u, fold_b = _fold_mlp_halves(params.mlp_w1, config.embed_dim, config.stage_count)
    deltas, base_pos, degenerate = _similarity(plan, h, fold_u, fold_b, params.mlp_w2)
    local = plan.class_idx["bundle"]
    return SimilarityFactors(
        deltas={int(local[i]): float(deltas[i]) for i in range(len(local))},
        base_local=int(local[base_pos]),
        degenerate=degenerate,
    )


def propagate_layer(
    sg: EnclosingSubgraph,
    h: np.ndarray,
    layer_params: LayerParams,
    deltas: SimilarityFactors | dict[int, float],
    config: ModelConfig,
    layer_idx: int = 0,
) -> np.ndarray:
    plan = _plan_for(sg)
    delta_map = deltas.deltas if isinstance(deltas, SimilarityFactors) else deltas
    arr = np.ones(len(plan.bundle_ids))
    for pos, local in enumerate(plan.class_idx["bundle"]):
        arr[pos] = delta_map.get(int(local), 1.0)
    weights = {}
    for w_attr, b_attr in WEIGHT_ATTRS:
        weights[f"layer{layer_idx}.{w_attr}"] = getattr(layer_params, w_attr)
        weights[f"layer{layer_idx}.{b_attr}"] = getattr(layer_params, b_attr)
    return np.asarray(_layer(plan, h, weights, layer_idx, arr, config))


def aggregate(state: SubgraphState, sg: EnclosingSubgraph) -> np.ndarray:
    """Concatenate the centers' stage embeddings: [user stages || bundle stages]."""
    user_parts = [st[0:1] for st in state.stages]
    bundle_parts = [st[1:2] for st in state.stages]
    return np.concatenate(user_parts + bundle_parts, axis=1)


def score(e_sub: np.ndarray, params: ModelParams) -> Score:
    if e_sub.shape[1] != params.mlp_w1.shape[1]:
        raise ModelError(
            f"aggregated width {e_sub.shape[1]} does not match mlp input {params.mlp_w1.shape[1]}"
        )
    hidden = np.maximum(e_sub @ params.mlp_w1.T, 0.0)
    logit = float((hidden @ params.mlp_w2.T)[0, 0])
    return Score(logit=logit, probability=float(ad.sigmoid(np.array([logit]))[0]))
