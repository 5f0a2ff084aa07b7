"""Subgraph-based bundle recommendation.

The pipeline: load or synthesize tripartite interactions (users, bundles,
items), split the user-bundle relation, build an immutable training graph,
extract k-hop enclosing subgraphs around user-bundle pairs, score them with
a relational propagation model, train with a pairwise ranking loss, and
evaluate top-K ranking quality in-domain or across domains.
"""

from .data import (
    InteractionDataset,
    PairList,
    Split,
    TrainingTriple,
    build_dataset,
    load_interactions,
    load_split,
    sample_negatives,
    save_split,
    split_train_test,
)
from .graphstore import GraphStore, NodeRef, Relation, build_graph
from .subgraph import (
    EnclosingSubgraph,
    SamplingCaps,
    TypedNode,
    extract_subgraph,
    relation_edge_lists,
)
from .model import (
    EntityCounts,
    ModelConfig,
    ModelParams,
    Score,
    SubgraphState,
    aggregate,
    forward,
    init_params,
    node_features,
    propagate_layer,
    score,
    similarity_factors,
)
from .training import (
    Checkpoint,
    TrainConfig,
    backward,
    bpr_loss,
    forward_pair,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evaluation import (
    MetricsReport,
    RankingTask,
    evaluate,
    ndcg_at_k,
    rank_bundles,
    recall_at_k,
    transfer_evaluate,
)
from .synth import SynthConfig, generate, generate_domain_pair

__version__ = "0.1.0"

__all__ = [
    "InteractionDataset",
    "PairList",
    "Split",
    "TrainingTriple",
    "build_dataset",
    "load_interactions",
    "load_split",
    "sample_negatives",
    "save_split",
    "split_train_test",
    "GraphStore",
    "NodeRef",
    "Relation",
    "build_graph",
    "EnclosingSubgraph",
    "SamplingCaps",
    "TypedNode",
    "extract_subgraph",
    "relation_edge_lists",
    "EntityCounts",
    "ModelConfig",
    "ModelParams",
    "Score",
    "SubgraphState",
    "aggregate",
    "forward",
    "init_params",
    "node_features",
    "propagate_layer",
    "score",
    "similarity_factors",
    "Checkpoint",
    "TrainConfig",
    "backward",
    "bpr_loss",
    "forward_pair",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "MetricsReport",
    "RankingTask",
    "evaluate",
    "ndcg_at_k",
    "rank_bundles",
    "recall_at_k",
    "transfer_evaluate",
    "SynthConfig",
    "generate",
    "generate_domain_pair",
    "__version__",
]
