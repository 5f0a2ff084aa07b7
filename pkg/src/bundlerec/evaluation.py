"""Top-K ranking evaluation and the cross-domain transfer protocol.

Each test user ranks the full bundle catalog minus their train positives
(a sampled-candidate policy exists for very large catalogs). Recall@K and
NDCG@K are averaged over users with at least one test positive; users
without test positives are skipped and counted.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Split
from .graphstore import GraphStore, Relation, build_graph
from .model import EntityCounts, ModelConfig, ModelParams, forward, init_params
from .subgraph import SamplingCaps, extract_subgraph, pair_seed
from .training import Checkpoint


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RankingTask:
    user: int
    relevant: frozenset[int]
    candidates: tuple[int, ...]

    def __post_init__(self):
        if not self.relevant <= set(self.candidates):
            raise EvaluationError("relevant bundles must be a subset of the candidates")


@dataclass(frozen=True)
class MetricsReport:
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    users_skipped: int
    metadata: dict[str, str] = field(default_factory=dict)


def recall_at_k(ranked, relevant, k: int) -> float:
    """|top-K intersect relevant| / |relevant|."""
    if k < 1:
        raise EvaluationError("K must be >= 1")
    if not relevant:
        raise EvaluationError("recall undefined for an empty relevant set")
    hits = sum(1 for b in ranked[:k] if b in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance NDCG with 1-based log2(p+1) position discount."""
    if k < 1:
        raise EvaluationError("K must be >= 1")
    if not relevant:
        raise EvaluationError("ndcg undefined for an empty relevant set")
    dcg = 0.0
    for pos, b in enumerate(ranked[:k], start=1):
        if b in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(pos + 1) for pos in range(1, min(k, len(relevant)) + 1))
    return float(dcg / ideal)


# A scorer maps (user, bundle) to a preference score; higher ranks earlier.
Scorer = Callable[[int, int], float]


def model_scorer(
    params: ModelParams,
    store: GraphStore,
    config: ModelConfig,
    caps: SamplingCaps = SamplingCaps(),
    seed: int = 0,
) -> Scorer:
    """Score pairs via inference-mode subgraph extraction plus a forward pass."""
    from .model import _fold_mlp_halves

    fold = _fold_mlp_halves(params.mlp_w1, config.embed_dim, config.stage_count)

    def scorer(u: int, b: int) -> float:
        sg = extract_subgraph(store, u, b, config.depth, "inference", caps, pair_seed(seed, u, b))
        sc, _ = forward(sg, params, config, _fold=fold)
        return sc.probability

    return scorer


def popularity_scorer(store: GraphStore) -> Scorer:
    """Harness baseline: rank bundles by train interaction count."""
    counts = np.array(
        [len(store.targets(Relation.BU, b)) for b in range(store.num_bundles)]
    )
    return lambda u, b: float(counts[b])


def perfect_scorer(split: Split) -> Scorer:
    """Test hook: scores 1 exactly on test positives."""
    test = split.test_ub.pairs
    return lambda u, b: 1.0 if (u, b) in test else 0.0


def rank_candidates(scorer: Scorer, task: RankingTask) -> list[int]:
    scored = [(-scorer(task.user, c), c) for c in task.candidates]
    scored.sort()
    return [c for _, c in scored]


def rank_bundles(
    params: ModelParams,
    store: GraphStore,
    task: RankingTask,
    config: ModelConfig,
    caps: SamplingCaps = SamplingCaps(),
    seed: int = 0,
) -> list[int]:
    """Candidates sorted by descending probability, ties by ascending id."""
    return rank_candidates(model_scorer(params, store, config, caps, seed), task)


def build_tasks(
    split: Split,
    candidate_policy: str = "all",
    sampled_n: int = 0,
    sampled_seed: int = 0,
) -> tuple[list[RankingTask], int]:
    """Ranking tasks for every user with a test positive, plus the skip count."""
    train_by_user: dict[int, set[int]] = {}
    for u, b in split.train_ub.pairs:
        train_by_user.setdefault(u, set()).add(b)
    test_by_user: dict[int, set[int]] = {}
    for u, b in split.test_ub.pairs:
        test_by_user.setdefault(u, set()).add(b)

    considered = sorted(set(train_by_user) | set(test_by_user))
    tasks = []
    skipped = 0
    for u in considered:
        relevant = test_by_user.get(u, set())
        if not relevant:
            skipped += 1
            continue
        train_pos = train_by_user.get(u, set())
        if candidate_policy == "all":
            candidates = tuple(b for b in range(split.num_bundles) if b not in train_pos)
        elif candidate_policy == "sampled":
            if sampled_n < 1:
                raise EvaluationError("sampled candidate policy needs n >= 1")
            rng = np.random.default_rng(np.random.SeedSequence((sampled_seed, u)))
            pool = np.array(
                [b for b in range(split.num_bundles) if b not in train_pos and b not in relevant],
                dtype=np.int64,
            )
            take = min(sampled_n, len(pool))
            chosen = rng.choice(pool, size=take, replace=False) if take else pool[:0]
            candidates = tuple(sorted(set(chosen.tolist()) | relevant))
        else:
            raise EvaluationError(f"unknown candidate policy {candidate_policy!r}")
        tasks.append(RankingTask(user=u, relevant=frozenset(relevant), candidates=candidates))
    return tasks, skipped


_WORKER_CTX: dict = {}


def _eval_one_user(task: RankingTask, scorer: Scorer, ks) -> tuple[dict, dict]:
    ranked = rank_candidates(scorer, task)
    rec = {k: recall_at_k(ranked, task.relevant, k) for k in ks}
    ndc = {k: ndcg_at_k(ranked, task.relevant, k) for k in ks}
    return rec, ndc


def _worker_eval(indices):
    ctx = _WORKER_CTX
    scorer = model_scorer(
        ctx["params"], ctx["store"], ctx["config"], ctx["caps"], ctx["seed"]
    )
    return [
        (i, *_eval_one_user(ctx["tasks"][i], scorer, ctx["ks"]))
        for i in indices
    ]


def evaluate(
    params: ModelParams | None,
    store: GraphStore,
    split: Split,
    ks=(20, 40, 80),
    candidate_policy: str = "all",
    *,
    config: ModelConfig | None = None,
    caps: SamplingCaps = SamplingCaps(),
    eval_seed: int = 0,
    sampled_n: int = 0,
    sampled_seed: int = 0,
    scorer: Scorer | None = None,
    workers: int = 1,
    metadata: dict[str, str] | None = None,
) -> MetricsReport:
    """Mean Recall@K / NDCG@K over all evaluable test users.

    Per-user work is independent and may be spread over worker processes;
    results are merged in user order, so the report is identical for any
    worker count.
    """
    ks = tuple(sorted(int(k) for k in ks))
    if not ks:
        raise EvaluationError("no K values supplied")
    tasks, skipped = build_tasks(split, candidate_policy, sampled_n, sampled_seed)
    if not tasks:
        raise EvaluationError("no users with test positives to evaluate")

    if scorer is None:
        if params is None or config is None:
            raise EvaluationError("model scoring requires params and config")

    per_user: list[tuple[dict, dict]] = [None] * len(tasks)  # type: ignore[list-item]
    if scorer is None and workers > 1:
        import multiprocessing as mp

        global _WORKER_CTX
        _WORKER_CTX = {
            "params": params,
            "store": store,
            "config": config,
            "caps": caps,
            "seed": eval_seed,
            "tasks": tasks,
            "ks": ks,
        }
        chunks = [list(range(len(tasks)))[i::workers] for i in range(workers)]
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            for results in pool.map(_worker_eval, chunks):
                for i, rec, ndc in results:
                    per_user[i] = (rec, ndc)
        _WORKER_CTX = {}
    else:
        actual = scorer if scorer is not None else model_scorer(
            params, store, config, caps, eval_seed
        )
        for i, task in enumerate(tasks):
            per_user[i] = _eval_one_user(task, actual, ks)

    recall = {k: float(np.mean([ru[k] for ru, _ in per_user])) for k in ks}
    ndcg = {k: float(np.mean([nu[k] for _, nu in per_user])) for k in ks}
    return MetricsReport(
        ks=ks,
        recall=recall,
        ndcg=ndcg,
        users_evaluated=len(tasks),
        users_skipped=skipped,
        metadata=dict(metadata or {}),
    )


def transfer_evaluate(
    source: Checkpoint,
    target_split: Split,
    ks=(20, 40, 80),
    *,
    embed_seed: int = 0,
    caps: SamplingCaps = SamplingCaps(),
    eval_seed: int = 0,
    candidate_policy: str = "all",
    workers: int = 1,
    metadata: dict[str, str] | None = None,
) -> MetricsReport:
    """Apply source-domain weights to a target domain.

    Relation weights, biases and the MLP come from the checkpoint; the
    target's entities were never trained, so their free-embedding tables
    are freshly sampled from the initialization distribution under a
    recorded seed.
    """
    config = source.config
    counts = EntityCounts(
        target_split.num_users, target_split.num_bundles, target_split.num_items
    )
    fresh = init_params(config, counts, embed_seed)
    params = source.params.copy()
    params.user_free = fresh.user_free
    params.bundle_free = fresh.bundle_free
    params.item_free = fresh.item_free

    store = build_graph(target_split)
    meta = dict(metadata or {})
    meta.setdefault("mode", "transfer")
    meta.setdefault("transfer_embed_seed", str(embed_seed))
    return evaluate(
        params,
        store,
        target_split,
        ks,
        candidate_policy,
        config=config,
        caps=caps,
        eval_seed=eval_seed,
        workers=workers,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# Report serialization: a flat, machine-parseable key-value tree.
# ---------------------------------------------------------------------------


def report_text(report: MetricsReport) -> str:
    lines = []
    meta = dict(report.metadata)
    for key in ("dataset", "checkpoint", "mode"):
        lines.append(f"{key} = {meta.pop(key, '')}")
    lines.append(f"users_evaluated = {report.users_evaluated}")
    lines.append(f"users_skipped = {report.users_skipped}")
    lines.append(f"ks = {','.join(str(k) for k in report.ks)}")
    for k in report.ks:
        lines.append(f"metrics.recall@{k} = {report.recall[k]!r}")
    for k in report.ks:
        lines.append(f"metrics.ndcg@{k} = {report.ndcg[k]!r}")
    for key in sorted(meta):
        lines.append(f"meta.{key} = {meta[key]}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricsReport:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    ks = tuple(int(k) for k in fields["ks"].split(",") if k)
    metadata = {key: fields[key] for key in ("dataset", "checkpoint", "mode") if fields.get(key)}
    for key, value in fields.items():
        if key.startswith("meta."):
            metadata[key[len("meta.") :]] = value
    return MetricsReport(
        ks=ks,
        recall={k: float(fields[f"metrics.recall@{k}"]) for k in ks},
        ndcg={k: float(fields[f"metrics.ndcg@{k}"]) for k in ks},
        users_evaluated=int(fields["users_evaluated"]),
        users_skipped=int(fields["users_skipped"]),
        metadata=metadata,
    )


def save_report(report: MetricsReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_text(report))


def load_report(path: str | os.PathLike) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_report(fh.read())
