"""Pairwise ranking optimization and checkpointing.

Training follows the standard implicit-feedback recipe: per epoch,
negatives are resampled (seed derived from the base seed plus the epoch
index), each (user, positive, negative) triple yields two train-mode
subgraph forwards on a shared tape, and Adam with decoupled weight decay
steps on the batch-averaged gradients of
``-log sigmoid(pos_logit - neg_logit) + lambda * ||theta||^2``.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, value_of
from .data import Split, sample_negatives
from .graphstore import GraphStore
from .model import (
    EntityCounts,
    LayerParams,
    ModelConfig,
    ModelParams,
    ForwardTrace,
    _fold_mlp_halves,
    init_params,
    run_forward,
    WEIGHT_ATTRS,
)
from .subgraph import EnclosingSubgraph, SamplingCaps, extract_subgraph, pair_seed


class TrainingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 2e-7
    bpr_lambda: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    base_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.weight_decay < 0 or self.bpr_lambda < 0:
            raise TrainingError("regularizers must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")


def bpr_loss(pos_logit: float, neg_logit: float, lam: float = 0.0, theta_sq: float = 0.0) -> float:
    """-ln sigmoid(pos - neg) + lam * theta_sq, numerically stable."""
    return float(np.logaddexp(0.0, -(pos_logit - neg_logit)) + lam * theta_sq)


@dataclass
class PairTrace:
    """Traced forwards of one training triple, sharing one tape and one
    set of weight leaves."""

    tape: Tape
    params: ModelParams
    weights: dict[str, object]
    free_leaves: list[tuple[str, np.ndarray, object]]
    pos: ForwardTrace
    neg: ForwardTrace


@dataclass
class Gradients:
    """Dense gradients for weight tensors; sparse row gradients for the
    free-embedding tables (absent rows have exactly zero gradient)."""

    weights: dict[str, np.ndarray]
    free_rows: dict[str, dict[int, np.ndarray]]


def forward_pair(
    sg_pos: EnclosingSubgraph,
    sg_neg: EnclosingSubgraph,
    params: ModelParams,
    config: ModelConfig,
) -> PairTrace:
    tape = Tape()
    weights = {name: tape.leaf(arr) for name, arr in params.weight_items()}
    free_leaves: list[tuple[str, np.ndarray, object]] = []

    def free_rows(cls, ids):
        leaf = tape.leaf(params.free_table(cls)[ids])
        free_leaves.append((cls, ids, leaf))
        return leaf

    fold = _fold_mlp_halves(params.mlp_w1, config.embed_dim, config.stage_count)
    pos = run_forward(sg_pos, config, weights, free_rows, mlp_fold=fold)
    neg = run_forward(sg_neg, config, weights, free_rows, mlp_fold=fold)
    return PairTrace(tape, params, weights, free_leaves, pos, neg)


def weights_sq_norm(params: ModelParams) -> float:
    """Squared L2 norm of all non-table tensors (constant within a batch)."""
    return float(sum((arr * arr).sum() for _, arr in params.weight_items()))


def backward(
    trace: PairTrace, lam: float, weights_sq: float | None = None
) -> tuple[float, Gradients]:
    """Exact gradients of the pair loss for every tensor the pair touched.

    The L2 term is handled off-tape: its value and gradient (2*lam*theta)
    are closed-form, so they are added directly to the ranking-loss parts.
    """
    diff = ad.sub(trace.pos.logit_node, trace.neg.logit_node)
    loss_node = ad.neg_log_sigmoid(diff)
    trace.tape.backward(loss_node, seed=np.ones((1, 1)))
    loss = float(value_of(loss_node)[0, 0])

    weights = {}
    for name, leaf in trace.weights.items():
        weights[name] = (
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        )
    free_rows: dict[str, dict[int, np.ndarray]] = {"user": {}, "bundle": {}, "item": {}}
    for cls, ids, leaf in trace.free_leaves:
        if leaf.grad is None:
            continue
        rows = free_rows[cls]
        for j, rid in enumerate(ids.tolist()):
            if rid in rows:
                rows[rid] = rows[rid] + leaf.grad[j]
            else:
                rows[rid] = leaf.grad[j]

    if lam > 0.0:
        if weights_sq is None:
            weights_sq = weights_sq_norm(trace.params)
        theta_sq = weights_sq
        two_lam = 2.0 * lam
        for name, leaf in trace.weights.items():
            weights[name] = weights[name] + two_lam * leaf.value
        # L2 over the union of free rows present in either subgraph, each
        # entity counted once.
        union: dict[str, set[int]] = {}
        for cls, ids, _ in trace.free_leaves:
            union.setdefault(cls, set()).update(ids.tolist())
        for cls, ids in union.items():
            table = trace.params.free_table(cls)
            rows = free_rows[cls]
            for rid in ids:
                row = table[rid]
                theta_sq += float(row @ row)
                if rid in rows:
                    rows[rid] = rows[rid] + two_lam * row
                else:
                    rows[rid] = two_lam * row
        loss += lam * theta_sq
    return loss, Gradients(weights=weights, free_rows=free_rows)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay.
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.named_tensors()},
            v={name: np.zeros_like(arr) for name, arr in params.named_tensors()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, tensor in params.named_tensors():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        tensor -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay:
            tensor -= lr * weight_decay * tensor


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    counts: EntityCounts
    params: ModelParams
    adam: AdamState
    epochs_done: int
    base_seed: int


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    log_lines: list[str] = field(default_factory=list)


def train(
    split: Split,
    store: GraphStore,
    config: ModelConfig,
    tcfg: TrainConfig,
    *,
    init_seed: int | None = None,
    caps: SamplingCaps = SamplingCaps(),
    resume: Checkpoint | None = None,
    progress=None,
) -> TrainResult:
    """Optimize model parameters over the split's training positives.

    Fully deterministic under ``tcfg.base_seed``: negative sampling,
    triple order and subgraph extraction seeds all derive from it, so a
    resumed run reproduces an uninterrupted one bit-exactly.
    """
    counts = EntityCounts(split.num_users, split.num_bundles, split.num_items)
    if resume is not None:
        params = resume.params
        adam = resume.adam
        start_epoch = resume.epochs_done
        if resume.base_seed != tcfg.base_seed:
            raise TrainingError("resume checkpoint was trained under a different base seed")
        if start_epoch > tcfg.epochs:
            raise TrainingError(
                f"checkpoint already has {start_epoch} epochs, target is {tcfg.epochs}"
            )
    else:
        params = init_params(config, counts, tcfg.base_seed if init_seed is None else init_seed)
        adam = AdamState.zeros_like(params)
        start_epoch = 0

    grad_accum = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
    table_names = {"user": "free.user", "bundle": "free.bundle", "item": "free.item"}
    pos_cache: dict[tuple[int, int], EnclosingSubgraph] = {}
    wsq = weights_sq_norm(params)  # constant between optimizer steps

    epoch_losses: list[float] = []
    log_lines: list[str] = []
    for epoch in range(start_epoch, tcfg.epochs):
        t0 = time.perf_counter()
        sampled = sample_negatives(split, seed=tcfg.base_seed + epoch)
        triples = list(sampled.triples)
        if not triples:
            raise TrainingError("no training triples available (empty train split?)")
        order = np.random.default_rng(
            np.random.SeedSequence((tcfg.base_seed, epoch))
        ).permutation(len(triples))

        losses = []
        batch: list[int] = []
        for pos_in_order, tidx in enumerate(order.tolist()):
            u, pb, nb = triples[tidx]
            sg_pos = pos_cache.get((u, pb))
            if sg_pos is None:
                sg_pos = extract_subgraph(
                    store, u, pb, config.depth, "train", caps, pair_seed(tcfg.base_seed, u, pb)
                )
                pos_cache[(u, pb)] = sg_pos
            sg_neg = extract_subgraph(
                store, u, nb, config.depth, "train", caps, pair_seed(tcfg.base_seed, u, nb)
            )
            trace = forward_pair(sg_pos, sg_neg, params, config)
            loss, grads = backward(trace, tcfg.bpr_lambda, wsq)
            losses.append(loss)
            for name, g in grads.weights.items():
                grad_accum[name] += g
            for cls, rows in grads.free_rows.items():
                accum = grad_accum[table_names[cls]]
                for rid, g in rows.items():
                    accum[rid] += g
            batch.append(tidx)
            if len(batch) == tcfg.batch_size or pos_in_order == len(order) - 1:
                scale = 1.0 / len(batch)
                for name in grad_accum:
                    grad_accum[name] *= scale
                adam_step(params, grad_accum, adam, tcfg.learning_rate, tcfg.weight_decay)
                for name in grad_accum:
                    grad_accum[name].fill(0.0)
                batch = []
                wsq = weights_sq_norm(params)

        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise TrainingError(f"non-finite epoch loss at epoch {epoch}")
        epoch_losses.append(mean_loss)
        wall = time.perf_counter() - t0
        log_lines.append(f"{epoch} {mean_loss!r} {wall:.3f}")
        if progress is not None:
            progress(epoch, mean_loss, wall)

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        config=config,
        counts=counts,
        params=params,
        adam=adam,
        epochs_done=tcfg.epochs,
        base_seed=tcfg.base_seed,
    )
    return TrainResult(checkpoint=ckpt, epoch_losses=epoch_losses, log_lines=log_lines)


# ---------------------------------------------------------------------------
# Checkpoint file format: magic "SGRC", uint32 version, then a sequence of
# named float64 tensors (uint32 name length, utf-8 name, uint32 rank,
# uint64 dims, little-endian payload).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SGRC"
CHECKPOINT_VERSION = 1

_CONFIG_FIELDS = (
    "embed_dim",
    "num_layers",
    "depth",
    "leaky_slope",
    "type_dim",
    "free_dim",
    "mlp_hidden",
    "sigma_init",
)


def _named_checkpoint_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"config.{f}", np.array([float(getattr(ckpt.config, f))])) for f in _CONFIG_FIELDS]
    out.append(
        (
            "counts",
            np.array(
                [
                    float(ckpt.counts.num_users),
                    float(ckpt.counts.num_bundles),
                    float(ckpt.counts.num_items),
                ]
            ),
        )
    )
    out.extend(ckpt.params.named_tensors())
    for name, arr in ckpt.params.named_tensors():
        out.append((f"adam.m.{name}", ckpt.adam.m[name]))
        out.append((f"adam.v.{name}", ckpt.adam.v[name]))
    out.append(("adam.step", np.array([float(ckpt.adam.step)])))
    out.append(("train.epochs_done", np.array([float(ckpt.epochs_done)])))
    out.append(("train.base_seed", np.array([float(ckpt.base_seed)])))
    return out


def _write_checkpoint_stream(ckpt: Checkpoint, fh) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", ckpt.version))
    for name, arr in _named_checkpoint_tensors(ckpt):
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        arr = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.astype("<f8").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write to a path or any binary file-like object."""
    if hasattr(path, "write"):
        _write_checkpoint_stream(ckpt, path)
        return
    with open(path, "wb") as fh:
        _write_checkpoint_stream(ckpt, fh)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"dims of {name}"))[0] for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, count * 8, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    try:
        cfg_kwargs = {}
        for fname in _CONFIG_FIELDS:
            raw = float(tensors[f"config.{fname}"][0])
            cfg_kwargs[fname] = raw if fname in ("leaky_slope", "sigma_init") else int(raw)
        config = ModelConfig(**cfg_kwargs)
        counts_arr = tensors["counts"]
        counts = EntityCounts(int(counts_arr[0]), int(counts_arr[1]), int(counts_arr[2]))

        layers = []
        for li in range(config.num_layers):
            fields = {}
            for w_attr, b_attr in WEIGHT_ATTRS:
                fields[w_attr] = tensors[f"layer{li}.{w_attr}"]
                fields[b_attr] = tensors[f"layer{li}.{b_attr}"]
            layers.append(LayerParams(**fields))
        params = ModelParams(
            user_free=tensors["free.user"],
            bundle_free=tensors["free.bundle"],
            item_free=tensors["free.item"],
            layers=layers,
            mlp_w1=tensors["mlp.w1"],
            mlp_w2=tensors["mlp.w2"],
        )
        adam = AdamState(
            m={name: tensors[f"adam.m.{name}"] for name, _ in params.named_tensors()},
            v={name: tensors[f"adam.v.{name}"] for name, _ in params.named_tensors()},
            step=int(tensors["adam.step"][0]),
        )
        return Checkpoint(
            version=version,
            config=config,
            counts=counts,
            params=params,
            adam=adam,
            epochs_done=int(tensors["train.epochs_done"][0]),
            base_seed=int(tensors["train.base_seed"][0]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from None
