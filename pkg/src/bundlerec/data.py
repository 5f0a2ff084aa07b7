"""Interaction loading, dataset assembly, train/test splitting, negative sampling.

Raw inputs are plain text files with one interaction pair per line
(two whitespace-separated nonnegative integers). Three relations exist:
user-bundle, user-item and bundle-item. Only user-bundle pairs are split
into train/test; the other two relations are available in full during
training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

KINDS = ("user-bundle", "user-item", "bundle-item")


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class EmptyRelationError(DataError):
    pass


@dataclass(frozen=True)
class PairList:
    """A deduplicated set of interaction pairs for one relation kind."""

    kind: str
    pairs: frozenset[tuple[int, int]]
    duplicates: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown relation kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs)


@dataclass(frozen=True)
class IdMaps:
    """Raw-id -> dense-id mappings recorded when a dataset is assembled."""

    users: dict[int, int]
    bundles: dict[int, int]
    items: dict[int, int]

    def for_class(self, entity_class: str) -> dict[int, int]:
        return {"user": self.users, "bundle": self.bundles, "item": self.items}[entity_class]


@dataclass(frozen=True)
class InteractionDataset:
    num_users: int
    num_bundles: int
    num_items: int
    ub: PairList
    ui: PairList
    bi: PairList
    id_maps: IdMaps | None = None
    warnings: tuple[str, ...] = ()

    def bundles_without_items(self) -> list[int]:
        with_items = {b for b, _ in self.bi.pairs}
        return sorted({b for _, b in self.ub.pairs} - with_items)


@dataclass(frozen=True)
class Split:
    train_ub: PairList
    test_ub: PairList
    ui: PairList
    bi: PairList
    ratio: float
    seed: int
    num_users: int
    num_bundles: int
    num_items: int


class TrainingTriple(NamedTuple):
    user: int
    pos_bundle: int
    neg_bundle: int


@dataclass(frozen=True)
class TripleSample:
    triples: tuple[TrainingTriple, ...]
    skipped: tuple[tuple[int, int], ...] = ()


def load_interactions(path: str | os.PathLike, kind: str) -> PairList:
    """Parse a pair-per-line file into a deduplicated PairList.

    Duplicate lines are counted on the result; malformed lines raise
    ParseError naming the line number, an empty relation raises
    EmptyRelationError.
    """
    seen: set[tuple[int, int]] = set()
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            fields = stripped.split()
            if len(fields) != 2:
                raise ParseError(f"{path}: line {lineno}: expected two integers, got {stripped!r}")
            try:
                left, right = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: expected two integers, got {stripped!r}"
                ) from None
            if left < 0 or right < 0:
                raise ParseError(f"{path}: line {lineno}: negative id in {stripped!r}")
            pair = (left, right)
            if pair in seen:
                duplicates += 1
            else:
                seen.add(pair)
    if not seen:
        raise EmptyRelationError(f"{path}: relation {kind} is empty")
    return PairList(kind=kind, pairs=frozenset(seen), duplicates=duplicates)


def _remap_pairs(pairs: Iterable[tuple[int, int]], left_map, right_map) -> frozenset:
    return frozenset((left_map[l], right_map[r]) for l, r in pairs)


def build_dataset(
    ub: PairList,
    ui: PairList,
    bi: PairList,
    *,
    remap: bool = True,
    counts: tuple[int, int, int] | None = None,
) -> InteractionDataset:
    """Assemble the three relations into one dataset with consistent counts.

    With ``remap`` (the default) ids are renumbered to dense 0-based indices
    per entity class; the mapping is recorded on the dataset so it can be
    persisted next to the split. With explicit ``counts`` no remapping takes
    place and ids must already be dense.
    """
    if ub.kind != "user-bundle" or ui.kind != "user-item" or bi.kind != "bundle-item":
        raise DataError("relation kinds passed to build_dataset do not match their slots")
    if counts is not None and remap:
        raise DataError("explicit counts require remap=False")

    users = sorted({u for u, _ in ub.pairs} | {u for u, _ in ui.pairs})
    bundles = sorted({b for _, b in ub.pairs} | {b for b, _ in bi.pairs})
    items = sorted({i for _, i in ui.pairs} | {i for _, i in bi.pairs})

    # Reported in the input id space, before any remapping.
    missing = sorted({b for _, b in ub.pairs} - {b for b, _ in bi.pairs})

    if remap:
        umap = {raw: dense for dense, raw in enumerate(users)}
        bmap = {raw: dense for dense, raw in enumerate(bundles)}
        imap = {raw: dense for dense, raw in enumerate(items)}
        ub = PairList(ub.kind, _remap_pairs(ub.pairs, umap, bmap), ub.duplicates)
        ui = PairList(ui.kind, _remap_pairs(ui.pairs, umap, imap), ui.duplicates)
        bi = PairList(bi.kind, _remap_pairs(bi.pairs, bmap, imap), bi.duplicates)
        id_maps = IdMaps(users=umap, bundles=bmap, items=imap)
        num_users, num_bundles, num_items = len(users), len(bundles), len(items)
    else:
        id_maps = None
        if counts is not None:
            num_users, num_bundles, num_items = counts
        else:
            num_users = 1 + max(users) if users else 0
            num_bundles = 1 + max(bundles) if bundles else 0
            num_items = 1 + max(items) if items else 0
        for name, ids, count in (
            ("user", users, num_users),
            ("bundle", bundles, num_bundles),
            ("item", items, num_items),
        ):
            if ids and max(ids) >= count:
                raise DataError(f"{name} id {max(ids)} out of range for count {count}")

    warnings = []
    if missing:
        warnings.append(f"bundles referenced in user-bundle pairs but absent from bundle-item: {missing}")
    return InteractionDataset(
        num_users=num_users,
        num_bundles=num_bundles,
        num_items=num_items,
        ub=ub,
        ui=ui,
        bi=bi,
        id_maps=id_maps,
        warnings=tuple(warnings),
    )


def split_train_test(ds: InteractionDataset, ratio: float, seed: int) -> Split:
    """Uniform pair-level split of the user-bundle relation, deterministic under seed."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    pairs = ds.ub.sorted_pairs()
    n_train = round(ratio * len(pairs))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    train = frozenset(pairs[i] for i in order[:n_train])
    test = frozenset(pairs[i] for i in order[n_train:])
    return Split(
        train_ub=PairList("user-bundle", train),
        test_ub=PairList("user-bundle", test),
        ui=ds.ui,
        bi=ds.bi,
        ratio=ratio,
        seed=seed,
        num_users=ds.num_users,
        num_bundles=ds.num_bundles,
        num_items=ds.num_items,
    )


def sample_negatives(split: Split, seed: int) -> TripleSample:
    """One uniformly sampled negative bundle per train positive.

    A negative for user u is any bundle with (u, b) not in train_ub; test
    pairs are legal negatives since they are unknown at train time. Users
    interacting with every bundle are skipped and reported.
    """
    pos_by_user: dict[int, set[int]] = {}
    for u, b in split.train_ub.pairs:
        pos_by_user.setdefault(u, set()).add(b)

    rng = np.random.default_rng(seed)
    nb = split.num_bundles
    triples: list[TrainingTriple] = []
    skipped: list[tuple[int, int]] = []
    for u, b in split.train_ub.sorted_pairs():
        positives = pos_by_user[u]
        if len(positives) >= nb:
            skipped.append((u, b))
            continue
        neg = int(rng.integers(0, nb))
        while neg in positives:
            neg = int(rng.integers(0, nb))
        triples.append(TrainingTriple(u, b, neg))
    return TripleSample(triples=tuple(triples), skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# Split persistence: a directory with the pair files, a key-value metadata
# file, and the id maps recorded at dataset build time.
# ---------------------------------------------------------------------------

SPLIT_META_NAME = "split_meta.txt"
_PAIR_FILES = {
    "train_ub": ("train_ub.txt", "user-bundle"),
    "test_ub": ("test_ub.txt", "user-bundle"),
    "ui": ("user_item.txt", "user-item"),
    "bi": ("bundle_item.txt", "bundle-item"),
}


def write_pairs(path: str | os.PathLike, pairs: Iterable[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for left, right in sorted(pairs):
            fh.write(f"{left} {right}\n")


def save_split(split: Split, directory: str | os.PathLike, id_maps: IdMaps | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for attr, (fname, _) in _PAIR_FILES.items():
        write_pairs(os.path.join(directory, fname), getattr(split, attr).pairs)
    meta = [
        ("ratio", repr(split.ratio)),
        ("seed", str(split.seed)),
        ("num_users", str(split.num_users)),
        ("num_bundles", str(split.num_bundles)),
        ("num_items", str(split.num_items)),
    ]
    with open(os.path.join(directory, SPLIT_META_NAME), "w", encoding="utf-8") as fh:
        for key, value in meta:
            fh.write(f"{key} = {value}\n")
    if id_maps is not None:
        for entity_class, mapping in (
            ("user", id_maps.users),
            ("bundle", id_maps.bundles),
            ("item", id_maps.items),
        ):
            write_pairs(os.path.join(directory, f"id_map_{entity_class}.txt"), mapping.items())


def load_split(directory: str | os.PathLike) -> Split:
    meta_path = os.path.join(directory, SPLIT_META_NAME)
    meta: dict[str, str] = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    lists = {}
    for attr, (fname, kind) in _PAIR_FILES.items():
        lists[attr] = load_interactions(os.path.join(directory, fname), kind)
    return Split(
        train_ub=lists["train_ub"],
        test_ub=lists["test_ub"],
        ui=lists["ui"],
        bi=lists["bi"],
        ratio=float(meta["ratio"]),
        seed=int(meta["seed"]),
        num_users=int(meta["num_users"]),
        num_bundles=int(meta["num_bundles"]),
        num_items=int(meta["num_items"]),
    )
