"""Command-line pipeline: prepare, train, evaluate, transfer.

All four subcommands read a single flat key-value config file
(``key = value`` per line, ``#`` comments). Unknown keys are rejected.
Every command writes the effective config (defaults resolved) beside its
outputs so any reported number can be reproduced from the output
directory alone.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import plots
from .data import (
    DataError,
    build_dataset,
    load_interactions,
    load_split,
    save_split,
    split_train_test,
)
from .evaluation import (
    evaluate,
    perfect_scorer,
    popularity_scorer,
    save_report,
    transfer_evaluate,
)
from .graphstore import build_graph
from .model import ModelConfig
from .subgraph import SamplingCaps
from .synth import SynthConfig, generate, write_dataset, write_provenance
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


class ConfigError(ValueError):
    pass


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(text).split(",") if tok.strip())


# key -> (parser, default). The parsed RunConfig is a plain dict over these keys.
SCHEMA: dict[str, tuple] = {
    "mode": (str, "basic"),
    "out.dir": (str, "out"),
    # data sources: either a prepared split directory, raw pair files, or synth
    "data.dir": (str, ""),
    "data.user_bundle": (str, ""),
    "data.user_item": (str, ""),
    "data.bundle_item": (str, ""),
    "synth.enabled": (lambda v: str(v).lower() in ("1", "true", "yes"), False),
    "synth.num_users": (int, 500),
    "synth.num_bundles": (int, 300),
    "synth.num_items": (int, 1000),
    "synth.bundle_size_min": (int, 6),
    "synth.bundle_size_max": (int, 10),
    "synth.items_per_user_min": (int, 20),
    "synth.items_per_user_max": (int, 30),
    "synth.affinity": (float, 0.9),
    "synth.seed": (int, 0),
    "split.ratio": (float, 0.6),
    "split.seed": (int, 7),
    "model.embed_dim": (int, 64),
    "model.num_layers": (int, 4),
    "model.depth": (int, 1),
    "model.type_dim": (int, 32),
    "model.leaky_slope": (float, 0.01),
    "model.mlp_hidden": (int, 128),
    "model.sigma_init": (float, 0.1),
    "model.init_seed": (int, 0),
    "train.learning_rate": (float, 3e-5),
    "train.weight_decay": (float, 2e-7),
    "train.bpr_lambda": (float, 1e-5),
    "train.epochs": (int, 20),
    "train.batch_size": (int, 32),
    "train.seed": (int, 0),
    "train.caps": (int, 50),  # 0 disables the per-relation neighbor cap
    "train.resume": (str, ""),  # checkpoint to continue from
    "eval.ks": (_parse_int_list, (20, 40, 80)),
    "eval.candidates": (str, "all"),  # "all" or "sampled:<n>:<seed>"
    "eval.seed": (int, 0),
    "eval.workers": (int, 1),
    "eval.scorer": (str, "model"),  # model | popularity | perfect (test hook)
    "eval.checkpoint": (str, ""),
    "transfer.checkpoint": (str, ""),
    "transfer.embed_seed": (int, 0),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}: line {lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(value.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path: str, overrides: list[str] | None = None) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read(), origin=path)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"--set: unknown key {key!r}")
        cfg[key] = SCHEMA[key][0](value.strip())
    return cfg


def effective_config_text(cfg: dict) -> str:
    lines = []
    for key in sorted(SCHEMA):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _write_effective(cfg: dict, out_dir: str, command: str) -> None:
    with open(os.path.join(out_dir, f"effective_config_{command}.txt"), "w", encoding="utf-8") as fh:
        fh.write(effective_config_text(cfg))


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        embed_dim=cfg["model.embed_dim"],
        num_layers=cfg["model.num_layers"],
        depth=cfg["model.depth"],
        leaky_slope=cfg["model.leaky_slope"],
        type_dim=cfg["model.type_dim"],
        free_dim=cfg["model.embed_dim"] - cfg["model.type_dim"],
        mlp_hidden=cfg["model.mlp_hidden"],
        sigma_init=cfg["model.sigma_init"],
    )


def _caps(cfg: dict) -> SamplingCaps:
    cap = cfg["train.caps"]
    return SamplingCaps(per_relation=None if cap <= 0 else cap)


def _synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        num_users=cfg["synth.num_users"],
        num_bundles=cfg["synth.num_bundles"],
        num_items=cfg["synth.num_items"],
        bundle_size_range=(cfg["synth.bundle_size_min"], cfg["synth.bundle_size_max"]),
        items_per_user_range=(cfg["synth.items_per_user_min"], cfg["synth.items_per_user_max"]),
        affinity_strength=cfg["synth.affinity"],
        seed=cfg["synth.seed"],
    )


def _candidate_policy(cfg: dict) -> tuple[str, int, int]:
    spec = cfg["eval.candidates"]
    if spec == "all":
        return "all", 0, 0
    if spec.startswith("sampled:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError("eval.candidates sampled form is 'sampled:<n>:<seed>'")
        return "sampled", int(parts[1]), int(parts[2])
    raise ConfigError(f"unknown eval.candidates policy {spec!r}")


def _require(cfg: dict, key: str, why: str) -> str:
    value = cfg[key]
    if not value:
        raise ConfigError(f"{key} must be set {why}")
    return value


def cmd_prepare(cfg: dict) -> str:
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    raw_keys = ("data.user_bundle", "data.user_item", "data.bundle_item")
    use_files = any(cfg[k] for k in raw_keys)
    if use_files and cfg["synth.enabled"]:
        raise ConfigError("choose either raw data files or synth.enabled, not both")
    if use_files:
        for key in raw_keys:
            path = _require(cfg, key, "when preparing from raw files")
            if not os.path.exists(path):
                raise ConfigError(f"{key}: no such file: {path}")
        ub = load_interactions(cfg["data.user_bundle"], "user-bundle")
        ui = load_interactions(cfg["data.user_item"], "user-item")
        bi = load_interactions(cfg["data.bundle_item"], "bundle-item")
        ds = build_dataset(ub, ui, bi)
    elif cfg["synth.enabled"]:
        ds = generate(_synth_config(cfg))
        write_provenance(_synth_config(cfg), out_dir)
    else:
        raise ConfigError("prepare needs raw data file paths or synth.enabled = true")

    for warning in ds.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    write_dataset(ds, out_dir)
    split = split_train_test(ds, cfg["split.ratio"], cfg["split.seed"])
    save_split(split, out_dir, id_maps=ds.id_maps)
    _write_effective(cfg, out_dir, "prepare")
    print(f"prepared split in {out_dir}: {len(split.train_ub)} train / {len(split.test_ub)} test pairs")
    return out_dir


def cmd_train(cfg: dict) -> str:
    data_dir = _require(cfg, "data.dir", "to locate the prepared split")
    split = load_split(data_dir)
    store = build_graph(split)
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)

    mcfg = _model_config(cfg)
    tcfg = TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        weight_decay=cfg["train.weight_decay"],
        bpr_lambda=cfg["train.bpr_lambda"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        base_seed=cfg["train.seed"],
    )
    resume = None
    if cfg["train.resume"]:
        resume = load_checkpoint(cfg["train.resume"])
    result = train(
        split,
        store,
        mcfg,
        tcfg,
        init_seed=cfg["model.init_seed"],
        caps=_caps(cfg),
        resume=resume,
        progress=lambda e, loss, wall: print(f"epoch {e}: loss {loss:.6f} ({wall:.1f}s)"),
    )
    ckpt_path = os.path.join(out_dir, "checkpoint.sgrc")
    save_checkpoint(result.checkpoint, ckpt_path)
    with open(os.path.join(out_dir, "loss_log.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.log_lines) + "\n")
    plots.save_loss_curve(result.epoch_losses, os.path.join(out_dir, "loss_curve.png"))
    _write_effective(cfg, out_dir, "train")
    print(f"saved checkpoint to {ckpt_path}")
    return ckpt_path


def _run_evaluation(cfg: dict, split, store, params, mcfg, metadata: dict) -> None:
    policy, sampled_n, sampled_seed = _candidate_policy(cfg)
    scorer = None
    if cfg["eval.scorer"] == "popularity":
        scorer = popularity_scorer(store)
        metadata["scorer"] = "popularity"
    elif cfg["eval.scorer"] == "perfect":
        scorer = perfect_scorer(split)
        metadata["scorer"] = "perfect"
    elif cfg["eval.scorer"] != "model":
        raise ConfigError(f"unknown eval.scorer {cfg['eval.scorer']!r}")

    report = evaluate(
        params,
        store,
        split,
        cfg["eval.ks"],
        policy,
        config=mcfg,
        caps=_caps(cfg),
        eval_seed=cfg["eval.seed"],
        sampled_n=sampled_n,
        sampled_seed=sampled_seed,
        scorer=scorer,
        workers=cfg["eval.workers"],
        metadata=metadata,
    )
    out_dir = cfg["out.dir"]
    report_path = os.path.join(out_dir, "metrics_report.txt")
    save_report(report, report_path)
    plots.save_metric_bars(report, os.path.join(out_dir, "metrics_at_k.png"))
    for k in report.ks:
        print(f"recall@{k} = {report.recall[k]:.4f}  ndcg@{k} = {report.ndcg[k]:.4f}")
    print(f"wrote {report_path}")


def cmd_evaluate(cfg: dict) -> None:
    data_dir = _require(cfg, "data.dir", "to locate the prepared split")
    split = load_split(data_dir)
    store = build_graph(split)
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)

    params = None
    mcfg = None
    ckpt_id = ""
    if cfg["eval.scorer"] == "model":
        ckpt_path = _require(cfg, "eval.checkpoint", "to score with the model")
        ckpt = load_checkpoint(ckpt_path)
        params, mcfg, ckpt_id = ckpt.params, ckpt.config, ckpt_path
    metadata = {"dataset": data_dir, "checkpoint": ckpt_id, "mode": "basic"}
    _run_evaluation(cfg, split, store, params, mcfg, metadata)
    _write_effective(cfg, out_dir, "evaluate")


def cmd_transfer(cfg: dict) -> None:
    data_dir = _require(cfg, "data.dir", "to locate the prepared target split")
    split = load_split(data_dir)
    out_dir = cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = _require(cfg, "transfer.checkpoint", "to supply source-domain weights")
    ckpt = load_checkpoint(ckpt_path)

    mcfg = ckpt.config
    for key, have in (
        ("model.embed_dim", mcfg.embed_dim),
        ("model.num_layers", mcfg.num_layers),
        ("model.depth", mcfg.depth),
        ("model.type_dim", mcfg.type_dim),
    ):
        if cfg[key] != have:
            raise ConfigError(
                f"checkpoint {key.split('.')[1]}={have} does not match config {key}={cfg[key]}"
            )

    policy, sampled_n, sampled_seed = _candidate_policy(cfg)
    report = transfer_evaluate(
        ckpt,
        split,
        cfg["eval.ks"],
        embed_seed=cfg["transfer.embed_seed"],
        caps=_caps(cfg),
        eval_seed=cfg["eval.seed"],
        candidate_policy=policy,
        workers=cfg["eval.workers"],
        metadata={"dataset": data_dir, "checkpoint": ckpt_path, "mode": "transfer"},
    )
    report_path = os.path.join(out_dir, "metrics_report.txt")
    save_report(report, report_path)
    plots.save_metric_bars(report, os.path.join(out_dir, "metrics_at_k.png"), title="Transfer metrics")
    for k in report.ks:
        print(f"recall@{k} = {report.recall[k]:.4f}  ndcg@{k} = {report.ndcg[k]:.4f}")
    _write_effective(cfg, out_dir, "transfer")


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bundlerec",
        description="Subgraph-based bundle recommendation pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the key-value config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force serial execution everywhere (eval.workers = 1)",
    )
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.deterministic:
            cfg["eval.workers"] = 1
        COMMANDS[args.command](cfg)
    except (ConfigError, DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
