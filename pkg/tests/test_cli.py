"""End-to-end command-line pipeline on a tiny synthetic world."""

import os

import numpy as np
import pytest

from bundlerec.cli import (
    ConfigError,
    effective_config_text,
    load_config,
    main,
    parse_config_text,
)
from bundlerec.evaluation import load_report
from bundlerec.training import load_checkpoint

TINY_CONFIG = """
# tiny world for pipeline tests
synth.enabled = true
synth.num_users = 25
synth.num_bundles = 15
synth.num_items = 40
synth.bundle_size_min = 2
synth.bundle_size_max = 4
synth.items_per_user_min = 3
synth.items_per_user_max = 6
synth.affinity = 0.9
synth.seed = 3
split.ratio = 0.6
split.seed = 5
model.embed_dim = 8
model.num_layers = 2
model.type_dim = 5
model.mlp_hidden = 6
train.epochs = 2
train.batch_size = 8
train.caps = 0
eval.ks = 5,10
"""


def write_config(tmp_path, text=TINY_CONFIG, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare + train once; individual tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = str(root / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(TINY_CONFIG)
    data_dir = str(root / "data")
    out_dir = str(root / "out")
    assert main(["prepare", "--config", cfg_path, "--set", f"out.dir={data_dir}"]) == 0
    assert (
        main(
            [
                "train",
                "--config",
                cfg_path,
                "--set",
                f"data.dir={data_dir}",
                "--set",
                f"out.dir={out_dir}",
            ]
        )
        == 0
    )
    return root, cfg_path, data_dir, out_dir


class TestConfigParsing:
    def test_defaults_fill_in(self):
        cfg = parse_config_text("")
        assert cfg["model.embed_dim"] == 64
        assert cfg["eval.ks"] == (20, 40, 80)
        assert cfg["split.ratio"] == 0.6

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("no.such.key = 1")

    def test_bad_line_rejected(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("not a key value line")

    def test_round_trip_stable(self):
        cfg = parse_config_text(TINY_CONFIG)
        text = effective_config_text(cfg)
        again = parse_config_text(text)
        assert again == cfg
        assert effective_config_text(again) == text

    def test_set_override(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, ["train.epochs=9"])
        assert cfg["train.epochs"] == 9
        with pytest.raises(ConfigError):
            load_config(path, ["bogus=1"])


class TestPrepare:
    def test_outputs(self, pipeline):
        _, _, data_dir, _ = pipeline
        for name in (
            "user_bundle.txt",
            "user_item.txt",
            "bundle_item.txt",
            "train_ub.txt",
            "test_ub.txt",
            "split_meta.txt",
            "synth_provenance.txt",
            "id_map_user.txt",
            "effective_config_prepare.txt",
        ):
            assert os.path.exists(os.path.join(data_dir, name)), name

    def test_idempotent_for_fixed_seeds(self, pipeline, tmp_path):
        root, cfg_path, data_dir, _ = pipeline
        again = str(tmp_path / "data2")
        assert main(["prepare", "--config", cfg_path, "--set", f"out.dir={again}"]) == 0
        for name in ("train_ub.txt", "test_ub.txt", "user_bundle.txt"):
            a = open(os.path.join(data_dir, name), "rb").read()
            b = open(os.path.join(again, name), "rb").read()
            assert a == b, name

    def test_missing_input_path_errors(self, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path,
            "data.user_bundle = /nonexistent/ub.txt\n"
            "data.user_item = /nonexistent/ui.txt\n"
            "data.bundle_item = /nonexistent/bi.txt\n",
        )
        assert main(["prepare", "--config", cfg_path]) == 1
        err = capsys.readouterr().err
        assert "/nonexistent/ub.txt" in err

    def test_needs_some_source(self, tmp_path):
        cfg_path = write_config(tmp_path, "split.ratio = 0.5\n")
        assert main(["prepare", "--config", cfg_path]) == 1


class TestTrain:
    def test_outputs(self, pipeline):
        _, _, _, out_dir = pipeline
        assert os.path.exists(os.path.join(out_dir, "checkpoint.sgrc"))
        assert os.path.exists(os.path.join(out_dir, "loss_curve.png"))
        log = open(os.path.join(out_dir, "loss_log.txt")).read().strip().splitlines()
        assert len(log) == 2  # one line per epoch

    def test_zero_lr_keeps_init(self, pipeline, tmp_path):
        root, cfg_path, data_dir, _ = pipeline
        out = str(tmp_path / "zero")
        assert (
            main(
                [
                    "train",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={out}",
                    "--set",
                    "train.learning_rate=0",
                    "--set",
                    "train.epochs=1",
                ]
            )
            == 0
        )
        from bundlerec.model import EntityCounts, ModelConfig, init_params

        ckpt = load_checkpoint(os.path.join(out, "checkpoint.sgrc"))
        init = init_params(ckpt.config, ckpt.counts, 0)
        for (n, a), (_, b) in zip(ckpt.params.named_tensors(), init.named_tensors()):
            assert np.array_equal(a, b), n

    def test_resume_equals_straight_run(self, pipeline, tmp_path):
        root, cfg_path, data_dir, _ = pipeline
        full, part = str(tmp_path / "full"), str(tmp_path / "part")
        base = ["--config", cfg_path, "--set", f"data.dir={data_dir}"]
        assert main(["train", *base, "--set", f"out.dir={full}", "--set", "train.epochs=2"]) == 0
        assert main(["train", *base, "--set", f"out.dir={part}", "--set", "train.epochs=1"]) == 0
        resumed = str(tmp_path / "resumed")
        assert (
            main(
                [
                    "train",
                    *base,
                    "--set",
                    f"out.dir={resumed}",
                    "--set",
                    "train.epochs=2",
                    "--set",
                    f"train.resume={part}/checkpoint.sgrc",
                ]
            )
            == 0
        )
        a = open(os.path.join(full, "checkpoint.sgrc"), "rb").read()
        b = open(os.path.join(resumed, "checkpoint.sgrc"), "rb").read()
        assert a == b


class TestEvaluate:
    def test_report_and_figure(self, pipeline, tmp_path):
        root, cfg_path, data_dir, out_dir = pipeline
        ev = str(tmp_path / "eval")
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={ev}",
                    "--set",
                    f"eval.checkpoint={out_dir}/checkpoint.sgrc",
                ]
            )
            == 0
        )
        report = load_report(os.path.join(ev, "metrics_report.txt"))
        assert report.ks == (5, 10)
        assert set(report.recall) == {5, 10}
        assert report.metadata["mode"] == "basic"
        assert os.path.getsize(os.path.join(ev, "metrics_at_k.png")) > 0

    def test_perfect_scorer_hits_one(self, pipeline, tmp_path):
        root, cfg_path, data_dir, out_dir = pipeline
        ev = str(tmp_path / "oracle")
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={ev}",
                    "--set",
                    "eval.scorer=perfect",
                    "--set",
                    "eval.ks=15",
                ]
            )
            == 0
        )
        report = load_report(os.path.join(ev, "metrics_report.txt"))
        assert report.recall[15] == 1.0
        assert report.ndcg[15] == 1.0

    def test_deterministic_rerun_bit_identical(self, pipeline, tmp_path):
        root, cfg_path, data_dir, out_dir = pipeline
        r1, r2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        for out in (r1, r2):
            assert (
                main(
                    [
                        "evaluate",
                        "--config",
                        cfg_path,
                        "--set",
                        f"data.dir={data_dir}",
                        "--set",
                        f"out.dir={out}",
                        "--set",
                        f"eval.checkpoint={out_dir}/checkpoint.sgrc",
                    ]
                )
                == 0
            )
        a = open(os.path.join(r1, "metrics_report.txt"), "rb").read()
        b = open(os.path.join(r2, "metrics_report.txt"), "rb").read()
        assert a == b

    def test_deterministic_flag_forces_serial(self, pipeline, tmp_path):
        root, cfg_path, data_dir, out_dir = pipeline
        ev = str(tmp_path / "serial")
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    cfg_path,
                    "--deterministic",
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={ev}",
                    "--set",
                    "eval.workers=4",
                    "--set",
                    f"eval.checkpoint={out_dir}/checkpoint.sgrc",
                ]
            )
            == 0
        )
        effective = open(os.path.join(ev, "effective_config_evaluate.txt")).read()
        assert "eval.workers = 1" in effective

    def test_model_scorer_requires_checkpoint(self, pipeline, tmp_path, capsys):
        root, cfg_path, data_dir, _ = pipeline
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={tmp_path / 'x'}",
                ]
            )
            == 1
        )
        assert "eval.checkpoint" in capsys.readouterr().err


class TestTransfer:
    def test_transfer_report(self, pipeline, tmp_path):
        root, cfg_path, data_dir, out_dir = pipeline
        # target domain: same generator rule, different seed
        target = str(tmp_path / "target")
        assert (
            main(
                [
                    "prepare",
                    "--config",
                    cfg_path,
                    "--set",
                    f"out.dir={target}",
                    "--set",
                    "synth.seed=4",
                ]
            )
            == 0
        )
        tr = str(tmp_path / "trans")
        assert (
            main(
                [
                    "transfer",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={target}",
                    "--set",
                    f"out.dir={tr}",
                    "--set",
                    f"transfer.checkpoint={out_dir}/checkpoint.sgrc",
                ]
            )
            == 0
        )
        report = load_report(os.path.join(tr, "metrics_report.txt"))
        assert report.metadata["mode"] == "transfer"
        assert os.path.exists(os.path.join(tr, "effective_config_transfer.txt"))

    def test_mismatched_model_config_rejected(self, pipeline, tmp_path, capsys):
        root, cfg_path, data_dir, out_dir = pipeline
        assert (
            main(
                [
                    "transfer",
                    "--config",
                    cfg_path,
                    "--set",
                    f"data.dir={data_dir}",
                    "--set",
                    f"out.dir={tmp_path / 'bad'}",
                    "--set",
                    f"transfer.checkpoint={out_dir}/checkpoint.sgrc",
                    "--set",
                    "model.embed_dim=16",
                ]
            )
            == 1
        )
        assert "does not match" in capsys.readouterr().err
