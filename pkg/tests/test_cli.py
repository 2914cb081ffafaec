"""End-to-end command-line flows: exit codes, files written, determinism."""

import csv
import re
from types import SimpleNamespace

import numpy as np
import pytest

from ptu.cli import main
from ptu.data import LabeledDataset, save_idx

CONFIG = """
setting=demo
arch=rnn
methods=notl,ft,ptu,rg
source.dataset=blobs_src
target.dataset=blobs_tgt
dataset.blobs_src.images={data}/src-images.idx
dataset.blobs_src.labels={data}/src-labels.idx
dataset.blobs_src.classes=2
dataset.blobs_tgt.images={data}/tgt-images.idx
dataset.blobs_tgt.labels={data}/tgt-labels.idx
dataset.blobs_tgt.classes=2
dataset.blobs_big.images={data}/big-images.idx
dataset.blobs_big.labels={data}/big-labels.idx
dataset.blobs_big.classes=2
train.lr=0.2
train.lr_candidates=0.2
train.batch_size=16
train.max_steps=250
train.val_every=50
rnn.hidden=8
out={out}
"""


def blob_dataset(n, hw, seed, name):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(2), n // 2)
    base = np.where(labels[:, None, None, None] == 0, 0.2, 0.8)
    images = np.clip(base + rng.normal(0.0, 0.05, size=(n, 1, hw, hw)), 0.0, 1.0)
    return LabeledDataset(images.astype(np.float32), labels.astype(np.int64), 2, name)


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "runs"
    data.mkdir()
    for name, n, seed in (("src", 40, 0), ("tgt", 40, 1), ("big", 800, 2)):
        ds = blob_dataset(n, 6, seed, name)
        save_idx(ds, data / f"{name}-images.idx", data / f"{name}-labels.idx")
    cfg = root / "demo.cfg"
    cfg.write_text(CONFIG.format(data=data, out=out))
    return SimpleNamespace(root=root, data=data, out=out, cfg=str(cfg))


@pytest.fixture(scope="module")
def trained(env):
    assert main(["train-source", "--config", env.cfg]) == 0
    ckpt = env.out / "demo_source.ptuc"
    assert ckpt.exists()
    return ckpt


@pytest.fixture(scope="module")
def ran(env, trained):
    assert main(["run", "--config", env.cfg]) == 0
    return env.out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestTrainSource:
    def test_reports_accuracy_in_band(self, env, tmp_path, capsys):
        code = main(["train-source", "--config", env.cfg, "--out", str(tmp_path / "o")])
        out = capsys.readouterr().out
        assert code == 0
        assert (tmp_path / "o" / "demo_source.ptuc").exists()
        m = re.search(r"source accuracy: (\d\.\d+)", out)
        assert m and float(m.group(1)) >= 0.90

    def test_same_seed_gives_identical_checkpoint_bytes(self, env, tmp_path):
        paths = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["train-source", "--config", env.cfg, "--out", str(out)]) == 0
            paths.append(out / "demo_source.ptuc")
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_dry_run_writes_nothing(self, env, tmp_path, capsys):
        out = tmp_path / "dry"
        code = main(["train-source", "--config", env.cfg, "--out", str(out), "--dry-run"])
        text = capsys.readouterr().out
        assert code == 0
        assert "plan: train-source" in text
        assert "dry run" in text
        assert not out.exists()


class TestRun:
    def test_writes_curves_summary_and_gates(self, env, ran):
        for name in ("demo_notl.csv", "demo_ft_0.csv", "demo_ft_1.csv", "demo_ptu.csv",
                     "demo_rg.csv", "demo_summary.csv", "demo_ptu_gates.csv"):
            assert (ran / name).exists(), name

    def test_summary_holds_every_method_and_a_delta(self, env, ran):
        rows = read_rows(ran / "demo_summary.csv")
        assert rows[0] == ["method", "selected_lr", "test_accuracy", "delta_vs_best_ft"]
        by_method = {r[0]: r for r in rows[1:]}
        assert set(by_method) == {"notl", "ft_0", "ft_1", "ptu", "rg"}
        float(by_method["ptu"][3])  # delta vs best ft is present and numeric
        assert by_method["rg"][3] == ""

    def test_curve_rows_match_validation_cadence(self, env, ran):
        rows = read_rows(ran / "demo_notl.csv")
        assert rows[0] == ["step", "train_loss", "val_acc"]
        assert [r[0] for r in rows[1:]] == ["50", "100", "150", "200", "250"]

    def test_missing_checkpoint_exits_two(self, env, tmp_path, capsys):
        code = main(["run", "--config", env.cfg, "--out", str(tmp_path / "fresh")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_dry_run_lists_planned_outputs(self, env, tmp_path, capsys):
        out = tmp_path / "dry"
        code = main(["run", "--config", env.cfg, "--out", str(out), "--dry-run"])
        text = capsys.readouterr().out
        assert code == 0
        assert "demo_summary.csv" in text
        assert not out.exists()

    def test_guess_only_run_scores_near_chance(self, env, tmp_path, capsys):
        cfg = env.root / "rg.cfg"
        cfg.write_text(CONFIG.format(data=env.data, out=tmp_path / "rg")
                       + "methods=rg\ntarget.dataset=blobs_big\n")
        assert main(["run", "--config", str(cfg)]) == 0
        rows = read_rows(tmp_path / "rg" / "demo_summary.csv")
        assert len(rows) == 2 and rows[1][0] == "rg"
        acc, n_test = float(rows[1][2]), 120
        assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / n_test)


class TestDeterminism:
    def test_identical_config_and_seed_give_byte_identical_outputs(self, env, trained,
                                                                   tmp_path):
        cfg = env.root / "det.cfg"
        cfg.write_text(CONFIG.format(data=env.data, out="unused")
                       + f"source.checkpoint={trained}\nmethods=notl,ft,ptu\n")
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
            outs.append(out)
        for name in ("demo_summary.csv", "demo_ptu.csv", "demo_ptu_gates.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


@pytest.fixture(scope="module")
def reported(env, ran):
    assert main(["report", str(ran)]) == 0
    return ran


class TestReport:
    def test_merged_curves_align_on_checkpoint_steps(self, reported):
        rows = read_rows(reported / "demo_curves.csv")
        assert rows[0][0] == "step"
        assert [r[0] for r in rows[1:]] == ["50", "100", "150", "200", "250"]
        trained = ("ft_0", "ft_1", "notl", "ptu")
        assert rows[0][1:] == [f"{m}_{c}" for m in trained + ("rg",)
                               for c in ("train_loss", "val_acc")]

    def test_gate_table_covers_every_junction(self, reported):
        # the recurrent assembly fires its shared gate unit once per scanned
        # row, so a 6-pixel-tall input yields 6 junction rows
        rows = read_rows(reported / "demo_gate_table.csv")
        assert rows[0] == ["layer", "mean_r", "mean_z"]
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(6)]

    def test_idempotent(self, env, reported):
        before = {p.name: p.read_bytes()
                  for p in reported.glob("demo_curves.*")}
        before |= {p.name: p.read_bytes() for p in reported.glob("demo_gate_table.csv")}
        assert main(["report", str(reported)]) == 0
        for name, blob in before.items():
            assert (reported / name).read_bytes() == blob, name

    def test_single_method_directory(self, tmp_path, ran):
        only = tmp_path / "only"
        only.mkdir()
        for name in ("demo_notl.csv", "demo_summary.csv"):
            (only / name).write_bytes((ran / name).read_bytes())
        assert main(["report", str(only)]) == 0
        header = read_rows(only / "demo_curves.csv")[0]
        assert header == ["step", "notl_train_loss", "notl_val_acc"]

    def test_report_out_override(self, tmp_path, ran):
        dest = tmp_path / "merged"
        assert main(["report", str(ran), "--out", str(dest)]) == 0
        assert (dest / "demo_curves.csv").exists()

    def test_missing_directory_exits_two(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nope")]) == 2
        capsys.readouterr()

    def test_directory_without_summaries_exits_two(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", str(empty)]) == 2

    def test_malformed_curve_exits_three(self, tmp_path, ran, capsys):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "demo_summary.csv").write_bytes((ran / "demo_summary.csv").read_bytes())
        (bad / "demo_notl.csv").write_text("step,bogus\n1,2\n")
        assert main(["report", str(bad)]) == 3
        assert "demo_notl.csv" in capsys.readouterr().err


class TestExitCodes:
    def test_malformed_config_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("this is not a pair\n")
        assert main(["run", "--config", str(cfg)]) == 1
        assert "config error" in capsys.readouterr().err

    def test_unknown_method_exits_one(self, env, tmp_path, capsys):
        cfg = tmp_path / "m.cfg"
        cfg.write_text(CONFIG.format(data=env.data, out=tmp_path) + "methods=svm\n")
        assert main(["run", "--config", str(cfg)]) == 1
        capsys.readouterr()

    def test_missing_dataset_file_exits_two(self, tmp_path, capsys):
        cfg = tmp_path / "gone.cfg"
        cfg.write_text(CONFIG.format(data=tmp_path / "absent", out=tmp_path))
        assert main(["train-source", "--config", str(cfg)]) == 2
        assert "i/o error" in capsys.readouterr().err

    def test_bad_cli_arguments_exit_one(self, capsys):
        assert main(["run"]) == 1  # --config is required
        capsys.readouterr()
