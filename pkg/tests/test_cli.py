"""Command-line entry point: dispatch, exit codes and file outputs."""

import csv

import pytest

from usad import cli
from usad.autodiff import count_parameters
from usad.config import SEED_ENV
from usad.pipeline import LOG_FIELDS, load_model, read_csv_rows, rows_to_csv

TINY = """\
seed = 2
data.toy.length = 16
data.toy.per_class = 20
diffusion.T = 10
diffusion.channels = 8
diffusion.blocks = 1
diffusion.epochs = 2
diffusion.batch = 16
pretrain.epochs = 1
pretrain.batch = 16
finetune.epochs = 2
finetune.batch = 16
model.channels = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    for cmd in ("train-diffusion", "pretrain", "finetune"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestDispatch:
    @pytest.mark.parametrize("argv", [["--help"], ["evaluate", "--help"], ["bench", "--help"]])
    def test_help(self, argv, capsys):
        assert cli.main(argv) == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_subcommand(self):
        assert cli.main(["explode"]) == 1

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "nope.cfg"
        assert cli.main(["prepare", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_unknown_key(self, cfg_file, tmp_path):
        assert cli.main(["prepare", "--config", str(cfg_file), "--set", "bogus=1", "--out", str(tmp_path)]) == 1

    def test_internal_error(self, cfg_file, tmp_path, monkeypatch):
        def boom(args):
            raise RuntimeError("bug")
        monkeypatch.setitem(cli.COMMANDS, "prepare", boom)
        assert cli.main(["prepare", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2

    def test_env_seed(self, tmp_path, monkeypatch, capsys):
        path = tmp_path / "noseed.cfg"
        path.write_text(TINY.replace("seed = 2\n", ""))
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert cli.main(["prepare", "--config", str(path), "--out", str(tmp_path / "a")]) == 1
        monkeypatch.setenv(SEED_ENV, "2")
        assert cli.main(["prepare", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
        assert "seed = 2" in (tmp_path / "b" / "config.resolved").read_text()


class TestStages:
    def test_prepare_writes_splits(self, cfg_file, tmp_path, capsys):
        assert cli.main(["prepare", "--config", str(cfg_file), "--out", str(tmp_path / "p")]) == 0
        for name in ("train.csv", "val.csv", "test.csv", "data_hash.txt", "config.resolved"):
            assert (tmp_path / "p" / name).is_file()
        assert "data_hash=" in capsys.readouterr().out

    def test_stage_outputs(self, trained):
        _, out = trained
        for name in ("diffusion.ckpt", "pretrain.ckpt", "finetune.ckpt", "metrics_test.csv", "config.resolved"):
            assert (out / name).is_file()

    def test_synth_count(self, trained, tmp_path, capsys):
        cfg, out = trained
        target = tmp_path / "s.csv"
        assert cli.main(["synth", "--config", str(cfg), "--out", str(out), "--count", "6", "--file",
                         str(target)]) == 0
        with target.open() as fh:
            labels = [row["label"] for row in csv.DictReader(fh)]
        assert sorted(labels) == ["0", "0", "0", "1", "1", "1"]

    def test_evaluate(self, trained, capsys):
        cfg, out = trained
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out), "--split", "val"]) == 0
        assert capsys.readouterr().out.startswith("split,Acc")
        assert (out / "metrics_val.csv").is_file()

    def test_evaluate_refuses_other_data(self, trained, tmp_path):
        cfg, out = trained
        argv = ["evaluate", "--config", str(cfg), "--out", str(tmp_path), "--model", str(out / "finetune.ckpt"),
                "--set", "data.toy.noise=0.9"]
        assert cli.main(argv) == 1
        assert cli.main(argv + ["--force"]) == 0

    def test_identical_reruns(self, trained, tmp_path):
        cfg, out = trained
        again = tmp_path / "again"
        for cmd in ("train-diffusion", "pretrain", "finetune"):
            assert cli.main([cmd, "--config", str(cfg), "--out", str(again)]) == 0
        for name in ("diffusion.ckpt", "pretrain.ckpt", "finetune.ckpt", "metrics_test.csv", "synthetic.csv"):
            assert (out / name).read_bytes() == (again / name).read_bytes(), name
        for name in ("log.csv", "log_finetune.csv"):
            a, b = read_csv_rows(out / name), read_csv_rows(again / name)
            assert rows_to_csv(a, LOG_FIELDS, ("wall_s",)) == rows_to_csv(b, LOG_FIELDS, ("wall_s",))

    def test_resolved_config_replays(self, trained, tmp_path):
        _, out = trained
        replay = tmp_path / "replay"
        assert cli.main(["finetune", "--config", str(out / "config.resolved"), "--out", str(replay),
                         "--set", "stages=finetune"]) == 0
        assert (replay / "metrics_test.csv").is_file()


class TestAblateBenchInspect:
    def test_ablate_four_rows(self, cfg_file, tmp_path, capsys):
        assert cli.main(["ablate", "--config", str(cfg_file), "--out", str(tmp_path / "abl"),
                         "--toggles", "spatial_attn,augmentation"]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 1 + 4
        assert len(read_csv_rows(tmp_path / "abl" / "ablation.csv")) == 4

    def test_ablate_unknown_toggle(self, cfg_file, tmp_path):
        assert cli.main(["ablate", "--config", str(cfg_file), "--out", str(tmp_path), "--toggles", "x"]) == 1

    def test_bench(self, trained, tmp_path, capsys):
        cfg, out = trained
        assert cli.main(["bench", "--config", str(cfg), "--model", str(out / "finetune.ckpt"), "--reps", "5",
                         "--warmup", "1", "--out", str(tmp_path / "b")]) == 0
        assert "budget 200 ms" in capsys.readouterr().out
        assert len(read_csv_rows(tmp_path / "b" / "latency.csv")) == 6

    def test_bench_missing_model(self, tmp_path):
        assert cli.main(["bench", "--model", str(tmp_path / "none.ckpt")]) == 1

    def test_inspect_diffusion(self, trained, capsys):
        _, out = trained
        assert cli.main(["inspect", str(out / "diffusion.ckpt")]) == 0
        text = capsys.readouterr().out
        assert "proto/0" in text and "proto/1" in text and "data_hash:" in text and "config:" in text

    def test_inspect_parameter_total(self, trained, capsys):
        _, out = trained
        assert cli.main(["inspect", str(out / "finetune.ckpt")]) == 0
        line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("parameters:"))
        model, _, _ = load_model(out / "finetune.ckpt")
        assert int(line.split(":")[1]) == count_parameters(model)

    def test_inspect_truncated(self, trained, tmp_path, capsys):
        _, out = trained
        blob = (out / "finetune.ckpt").read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[: len(blob) // 2])
        assert cli.main(["inspect", str(bad)]) == 1
        assert "truncated" in capsys.readouterr().err

    def test_inspect_bad_magic(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + b"\x00" * 20)
        assert cli.main(["inspect", str(bad)]) == 1
