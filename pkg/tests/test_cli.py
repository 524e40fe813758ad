"""CLI subcommands: determinism, idempotency, provenance, schemas, exit codes."""

import filecmp
import json
import os

import pytest

from mapa_lab.artifacts import read_csv
from mapa_lab.cli import main

DATA_ARGS = ["--name", "abs_value", "--n", "200", "--seed", "7"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A populated output tree shared by the read-only CLI tests."""
    out = tmp_path_factory.mktemp("cli-out")
    assert main(["generate-data", *DATA_ARGS, "--out", str(out)]) == 0
    return out


def data_path(out):
    return os.path.join(out, "data", "abs_value-n200-seed7")


class TestGenerateData:
    def test_rerun_is_noop_and_bytes_identical(self, workspace, capsys):
        target = data_path(workspace)
        before = {f: os.path.getmtime(os.path.join(target, f)) for f in os.listdir(target)}
        assert main(["generate-data", *DATA_ARGS, "--out", str(workspace)]) == 0
        assert "up to date" in capsys.readouterr().out
        after = {f: os.path.getmtime(os.path.join(target, f)) for f in os.listdir(target)}
        assert before == after

    def test_force_rewrites_identically(self, workspace, tmp_path):
        assert main(["generate-data", *DATA_ARGS, "--out", str(tmp_path)]) == 0
        a, b = data_path(workspace), data_path(tmp_path)
        for fname in ("dataset.json", "X.bin", "z_gt.bin", "eps_gt.bin",
                      "gt_model.json", "gt_model.bin"):
            assert filecmp.cmp(os.path.join(a, fname), os.path.join(b, fname),
                               shallow=False), fname

    def test_unknown_dataset_exits_2(self, tmp_path, capsys):
        code = main(["generate-data", "--name", "moons", "--out", str(tmp_path)])
        assert code == 2
        assert "unknown dataset" in capsys.readouterr().err

    def test_provenance_header_present(self, workspace):
        with open(os.path.join(data_path(workspace), "dataset.json")) as f:
            meta = json.load(f)
        prov = meta["provenance"]
        assert set(prov) == {"config_hash", "seed", "version"}


@pytest.fixture(scope="module")
def trained(workspace):
    rc = main(["train", "--data", data_path(workspace), "--method", "mapa",
               "--s", "4", "--k-frac", "0.25", "--epochs", "4", "--restarts", "1",
               "--batch-size", "50", "--seed", "3", "--out", str(workspace)])
    assert rc == 0
    return os.path.join(workspace, "runs", "abs_value", "mapa-s4-k1", "seed3")


class TestTrain:
    def test_artifacts_exist_with_schema(self, trained):
        assert os.path.exists(os.path.join(trained, "model.json"))
        assert os.path.exists(os.path.join(trained, "model.bin"))
        prov, fields, rows = read_csv(os.path.join(trained, "history.csv"))
        assert fields == ["epoch", "train_bound", "val_bound", "wall_clock_s",
                          "decoder_passes", "encoder_passes"]
        assert len(rows) == 4
        assert prov["config_hash"]

    def test_rerun_is_noop(self, workspace, trained, capsys):
        rc = main(["train", "--data", data_path(workspace), "--method", "mapa",
                   "--s", "4", "--k-frac", "0.25", "--epochs", "4", "--restarts", "1",
                   "--batch-size", "50", "--seed", "3", "--out", str(workspace)])
        assert rc == 0
        assert "up to date" in capsys.readouterr().out

    def test_unknown_method_exits_2(self, workspace):
        rc = main(["train", "--data", data_path(workspace), "--method", "gan",
                   "--out", str(workspace)])
        assert rc == 2

    def test_missing_dataset_exits_2(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--method", "ae",
                   "--out", str(tmp_path)])
        assert rc == 2


class TestRecoverAndFailures:
    def test_impossible_gate_exits_1(self, workspace, trained, capsys):
        rc = main(["recover-prior", "--data", data_path(workspace), "--run", trained,
                   "--epochs", "1", "--decoder-fail-nats", "1e-12", "--seed", "1"])
        assert rc == 1
        assert "failure" in capsys.readouterr().err


class TestComputeMapa:
    def test_caches_table(self, workspace, tmp_path, capsys):
        rc = main(["compute-mapa", "--data", data_path(workspace),
                   "--cache", str(tmp_path)])
        assert rc == 0
        files = list(tmp_path.iterdir())
        assert any(f.name.endswith(".q.bin") for f in files)
        rc = main(["compute-mapa", "--data", data_path(workspace),
                   "--cache", str(tmp_path)])
        assert rc == 0
        assert sorted(tmp_path.iterdir()) == sorted(files)


class TestConfigFile:
    def test_flags_override_config(self, tmp_path, capsys):
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text("[experiment]\ndatasets = abs_value\nn = 999\nseed = 7\n")
        # --n on the command line must win over the file's 999
        rc = main(["all", "--config", str(cfg), "--n", "150", "--methods", "ae",
                   "--s-grid", "2", "--epochs", "2", "--restarts", "1",
                   "--recover-epochs", "40", "--eval-fit-epochs", "1",
                   "--eval-s", "8", "--ll-s", "64", "--points", "4",
                   "--encoder-fail-mse", "1.0", "--decoder-fail-nats", "1e5",
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        assert (tmp_path / "out" / "data" / "abs_value-n150-seed7").exists()

    def test_missing_config_file_exits_2(self, tmp_path):
        rc = main(["all", "--config", str(tmp_path / "nope.cfg"),
                   "--out", str(tmp_path)])
        assert rc == 2


class TestFullPipeline:
    def test_all_smoke_produces_full_layout(self, tmp_path):
        # the spec's smoke benchmark: N=500 end-to-end on one core in <10 min
        import time
        t0 = time.perf_counter()
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text(
            "[experiment]\n"
            "datasets = abs_value\n"
            "methods = mapa, iwae\n"
            "n = 500\n"
            "s_grid = 3\n"
            "k_frac = 0.34\n"
            "epochs = 3\n"
            "restarts = 1\n"
            "recover_epochs = 60\n"
            "encoder_fail_mse = 1.0\n"
            "decoder_fail_nats = 1e5\n"
            "eval_fit_epochs = 1\n"
            "eval_s = 8\n"
            "ll_s = 64\n"
            "points = 4\n"
            "seed = 11\n")
        out = tmp_path / "out"
        assert main(["all", "--config", str(cfg), "--out", str(out)]) == 0
        base = out / "runs" / "abs_value"
        mapa_run = base / "mapa-s3-k1" / "seed11"
        iwae_run = base / "iwae-s3-k0" / "seed11"
        for run in (mapa_run, iwae_run):
            assert (run / "model.json").exists()
            assert (run / "history.csv").exists()
            assert (run / "eval.json").exists()
            assert (run / "eval_points.csv").exists()
        assert (mapa_run / "recovered.json").exists()
        assert not (iwae_run / "recovered.json").exists()
        assert (out / "reports" / "cost_abs_value.csv").exists()
        assert (out / "reports" / "trends_abs_value.csv").exists()

        prov, fields, rows = read_csv(out / "reports" / "trends_abs_value.csv")
        assert fields == ["point", "series", "x", "y"]
        assert {r["series"] for r in rows} == {"original", "empiricalized", "mapa"}

        prov, fields, rows = read_csv(out / "reports" / "cost_abs_value.csv")
        assert fields == ["method", "s", "k", "decoder_per_point",
                          "encoder_per_point", "total_per_point"]
        with open(mapa_run / "eval.json") as f:
            payload = json.load(f)
        assert payload["provenance"]["config_hash"]
        assert payload["method"] == "mapa"
        assert time.perf_counter() - t0 < 600
