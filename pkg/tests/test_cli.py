import json

import numpy as np
import pytest

from bfscnn import cli
from bfscnn.formats import read_bfs_csv, read_bgs, write_bgs
from bfscnn.model import load_checkpoint
from bfscnn.spectra import DistributedBgs, SweepRange, lorentzian


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "small.bfsn"
    assert run("train", "--arch", "small", "--epochs", "1", "--updates-per-epoch", "2",
               "--batch", "1", "--traces", "8", "--out", path, "-q") == 0
    return path


class TestSimulate:
    def test_fixed_parameters(self, tmp_path):
        out = tmp_path / "a.bgs"
        assert run("simulate", "--traces", 224, "--bfs", 0.3, "--sw", 0.25, "--snr", 11,
                   "--out", out) == 0
        d = read_bgs(out)
        assert d.matrix.shape == (151, 224)
        np.testing.assert_array_equal(d.truth, 0.3)
        m = json.loads((tmp_path / "a.bgs.manifest.json").read_text())
        assert m["command"] == "simulate" and m["seed"] == 0 and m["outputs"] == [str(out)]

    def test_minimal(self, tmp_path):
        assert run("simulate", "--traces", 1, "--out", tmp_path / "one.bgs") == 0
        assert read_bgs(tmp_path / "one.bgs").n_traces == 1

    def test_byte_identical_rerun(self, tmp_path):
        args = ["simulate", "--traces", 30, "--bfs", "0.1:0.9", "--seed", 5]
        run(*args, "--out", tmp_path / "a.bgs")
        run(*args, "--out", tmp_path / "b.bgs")
        assert (tmp_path / "a.bgs").read_bytes() == (tmp_path / "b.bgs").read_bytes()
        run("simulate", "--traces", 30, "--bfs", "0.1:0.9", "--seed", 6, "--out", tmp_path / "c.bgs")
        assert (tmp_path / "a.bgs").read_bytes() != (tmp_path / "c.bgs").read_bytes()

    def test_step_and_csv(self, tmp_path):
        assert run("simulate", "--traces", 50, "--step-heated", 0.6, "--step-start", 20,
                   "--out", tmp_path / "s.csv") == 0
        assert (tmp_path / "s.csv").read_text().startswith("0,1,2")

    def test_invalid_range(self, tmp_path):
        assert run("simulate", "--bfs", "0.9:0.1", "--out", tmp_path / "x.bgs") == 1
        assert run("simulate", "--bfs", "1.5", "--out", tmp_path / "x.bgs") == 1

    def test_unwritable(self, tmp_path):
        assert run("simulate", "--out", tmp_path / "missing" / "x.bgs") == 1


class TestFitInfer:
    def test_noiseless_fit(self, tmp_path):
        run("simulate", "--traces", 20, "--bfs", "0.2:0.8", "--snr", 400, "--out", tmp_path / "a.bgs")
        assert run("fit", "--in", tmp_path / "a.bgs", "--out", tmp_path / "a.csv") == 0
        fit = read_bfs_csv(tmp_path / "a.csv")
        np.testing.assert_allclose(fit.values, read_bgs(tmp_path / "a.bgs").truth, atol=1e-6)

    def test_infer_rows_and_schema(self, tmp_path, small_ckpt):
        run("simulate", "--traces", 13, "--out", tmp_path / "a.bgs")
        assert run("infer", "--checkpoint", small_ckpt, "--in", tmp_path / "a.bgs",
                   "--out", tmp_path / "cnn.csv") == 0
        run("fit", "--in", tmp_path / "a.bgs", "--out", tmp_path / "lcf.csv")
        cnn = (tmp_path / "cnn.csv").read_text().splitlines()
        lcf = (tmp_path / "lcf.csv").read_text().splitlines()
        assert len(cnn) == 14 and cnn[0] == lcf[0]

    def test_failed_columns_exit_numeric(self, tmp_path):
        m = np.stack([lorentzian(SweepRange().grid(), 1, 0.5, 0.2), np.ones(151)], axis=1)
        write_bgs(tmp_path / "flat.bgs", DistributedBgs(SweepRange(), m))
        assert run("fit", "--in", tmp_path / "flat.bgs", "--out", tmp_path / "f.csv") == 3
        summary = json.loads((tmp_path / "f.csv.manifest.json").read_text())["summary"]
        assert summary["failed"] == 1

    def test_format_error(self, tmp_path):
        run("simulate", "--traces", 3, "--out", tmp_path / "a.bgs")
        (tmp_path / "t.bgs").write_bytes((tmp_path / "a.bgs").read_bytes()[:100])
        assert run("fit", "--in", tmp_path / "t.bgs", "--out", tmp_path / "t.csv") == 2

    def test_bad_checkpoint(self, tmp_path):
        run("simulate", "--traces", 3, "--out", tmp_path / "a.bgs")
        (tmp_path / "bad.bfsn").write_bytes(b"BFSN" + bytes(20))
        assert run("infer", "--checkpoint", tmp_path / "bad.bfsn", "--in", tmp_path / "a.bgs",
                   "--out", tmp_path / "x.csv") == 2

    def test_missing_input_named(self, tmp_path, caplog):
        assert run("fit", "--in", tmp_path / "nope.bgs", "--out", tmp_path / "x.csv") == 1
        assert "nope.bgs" in caplog.text


class TestTrain:
    def test_defaults(self):
        args = cli.build_parser().parse_args(["train", "--out", "x"])
        assert (args.epochs, args.batch, args.lr, args.decay) == (22, 8, 0.001, 0.0001)
        assert (args.updates_per_epoch, args.traces) == (375, 224)
        assert (args.anneal_from, args.decay_rule, args.train_precision) == (0, "inverse", "float64")

    def test_zero_epochs(self, tmp_path):
        assert run("train", "--arch", "small", "--epochs", 0, "--out", tmp_path / "init.bfsn") == 0
        ck = load_checkpoint(tmp_path / "init.bfsn")
        assert ck.metadata["updates"] == 0
        assert (tmp_path / "init_loss.csv").read_text() == "update,loss\n"

    def test_loss_csv(self, small_ckpt):
        rows = small_ckpt.with_name("small_loss.csv").read_text().splitlines()
        assert rows[0] == "update,loss" and len(rows) == 3


class TestEval:
    def test_grid_skeleton(self, tmp_path):
        assert run("eval", "grid", "--axes", "table1", "--dry-run", "--out-dir", tmp_path) == 0
        doc = json.loads((tmp_path / "grid.json").read_text())
        assert len(doc["cells"]) == 1224 and doc["cells"][0]["status"] == "pending"
        assert (tmp_path / "manifest.json").exists()

    def test_grid_cells(self, tmp_path, small_ckpt):
        assert run("eval", "grid", "--axes", "custom", "--snr-values", "9,15", "--bfs-values", "0.3",
                   "--sw-values", "0.25", "--n-per-cell", 4, "--checkpoint", small_ckpt,
                   "--out-dir", tmp_path) == 0
        doc = json.loads((tmp_path / "grid.json").read_text())
        assert [c["status"] for c in doc["cells"]] == ["ok", "ok"]
        assert (tmp_path / "diff_sw25.csv").exists()

    def test_custom_needs_axes(self, tmp_path):
        assert run("eval", "grid", "--axes", "custom", "--out-dir", tmp_path) == 1

    def test_resolution_from_file(self, tmp_path, capsys):
        run("simulate", "--traces", 120, "--step-heated", 0.6, "--step-start", 50, "--step-ramp", 10,
            "--snr", 30, "--out", tmp_path / "step.bgs")
        capsys.readouterr()
        assert run("eval", "resolution", "--in", tmp_path / "step.bgs", "--out-dir", tmp_path / "r") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("LCF\t")
        width = float(lines[0].split("\t")[1])
        assert abs(width - 8) < 1.5

    def test_uncertainty(self, tmp_path):
        assert run("eval", "uncertainty", "--traces", 30, "--repeats", 3, "--out-dir", tmp_path) == 0
        doc = json.loads((tmp_path / "uncertainty.json").read_text())
        assert len(doc["extractors"]["LCF"]["coeffs"]) == 3

    def test_no_extractor(self, tmp_path):
        assert run("eval", "uncertainty", "--no-lcf", "--out-dir", tmp_path) == 1


class TestBench:
    def test_report(self, tmp_path, small_ckpt):
        assert run("bench", "--traces", 100, "--checkpoint", small_ckpt, "--out-dir", tmp_path) == 0
        doc = json.loads((tmp_path / "bench.json").read_text())
        assert doc["reference_per_1000"] == {"CNN": 0.129, "LCF": 0.814}
        assert set(doc["reports"]) == {"LCF", "CNN"} and doc["ratio_lcf_over_cnn"] > 0


class TestContract:
    def test_usage_errors(self):
        assert run() == 1
        assert run("fit", "--bogus") == 1
        assert run("simulate", "--out", "x", "--threads", 0) == 1

    def test_manifest_rerun(self, tmp_path):
        out = tmp_path / "a.bgs"
        run("simulate", "--traces", 40, "--snr", "5:20", "--seed", 9, "--out", out)
        first = out.read_bytes()
        manifest = tmp_path / "a.bgs.manifest.json"
        out.unlink()
        assert cli.command_from_manifest(manifest)[0] == "simulate"
        assert run("rerun", manifest) == 0
        assert out.read_bytes() == first

    def test_manifests_differ_only_in_time(self, tmp_path):
        for name in ("a", "b"):
            run("fit", "--in", self._data(tmp_path), "--out", tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        a = json.loads((tmp_path / "a.csv.manifest.json").read_text())
        b = json.loads((tmp_path / "b.csv.manifest.json").read_text())
        for m in (a, b):
            for k in ("started", "finished", "argv", "config", "outputs"):
                m.pop(k)
        assert a == b

    @staticmethod
    def _data(tmp_path):
        p = tmp_path / "d.bgs"
        if not p.exists():
            run("simulate", "--traces", 10, "--out", p)
        return p
