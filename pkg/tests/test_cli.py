import csv

import numpy as np
import pytest

from aimfuse import gradcheck as gc
from aimfuse import numkernel as nk
from aimfuse.cli import main
from aimfuse.fusion import read_routing
from aimfuse.kgdata import load_benchmark

FAST = ["--set", "epochs=2", "--set", "hidden=8", "--set", "heads=2", "--set", "batch_size=64"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["gen-data", "--out", str(out), "--drugs", "16", "--events", "3", "--pairs", "80",
                 "--lm-dim", "8", "--planted-rule", "--seed", "2", "--folds", "3"]) == 0
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenData:
    def test_files_parse_back(self, data_dir):
        bench = load_benchmark(data_dir)
        assert len(bench.drugs) == 16 and len(bench.dataset) == 80 and bench.dataset.n_events == 3

    def test_deterministic(self, tmp_path):
        args = ["gen-data", "--drugs", "12", "--events", "3", "--pairs", "40", "--lm-dim", "4", "--seed", "9"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        args = ["gen-data", "--drugs", "12", "--events", "3", "--pairs", "40", "--lm-dim", "4"]
        monkeypatch.setenv("AIMFUSE_SEED", "9")
        assert main(args + ["--out", str(tmp_path / "env")]) == 0
        monkeypatch.delenv("AIMFUSE_SEED")
        assert main(args + ["--out", str(tmp_path / "flag"), "--seed", "9"]) == 0
        assert main(args + ["--out", str(tmp_path / "zero")]) == 0
        pairs = lambda d: (tmp_path / d / "pairs.txt").read_bytes()
        assert pairs("env") == pairs("flag") != pairs("zero")

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AIMFUSE_SEED", "abc")
        assert main(["gen-data", "--out", str(tmp_path / "x")]) == 1

    def test_infeasible(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--drugs", "1"]) == 1


class TestTrainEval:
    def test_reports(self, data_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train-eval", "--data", str(data_dir), "--out", str(out), "--seed", "1"] + FAST) == 0
        rows = _read_csv(out / "metrics.csv")
        assert [r["fold"] for r in rows] == ["0", "1", "2", "mean", "std"]
        for i in range(3):
            for name in ("history.csv", "model.npz", "routing.tsv", "tokens.tsv", "predictions.tsv"):
                assert (out / f"fold{i}" / name).is_file()
        assert any(p.suffix == ".png" for p in out.iterdir())
        assert "mean" in capsys.readouterr().out

    def test_deterministic(self, data_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["train-eval", "--data", str(data_dir), "--out", str(tmp_path / name),
                         "--no-figures"] + FAST) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a/fold0/model.npz").read_bytes() == (tmp_path / "b/fold0/model.npz").read_bytes()

    def test_subset(self, data_dir, tmp_path):
        (tmp_path / "subset.txt").write_text("DB000\nDB001\n")
        assert main(["train-eval", "--data", str(data_dir), "--out", str(tmp_path / "s"), "--no-figures",
                     "--subset", str(tmp_path / "subset.txt")] + FAST) == 0
        assert [r["fold"] for r in _read_csv(tmp_path / "s" / "subset.csv")] == ["0", "1", "2"]

    def test_one_fold_refused(self, data_dir, tmp_path):
        assert main(["train-eval", "--data", str(data_dir), "--out", str(tmp_path / "x"), "--folds", "1"]) == 1

    def test_unknown_config_key(self, data_dir, tmp_path):
        assert main(["train-eval", "--data", str(data_dir), "--out", str(tmp_path / "x"),
                     "--set", "learning_rate=1"]) == 1

    def test_incomplete_split_file(self, data_dir, tmp_path):
        (tmp_path / "split.tsv").write_text("0\tDB000\n1\tDB001\n")
        assert main(["train-eval", "--data", str(data_dir), "--out", str(tmp_path / "x"),
                     "--split", str(tmp_path / "split.tsv")] + FAST) == 1

    def test_missing_data_dir(self, tmp_path):
        assert main(["train-eval", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 1

    def test_usage_error_is_config_error(self):
        assert main(["train-eval", "--bogus"]) == 1


class TestAblateAndFrank:
    def test_variant_file(self, data_dir, tmp_path):
        (tmp_path / "v.txt").write_text("# name overrides\nsep pair_variant=separate\navg pair_variant=drug-average\n")
        assert main(["ablate", "--data", str(data_dir), "--out", str(tmp_path / "ab"), "--folds", "2",
                     "--variants", str(tmp_path / "v.txt")] + FAST) == 0
        rows = _read_csv(tmp_path / "ab" / "matrix_v.csv")
        assert [r["variant"] for r in rows] == ["sep", "avg"]
        assert all(1.0 <= float(r["f_rank"]) <= 2.0 for r in rows)

    def test_unknown_variant_key(self, data_dir, tmp_path):
        (tmp_path / "v.txt").write_text("a experts=2\nb expertz=3\n")
        assert main(["ablate", "--data", str(data_dir), "--out", str(tmp_path / "ab"),
                     "--variants", str(tmp_path / "v.txt")]) == 1

    def test_single_variant_refused(self, data_dir, tmp_path):
        (tmp_path / "v.txt").write_text("only experts=2\n")
        assert main(["ablate", "--data", str(data_dir), "--out", str(tmp_path / "ab"), "--folds", "2",
                     "--variants", str(tmp_path / "v.txt")] + FAST) == 1

    def test_frank(self, tmp_path, capsys):
        src = tmp_path / "m.csv"
        src.write_text("variant,acc,auc,aupr,f1,pre,rec\nx,0.9,0.9,0.9,0.9,0.9,0.9\ny,0.1,0.1,0.1,0.1,0.1,0.1\n")
        assert main(["frank", "--metrics", str(src), "--out", str(tmp_path / "fr")]) == 0
        assert capsys.readouterr().out.splitlines() == ["variant,f_rank", "x,2.00", "y,1.00"]
        assert (tmp_path / "fr" / "frank.png").is_file()

    def test_frank_missing_cell(self, tmp_path):
        src = tmp_path / "m.csv"
        src.write_text("variant,acc,auc,aupr,f1,pre,rec\nx,0.9,0.9,,0.9,0.9,0.9\ny,0.1,0.1,0.1,0.1,0.1,0.1\n")
        assert main(["frank", "--metrics", str(src)]) == 1


class TestGradcheck:
    @pytest.fixture
    def corrupted_case(self):
        def build(rng):
            x = nk.parameter(rng.normal(size=3))

            def f():
                out = nk.tanh(x)
                out._backward = lambda: None
                return nk.sum(out)
            return f, [x]
        gc.register_case(gc.GradCase("corrupted_tanh", "kernel", build, points=1))
        yield "corrupted_tanh"
        gc.unregister_case("corrupted_tanh")

    def test_subset_passes(self, capsys):
        assert main(["gradcheck", "--only", "matmul", "softmax", "focal_loss"]) == 0
        lines = capsys.readouterr().out.splitlines()
        names = [ln.split(",")[0] for ln in lines[1:4]]
        assert names == ["matmul", "softmax", "focal_loss"]
        assert "component,max_rel_error" in lines

    def test_negative_control_exits_2(self, corrupted_case, capsys):
        assert main(["gradcheck", "--only", corrupted_case, "matmul"]) == 2
        out = capsys.readouterr().out
        assert "corrupted_tanh,kernel" in out and "FAIL" in out

    def test_unknown_case(self):
        assert main(["gradcheck", "--only", "no_such_case"]) == 1


class TestTelemetry:
    def test_report(self, data_dir, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train-eval", "--data", str(data_dir), "--out", str(run), "--no-figures"] + FAST) == 0
        routing = [str(run / f"fold{i}" / "routing.tsv") for i in range(3)]
        assert main(["telemetry-report", "--routing", *routing, "--out", str(tmp_path / "tel")]) == 0
        experts = _read_csv(tmp_path / "tel" / "experts.csv")
        n_test = sum(len(read_routing(p)) for p in routing)
        assert sum(int(r["assigned"]) for r in experts) == n_test
        mods = _read_csv(tmp_path / "tel" / "modalities.csv")
        assert sum(float(r["mean_contribution"]) for r in mods) == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "tel" / "routing.png").is_file()

    def test_missing_file(self, tmp_path):
        assert main(["telemetry-report", "--routing", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == 1


def test_export_prompts(data_dir, tmp_path):
    assert main(["export-prompts", "--data", str(data_dir), "--out", str(tmp_path / "p.tsv")]) == 0
    assert (tmp_path / "p.tsv").stat().st_size > 0


def test_split_command(data_dir, tmp_path, capsys):
    assert main(["split", "--data", str(data_dir), "--setting", "one-unseen", "--folds", "4",
                 "--out", str(tmp_path / "s.tsv")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5
    assert np.unique([ln.split("\t")[0] for ln in (tmp_path / "s.tsv").read_text().splitlines()]).size == 4
