import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.optimize import linprog

from otalign.cli import main
from otalign.labels import DiseaseLabelSet, DiseaseState, write_label_csv
from otalign.pipeline import SyntheticDatasetConfig, gen_synthetic, load_dataset, nearest_centroid_accuracy


def tree(path):
    """Relative path -> sha256 of every file below ``path``."""
    out = {}
    for root, _, files in os.walk(path):
        for f in files:
            full = os.path.join(root, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def run_json(path):
    with open(os.path.join(path, "run.json")) as fh:
        return json.load(fh)


def lp_value(C):
    n, m = C.shape
    A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    res = linprog(C.reshape(-1), A_eq=A, b_eq=np.r_[np.full(n, 1 / n), np.full(m, 1 / m)],
                  bounds=(0, None), method="highs")
    return res.fun


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--samples", "60", "--seed", "2", "-q"]) == 0
    return out


class TestGenData:
    def test_reproducible_tree(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--out", str(a), "--samples", "40", "-q"]) == 0
        assert main(["gen-data", "--out", str(b), "--samples", "40", "-q"]) == 0
        ta, tb = tree(a), tree(b)
        assert set(ta) == set(tb)
        assert all(ta[k] == tb[k] for k in ta if k != "run.json")
        pa, pb = run_json(a), run_json(b)
        assert pa["params"].pop("out") != pb["params"].pop("out")
        assert pa == pb

    def test_missing_out_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--samples", "10"])
        assert info.value.code == 2
        err = capsys.readouterr().err
        assert "usage:" in err and "--out" in err

    def test_separable_archive(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), "--separation", "10", "--spread", "1", "-q"]) == 0
        assert nearest_centroid_accuracy(load_dataset(out)) >= 0.99

    def test_matches_library(self, data_dir):
        ref = gen_synthetic(SyntheticDatasetConfig(num_samples=60, seed=2))
        assert np.array_equal(load_dataset(data_dir).image_rows, ref.image_rows)

    def test_invalid_value(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--diseases", "1,1", "-q"]) == 2
        assert not (tmp_path / "x").exists()


class TestSinkhorn:
    def write(self, tmp_path, C):
        path = tmp_path / "cost.csv"
        np.savetxt(path, np.atleast_2d(C), delimiter=",")
        return str(path)

    def result(self, out):
        with open(os.path.join(out, "result.json")) as fh:
            return json.load(fh)

    def test_single_cell(self, tmp_path):
        out = tmp_path / "o"
        assert main(["sinkhorn", "--cost", self.write(tmp_path, [[3.0]]), "--out", str(out), "-q"]) == 0
        r = self.result(out)
        assert r["linear_term"] == pytest.approx(3.0, abs=1e-12)
        assert r["distance"] == pytest.approx(3.0 - 0.10, abs=1e-12)
        assert run_json(out)["params"]["epsilon"] == 0.10
        assert sorted(os.listdir(out)) == ["plan.csv", "result.json", "run.json"]

    @pytest.mark.parametrize("seed", range(5))
    def test_near_lp_optimum(self, tmp_path, seed):
        C = np.random.default_rng(seed).uniform(0, 10, size=(4, 4))
        out = tmp_path / "o"
        eps = float(0.005 * C.max())
        assert main(["sinkhorn", "--cost", self.write(tmp_path, C), "--out", str(out),
                     "--epsilon", repr(eps), "--iters", "5000", "--tol", "1e-9", "-q"]) == 0
        exact = lp_value(C)
        assert abs(self.result(out)["linear_term"] - exact) <= 0.02 * exact

    def test_plan_file(self, tmp_path):
        C = np.arange(6.0).reshape(2, 3)
        out = tmp_path / "o"
        assert main(["sinkhorn", "--cost", self.write(tmp_path, C), "--out", str(out), "-q"]) == 0
        lines = (out / "plan.csv").read_text().splitlines()
        assert lines[0].split(",")[1:] == ["c0", "c1", "c2"]
        T = np.array([[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]])
        np.testing.assert_allclose(T.sum(axis=1), [0.5, 0.5], atol=1e-8)

    def test_bad_epsilon_is_invalid(self, tmp_path):
        out = tmp_path / "o"
        assert main(["sinkhorn", "--cost", self.write(tmp_path, [[1.0]]), "--out", str(out),
                     "--epsilon", "-1", "-q"]) == 2
        assert not out.exists()

    def test_negative_cost_is_invalid(self, tmp_path):
        assert main(["sinkhorn", "--cost", self.write(tmp_path, [[-1.0, 2.0]]),
                     "--out", str(tmp_path / "o"), "-q"]) == 2

    def test_missing_file_is_runtime(self, tmp_path):
        assert main(["sinkhorn", "--cost", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o"),
                     "-q"]) == 1


class TestTrainAndReplay:
    def test_replay_is_identical(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--data", str(data_dir), "--out", str(a), "--epochs", "2", "-q"]) == 0
        assert main(["train", "--from-config", str(a / "run.json"), "--out", str(b), "-q"]) == 0
        ta, tb = tree(a), tree(b)
        assert set(ta) == {"history.csv", "checkpoint.json", "metrics.json", "run.json"}
        assert all(ta[k] == tb[k] for k in ta if k != "run.json")

    def test_explicit_flag_beats_replay(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--data", str(data_dir), "--out", str(a), "--epochs", "1", "-q"]) == 0
        assert main(["train", "--from-config", str(a / "run.json"), "--out", str(b), "--lambda", "0",
                     "-q"]) == 0
        assert run_json(b)["params"]["lam"] == 0.0
        assert run_json(b)["params"]["epochs"] == 1

    def test_config_file(self, data_dir, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(f"# alignment run\ndata = {data_dir}\nepochs = 1\nlambda = 0.5\n")
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--out", str(out), "-q"]) == 0
        params = run_json(out)["params"]
        assert params["lam"] == 0.5 and params["epochs"] == 1

    def test_config_unknown_key(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "o"), "-q"]) == 2

    def test_replay_wrong_command(self, data_dir, tmp_path):
        assert main(["gen-data", "--from-config", str(data_dir / "run.json"), "--out",
                     str(tmp_path / "d"), "-q"]) == 0
        assert main(["train", "--from-config", str(data_dir / "run.json"), "--out",
                     str(tmp_path / "o"), "-q"]) == 2

    def test_inputs_untouched(self, data_dir, tmp_path):
        before = tree(data_dir)
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--epochs", "1",
                     "-q"]) == 0
        assert tree(data_dir) == before

    def test_failed_run_leaves_nothing(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--data", str(data_dir), "--out", str(out), "--lr", "1e12",
                     "--epochs", "3", "--eval-every", "100", "-q"]) == 1
        assert os.listdir(tmp_path) == []

    def test_invalid_scope(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                     "--ot-scope", "global", "-q"]) == 2

    def test_missing_dataset_is_runtime(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o"), "-q"]) == 1


class TestClassifyEval:
    def test_classify_outputs(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["classify", "--data", str(data_dir), "--out", str(out), "--epochs", "20", "-q"]) == 0
        assert sorted(os.listdir(out)) == ["classifier.json", "history.csv", "metrics.json",
                                           "predictions.csv", "run.json"]
        m = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= m["f1"] <= 1.0 and m["split"] == "test"

    def test_eval_perfect(self, tmp_path):
        ids = ["a", "b", "c"]
        labels = [DiseaseLabelSet.from_mapping({1: DiseaseState.POSITIVE}),
                  DiseaseLabelSet.from_mapping({2: DiseaseState.NEGATIVE, 4: DiseaseState.UNCLEAR}),
                  DiseaseLabelSet.unmentioned()]
        write_label_csv(tmp_path / "p.csv", ids, labels)
        write_label_csv(tmp_path / "t.csv", ids, labels)
        out = tmp_path / "o"
        assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"),
                     "--out", str(out), "-q"]) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert m["precision"] == m["recall"] == m["f1"] == 1.0

    def test_eval_id_mismatch(self, tmp_path):
        write_label_csv(tmp_path / "p.csv", ["a"], [DiseaseLabelSet.unmentioned()])
        write_label_csv(tmp_path / "t.csv", ["b"], [DiseaseLabelSet.unmentioned()])
        assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"),
                     "--out", str(tmp_path / "o"), "-q"]) == 2

    def test_eval_needs_inputs(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path / "o"), "-q"]) == 2

    def test_eval_probe_with_checkpoint(self, data_dir, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--data", str(data_dir), "--out", str(run), "--epochs", "1",
                     "--eval-every", "100", "-q"]) == 0
        out = tmp_path / "ev"
        assert main(["eval", "--data", str(data_dir), "--checkpoint", str(run / "checkpoint.json"),
                     "--out", str(out), "--epochs", "10", "-q"]) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert m["mode"] == "probe" and "silhouette" in m


class TestSweep:
    def test_iters_rows(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["sweep", "--data", str(data_dir), "--out", str(out), "--iters", "1,5,20,100",
                     "--epochs", "1", "--eval-every", "100", "-q"]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "iters" and len(lines) == 5
        viol = [float(ln.split(",")[header.index("marginal_violation")]) for ln in lines[1:]]
        assert all(b < a for a, b in zip(viol, viol[1:]))

    def test_needs_exactly_one_axis(self, data_dir, tmp_path):
        assert main(["sweep", "--data", str(data_dir), "--out", str(tmp_path / "o"), "-q"]) == 2
        assert main(["sweep", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--iters", "1",
                     "--epsilon", "0.1", "-q"]) == 2


def test_console_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "otalign", "sinkhorn", "--cost", str(tmp_path / "x.csv"),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 1
    assert "otalign sinkhorn" in res.stderr


@pytest.mark.xfail(reason="with a linear head and a linear probe both runs reach the same F1; "
                          "see the decisions ledger", strict=False)
def test_lambda_improves_probe_f1(tmp_path):
    data = tmp_path / "d"
    assert main(["gen-data", "--out", str(data), "-q"]) == 0
    f1 = {}
    for lam in ("1", "0"):
        run, ev = tmp_path / f"t{lam}", tmp_path / f"e{lam}"
        assert main(["train", "--data", str(data), "--out", str(run), "--lambda", lam,
                     "--eval-every", "1000", "-q"]) == 0
        assert main(["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.json"),
                     "--out", str(ev), "-q"]) == 0
        f1[lam] = json.loads((ev / "metrics.json").read_text())["f1"]
    assert f1["1"] > f1["0"]
