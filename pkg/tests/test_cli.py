import json
import math

import numpy as np
import pytest

from qnoisedp import cli
from qnoisedp.cli import ConfigError, ExperimentConfig, ResultTable, main, resolve_config, run, write_table


def values(table, metric, **coords):
    return [r.value for r in table.lookup(metric, **coords)]


class TestConfig:
    def test_defaults_per_command(self):
        assert ExperimentConfig("sweep-std").shots_grid == (10, 50, 100, 500, 1000)
        assert ExperimentConfig("sweep-std").pt_grid == (0.05, 0.1, 0.2, 0.3, 0.5)
        assert ExperimentConfig("sweep-eps").iters_grid == (10, 50, 100)
        assert ExperimentConfig("train").iters_grid == (200,)

    def test_grid_parsing(self):
        cfg = ExperimentConfig("sweep-std", shots="10,20", pt=[0.1])
        assert cfg.shots == (10, 20) and cfg.pt == (0.1,)

    @pytest.mark.parametrize(
        "kw",
        [
            {"shots": ""},
            {"shots": "0"},
            {"pt": "1.5"},
            {"iters": "-1"},
            {"replicates": 1},
            {"delta": 0.0},
            {"clip": 0.0},
            {"shots": "abc"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig("sweep-eps", **kw)

    def test_train_needs_single_values(self):
        with pytest.raises(ConfigError):
            ExperimentConfig("train", shots="10,20")

    def test_precedence(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"shots": "5,6", "seed": 3, "delta": 0.05}))
        cfg, _ = resolve_config(["sweep-std", "--config", str(conf), "--seed", "9"])
        assert cfg.shots == (5, 6)
        assert cfg.seed == 9
        assert cfg.delta == 0.05
        assert cfg.clip == 0.7

    def test_unknown_config_key(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(ConfigError):
            resolve_config(["sweep-std", "--config", str(conf)])

    def test_hash_tracks_effective_config(self):
        a, b = ExperimentConfig("sweep-std"), ExperimentConfig("sweep-std", shots=(10, 50, 100, 500, 1000))
        assert a.digest() == b.digest()
        assert a.digest() != ExperimentConfig("sweep-std", seed=1).digest()


class TestSweeps:
    def test_sigma_min_trends(self):
        t = run(ExperimentConfig("sweep-std"))
        by_shots = values(t, "sigma_min", axis="shots")
        by_pt = values(t, "sigma_min", axis="pt")
        assert len(by_shots) == 5 and np.all(np.diff(by_shots) < 0)
        assert len(by_pt) == 5 and np.all(np.diff(by_pt) > 0)

    def test_zero_pt_gives_zero_floor(self):
        t = run(ExperimentConfig("sweep-std", pt="0", axis="pt"))
        assert values(t, "sigma_min") == [0.0]

    def test_epsilon_trends(self):
        t = run(ExperimentConfig("sweep-eps"))
        for T in (10, 50, 100):
            for metric in ("epsilon_naive", "epsilon_advanced"):
                eps_n = values(t, metric, axis="shots", T=T)
                eps_p = values(t, metric, axis="pt", T=T)
                assert np.all(np.diff(eps_n) >= 0)
                assert np.all(np.diff(eps_p) <= 0)
        for n in (10, 100, 1000):
            assert np.all(np.diff(values(t, "epsilon_naive", axis="shots", shots=n)) > 0)

    def test_zero_iterations(self):
        t = run(ExperimentConfig("sweep-eps", iters="0"))
        assert all(v == 0.0 for v in values(t, "epsilon_naive") + values(t, "epsilon_advanced"))

    def test_zero_noise_sentinel(self, tmp_path):
        t = run(ExperimentConfig("sweep-eps", pt="0", axis="pt", iters="5"))
        assert math.isinf(values(t, "epsilon_naive")[0])
        path, _ = write_table(t, tmp_path / "eps.csv")
        assert "inf" in path.read_text()


class TestPecDemo:
    def test_ratios_and_bias(self):
        t = run(ExperimentConfig("pec-demo", replicates=10_000))
        for p in (0.0, 0.05):
            (row,) = t.lookup("variance_ratio", study="single-gate", p1=p)
            predicted = values(t, "gamma_sq_predicted", study="single-gate", p1=p)[0]
            assert row.value == pytest.approx(predicted, rel=0.1)
        assert values(t, "gamma_sq_predicted", study="single-gate", p1=0.0) == [1.0]
        for row in t.lookup("bias"):
            assert abs(row.value) <= 4 * row.stderr


class TestTrainCommand:
    def test_noiseless_arms_identical(self):
        t = run(ExperimentConfig("train", p1=0.0, p2=0.0, iters=3, shots=50))
        assert values(t, "test_acc", pec="on") == values(t, "test_acc", pec="off")
        assert values(t, "loss", pec="on") == values(t, "loss", pec="off")

    def test_zero_iterations(self):
        t = run(ExperimentConfig("train", iters=0))
        assert t.rows == []

    def test_single_arm(self):
        t = run(ExperimentConfig("train", iters=1, shots=20, pec="off"))
        assert {r.coords["pec"] for r in t.rows} == {"off"}


class TestPersistence:
    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["pec-demo", "--replicates", "500", "--seed", "4", "--out", str(tmp_path / f"{name}.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        meta_a = json.loads((tmp_path / "a.json").read_text())
        meta_b = json.loads((tmp_path / "b.json").read_text())
        assert meta_a["seed"] == 4 and meta_a["version"]
        assert meta_a["config"]["replicates"] == 500
        meta_a["config"].pop("out"), meta_b["config"].pop("out")
        assert meta_a["config"] == meta_b["config"]

    def test_seed_changes_output(self, tmp_path):
        main(["pec-demo", "--replicates", "500", "--seed", "1", "--out", str(tmp_path / "a.csv")])
        main(["pec-demo", "--replicates", "500", "--seed", "2", "--out", str(tmp_path / "b.csv")])
        assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()

    def test_invalid_table_not_written(self, tmp_path):
        t = ResultTable()
        t.add({"a": 1}, "m", 1.0)
        t.add({"b": 1}, "m", 1.0)
        t.metadata = {"config_hash": "x", "seed": 0, "version": "0"}
        with pytest.raises(ValueError):
            write_table(t, tmp_path / "bad.csv")
        assert list(tmp_path.iterdir()) == []

    def test_metadata_required(self, tmp_path):
        t = ResultTable()
        t.add({"a": 1}, "m", 1.0)
        with pytest.raises(ValueError, match="metadata"):
            write_table(t, tmp_path / "x.csv")

    def test_no_temp_files_left(self, tmp_path):
        assert main(["sweep-std", "--out", str(tmp_path / "s.csv")]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["s.csv", "s.json"]


class TestExitCodes:
    def test_success(self, tmp_path, capsys):
        assert main(["sweep-eps", "--out", str(tmp_path / "e.csv")]) == 0
        assert "wrote" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [["bogus"], ["sweep-std", "--shots", "0"], ["train", "--pec", "maybe"], ["sweep-std", "--config", "/nonexistent.json"], []],
    )
    def test_config_errors(self, argv, tmp_path, capsys):
        assert main(argv) == 1
        assert "config error" in capsys.readouterr().err

    def test_runtime_error(self, tmp_path, capsys):
        assert main(["train", "--data-path", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "t.csv")]) == 2
        assert "failed" in capsys.readouterr().err

    def test_corrupt_data_is_runtime_error(self, tmp_path):
        bad = tmp_path / "iris.csv"
        bad.write_text("sepal_length,sepal_width,petal_length,petal_width,species\n1,2,3,x,setosa\n")
        assert main(["train", "--data-path", str(bad), "--iters", "1", "--out", str(tmp_path / "t.csv")]) == 2

    def test_runners_cover_commands(self):
        assert set(cli.RUNNERS) == set(cli.COMMANDS)
