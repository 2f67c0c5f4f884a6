import csv
import json

import numpy as np
import pytest
import yaml

from hopcast import cli, pipeline
from hopcast.config import (ConfigError, apply_scale, config_from_dict, list_presets,
                            load_config)
from hopcast.dynamics import generate_integrated_dataset, system_spec
from hopcast.io import load_trajectories, save_trajectories

TINY = {
    "name": "tiny", "system": "LotkaVolterra", "noise_scale": 0.1, "seeds": [0],
    "n_trajectories": 20, "horizon": 40,
    "methods": ["hopcast", "expectation", "moment_matching", "trajectory_sampling"],
    "predictor": {"hidden": [16, 16], "train": {"max_epochs": 3}},
    "hopcast": {"seq_len": [8, 8, 8, 8], "epochs": 2, "memory_size": 300, "n_samples": 100,
                "tune": {"enabled": False}},
    "ensemble": {"hidden": [16], "population_size": 2,
                 "members": {"expectation": 2, "moment_matching": 1, "trajectory_sampling": 2},
                 "particles": {"expectation": 1, "moment_matching": 5, "trajectory_sampling": 5},
                 "train": {"max_epochs": 3}},
}


def _tiny(**changes):
    data = json.loads(json.dumps(TINY))
    data.update(changes)
    return data


class TestConfig:
    def test_tiny_parses(self):
        cfg = config_from_dict(_tiny())
        assert cfg.hopcast.corrector_config(2).seq_len == 8
        assert cfg.ensemble.train.max_epochs == 3
        assert cfg.system_spec().channels == 4

    @pytest.mark.parametrize("patch", [
        {"colour": "red"},
        {"hopcast": {"seq_len": [8] * 4, "depth": 3}},
        {"ensemble": {"train": {"momentum": 0.9}}},
    ])
    def test_unknown_keys_rejected(self, patch):
        with pytest.raises(ConfigError, match="unknown keys"):
            config_from_dict(_tiny(**patch))

    @pytest.mark.parametrize("patch", [
        {"system": "Pendulum"}, {"methods": ["bootstrap"]}, {"seeds": []}, {"seeds": [0.5]},
        {"scale": "huge"}, {"train_fraction": 1.0},
        {"hopcast": {"seq_len": [8, 8]}}, {"hopcast": {"seq_len": [1] * 4}},
        {"hopcast": {"seq_len": [8] * 4, "retrieval": "Greedy"}},
        {"hopcast": {"seq_len": [8] * 4, "tune": {"enabled": "sometimes"}}},
        {"ensemble": {"population_size": 1, "members": {"expectation": 2,
                                                        "moment_matching": 1,
                                                        "trajectory_sampling": 1}}},
        {"ensemble": {"particles": {"expectation": 3}}},
        {"noise_scale": -1.0},
    ])
    def test_invalid(self, patch):
        with pytest.raises(ConfigError):
            config_from_dict(_tiny(**patch))

    def test_presets_load(self):
        names = list_presets()
        assert len(names) == 15
        for name in names:
            cfg = load_config(name[:-4])
            assert cfg.seeds == [0, 1, 2]
            assert len(cfg.hopcast.seq_len) == cfg.system_spec().channels

    def test_desk_transform(self):
        full = load_config("lv_sigma01")
        desk = load_config("lv_sigma01", scale="desk")
        assert desk.scale == "desk"
        assert desk.system_spec().n_trajectories == full.system_spec().n_trajectories // 5
        assert desk.predictor.train.max_epochs == full.predictor.train.max_epochs // 5
        assert desk.hopcast.epochs == full.hopcast.epochs // 5
        assert desk.ensemble.population_size == max(full.ensemble.members.values())
        assert desk.hopcast.tune.active("desk") and not full.hopcast.tune.active("full")
        with pytest.raises(ConfigError):
            apply_scale(desk, "full")

    def test_seed_override_and_digest(self):
        a = load_config("lv_sigma01", seed=7)
        assert a.seeds == [7]
        assert a.digest() == load_config("lv_sigma01", seed=7).digest()
        assert a.digest() != load_config("lv_sigma01", seed=8).digest()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yml"
        path.write_text("name: [unclosed")
        with pytest.raises(ConfigError):
            load_config(path)


class TestIo:
    @pytest.fixture(scope="class")
    @classmethod
    def ts(cls):
        spec = system_spec("LotkaVolterra", 0.1).with_(n_trajectories=3, horizon=5)
        return generate_integrated_dataset(spec, 4).subset([2, 0])

    @pytest.mark.parametrize("suffix", [".npz", ".csv"])
    def test_roundtrip(self, ts, tmp_path, suffix):
        back = load_trajectories(save_trajectories(ts, tmp_path / f"d{suffix}"))
        np.testing.assert_array_equal(back.data, ts.data)
        np.testing.assert_array_equal(back.traj_ids, [2, 0])
        assert back.spec == ts.spec and back.role == ts.role and back.seed == 4
        if suffix == ".npz":
            np.testing.assert_array_equal(back.clean, ts.clean)
            np.testing.assert_array_equal(back.initial_states, ts.initial_states)

    def test_csv_header(self, ts, tmp_path):
        save_trajectories(ts, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        meta = json.loads(lines[0][2:])
        assert (meta["N"], meta["T"], meta["C"], meta["sigma"]) == (2, 5, 4, 0.1)
        assert lines[1] == "traj_id,t,c_0,c_1,c_2,c_3"

    def test_bad_suffix(self, ts, tmp_path):
        with pytest.raises(ValueError):
            save_trajectories(ts, tmp_path / "d.txt")

    def test_truncated_csv(self, ts, tmp_path):
        path = save_trajectories(ts, tmp_path / "d.csv")
        path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(ValueError):
            load_trajectories(path)


class TestPipeline:
    @pytest.fixture(scope="class")
    @classmethod
    def runs(cls, tmp_path_factory):
        root = tmp_path_factory.mktemp("runs")
        cfg = config_from_dict(_tiny())
        a = pipeline.run_experiment(cfg, root / "a")
        b = pipeline.run_experiment(cfg, root / "b")
        return a[0], b[0]

    def test_bundle_contents(self, runs):
        bundle = runs[0]
        for rel in ("manifest.json", "metrics.json", "datasets/integrated.npz",
                    "datasets/errors.npz", "checkpoints/predictor.json",
                    "checkpoints/corrector/memory_3.npz", "checkpoints/member_1.json",
                    "sheets/hopcast.csv", "calibration_moment_matching.csv"):
            assert (bundle / rel).exists(), rel
        manifest = json.loads((bundle / "manifest.json").read_text())
        assert manifest["stages"][-1] == "metrics" and manifest["seq_len"] == [8] * 4
        assert len(manifest["test_ids"]) == 4

    def test_deterministic(self, runs):
        a, b = runs
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "sheets/hopcast.csv").read_bytes() == (b / "sheets/hopcast.csv").read_bytes()

    def test_metrics_body(self, runs):
        body = json.loads((runs[0] / "metrics.json").read_text())
        assert set(body["methods"]) == set(TINY["methods"])
        rep = body["methods"]["hopcast"]
        assert 0 <= rep["ce"] <= 2.85 and rep["pi_width"] > 0 and "mse_clean" in rep

    def test_stage_error_keeps_partial_outputs(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("no convergence")
        monkeypatch.setattr(pipeline, "train_predictor", boom)
        with pytest.raises(pipeline.StageError) as info:
            pipeline.run_experiment(config_from_dict(_tiny()), tmp_path)
        assert info.value.stage == "predictor"
        manifest = json.loads((tmp_path / "seed_0/manifest.json").read_text())
        assert manifest["stages"] == ["generate", "split"]
        assert (tmp_path / "seed_0/datasets/integrated.npz").exists()

    def test_tuned_run(self, tmp_path):
        data = _tiny(methods=["hopcast"])
        data["hopcast"]["tune"] = {"enabled": True, "lo": 4, "hi": 20, "cap": 2}
        bundle = pipeline.run_experiment(config_from_dict(data), tmp_path)[0]
        manifest = json.loads((bundle / "manifest.json").read_text())
        assert len(manifest["tuning"]) == 4
        for trace, chosen in zip(manifest["tuning"], manifest["seq_len"]):
            assert chosen == trace["choice"]
            assert 1 <= len(trace["trials"]) <= 2

    def test_gradient_checks(self):
        worst = pipeline.gradient_checks(0)
        assert set(worst) == {"mlp_mse", "mlp_gaussian_nll", "attention_retrieval"}
        assert max(worst.values()) < 1e-4


def _bundle(root, name, sigma, methods):
    d = root / name
    d.mkdir(parents=True)
    body = {"system": "LotkaVolterra", "sigma": sigma,
            "methods": {m: {"mse": v[0], "pi_width": v[1], "ce": v[2]}
                        for m, v in methods.items()}}
    (d / "metrics.json").write_text(json.dumps(body))
    return d


class TestCompare:
    def test_single_run_has_no_std(self, tmp_path):
        b = _bundle(tmp_path, "s0", 0.1, {"hopcast": (1.0, 2.0, 0.1)})
        (row,) = pipeline.compare([b])
        assert row["ce_std"] is None and row["n_runs"] == 1 and row["ce_cell"] == "**0.1**"

    def test_mean_and_std(self, tmp_path):
        b0 = _bundle(tmp_path, "s0", 0.1, {"hopcast": (1.0, 2.0, 0.1)})
        b1 = _bundle(tmp_path, "s1", 0.1, {"hopcast": (3.0, 2.0, 0.3)})
        (row,) = pipeline.compare([b0, b1])
        assert row["mse"] == 2.0 and row["mse_std"] == pytest.approx(np.sqrt(2.0))
        assert row["pi_width_std"] == 0.0

    def test_parent_directory_expands(self, tmp_path):
        _bundle(tmp_path / "run", "seed_0", 0.1, {"hopcast": (1.0, 2.0, 0.1)})
        _bundle(tmp_path / "run", "seed_1", 0.1, {"hopcast": (1.0, 2.0, 0.1)})
        assert pipeline.compare([tmp_path / "run"])[0]["n_runs"] == 2

    def test_highlight_rule(self, tmp_path):
        b = _bundle(tmp_path, "s0", 0.1, {
            "hopcast": (1.0, 3.0, 0.100),
            "expectation": (1.04, 1.0, 0.104),
            "moment_matching": (2.0, 0.5, 0.5),
        })
        rows = {r["method"]: r for r in pipeline.compare([b], tmp_path / "t.csv")}
        assert rows["hopcast"]["ce_highlight"] and rows["expectation"]["ce_highlight"]
        assert not rows["moment_matching"]["ce_highlight"]
        assert rows["hopcast"]["ce_star"] and not rows["expectation"]["ce_star"]
        assert rows["expectation"]["pi_width_highlight"]
        assert not rows["moment_matching"]["pi_width_highlight"]
        assert rows["hopcast"]["mse_highlight"] and rows["expectation"]["mse_highlight"]
        assert rows["hopcast"]["ce_cell"] == "**0.1***"
        with open(tmp_path / "t.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 3

    def test_groups_by_sigma(self, tmp_path):
        a = _bundle(tmp_path, "a", 0.1, {"hopcast": (1.0, 1.0, 0.1)})
        b = _bundle(tmp_path, "b", 0.3, {"hopcast": (9.0, 1.0, 0.9)})
        rows = pipeline.compare([a, b])
        assert all(r["ce_highlight"] and r["mse_highlight"] for r in rows)

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope"):
            pipeline.compare([tmp_path / "nope"])


class TestCli:
    def _yaml(self, tmp_path, data):
        path = tmp_path / "cfg.yml"
        path.write_text(yaml.safe_dump(data))
        return str(path)

    def test_run_and_compare(self, tmp_path, capsys):
        data = _tiny(methods=["hopcast", "expectation"])
        assert cli.main(["run", "--config", self._yaml(tmp_path, data),
                         "--out", str(tmp_path / "out")]) == 0
        assert "CE=" in capsys.readouterr().out
        assert cli.main(["compare", str(tmp_path / "out"),
                         "--out", str(tmp_path / "cmp.csv")]) == 0
        assert (tmp_path / "cmp.csv").exists()

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["run", "--config", self._yaml(tmp_path, _tiny(colour=1))]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_exit_code(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "none.yml")]) == 2

    def test_missing_bundle_exit_code(self, tmp_path):
        assert cli.main(["compare", str(tmp_path / "none")]) == 2

    def test_stage_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise FloatingPointError("diverged")
        monkeypatch.setattr(pipeline, "train_predictor", boom)
        assert cli.main(["run", "--config", self._yaml(tmp_path, _tiny()),
                         "--out", str(tmp_path / "o")]) == 3
        assert "predictor" in capsys.readouterr().err

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        assert capsys.readouterr().out.count("PASS") == 3

    def test_gradcheck_failure_exit_code(self, monkeypatch):
        monkeypatch.setattr(pipeline, "gradient_checks", lambda seed: {"mlp_mse": 1.0})
        assert cli.main(["gradcheck"]) == 3

    def test_tune_ensemble(self, tmp_path):
        out = tmp_path / "sweep"
        assert cli.main(["tune", "ensemble", "--config", self._yaml(tmp_path, _tiny()),
                         "--sizes", "1", "2", "--out", str(out)]) == 0
        body = json.loads((out / "ensemble_sweep_expectation.json").read_text())
        assert sorted(body) == ["1", "2"]

    def test_tune_sl(self, tmp_path):
        data = _tiny(methods=["hopcast"])
        data["hopcast"]["tune"] = {"enabled": True, "lo": 4, "hi": 20, "cap": 1}
        out = tmp_path / "tsl"
        assert cli.main(["tune", "sl", "--config", self._yaml(tmp_path, data),
                         "--out", str(out)]) == 0
        assert len(list(out.glob("tuning_trace_*.json"))) == 4

    def test_requires_verb(self):
        with pytest.raises(SystemExit):
            cli.main([])
