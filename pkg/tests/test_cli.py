import json

import numpy as np
import pytest

from cso_debias.cli import dump_config, load_config, main
from cso_debias.runner import ConfigError


MINIMAL = {
    "problem": "iv_regression",
    "algorithm": "bsgd",
    "iterations": 20,
    "problem_params": {"n": 8, "seed": 3},
    "hyperparams": {"m": 1, "gamma": 0.05},
    "metric": "eval_loss",
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


class TestLoadConfig:
    def test_minimal_config_applies_defaults(self, tmp_path):
        cfg = load_config(write_config(tmp_path, MINIMAL))
        assert cfg.seed == 0
        assert cfg.eval_every == 10
        assert cfg.optimizer == "sgd"
        assert cfg.max_inner_samples is None

    def test_negative_gamma_names_field(self, tmp_path):
        bad = dict(MINIMAL, hyperparams={"m": 1, "gamma": -1})
        with pytest.raises(ConfigError, match="gamma"):
            load_config(write_config(tmp_path, bad))

    def test_round_trip_is_canonical(self, tmp_path):
        cfg = load_config(write_config(tmp_path, MINIMAL))
        canonical = dump_config(cfg)
        cfg2 = load_config(write_config(tmp_path, json.loads(canonical), "cfg2.json"))
        assert dump_config(cfg2) == canonical

    def test_unknown_field_named(self, tmp_path):
        bad = dict(MINIMAL, stepsize=0.1)
        with pytest.raises(ConfigError, match="stepsize"):
            load_config(write_config(tmp_path, bad))

    def test_missing_required_field_named(self, tmp_path):
        bad = {k: v for k, v in MINIMAL.items() if k != "algorithm"}
        with pytest.raises(ConfigError, match="algorithm"):
            load_config(write_config(tmp_path, bad))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="config"):
            load_config(path)


class TestRunSubcommand:
    def test_config_run_writes_pinned_schema(self, tmp_path):
        cfg_path = write_config(tmp_path, MINIMAL)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        csv_path = out / "bsgd.csv"
        lines = csv_path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "iter,inner_samples,outer_samples,error"
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "0" and first[2] == "0"
        assert (out / "bsgd_summary.json").exists()

    def test_rerun_is_bit_identical(self, tmp_path):
        cfg_path = write_config(tmp_path, MINIMAL)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        main(["run", "--config", str(cfg_path), "--out", str(out1)])
        main(["run", "--config", str(cfg_path), "--out", str(out2)])
        assert (out1 / "bsgd.csv").read_bytes() == (out2 / "bsgd.csv").read_bytes()

    def test_unknown_preset_fails_cleanly(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["run", "--preset", "nonexistent", "--out", str(tmp_path)])

    def test_fig1a_preset_files_and_schema(self, tmp_path):
        out = tmp_path / "fig1a"
        code = main(
            ["run", "--preset", "fig1a", "--seed", "7", "--out", str(out), "--reps", "2000"]
        )
        assert code == 0
        for order in (1, 2, 3):
            path = out / f"fig1a_order{order}.csv"
            lines = path.read_text(encoding="utf-8").splitlines()
            assert lines[0] == "n_estimates,abs_error"
            assert len(lines) > 2
        assert (out / "fig1a_summary.json").exists()

    def test_fig5_preset_schema(self, tmp_path):
        out = tmp_path / "fig5"
        assert main(["run", "--preset", "fig5", "--out", str(out), "--reps", "1000"]) == 0
        for fn in ("relu", "triwave"):
            lines = (out / f"fig5_{fn}.csv").read_text(encoding="utf-8").splitlines()
            assert lines[0] == "order,n_estimates,abs_error"

    def test_moments_preset_schema(self, tmp_path):
        out = tmp_path / "m"
        assert main(["run", "--preset", "moments_check", "--out", str(out), "--reps", "20000"]) == 0
        lines = (out / "moments_check.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "base,m,k,empirical,predicted,abs_error"

    def test_sweep_preset_algorithms_filter(self, tmp_path):
        out = tmp_path / "sweep"
        code = main(
            [
                "run", "--preset", "iv_fcco", "--out", str(out),
                "--algorithms", "nestedvr,enestedvr", "--iterations", "12",
            ]
        )
        assert code == 0
        for algo in ("nestedvr", "enestedvr"):
            path = out / f"iv_fcco_{algo}.csv"
            lines = path.read_text(encoding="utf-8").splitlines()
            assert lines[0] == "iter,inner_samples,outer_samples,error"
        summary = json.loads((out / "iv_fcco_summary.json").read_text(encoding="utf-8"))
        assert set(summary["finals"]) == {"nestedvr", "enestedvr"}

    def test_dataset_dump_flag(self, tmp_path):
        cfg_path = write_config(tmp_path, MINIMAL)
        out = tmp_path / "outd"
        ds = tmp_path / "dataset.csv"
        main(["run", "--config", str(cfg_path), "--out", str(out), "--dump-dataset", str(ds)])
        lines = ds.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "z0,z1,y"
        assert len(lines) == 9  # header + n=8 rows


class TestSuggestSubcommand:
    def test_ebsb_example(self, capsys):
        code = main(["suggest", "--theorem", "ebsb", "--epsilon", "0.1", "--ce-cg", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "m=4" in out
        assert "B1=125" in out
        assert "B2=12" in out
        assert "p_out=0.0833333" in out

    def test_envr_branch_example(self, capsys):
        code = main(["suggest", "--theorem", "envr", "--epsilon", "0.5", "--n", "4"])
        assert code == 0
        out = capsys.readouterr().out
        assert "B2=2" in out and "p_out=0.5" in out and "p_in=1" in out

    def test_error_message_on_missing_n(self, capsys):
        code = main(["suggest", "--theorem", "envr", "--epsilon", "0.5"])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestMeasureBiasSubcommand:
    def test_runs_and_reports(self, tmp_path, capsys):
        code = main(
            [
                "measure-bias", "--order", "2", "--function", "quad",
                "--m", "1,2", "--reps", "500", "--out", str(tmp_path),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "m=1" in out and "m=2" in out
        lines = (tmp_path / "measure_bias_quad_order2.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "m,bias,abs_bias,ci_halfwidth,variance,n_estimates"

    def test_bad_m_list(self, capsys):
        code = main(["measure-bias", "--order", "1", "--function", "relu", "--m", "0", "--reps", "200"])
        assert code == 1
