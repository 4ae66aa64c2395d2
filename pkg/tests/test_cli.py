"""CLI contract: config ingestion, emitted files, exit codes, determinism.

Runs use a 32-node grid and short horizons so the whole module stays fast;
the parallel sweep is the only case marked slow.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from filmctl.cli import (
    ConfigError,
    _float_list,
    _load_config,
    build_run_config,
    build_sweep_spec,
    main,
    read_table,
    write_table,
)
from filmctl.synth import FullStateController, controller_from_json

BASE = """\
[physics]
reynolds = {re}

[grid]
n_nodes = 32

[control]
strategy = {strategy}

[run]
burn_in_time = {burn}
control_time = {ctrl}
sample_interval = 0.5
epsilon = {eps}
seed = {seed}
"""


def make_config(path, re=2.0, strategy="full", burn=1.0, ctrl=6.0, eps=0.05, seed=0, extra=""):
    path.write_text(BASE.format(re=re, strategy=strategy, burn=burn, ctrl=ctrl, eps=eps, seed=seed) + extra)
    return str(path)


class TestTables:
    def test_round_trip_awkward_floats(self, tmp_path):
        rows = np.array(
            [
                [1 / 3, -0.0, 1e-300],
                [12345678.9012345, 2.5e17, -7.25e-9],
            ]
        )
        path = tmp_path / "t.dat"
        write_table(path, ["a", "b", "c"], rows, extra_header=["provenance xyz"])
        names, back = read_table(path)
        assert names == ["a", "b", "c"]
        np.testing.assert_array_equal(back, rows)

    def test_empty_rows_round_trip(self, tmp_path):
        path = tmp_path / "empty.dat"
        write_table(path, ["R", "M", "P"], np.zeros((0, 3)))
        names, back = read_table(path)
        assert names == ["R", "M", "P"]
        assert back.shape == (0, 3)

    def test_last_comment_line_names_columns(self, tmp_path):
        path = tmp_path / "h.dat"
        path.write_text("# config deadbeef\n# t hnorm\n0.0 1.0\n")
        names, back = read_table(path)
        assert names == ["t", "hnorm"]
        assert back.shape == (1, 2)

    def test_column_count_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_table(tmp_path / "bad.dat", ["a", "b"], np.ones((2, 3)))


class TestConfigIngestion:
    def test_shipped_example_config_parses(self):
        # the README quick start points at this file; keep it loadable
        path = Path(__file__).resolve().parents[1] / "docs" / "example-config.ini"
        parser = _load_config(path)
        config = build_run_config(parser)
        assert config.params.reynolds == 11.29
        assert config.strategy == "output_feedback"
        assert config.grid.n_nodes == 128

        class Args:
            strategy = None
            workers = None
            seed = None

        spec = build_sweep_spec(parser, Args())
        assert spec.strategy == "luenberger"
        assert len(spec.reynolds) == 12
        assert spec.p_list == (3, 5, 7, 9, 11)

    def test_missing_reynolds_names_key(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[grid]\nn_nodes = 32\n")
        with pytest.raises(ConfigError, match=r"\[physics\] reynolds"):
            build_run_config(_load_config(path))

    def test_malformed_config_reports_line(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[physics]\nreynolds 5.0\n")
        with pytest.raises(ConfigError, match="line"):
            _load_config(path)

    def test_bad_value_names_key(self, tmp_path):
        path = tmp_path / "c.ini"
        make_config(path, extra="[x]\n")
        text = path.read_text().replace("n_nodes = 32", "n_nodes = banana")
        path.write_text(text)
        with pytest.raises(ConfigError, match=r"\[grid\] n_nodes"):
            build_run_config(_load_config(path))

    def test_unknown_strategy_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        make_config(path, strategy="pid")
        with pytest.raises(ConfigError, match="pid"):
            build_run_config(_load_config(path))

    @pytest.mark.parametrize(
        "alias,internal",
        [("sof", "output_feedback"), ("full", "full_state"), ("luenberger", "luenberger"), ("none", "none")],
    )
    def test_strategy_aliases(self, tmp_path, alias, internal):
        path = tmp_path / "c.ini"
        make_config(path, strategy=alias)
        assert build_run_config(_load_config(path)).strategy == internal

    def test_logspace_shorthand(self):
        vals = _float_list("logspace:1:100:3")
        np.testing.assert_allclose(vals, [1.0, 10.0, 100.0], rtol=1e-12)
        with pytest.raises(ValueError):
            _float_list("logspace:1:100")

    def test_estimator_groups_sentinels(self, tmp_path):
        path = tmp_path / "c.ini"
        make_config(path, extra="")
        cfg = build_run_config(_load_config(path))
        assert cfg.estimator_groups is None
        text = path.read_text().replace("strategy = full", "strategy = full\nestimator_groups = 3")
        path.write_text(text)
        assert build_run_config(_load_config(path)).estimator_groups == 3

    def test_snapshot_outside_run_window_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        make_config(path, extra="snapshot_times = 50\n")
        with pytest.raises(ConfigError):
            build_run_config(_load_config(path))


class TestSimulate:
    def test_stabilised_run_exits_zero(self, tmp_path, capsys):
        cfg = make_config(tmp_path / "c.ini")
        out = tmp_path / "out"
        assert main(["simulate", "--config", cfg, "--out-dir", str(out)]) == 0
        assert "verdict: stabilised" in capsys.readouterr().out
        doc = json.loads((out / "summary.json").read_text())
        assert doc["verdict"] == "stabilised"
        assert doc["final_norm"] < 0.05
        assert doc["mass_error"] < 1e-10
        names, rows = read_table(out / "trajectory.dat")
        assert names == ["t", "hnorm", "cost", "eta1", "eta2", "eta3", "eta4", "eta5"]
        assert np.all(np.isfinite(rows))
        assert rows[0, 0] == -1.0 and rows[-1, 0] == 6.0
        assert np.all(np.diff(rows[:, 0]) > 0)
        # cost accumulates only after switch-on
        assert np.all(rows[rows[:, 0] < 0, 2] == 0.0)
        assert rows[-1, 2] > 0

    def test_not_stabilised_exits_two(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=1.5, eps=1e-3)
        assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2

    def test_synthesis_failure_exits_three(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", re=100.0, strategy="sof")
        out = tmp_path / "o"
        assert main(["simulate", "--config", cfg, "--out-dir", str(out), "--p", "1"]) == 3
        doc = json.loads((out / "summary.json").read_text())
        assert doc["verdict"] == "synthesis_failed"
        assert "synthesis_error" in doc["meta"]
        names, rows = read_table(out / "trajectory.dat")
        assert rows.shape == (0, len(names))

    def test_missing_key_exits_one(self, tmp_path, capsys):
        path = tmp_path / "c.ini"
        path.write_text("[grid]\nn_nodes = 32\n")
        assert main(["simulate", "--config", str(path), "--out-dir", str(tmp_path)]) == 1
        assert "reynolds" in capsys.readouterr().err

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 1
        assert "nope.ini" in capsys.readouterr().err

    def test_usage_error_exits_one(self, capsys):
        assert main(["simulate"]) == 1  # --config is required
        capsys.readouterr()

    def test_deterministic_outputs(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", cfg, "--out-dir", str(a)])
        main(["simulate", "--config", cfg, "--out-dir", str(b)])
        assert (a / "trajectory.dat").read_bytes() == (b / "trajectory.dat").read_bytes()
        da = json.loads((a / "summary.json").read_text())
        db = json.loads((b / "summary.json").read_text())
        da.pop("timestamp"), db.pop("timestamp")
        assert da == db

    def test_seed_changes_trajectory(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", cfg, "--out-dir", str(a)])
        main(["simulate", "--config", cfg, "--out-dir", str(b), "--seed", "1"])
        assert (a / "trajectory.dat").read_bytes() != (b / "trajectory.dat").read_bytes()

    def test_env_var_out_dir(self, tmp_path, monkeypatch):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0)
        target = tmp_path / "envout"
        monkeypatch.setenv("FILMCTL_OUT_DIR", str(target))
        main(["simulate", "--config", cfg])
        assert (target / "trajectory.dat").exists()

    def test_snapshot_files(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0)
        out = tmp_path / "o"
        # leading dash needs the = form or argparse reads it as a flag
        main(["simulate", "--config", cfg, "--out-dir", str(out), "--snapshot-times=-0.5,1"])
        for name in ("snapshot_t-0.5.dat", "snapshot_t1.dat"):
            names, rows = read_table(out / name)
            assert names == ["x", "h", "f"]
            assert rows.shape == (32, 3)
            assert np.all(rows[:, 1] > 0)  # film stays wetted

    def test_uncontrolled_run(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", strategy="none", ctrl=2.0, eps=1e-3)
        out = tmp_path / "o"
        assert main(["simulate", "--config", cfg, "--out-dir", str(out)]) == 2
        _, rows = read_table(out / "trajectory.dat")
        assert np.all(rows[:, 3:8] == 0.0)

    def test_reynolds_override(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", strategy="none", ctrl=1.0)
        out = tmp_path / "o"
        main(["simulate", "--config", cfg, "--out-dir", str(out), "--re", "7.5"])
        doc = json.loads((out / "summary.json").read_text())
        assert doc["params"]["reynolds"] == 7.5


class TestSynthesizeSpectrum:
    def test_synthesize_writes_controller(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini")
        out = tmp_path / "o"
        assert main(["synthesize", "--config", cfg, "--out-dir", str(out)]) == 0
        ctrl = controller_from_json((out / "controller.json").read_text())
        assert isinstance(ctrl, FullStateController)
        assert ctrl.k.shape == (5, 64)

    def test_synthesize_none_is_usage_error(self, tmp_path, capsys):
        cfg = make_config(tmp_path / "c.ini", strategy="none")
        assert main(["synthesize", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 1
        capsys.readouterr()

    def test_synthesize_failure_exits_three(self, tmp_path, capsys):
        cfg = make_config(tmp_path / "c.ini", re=100.0, strategy="sof")
        assert main(["synthesize", "--config", cfg, "--out-dir", str(tmp_path / "o"), "--p", "1"]) == 3
        capsys.readouterr()

    def test_spectrum_open_loop_only(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", strategy="none")
        out = tmp_path / "o"
        assert main(["spectrum", "--config", cfg, "--out-dir", str(out)]) == 0
        assert not (out / "spectrum_closed.dat").exists()
        names, rows = read_table(out / "spectrum_open.dat")
        assert names == ["real", "imag"]
        header = (out / "spectrum_open.dat").read_text().splitlines()[0]
        n_unstable = int(header.split()[-1])
        assert n_unstable == int(np.sum(rows[:, 0] > 1e-10)) > 0
        assert np.all(np.diff(rows[:, 0]) <= 1e-12)  # sorted by decreasing real part

    def test_spectrum_closed_loop_stable(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini")
        out = tmp_path / "o"
        assert main(["spectrum", "--config", cfg, "--out-dir", str(out)]) == 0
        _, rows = read_table(out / "spectrum_closed.dat")
        assert rows[:, 0].max() < 0


SWEEP = """\
[sweep]
reynolds = 2, 5
m_list = 5
p_list = 5
strategy = full
master_seed = 7
workers = 1
"""


class TestSweep:
    def test_serial_sweep(self, tmp_path, capsys):
        cfg = make_config(tmp_path / "c.ini", ctrl=3.0, extra=SWEEP)
        out = tmp_path / "o"
        assert main(["sweep", "--config", cfg, "--out-dir", str(out)]) == 0
        assert "sweep full_state" in capsys.readouterr().out
        total = 0
        for name in ("success", "failure", "gaps"):
            names, rows = read_table(out / f"full_state_{name}.dat")
            assert names == ["R", "M", "P"]
            total += rows.shape[0]
        assert total == 2
        doc = json.loads((out / "full_state_sweep.json").read_text())
        assert doc["master_seed"] == 7
        assert len(doc["points"]) == 2
        assert {p["reynolds"] for p in doc["points"]} == {2.0, 5.0}

    def test_sweep_deterministic(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0, extra=SWEEP)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["sweep", "--config", cfg, "--out-dir", str(a)])
        main(["sweep", "--config", cfg, "--out-dir", str(b)])
        for name in ("success", "failure", "gaps"):
            fname = f"full_state_{name}.dat"
            assert (a / fname).read_bytes() == (b / fname).read_bytes()

    def test_point_seed_is_master_xor_index(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", extra=SWEEP)

        class Args:
            strategy = None
            workers = None
            seed = 9

        spec = build_sweep_spec(_load_config(cfg), Args())
        assert spec.master_seed == 9
        assert spec.point_config(3, 2.0, 5, 5).perturbation.seed == 9 ^ 3
        assert spec.point_config(0, 2.0, 5, 5).perturbation.seed == 9

    def test_empty_p_list_exits_one(self, tmp_path, capsys):
        sweep = SWEEP.replace("p_list = 5\n", "")
        cfg = make_config(tmp_path / "c.ini", extra=sweep)
        assert main(["sweep", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 1
        assert "non-empty" in capsys.readouterr().err

    def test_crashed_point_recorded_not_raised(self, tmp_path):
        # h_min above the Nusselt level kills every run immediately
        sweep = SWEEP
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0, extra=sweep + "\n")
        text = (tmp_path / "c.ini").read_text().replace("[sweep]", "h_min = 0.9999\nh_max = 1.00001\n\n[sweep]")
        (tmp_path / "c.ini").write_text(text)
        out = tmp_path / "o"
        assert main(["sweep", "--config", cfg, "--out-dir", str(out)]) == 0
        _, rows = read_table(out / "full_state_failure.dat")
        assert rows.shape[0] == 2

    @pytest.mark.slow
    def test_parallel_matches_serial(self, tmp_path):
        cfg = make_config(tmp_path / "c.ini", ctrl=2.0, extra=SWEEP)
        serial, parallel = tmp_path / "s", tmp_path / "p"
        main(["sweep", "--config", cfg, "--out-dir", str(serial)])
        main(["sweep", "--config", cfg, "--out-dir", str(parallel), "--workers", "2"])
        for name in ("success", "failure", "gaps"):
            fname = f"full_state_{name}.dat"
            assert (serial / fname).read_bytes() == (parallel / fname).read_bytes()
