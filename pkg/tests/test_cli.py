import json
from pathlib import Path

import numpy as np

from rglab.cli import EXIT_BAD_INPUT, EXIT_CHECK_FAILED, EXIT_OK, main
from rglab.reporting import read_csv

FAST = ["--resolution", str(1.0 / 128.0)]


def read_manifest(out_dir) -> dict:
    with open(Path(out_dir) / "manifest.json") as fh:
        return json.load(fh)


class TestDecompose:
    def test_default_run_passes(self, tmp_path):
        out = tmp_path / "dec"
        code = main(["decompose", "--out", str(out), "--seed", "3",
                     "--dims", "1", "--scales", "2,10", "--phi-dims", "0.5", *FAST])
        assert code == EXIT_OK
        man = read_manifest(out)
        assert man["all_passed"]
        assert (out / "decomposition.png").exists()
        residuals = [c["value"] for c in man["checks"] if c["name"].startswith("split")]
        assert all(r <= 1e-10 for r in residuals)

    def test_invalid_scale_exits_2(self, tmp_path):
        code = main(["decompose", "--out", str(tmp_path / "x"), "--scales", "0.5", *FAST])
        assert code == EXIT_BAD_INPUT

    def test_unreachable_tolerance_exits_1_and_reports_residual(self, tmp_path):
        out = tmp_path / "tight"
        code = main(["decompose", "--out", str(out), "--dims", "1", "--scales", "2",
                     "--phi-dims", "0.5", "--tolerance", "1e-30", *FAST])
        assert code == EXIT_CHECK_FAILED
        man = read_manifest(out)
        failing = [c for c in man["checks"] if c["status"] == "fail"]
        assert failing and all(c["value"] > 1e-30 for c in failing)


class TestFlowCommand:
    def test_marginal_dimension_matches_closed_form(self, tmp_path):
        out = tmp_path / "flow"
        code = main(["flow", "--out", str(out), "--d", "4", "--phi-dim", "1.0",
                     "--g0", "0.5", "--horizon", "10", *FAST])
        assert code == EXIT_OK
        meta, header, rows = read_csv(out / "trajectory.csv")
        a = float(meta["a"])
        ts = np.array([float(r[0]) for r in rows])
        gs = np.array([float(r[1]) for r in rows])
        exact = 0.5 / (1.0 + a * 0.5 * ts)
        assert np.max(np.abs(gs - exact)) <= 1e-8
        assert (out / "trajectory.png").exists()
        assert (out / "coefficients.csv").exists()

    def test_coefficient_report_columns(self, tmp_path):
        out = tmp_path / "flow2"
        main(["flow", "--out", str(out), "--d", "4", "--phi-dim", "1.0", *FAST])
        meta, header, rows = read_csv(out / "coefficients.csv")
        assert header == ["a", "b", "c", "e_g", "e_mu", "e_xi", "channel_combinatorics"]
        assert rows[0][6] == "1:9:18:6"


class TestFixedPointCommand:
    def test_epsilon_report(self, tmp_path):
        out = tmp_path / "fp"
        code = main(["fixedpoint", "--out", str(out), "--epsilon", "0.1", *FAST])
        assert code == EXIT_OK
        meta, header, rows = read_csv(out / "fixedpoint.csv")
        g_star, exponent, a = (float(rows[0][i]) for i in range(3))
        assert abs(g_star - 0.1 / a) <= 1e-12 * abs(0.1 / a)
        assert abs(exponent + 0.1) <= 1e-12


class TestSampleCommand:
    def test_covariance_artifact(self, tmp_path):
        out = tmp_path / "sample"
        code = main(["sample", "--out", str(out), "--seed", "5", "--count", "1000", *FAST])
        assert code == EXIT_OK
        assert (out / "covariance.csv").exists()
        assert (out / "covariance.png").exists()
        assert (out / "ensemble" / "fields.npy").exists()


class TestPolymerCommand:
    def test_two_block_identity(self, tmp_path):
        out = tmp_path / "poly"
        code = main(["polymer", "--out", str(out), "--seed", "6",
                     "--count", "800", *FAST])
        assert code == EXIT_OK
        man = read_manifest(out)
        names = {c["name"] for c in man["checks"]}
        assert "reblocking_identity" in names
        assert "representation_stability" in names

    def test_misaligned_blocks_rejected(self, tmp_path):
        code = main(["polymer", "--out", str(tmp_path / "p2"), "--blocks", "3",
                     "--scale", "2", *FAST])
        assert code == EXIT_BAD_INPUT

    def test_polymer_report_columns(self, tmp_path):
        out = tmp_path / "p3"
        main(["polymer", "--out", str(out), "--count", "400", *FAST])
        _, header, rows = read_csv(out / "polymers.csv")
        assert header == ["polymer_id", "blocks", "size", "activity_norm", "A_weight"]
        assert len(rows) == 3  # two singles and the pair
        _, chk_header, _ = read_csv(out / "polymer.csv")
        assert chk_header == ["check", "name", "value", "stderr", "reference", "zscore"]
        assert (out / "rgstep.json").exists()

    def test_consumes_stored_ensemble(self, tmp_path):
        sample_out = tmp_path / "sample"
        main(["sample", "--out", str(sample_out), "--seed", "31", "--count", "500",
              "--extent", "32", "--spacing", "0.25", *FAST])
        out = tmp_path / "poly"
        code = main(["polymer", "--out", str(out), "--seed", "31",
                     "--ensemble", str(sample_out / "ensemble"), *FAST])
        assert code == EXIT_OK
        man = read_manifest(out)
        assert man["all_passed"]

    def test_mismatched_stored_ensemble_rejected(self, tmp_path):
        sample_out = tmp_path / "sample"
        main(["sample", "--out", str(sample_out), "--seed", "31", "--count", "300",
              "--extent", "64", "--spacing", "0.25", *FAST])
        code = main(["polymer", "--out", str(tmp_path / "poly"),
                     "--ensemble", str(sample_out / "ensemble"), *FAST])
        assert code == EXIT_BAD_INPUT


class TestReport:
    def test_missing_directory_exits_2(self, tmp_path):
        assert main(["report", str(tmp_path / "nothing")]) == EXIT_BAD_INPUT

    def test_empty_directory_exits_2(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", str(empty)]) == EXIT_BAD_INPUT

    def test_consolidates_passing_runs(self, tmp_path, capsys):
        run = tmp_path / "runs"
        main(["decompose", "--out", str(run / "dec"), "--dims", "1", "--scales", "2",
              "--phi-dims", "0.5", *FAST])
        main(["fixedpoint", "--out", str(run / "fp"), "--epsilon", "0.1", *FAST])
        code = main(["report", str(run), "--out", str(run / "summary")])
        assert code == EXIT_OK
        assert (run / "summary" / "summary.csv").exists()
        assert (run / "summary" / "summary.png").exists()
        text = capsys.readouterr().out
        assert "0 failing" in text

    def test_flags_injected_failure(self, tmp_path):
        run = tmp_path / "runs"
        main(["fixedpoint", "--out", str(run / "fp"), "--epsilon", "0.1", *FAST])
        man_path = run / "fp" / "manifest.json"
        man = json.loads(man_path.read_text())
        man["checks"][0]["status"] = "fail"
        man_path.write_text(json.dumps(man))
        code = main(["report", str(run), "--out", str(run / "summary")])
        assert code == EXIT_CHECK_FAILED
        _, header, rows = read_csv(run / "summary" / "summary.csv")
        assert header == ["name", "value", "reference", "tolerance", "status"]
        failed = [r for r in rows if r[4] in ("False", "fail")]
        assert len(failed) == 1
        assert failed[0][0].endswith(man["checks"][0]["name"])


class TestDeterminism:
    def test_identical_seed_reproduces_artifacts_bit_exactly(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["sample", "--seed", "9", "--count", "600", *FAST]
        main([*args, "--out", str(a)])
        main([*args, "--out", str(b)])
        assert (a / "covariance.csv").read_bytes() == (b / "covariance.csv").read_bytes()
        assert np.array_equal(np.load(a / "ensemble" / "fields.npy"),
                              np.load(b / "ensemble" / "fields.npy"))
        man_a, man_b = read_manifest(a), read_manifest(b)
        man_a.pop("wall_clock_s"), man_b.pop("wall_clock_s")
        man_a.pop("config"), man_b.pop("config")
        assert man_a == man_b


class TestConfigFile:
    def test_config_supplies_defaults_and_flags_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("count = 700\nseed = 21\n# comment\nextent = 64\n")
        out = tmp_path / "out"
        code = main(["sample", "--config", str(cfg), "--out", str(out),
                     "--count", "650", *FAST])
        assert code == EXIT_OK
        man = read_manifest(out)
        assert man["config"]["count"] == 650  # flag wins
        assert man["config"]["seed"] == 21    # config default applied

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_option = 1\n")
        assert main(["sample", "--config", str(cfg), "--out",
                     str(tmp_path / "x"), *FAST]) == EXIT_BAD_INPUT
