"""Command-line interface: outputs, determinism, exit codes."""

import csv
import math

import pytest

import syncmodal.cli as climod
from syncmodal.cli import main
from syncmodal.config import default_config_text


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def baseline_only_config(tmp_path):
    """Bundled config with the what-if cases stripped."""
    text = default_config_text()
    text = text[:text.index("cases:")]
    path = tmp_path / "baseline.yaml"
    path.write_text(text)
    return path


class TestBuild:
    def test_writes_both_frames_for_both_converters(self, tmp_path):
        out = tmp_path / "o"
        assert main(["build", "--out", str(out), "--grid-points", "12"]) == 0
        for label in ("sec", "rec"):
            for frame in ("dq", "seq"):
                assert (out / f"build_{label}_{frame}.csv").exists()
        rows = read_csv(out / "build_rec_dq.csv")
        assert len(rows) == 12
        assert set(rows[0]) > {"f_hz", "y_ac_d_ac_d_mag",
                               "y_sync_dc_mag", "y_sync_dc_phase_deg"}

    def test_gfl_sync_row_ignores_dc_voltage(self, tmp_path):
        out = tmp_path / "o"
        main(["build", "--out", str(out), "--grid-points", "40"])
        rows = read_csv(out / "build_rec_dq.csv")
        assert all(float(r["y_sync_dc_mag"]) == 0.0 for r in rows)
        # the grid-forming unit does couple dc voltage into its sync loop
        rows = read_csv(out / "build_sec_dq.csv")
        assert max(float(r["y_sync_dc_mag"]) for r in rows) > 0.0

    def test_sequence_frame_preserves_entry_magnitudes_pattern(self, tmp_path):
        out = tmp_path / "o"
        main(["build", "--out", str(out), "--grid-points", "8"])
        dq = read_csv(out / "build_rec_dq.csv")
        seq = read_csv(out / "build_rec_seq.csv")
        # dc/sync corner is untouched by the ac-pair transform
        for rd, rs in zip(dq, seq):
            assert float(rs["y_dc_dc_mag"]) == pytest.approx(
                float(rd["y_dc_dc_mag"]), rel=1e-12)
            assert float(rs["y_sync_sync_mag"]) == pytest.approx(
                float(rd["y_sync_sync_mag"]), rel=1e-12)

    def test_output_is_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["build", "--out", str(a), "--grid-points", "9"])
        main(["build", "--out", str(b), "--grid-points", "9"])
        for name in ("build_sec_dq.csv", "build_rec_seq.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_flag_overrides_frequency_band(self, tmp_path):
        out = tmp_path / "o"
        main(["build", "--out", str(out), "--grid-points", "5",
              "--freq-min", "10", "--freq-max", "100"])
        rows = read_csv(out / "build_sec_dq.csv")
        freqs = [float(r["f_hz"]) for r in rows]
        assert freqs[0] == pytest.approx(10.0)
        assert freqs[-1] == pytest.approx(100.0)


class TestConfigErrors:
    def test_missing_file(self, tmp_path, capsys):
        code = main(["build", "--config", str(tmp_path / "none.yaml"),
                     "--out", str(tmp_path)])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_invalid_yaml_reports_line(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("base:\n  a: [1, 2\n")
        code = main(["build", "--config", str(path), "--out", str(tmp_path)])
        assert code == 2
        assert "line" in capsys.readouterr().err

    def test_unknown_key_reports_dotted_path(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(default_config_text().replace(
            "zeta_pll: 0.8", "zeta_pll: 0.8\n      typo_key: 2.0"))
        code = main(["analyze", "--config", str(path),
                     "--out", str(tmp_path)])
        assert code == 2
        assert "converters.rec.sync.typo_key" in capsys.readouterr().err

    def test_bad_flag_value_is_config_error(self, tmp_path, capsys):
        code = main(["build", "--out", str(tmp_path),
                     "--freq-min", "50", "--freq-max", "5"])
        assert code == 2
        assert "f_max_hz" in capsys.readouterr().err


class TestAnalyze:
    def test_all_cases_reported(self, tmp_path):
        out = tmp_path / "o"
        assert main(["analyze", "--out", str(out)]) == 0
        for tag in ("baseline", "low_damping", "fast_pll", "weak_grid_2"):
            assert (out / f"analyze_{tag}.txt").exists()
            assert (out / f"analyze_{tag}_modes.csv").exists()
            assert (out / f"analyze_{tag}_pf.csv").exists()
            assert (out / f"analyze_{tag}_sens.csv").exists()

        text = (out / "analyze_low_damping.txt").read_text()
        assert "unstable" in text and "f = 36.44" in text

        modes = read_csv(out / "analyze_fast_pll_modes.csv")
        assert modes[0]["verdict"] == "unstable"
        assert float(modes[0]["f_hz"]) == pytest.approx(428.81, abs=0.05)
        assert float(modes[0]["damping"]) < 0.0

    def test_participation_identifies_the_culprit_node(self, tmp_path):
        out = tmp_path / "o"
        main(["analyze", "--out", str(out)])
        rows = [r for r in read_csv(out / "analyze_weak_grid_2_pf.csv")]
        unstable = [r for r in rows if r["mode"] == "2"]
        top = max(unstable, key=lambda r: float(r["pf_mag"]))
        assert top["node"] == "rec_ac"

    def test_validation_rows_written_when_increment_set(self, tmp_path):
        out = tmp_path / "o"
        main(["analyze", "--out", str(out)])
        rows = read_csv(out / "analyze_low_damping_validation.csv")
        mode1 = [r for r in rows if r["mode"] == "1"]
        assert len(mode1) == 14
        assert all(r["status"] == "ok" for r in mode1)
        assert max(float(r["rel_error"]) for r in mode1) < 0.05

    def test_stable_band_reports_margin(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["analyze", "--out", str(out),
                     "--freq-max", "200"]) == 0
        text = (out / "analyze_baseline.txt").read_text()
        assert "stable, margin = " in text
        margin = float(text.split("stable, margin = ")[1].split()[0])
        assert margin > 0.0


class TestScan:
    def test_single_frequency_overlay_and_summary(self, tmp_path):
        out = tmp_path / "o"
        code = main(["scan", "--out", str(out), "--grid-points", "1",
                     "--freq-min", "150"])
        assert code == 0
        for label in ("sec", "rec"):
            assert (out / f"scan_{label}_dq.csv").exists()
            assert (out / f"scan_{label}_seq.csv").exists()
            summary = read_csv(out / f"scan_{label}_summary.csv")
            assert len(summary) == 16
            by_entry = {r["entry"]: r for r in summary}
            # every port pair agrees closely at this frequency
            for r in summary:
                assert float(r["worst_rel_err"]) < 5e-3, r["entry"]
            assert float(by_entry["y_ac_d_ac_d"]["f_hz_at_worst"]) == 150.0

    def test_zero_amplitude_is_numerical_failure(self, tmp_path, capsys):
        path = tmp_path / "zero.yaml"
        path.write_text(default_config_text().replace("amp_rel: 0.01",
                                                      "amp_rel: 0.0"))
        code = main(["scan", "--config", str(path), "--out", str(tmp_path)])
        assert code == 4
        assert "AmplitudeZero" in capsys.readouterr().err


class TestOracle:
    def test_agreement_exits_zero(self, tmp_path, monkeypatch,
                                  baseline_only_config):
        monkeypatch.setattr(
            climod, "_sim_verdict",
            lambda link, seed: (False, 1e-6, float("nan")))
        out = tmp_path / "o"
        code = main(["oracle", "--config", str(baseline_only_config),
                     "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "oracle_summary.csv")
        assert len(rows) == 1
        assert rows[0]["case"] == "baseline"
        assert rows[0]["modal_verdict"] == "stable"
        assert rows[0]["ss_verdict"] == "stable"
        assert rows[0]["agree"] == "yes"

    def test_disagreement_exits_three(self, tmp_path, monkeypatch,
                                      baseline_only_config, capsys):
        monkeypatch.setattr(
            climod, "_sim_verdict",
            lambda link, seed: (True, 1e6, 99.0))
        out = tmp_path / "o"
        code = main(["oracle", "--config", str(baseline_only_config),
                     "--out", str(out)])
        assert code == 3
        err = capsys.readouterr().err
        assert "verdicts disagree" in err
        rows = read_csv(out / "oracle_summary.csv")
        assert rows[0]["agree"] == "no"

    def test_seed_flag_changes_simulated_kick_only(self, tmp_path,
                                                   monkeypatch,
                                                   baseline_only_config):
        seeds = []
        monkeypatch.setattr(
            climod, "_sim_verdict",
            lambda link, seed: seeds.append(seed) or (False, 0.0, math.nan))
        main(["oracle", "--config", str(baseline_only_config),
              "--out", str(tmp_path), "--seed", "7"])
        assert seeds == [7]
