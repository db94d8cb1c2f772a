import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from gcts.caseio import bundled_config
from gcts.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, build_parser, main

GOLDEN = Path(__file__).parent / "golden"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, sp in sub.items():
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("gcts ")


def test_validate_bundled_configs():
    assert main(["validate", "--stitch", "two_area.toml", "--bids", "table1_bids.toml",
                 "--scenario", "scenario.toml"]) == EXIT_OK
    assert main(["validate", "--stitch", "three_area.toml", "--bids", "three_area_bids.toml"]) == EXIT_OK


def test_usage_and_config_errors(tmp_path):
    assert main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", "nope",
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["solve", "--stitch", "two_area.toml", "--mechanism", "gcts", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["validate", "--stitch", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("version = 1\n[[bid]]\nid = 1\nsell_to = [2, 99]\nbuy_from = [1, 5]\ndpi = 1.0\ns_max = 1.0\n")
    assert main(["validate", "--stitch", "two_area.toml", "--bids", str(bad)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG


def test_infeasible_exit_code(tmp_path, capsys):
    # a single bid cannot span the three-area boundary state
    book = tmp_path / "one.toml"
    book.write_text("version = 1\n[[bid]]\nid = 1\nsell_to = [2, 15]\nbuy_from = [1, 9]\ndpi = 0.0\ns_max = 100.0\n")
    rc = main(["solve", "--stitch", "three_area.toml", "--bids", str(book), "--mechanism", "gcts",
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_INFEASIBLE
    assert "rank" in capsys.readouterr().err.lower()


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_solve_writes_reports(tmp_path, fmt):
    out = tmp_path / "gcts"
    rc = main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", "gcts",
               "--format", fmt, "--out", str(out)])
    assert rc == EXIT_OK
    for name in ("buses", "generators", "branches", "summary", "bids", "settlement", "revenue_audit"):
        assert (out / f"{name}.{fmt}").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    for entry in manifest["outputs"].values():
        assert len(entry) == 64
    if fmt == "csv":
        audit = read_csv(out / "revenue_audit.csv")
        assert all(r["ok"] == "true" for r in audit)
        bids = read_csv(out / "bids.csv")
        assert {r["status"] for r in bids} <= {"full", "partial", "rejected"}


@pytest.mark.parametrize("mech", ["jed", "cts"])
def test_solve_other_mechanisms(tmp_path, mech):
    rc = main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", mech,
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert not (tmp_path / "settlement.csv").exists()


def test_proxy_option(tmp_path):
    rc = main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", "cts",
               "--proxy", "1:9,2:28", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", "cts",
                 "--proxy", "1:99", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_inputs_not_modified(tmp_path):
    paths = [bundled_config("two_area.toml"), bundled_config("table1_bids.toml")]
    before = [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]
    main(["solve", "--stitch", "two_area.toml", "--bids", "table1_bids.toml", "--mechanism", "gcts",
          "--out", str(tmp_path)])
    assert [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths] == before


def test_compare_zero_sigma_matches_look_ahead(tmp_path):
    rc = main(["compare", "--stitch", "two_area.toml", "--bids", "uniform_bids.toml", "--samples", "1",
               "--sigma", "0", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    for row in read_csv(tmp_path / "comparison.csv"):
        key = "look_ahead_generation_cost" if row["mechanism"] == "JED" else "look_ahead_total_cost"
        assert float(row["avg_realtime_total_cost"]) == pytest.approx(float(row[key]), rel=1e-5)


def test_compare_is_byte_identical(tmp_path):
    args = ["compare", "--stitch", "two_area.toml", "--bids", "uniform_bids.toml", "--seed", "5",
            "--samples", "8"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()


@pytest.mark.parametrize("stitch,bids,samples,golden", [
    ("two_area.toml", "uniform_bids.toml", "100", "compare_two_area_seed1.csv"),
    ("three_area.toml", "three_area_bids.toml", "10", "compare_three_area_seed1.csv"),
])
def test_compare_matches_golden(tmp_path, stitch, bids, samples, golden):
    rc = main(["compare", "--stitch", stitch, "--bids", bids, "--scenario", "scenario.toml",
               "--samples", samples, "--workers", "4", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    got, want = read_csv(tmp_path / "comparison.csv"), read_csv(GOLDEN / golden)
    assert [list(r) for r in got] == [list(r) for r in want]
    for g, w in zip(got, want):
        for key, value in w.items():
            try:
                expected = float(value)
            except ValueError:
                assert g[key] == value
                continue
            # near-zero entries are round-off and may differ across BLAS builds
            assert float(g[key]) == pytest.approx(expected, rel=1e-6, abs=1e-8), key


def test_sweep_outputs(tmp_path):
    rc = main(["sweep", "--stitch", "two_area.toml", "--bids", "uniform_bids.toml", "--dpi-grid", "1,0",
               "--w-grid", "0.1,1", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    rows = read_csv(tmp_path / "dpi_sweep.csv")
    assert len(rows) == 4
    assert all(float(r["gap"]) >= -1e-6 for r in rows)
    w_rows = read_csv(tmp_path / "w_sweep.csv")
    assert all(float(r["boundary_residual_pu"]) <= 1e-8 for r in w_rows)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gcts.cli", "validate", "--stitch", "two_area.toml"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
