import json
import subprocess
import sys
from pathlib import Path

import pytest

import recorded
from sale_core.calibrate import CalibrationProfile, HeadProfile
from sale_core.cli import derived_fields, main, strip_timings
from sale_core.selection import read_mask_dump

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG = ROOT / "configs" / "default.json"
SINKY = ["--workload", "sink_local", "--n", "1024", "--heads", "2"]


def run_cli(tmp_path, *argv):
    out = tmp_path / "report.json"
    code = main([*map(str, argv), "--json-out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def write_config(tmp_path, **data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return p


def test_missing_input_file(tmp_path, capsys):
    assert main(["run", "--input", str(tmp_path / "nope.sqkv")]) == 2
    assert "nope.sqkv" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["calibrate", "--config", str(tmp_path / "missing.json")]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_no_input(capsys):
    assert main(["run"]) == 2
    assert "no input" in capsys.readouterr().err


def test_calibrate_huge_theta(tmp_path):
    cfg = write_config(tmp_path, theta=1e9, samples=[{"kind": "sink_local", "n": 256, "d": 16, "heads": 3}])
    code, report = run_cli(tmp_path, "calibrate", "--config", cfg, "--profile", tmp_path / "p.json")
    assert code == 0
    prof = CalibrationProfile.load(tmp_path / "p.json")
    assert [h.tau for h in prof.heads] == [0.008] * 3
    assert report == prof.to_dict()


def test_calibrate_default_config_converges(tmp_path):
    code, report = run_cli(tmp_path, "calibrate", "--config", DEFAULT_CONFIG, "--strict")
    assert code == 0
    assert (report["tau0"], report["theta"]) == (0.008, 0.4)
    assert report["heads"] and all(h["flag"] == "converged" for h in report["heads"])
    assert len(report["samples"]) == 5


def test_calibrate_strict_floor(tmp_path, capsys):
    # the halving fixture needs one halving, so allowing none hits the floor
    fx = recorded.FIXTURES["halving_fixture"]
    cfg = write_config(tmp_path, samples=[fx["spec"]], theta=fx["theta"], max_halvings=0)
    assert main(["calibrate", "--config", str(cfg)]) == 0
    assert main(["calibrate", "--config", str(cfg), "--strict"]) == 1
    assert "floor-reached" in capsys.readouterr().err
    assert main(["calibrate", "--config", str(cfg), "--theta", "-1"]) == 2


def test_run_dense_mask(tmp_path):
    code, report = run_cli(tmp_path, "run", *SINKY, "--dense-mask")
    assert code == 0
    for h in report["heads"]:
        assert h["err"] <= 1e-5
        assert h["sparsity"] == 0.0 and h["tau"] is None


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    d = tmp_path_factory.mktemp("cal")
    assert main(["calibrate", *SINKY, "--samples", "2", "--profile", str(d / "p.json")]) == 0
    return d / "p.json"


def test_run_with_profile(tmp_path, calibrated):
    code, report = run_cli(tmp_path, "run", *SINKY, "--seed", "7", "--profile", calibrated, "--check")
    assert code == 0
    assert report["check"]["passed"]
    prof = CalibrationProfile.load(calibrated)
    for h, row in enumerate(report["heads"]):
        assert row["tau"] == prof.tau_for(h)
        assert row["sparsity"] > 0 and row["err"] <= prof.theta


def test_run_report_arithmetic(tmp_path, calibrated):
    _, report = run_cli(tmp_path, "run", *SINKY, "--profile", calibrated)
    t = report["timings"]
    assert t["label"] == "CPU reference"
    assert all(t[k] >= 0 for k in ("quantization_ms", "selection_ms", "computation_ms", "dense_ms"))
    assert report["derived"] == derived_fields(t)
    for row in report["heads"]:
        b = row["blocks"]
        assert b["computed"] + b["skipped"] == b["total"]
        assert row["sparsity"] == b["skipped"] / b["total"]
        assert 0 <= row["sparsity"] <= 1
        assert 1 <= row["coverage"]["min"] <= row["coverage"]["max"] <= 1024


def test_run_repeatable(tmp_path, calibrated):
    _, a = run_cli(tmp_path, "run", *SINKY, "--seed", "3", "--profile", calibrated)
    _, b = run_cli(tmp_path, "run", *SINKY, "--seed", "3", "--profile", calibrated)
    assert strip_timings(a) == strip_timings(b)
    _, c = run_cli(tmp_path, "run", *SINKY, "--seed", "4", "--profile", calibrated)
    assert strip_timings(a) != strip_timings(c)


def test_run_check_failure(tmp_path, capsys):
    code, report = run_cli(tmp_path, "run", *SINKY, "--tau", "0.008", "--check", "--theta", "0.01")
    assert code == 1
    assert not report["check"]["passed"]
    assert "check failed" in capsys.readouterr().err


def test_run_profile_head_mismatch(tmp_path, calibrated, capsys):
    assert main(["run", "--workload", "sink_local", "--n", "1024", "--heads", "3",
                 "--profile", str(calibrated)]) == 2
    assert "profile has 2 heads" in capsys.readouterr().err


def test_run_strict_floor_profile(tmp_path):
    p = tmp_path / "p.json"
    CalibrationProfile(0.008, 0.4, [HeadProfile(0, 0, 0.008 / 2**30, "floor-reached", 30, 0.5)]).save(p)
    args = ["run", "--workload", "gaussian", "--n", "128", "--profile", str(p)]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 1


def test_run_tensor_file(tmp_path):
    path = tmp_path / "x.sqkv"
    assert main(["generate", "--workload", "needle", "--n", "300", "--d", "16", "--out", str(path)]) == 0
    code, report = run_cli(tmp_path, "run", "--input", path, "--tau", "0.004")
    assert code == 0
    assert report["n"] == 300 and report["d"] == 16
    assert report["input"]["file"].endswith("x.sqkv")


def test_run_corrupt_tensor_file(tmp_path, capsys):
    path = tmp_path / "x.sqkv"
    path.write_bytes(b"JUNK" + bytes(40))
    assert main(["run", "--input", str(path)]) == 2
    assert "offset 0" in capsys.readouterr().err


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SALE_CORE_THREADS", "1")
    _, report = run_cli(tmp_path, "run", "--workload", "gaussian", "--n", "128")
    assert report["timings"]["threads"] == 1


def test_sweep_pair(tmp_path):
    code, report = run_cli(tmp_path, "sweep", *SINKY, "--taus", "0.004,0.002")
    assert code == 0
    assert report["monotone"]
    for h in (0, 1):
        big, small = [r for r in report["rows"] if r["head"] == h]
        assert (big["tau"], small["tau"]) == (0.004, 0.002)
        assert small["sparsity"] <= big["sparsity"]


def test_sweep_singleton(tmp_path):
    _, report = run_cli(tmp_path, "sweep", "--workload", "sink_local", "--n", "512", "--taus", "0.01")
    assert len(report["rows"]) == 1


def test_sweep_halvings_match_oracle_fixture(tmp_path):
    fx = recorded.FIXTURES["halving_fixture"]
    cfg = write_config(tmp_path, input=fx["spec"])
    _, report = run_cli(tmp_path, "sweep", "--config", cfg)
    rows = report["rows"]
    assert [r["tau"] for r in rows] == [0.008 / 2**k for k in range(5)]
    assert rows[0]["err"] == pytest.approx(fx["err_tau0"], abs=1e-5)
    assert rows[1]["err"] == pytest.approx(fx["err_tau0_half"], abs=1e-5)
    errs = [r["err"] for r in rows]
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("grid", ["0.5,1.0", "0", "-0.1", "abc"])
def test_sweep_bad_grid(grid, capsys):
    assert main(["sweep", "--workload", "gaussian", "--n", "64", "--taus", grid]) == 2
    assert "grid" in capsys.readouterr().err


def test_sweep_thetas(tmp_path):
    code, report = run_cli(tmp_path, "sweep", "--workload", "sink_local", "--n", "1024",
                           "--thetas", "0.4,0.1")
    assert code == 0 and report["mode"] == "theta"
    loose, tight = report["rows"]
    assert loose["theta"] == 0.4 and tight["theta"] == 0.1
    assert tight["tau"] <= loose["tau"] and tight["err"] <= 0.1


def test_mask_single_block(tmp_path):
    dump = tmp_path / "m.smsk"
    code, report = run_cli(tmp_path, "mask", "--workload", "gaussian", "--n", "20", "--out", dump)
    assert code == 0
    [(head, tau, mask)] = read_mask_dump(dump)
    assert head == 0 and tau == 0.008
    assert mask.bits.shape == (1, 1) and mask.bits.all()
    assert report["heads"][0]["selected_per_row"] == [1]


def test_mask_roundtrip_and_structure(tmp_path):
    dump = tmp_path / "m.smsk"
    code, report = run_cli(tmp_path, "mask", *SINKY, "--head", "all", "--tau", "0.004", "--out", dump)
    assert code == 0
    records = read_mask_dump(dump)
    assert [r[0] for r in records] == [0, 1]
    for (h, tau, mask), summary in zip(records, report["heads"]):
        assert tau == 0.004
        assert mask.bits.sum(axis=1).tolist() == summary["selected_per_row"]
        # sink column and the diagonal band (frontier plus 4 local blocks) are always on
        assert mask.bits[:, 0].all()
        for i in range(mask.bits.shape[0]):
            last = min(2 * i + 1, mask.bits.shape[1] - 1)
            assert mask.bits[i, max(0, last - 5):last + 1].all()


def test_mask_head_out_of_range(tmp_path, capsys):
    assert main(["mask", *SINKY, "--head", "2", "--out", str(tmp_path / "m")]) == 2
    assert "out of range" in capsys.readouterr().err


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "sale_core", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "sale-core" in out.stdout
    out = subprocess.run([sys.executable, "-m", "sale_core", "run", "--input", str(tmp_path / "x")],
                         capture_output=True, text=True)
    assert out.returncode == 2 and out.stderr.startswith("sale-core: error")
