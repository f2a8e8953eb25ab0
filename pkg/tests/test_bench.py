import csv
import itertools
import subprocess
import sys

import numpy as np
import pytest

from mppikit import bench
from mppikit.bench import (DEFAULT_TIMING_SAMPLES, SWEEP_HEADER, TIMING_HEADER, BenchError, SweepRecord,
                           TimingRecord, argmin_gamma, bench_dmd_sweep, bench_timing, emit_csv, main)
from mppikit.core import dump_scenario, replace
from mppikit.scenarios import CIRCLE_TRACK, DIFF_DRIVE, build_closed_loop

SHORT_NAV = replace(DIFF_DRIVE, horizon=5)


def fake_clock(step=0.001):
    counter = itertools.count()
    return lambda: next(counter) * step


def test_default_sample_list_rows():
    records = bench_timing(SHORT_NAV, trials=30)
    assert len(DEFAULT_TIMING_SAMPLES) == 9
    for strategy in ("split", "fused"):
        rows = [r for r in records if r.strategy == strategy]
        assert [r.samples for r in rows] == list(DEFAULT_TIMING_SAMPLES)
    auto = [r for r in records if r.strategy.startswith("auto:")]
    assert len(auto) == 9 and all(r.strategy in ("auto:split", "auto:fused") for r in auto)
    assert all(r.trials == 30 and r.std_ms >= 0 and r.method == "mppi" for r in records)


def test_trials_bookkeeping_and_minimum():
    (rec,) = bench_timing(SHORT_NAV, [128], 30, strategies=("fused",))
    assert rec.trials == 30 and rec.samples == 128 and rec.strategy == "fused"
    with pytest.raises(ValueError):
        bench_timing(SHORT_NAV, [128], 29)


def test_timing_grows_with_samples():
    recs = bench_timing(DIFF_DRIVE, [128, 4096], 30, strategies=("fused",))
    assert recs[1].median_ms >= recs[0].median_ms


def test_timing_uses_injected_clock():
    (rec,) = bench_timing(SHORT_NAV, [64], 30, strategies=("split",), clock=fake_clock(0.002))
    assert rec.mean_ms == pytest.approx(2.0) and rec.std_ms == pytest.approx(0.0, abs=1e-9)


def test_timing_record_invariants():
    with pytest.raises(ValueError):
        TimingRecord(1, "mppi", "fused", 1.0, -0.1, 30)
    with pytest.raises(ValueError):
        SweepRecord(1, 1.0, 0.0, 0.0, 0.0, 0)


def test_sweep_gamma_one_rows_match_plain_mppi():
    recs = bench_dmd_sweep([0.5, 1.0], [32], steps=40, trials=3, seed=5, config=CIRCLE_TRACK, strategy="fused")
    row = next(r for r in recs if r.gamma == 1.0)
    costs = []
    for i in range(3):
        cfg = replace(CIRCLE_TRACK, controller="mppi", controller_params={}, num_samples=32)
        _, plant, sim = build_closed_loop(cfg, seed=5 + i, strategy="fused")
        costs.append(plant.run_control_loop(sim, 40 * cfg.dt).total_cost)
    assert row.mean_cost == float(np.mean(costs)) or row.mean_cost == pytest.approx(np.mean(costs), rel=1e-15)
    assert row.std_cost == pytest.approx(np.std(costs, ddof=1), rel=1e-12)


def test_sweep_byte_identical_with_fixed_clock(tmp_path):
    paths = []
    for k in range(2):
        recs = bench_dmd_sweep([0.6, 1.0], [16, 32], steps=30, trials=2, seed=1, config=CIRCLE_TRACK,
                               strategy="fused", clock=fake_clock())
        paths.append(tmp_path / f"s{k}.csv")
        emit_csv(recs, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_sweep_cost_fields_independent_of_clock():
    kw = dict(gammas=[0.5, 1.0], sample_counts=[16], steps=30, trials=2, seed=3, config=CIRCLE_TRACK,
              strategy="fused")
    a = bench_dmd_sweep(**kw)
    b = bench_dmd_sweep(**kw, clock=fake_clock())
    assert [(r.mean_cost, r.std_cost) for r in a] == [(r.mean_cost, r.std_cost) for r in b]


def test_sweep_validation():
    with pytest.raises(ValueError):
        bench_dmd_sweep([], [64])
    with pytest.raises(ValueError):
        bench_dmd_sweep([1.0], [])


def test_argmin_gamma():
    recs = [SweepRecord(64, 0.4, 5.0, 1, 1, 3), SweepRecord(64, 1.0, 7.0, 1, 1, 3),
            SweepRecord(128, 0.4, 2.0, 1, 1, 3), SweepRecord(128, 0.8, 2.0, 1, 1, 3),
            SweepRecord(128, 1.0, 1.0, 1, 1, 3)]
    assert argmin_gamma(recs) == {64: 0.4, 128: 1.0}
    assert argmin_gamma(recs[2:4]) == {128: 0.4}


def test_emit_csv_header_only(tmp_path):
    p = tmp_path / "t.csv"
    emit_csv([], p, "timing")
    assert p.read_text() == ",".join(TIMING_HEADER) + "\n"
    emit_csv([], p, "sweep")
    assert p.read_text() == ",".join(SWEEP_HEADER) + "\n"
    with pytest.raises(ValueError):
        emit_csv([], p)


def test_emit_csv_one_record(tmp_path):
    p = tmp_path / "t.csv"
    emit_csv([TimingRecord(128, "mppi", "fused", 1.5, 0.25, 30)], p)
    lines = p.read_text().splitlines()
    assert lines == ["samples,method,strategy,mean_ms,std_ms,trials", "128,mppi,fused,1.5,0.25,30"]
    emit_csv([SweepRecord(64, 0.8, 12.5, 3.0, 0.4, 50)], p)
    assert p.read_text().splitlines()[1] == "64,0.8,12.5,3.0,0.4,50"


def test_emit_csv_unwritable(tmp_path):
    with pytest.raises(BenchError, match="cannot write"):
        emit_csv([], tmp_path / "missing" / "x.csv", "sweep")


def test_emit_csv_stdout(capsys):
    emit_csv([], "-", "sweep")
    assert capsys.readouterr().out == ",".join(SWEEP_HEADER) + "\n"


# -- CLI -----------------------------------------------------------------------

def test_cli_timing_success(tmp_path):
    cfg = tmp_path / "nav.yaml"
    dump_scenario(SHORT_NAV, cfg)
    out = tmp_path / "timing.csv"
    code = main(["timing", "--config", str(cfg), "--samples", "64,128", "--trials", "30", "--strategy", "fused",
                 "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == list(TIMING_HEADER) and [r[0] for r in rows[1:]] == ["64", "128"]


def test_cli_sweep_success(tmp_path):
    cfg = tmp_path / "ct.yaml"
    dump_scenario(CIRCLE_TRACK, cfg)
    out = tmp_path / "sweep.csv"
    code = main(["dmd-sweep", "--config", str(cfg), "--samples", "16", "--gammas", "0.5,1.0", "--steps", "20",
                 "--trials", "2", "--strategy", "fused", "--workers", "2", "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == list(SWEEP_HEADER) and len(rows) == 3


def test_cli_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("lambda: -1\n")
    assert main(["timing", "--config", str(bad)]) == 2
    assert main(["timing", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert main(["timing", "--trials", "5"]) == 2
    assert main(["dmd-sweep", "--workers", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["timing", "--samples", "abc"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_cli_runtime_error(tmp_path, monkeypatch):
    out = tmp_path / "missing" / "x.csv"
    cfg = tmp_path / "ct.yaml"
    dump_scenario(CIRCLE_TRACK, cfg)
    assert main(["dmd-sweep", "--config", str(cfg), "--samples", "8", "--gammas", "1.0", "--steps", "5",
                 "--trials", "1", "--out", str(out)]) == 3

    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(bench, "bench_timing", boom)
    assert main(["timing"]) == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mppikit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "dmd-sweep" in proc.stdout
