import json

import numpy as np
import pytest

from neurossm import bench as B
from neurossm.model import ModelConfig
from neurossm.ssm import counter


def big_cfg(**kw):
    base = dict(n_rois=400, d_state=2, expand=3, tau_set=(1, 2, 3), enable_differential=False)
    base.update(kw)
    return ModelConfig(**base)


def test_fit_exponent_on_exact_power_laws():
    xs = [256, 512, 1024, 2048, 4096]
    assert abs(B.fit_exponent(xs, [3.5 * x for x in xs]) - 1.0) < 1e-9
    assert abs(B.fit_exponent(xs, [x ** 2 for x in xs]) - 2.0) < 1e-9


def test_fit_exponent_rejects_degenerate_input():
    with pytest.raises(ValueError):
        B.fit_exponent([1], [1])
    with pytest.raises(ValueError):
        B.fit_exponent([1, 2], [0, 1])


def test_align_rounds_down_to_lcm():
    assert B.align(256, (1, 2, 3)) == 252
    assert B.align(4096, (1, 2, 3)) == 4092
    assert B.align(2, (1, 2, 3)) == 6
    assert B.align(100, (1,)) == 100


def test_timing_needs_five_repeats():
    with pytest.raises(ValueError):
        B.time_ns(lambda: None, repeats=4)
    calls = []
    out = B.time_ns(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(out) == 5 and len(calls) == 7


def test_per_step_scan_mads_at_400_rois():
    cfg = big_cfg()
    steps = 12
    assert B.scan_mads(steps, 400, cfg.tau_set, 2, 3) == 14400 * steps
    counter.reset()
    p = B.measure_scan(steps, 400, cfg.tau_set, 2, 3, repeats=5, warmup=0)
    assert p.flops == 14400 * steps


def test_scan_state_bytes_closed_form_at_400_rois():
    tau_set = (1, 2, 3)
    expected = sum(8 * 3 * tau * 400 * 2 for tau in tau_set)
    assert expected == 115200
    assert B.scan_state_bytes(400, tau_set, 2, 3) == expected
    inputs = [B._scan_inputs(24, 400, tau, 2, 3, 0) for tau in tau_set]
    assert B.audited_state_bytes(inputs) == expected


def test_scan_transient_memory_flat_in_T():
    peaks = [B.scan_transient_bytes(B._scan_inputs(t, 16, 2, 4, 2, 0)) for t in (64, 512, 4096)]
    assert max(peaks) - min(peaks) <= B.INTERPRETER_SLACK


def test_flop_count_linear_in_N():
    pts = B.sweep_N(big_cfg(n_rois=50), N_values=(50, 100, 200, 400), steps=48, repeats=5, warmup=0,
                    stages=("scan",))
    assert abs(B.fit_exponent([p.N for p in pts], [p.flops for p in pts]) - 1.0) < 1e-12


def test_differential_doubles_scan_count():
    cfg = ModelConfig(n_rois=4, tau_set=(1, 2))
    plain = B.sweep_T(cfg.replace(enable_differential=False), (24, 48, 96), repeats=5, warmup=0,
                      stages=("scan",))
    both = B.sweep_T(cfg, (24, 48, 96), repeats=5, warmup=0, stages=("scan",))
    assert [2 * p.flops for p in plain] == [p.flops for p in both]


def test_projection_is_quadratic_in_N():
    flops = [B.projection_mads(48, big_cfg(n_rois=n)) for n in (50, 100, 200, 400)]
    assert B.fit_exponent([50, 100, 200, 400], flops) > 1.9


def test_model_flops_equal_scan_plus_projection():
    cfg = ModelConfig(n_rois=4, tau_set=(1, 2))
    p = B.measure_model(24, cfg, repeats=5, warmup=0)
    scan = B.scan_mads(24, 4, cfg.tau_set, cfg.d_state, cfg.expand, streams=2) * cfg.num_layers
    assert p.flops == scan + B.projection_mads(24, cfg)


def test_empty_sweep_rejected(tmp_path):
    with pytest.raises(ValueError):
        B.emit_scaling_report([], tmp_path)


def test_report_recomputable_from_raw_csv(tmp_path):
    cfg = ModelConfig(n_rois=4, tau_set=(1, 2))
    pts = B.sweep_T(cfg, (64, 128, 256), repeats=5, warmup=0)
    summary = B.emit_scaling_report(pts, tmp_path)
    raw = B.read_raw_csv(tmp_path / "bench_raw.csv")
    assert len(raw) == 5 * len(pts)
    assert list(raw[0]) == B.CSV_FIELDS
    again = B.summarize(raw)
    stored = json.loads((tmp_path / "bench_summary.json").read_text())
    assert stored["sweeps"] == json.loads(json.dumps(again["sweeps"]))
    assert stored["all_passed"] == summary["all_passed"]
    dat = np.loadtxt(tmp_path / "scan_T_flops.dat")
    assert dat.shape == (3, 2)
    assert abs(summary["sweeps"]["scan/T"]["flop_exponent"] - 1.0) < 1e-9


def test_median_timing_reproducible():
    cfg = ModelConfig(n_rois=8, tau_set=(1, 2, 3))
    first = B.measure_model(1020, cfg, repeats=7, warmup=1).wall_time_ns
    second = B.measure_model(1020, cfg, repeats=7, warmup=1).wall_time_ns
    assert abs(first - second) / min(first, second) < 0.2
