"""Scaling benchmarks for the scan recurrence and the full model.

Three stages are measured separately:

``scan``        the diagonal recurrence alone, every scale of one layer; flops
                are the instrumented multiply-add count, peak_bytes the
                transient memory of the scan minus its output buffer.
``projection``  the dense maps around the scan (gated projection, selection,
                gate, output); flops in closed form, peak_bytes the parameter
                memory of those matrices.
``model``       a full forward pass; flops = scan + projection counts,
                peak_bytes the traced peak of the whole pass.

Sequence lengths are rounded down to a multiple of lcm(tau_set) so that
every scale processes exactly T / tau tokens and the counts are exactly
linear in T.
"""
from __future__ import annotations

import csv
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from . import tensor as tt
from .model import ModelConfig, NeuroSsmModel, forward
from .seeding import stream
from .ssm import counter, scan_arrays
from .tensor import Tensor

CSV_FIELDS = ["stage", "T", "N", "tau_set", "d_state", "expand", "repeat", "wall_time_ns", "flops", "peak_bytes"]
DEFAULT_T = (256, 512, 1024, 2048, 4096)
DEFAULT_N = (50, 100, 200, 400)
# traced peaks include a few Python int objects whose size depends on T
INTERPRETER_SLACK = 1024
BANDS = {
    "flop_exponent": (1.0 - 1e-9, 1.0 + 1e-9),
    "time_exponent": (0.85, 1.25),
    "time_ratio_2048_256": (5.0, 13.0),
}


@dataclass
class BenchPoint:
    stage: str
    T: int
    N: int
    tau_set: tuple[int, ...]
    d_state: int
    expand: int
    times_ns: list[int] = field(default_factory=list)
    flops: int = 0
    peak_bytes: int = 0

    @property
    def wall_time_ns(self) -> int:
        return int(median(self.times_ns)) if self.times_ns else 0

    def rows(self) -> list[dict]:
        base = dict(stage=self.stage, T=self.T, N=self.N, tau_set=" ".join(map(str, self.tau_set)),
                    d_state=self.d_state, expand=self.expand, flops=self.flops, peak_bytes=self.peak_bytes)
        return [dict(base, repeat=i, wall_time_ns=t) for i, t in enumerate(self.times_ns)]


def align(steps: int, tau_set) -> int:
    m = math.lcm(*tau_set)
    return max(m, steps - steps % m)


def time_ns(fn, repeats: int = 5, warmup: int = 1) -> list[int]:
    if repeats < 5:
        raise ValueError("at least 5 timed repeats are required")
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    return out


# ---------------------------------------------------------------- closed forms

def scan_mads(steps: int, n_rois: int, tau_set, d_state: int, expand: int, streams: int = 1) -> int:
    """2 multiply-adds per (channel, state, token), summed over scales and streams."""
    return streams * sum(2 * expand * tau * n_rois * d_state * (steps // tau) for tau in tau_set)


def scan_state_bytes(n_rois: int, tau_set, d_state: int, expand: int) -> int:
    """float64 carried state h of every scale: sum_k 8 * expand * tau_k * N * d_state."""
    return sum(8 * expand * tau * n_rois * d_state for tau in tau_set)


def projection_mads(steps: int, cfg: ModelConfig) -> int:
    total = 0
    streams = 2 if cfg.enable_differential else 1
    for sc in cfg.scale_configs():
        rows, d_k, d = steps // sc.tau, sc.d_k, sc.d_inner
        per_row = (2 * d_k * d  # value and gate
                   + d * sc.d_conv
                   + d * d + 2 * d * sc.d_state  # selection
                   + d * d + d * d_k)  # gate and output
        total += streams * rows * per_row
    return total * cfg.num_layers


def projection_param_bytes(cfg: ModelConfig) -> int:
    total = 0
    streams = 2 if cfg.enable_differential else 1
    kernels = 1 if cfg.share_kernel or not cfg.enable_differential else 2
    for sc in cfg.scale_configs():
        d_k, d = sc.d_k, sc.d_inner
        total += streams * 2 * d_k * d + kernels * (2 * d * d + d * d_k + 2 * d * sc.d_state)
    return 8 * total * cfg.num_layers


# ---------------------------------------------------------------- measurements

def _scan_inputs(steps: int, n_rois: int, tau: int, d_state: int, expand: int, seed: int):
    rng = stream(seed, f"bench/scan/{steps}/{n_rois}/{tau}")
    rows, d = steps // tau, expand * tau * n_rois
    lam = -np.tile(np.arange(1.0, d_state + 1), (d, 1))
    delta = rng.uniform(1e-3, 1e-1, size=(1, rows, d))
    beta = rng.standard_normal((1, rows, d_state))
    gamma = rng.standard_normal((1, rows, d_state))
    r = rng.standard_normal((1, rows, d))
    return lam, delta, beta, gamma, r


def audited_state_bytes(inputs_per_scale) -> int:
    """Bytes of the carried state buffers the scans allocate, one per scale."""
    total = 0
    for args in inputs_per_scale:
        counter.state_bytes = 0
        scan_arrays(*args)
        total += counter.state_bytes
    return total


def scan_transient_bytes(inputs) -> int:
    """Traced peak of one scan call minus its (B, T, D) output buffer."""
    scan_arrays(*inputs)  # compile and warm caches outside the trace
    saved = (counter.mads, counter.steps, counter.state_bytes)
    counter.reset()  # keeps the counter's own int objects the same size for every T
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        u, _ = scan_arrays(*inputs)
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
        counter.mads, counter.steps, counter.state_bytes = saved
    return peak - u.nbytes


def measure_scan(steps: int, n_rois: int, tau_set, d_state: int, expand: int,
                 repeats: int = 5, warmup: int = 1, seed: int = 0) -> BenchPoint:
    inputs = [_scan_inputs(steps, n_rois, tau, d_state, expand, seed) for tau in tau_set]

    def run():
        for args in inputs:
            scan_arrays(*args)

    counter.reset()
    run()
    flops = counter.mads
    peak = sum(scan_transient_bytes(args) for args in inputs)
    return BenchPoint("scan", steps, n_rois, tuple(tau_set), d_state, expand,
                      time_ns(run, repeats, warmup), flops, peak)


def measure_projection(steps: int, cfg: ModelConfig, repeats: int = 5, warmup: int = 1,
                       seed: int = 0) -> BenchPoint:
    """Times the dense matrix products of one layer on random operands."""
    rng = stream(seed, f"bench/projection/{steps}/{cfg.n_rois}")
    streams = 2 if cfg.enable_differential else 1
    shapes = []
    for sc in cfg.scale_configs():
        rows, d_k, d = steps // sc.tau, sc.d_k, sc.d_inner
        shapes += [(rows, d_k, d)] * 2 + [(rows, d, d)] * 2 + [(rows, d, 2 * sc.d_state), (rows, d, d_k)]
    shapes = shapes * streams

    def run():
        for rows, k, n in shapes:
            a = rng.standard_normal((rows, k))
            b = rng.standard_normal((k, n))
            a @ b

    return BenchPoint("projection", steps, cfg.n_rois, cfg.tau_set, cfg.d_state, cfg.expand,
                      time_ns(run, repeats, warmup), projection_mads(steps, cfg), projection_param_bytes(cfg))


def measure_model(steps: int, cfg: ModelConfig, repeats: int = 5, warmup: int = 1,
                  seed: int = 0) -> BenchPoint:
    model = NeuroSsmModel.init(cfg)
    x = Tensor(stream(seed, f"bench/model/{steps}").standard_normal((steps, cfg.n_rois)))

    def run():
        with tt.no_grad():
            forward(model, x)

    counter.reset()
    run()
    flops = counter.mads + projection_mads(steps, cfg)
    tracemalloc.start()
    try:
        run()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return BenchPoint("model", steps, cfg.n_rois, cfg.tau_set, cfg.d_state, cfg.expand,
                      time_ns(run, repeats, warmup), flops, peak)


def sweep_T(base_cfg: ModelConfig, T_values=DEFAULT_T, repeats: int = 5, warmup: int = 1,
            stages=("model", "scan")) -> list[BenchPoint]:
    points = []
    streams = 2 if base_cfg.enable_differential else 1
    with tt.checked(False):
        for raw in T_values:
            steps = align(raw, base_cfg.tau_set)
            if "model" in stages:
                points.append(measure_model(steps, base_cfg, repeats, warmup, base_cfg.seed))
            if "scan" in stages:
                p = measure_scan(steps, base_cfg.n_rois, base_cfg.tau_set, base_cfg.d_state,
                                 base_cfg.expand, repeats, warmup, base_cfg.seed)
                p.flops *= streams
                points.append(p)
    return points


def sweep_N(base_cfg: ModelConfig, N_values=DEFAULT_N, steps: int = 256, repeats: int = 5,
            warmup: int = 1, stages=("scan", "projection")) -> list[BenchPoint]:
    points = []
    steps = align(steps, base_cfg.tau_set)
    streams = 2 if base_cfg.enable_differential else 1
    with tt.checked(False):
        for n in N_values:
            cfg = base_cfg.replace(n_rois=n)
            if "scan" in stages:
                p = measure_scan(steps, n, cfg.tau_set, cfg.d_state, cfg.expand, repeats, warmup, cfg.seed)
                p.flops *= streams
                points.append(p)
            if "projection" in stages:
                points.append(measure_projection(steps, cfg, repeats, warmup, cfg.seed))
    return points


# ---------------------------------------------------------------- reporting

def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.size < 2 or np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("need at least two positive points to fit an exponent")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _in_band(value, band) -> bool:
    return value is not None and band[0] <= value <= band[1]


def summarize(rows: list[dict]) -> dict:
    """Fitted exponents and band checks computed from raw CSV rows only."""
    cells: dict[tuple, dict] = {}
    for r in rows:
        key = (r["stage"], int(r["T"]), int(r["N"]))
        cell = cells.setdefault(key, {"times": [], "flops": int(r["flops"]), "peak": int(r["peak_bytes"])})
        cell["times"].append(int(r["wall_time_ns"]))
    by_stage: dict[str, dict] = {}
    for (stage, steps, n), cell in sorted(cells.items()):
        by_stage.setdefault(stage, []).append((steps, n, median(cell["times"]), cell["flops"], cell["peak"]))
    out: dict = {"sweeps": {}, "checks": []}
    for stage, pts in by_stage.items():
        for axis, idx, other in (("T", 0, 1), ("N", 1, 0)):
            groups: dict[int, list] = {}
            for p in pts:
                groups.setdefault(p[other], []).append(p)
            for fixed, grp in groups.items():
                grp.sort(key=lambda p: p[idx])
                if len(grp) < 3:
                    continue
                xs = [p[idx] for p in grp]
                entry = {
                    "stage": stage, "axis": axis, "fixed": fixed, "x": xs,
                    "median_ns": [p[2] for p in grp], "flops": [p[3] for p in grp],
                    "peak_bytes": [p[4] for p in grp],
                    "time_exponent": fit_exponent(xs, [p[2] for p in grp]),
                    "flop_exponent": fit_exponent(xs, [p[3] for p in grp]),
                }
                out["sweeps"][f"{stage}/{axis}"] = entry
                _add_checks(out["checks"], entry)
    return out


def _add_checks(checks: list, e: dict) -> None:
    name = f"{e['stage']}/{e['axis']}"
    if e["stage"] == "scan" or (e["stage"] == "model" and e["axis"] == "T"):
        checks.append(dict(name=f"{name} flop_exponent", value=e["flop_exponent"],
                           band=BANDS["flop_exponent"], passed=_in_band(e["flop_exponent"], BANDS["flop_exponent"])))
    if e["axis"] == "T" and e["stage"] == "model":
        checks.append(dict(name=f"{name} time_exponent", value=e["time_exponent"],
                           band=BANDS["time_exponent"], passed=_in_band(e["time_exponent"], BANDS["time_exponent"])))
        ratio = _ratio(e, 2048, 256)
        if ratio is not None:
            band = BANDS["time_ratio_2048_256"]
            checks.append(dict(name=f"{name} time_ratio_2048_256", value=ratio, band=band,
                               passed=_in_band(ratio, band)))
    if e["stage"] == "scan" and e["axis"] == "T":
        spread = float(max(e["peak_bytes"]) - min(e["peak_bytes"]))
        band = (0.0, float(INTERPRETER_SLACK))
        checks.append(dict(name="scan/T transient_bytes_spread", value=spread, band=band,
                           passed=_in_band(spread, band)))


def _nearest(xs, target):
    return min(range(len(xs)), key=lambda i: abs(xs[i] - target))


def _ratio(e, hi, lo):
    xs = e["x"]
    i, j = _nearest(xs, hi), _nearest(xs, lo)
    if i == j or abs(xs[i] - hi) > hi * 0.05 or abs(xs[j] - lo) > lo * 0.05:
        return None
    return e["median_ns"][i] / e["median_ns"][j]


def write_raw_csv(points: list[BenchPoint], path) -> list[dict]:
    rows = [r for p in points for r in p.rows()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_raw_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_scaling_report(points: list[BenchPoint], out_dir) -> dict:
    """Write ``bench_raw.csv``, ``bench_summary.json`` and two-column ``.dat`` files."""
    if not points:
        raise ValueError("empty sweep: nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = write_raw_csv(points, out_dir / "bench_raw.csv")
    summary = summarize(read_raw_csv(out_dir / "bench_raw.csv"))
    if not summary["sweeps"]:
        raise ValueError("every sweep needs at least 3 points")
    summary["all_passed"] = all(c["passed"] for c in summary["checks"])
    summary["n_rows"] = len(rows)
    (out_dir / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for key, e in summary["sweeps"].items():
        stem = key.replace("/", "_")
        for col, vals in (("time", e["median_ns"]), ("flops", e["flops"]), ("bytes", e["peak_bytes"])):
            lines = [f"{x} {v}" for x, v in zip(e["x"], vals)]
            (out_dir / f"{stem}_{col}.dat").write_text("\n".join(lines) + "\n")
    return summary
