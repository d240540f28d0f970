"""Experiment drivers: cross-validation, learning curves and the ablation grid.

Every cell (fold, fraction, seed, variant) trains a fresh model, so cells are
independent and may run in a process pool. Results are gathered in cell
order, which keeps reports identical whatever the worker count.
"""
from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import tensor as tt
from .data import BoldSequence, make_split, subsample
from .model import ModelConfig, NeuroSsmModel, param_count
from .train import EvalReport, TrainConfig, evaluate, train

CURVE_FRACTIONS = (5, 10, 20, 50, 100)
CURVE_SEEDS = (0, 1, 2, 3, 4)
REPORT_FIELDS = ["variant", "fraction", "seed", "split", "accuracy", "macro_f1", "auc"]


def fit_and_eval(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data, eval_data,
                 split: str) -> EvalReport:
    with tt.checked(False):
        model = NeuroSsmModel.init(model_cfg)
        train(model, train_data, train_cfg)
        return evaluate(model, eval_data, seed=train_cfg.seed, split=split)


def _cell(args) -> EvalReport:
    return fit_and_eval(*args)


def run_cells(cells: list[tuple], threads: int = 1) -> list[EvalReport]:
    if threads <= 1 or len(cells) <= 1:
        return [_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_cell, cells))


def _pick(data, idx):
    return [data[i] for i in idx]


# ---------------------------------------------------------------- cross-validation

@dataclass
class CrossvalResult:
    candidates: list[ModelConfig]
    val_reports: list[list[EvalReport]]  # [candidate][fold]
    selected: int
    test_report: EvalReport

    @property
    def selected_config(self) -> ModelConfig:
        return self.candidates[self.selected]

    def mean_val_accuracy(self, i: int) -> float:
        return statistics.fmean(r.accuracy for r in self.val_reports[i])

    def rows(self) -> list[dict]:
        out = []
        for i, reps in enumerate(self.val_reports):
            out += [report_row(f"candidate{i}", 100, r) for r in reps]
        out.append(report_row(f"candidate{self.selected}", 100, self.test_report))
        return out


def select_candidate(candidates: list[ModelConfig], val_reports: list[list[EvalReport]]) -> int:
    """Highest mean validation accuracy; ties go to the smaller model, then the earlier one."""
    def key(i):
        return (-statistics.fmean(r.accuracy for r in val_reports[i]), param_count(candidates[i]), i)
    return min(range(len(candidates)), key=key)


def crossval(data: list[BoldSequence], candidates, train_cfg: TrainConfig, test_frac: float = 0.2,
             n_folds: int = 5, threads: int = 1) -> CrossvalResult:
    if isinstance(candidates, ModelConfig):
        candidates = [candidates]
    plan = make_split(data, test_frac, n_folds, seed=train_cfg.seed)
    cells = []
    for cfg in candidates:
        for k, (tr, va) in enumerate(plan.folds):
            cells.append((cfg, train_cfg, _pick(data, tr), _pick(data, va), f"fold{k}/val"))
    flat = run_cells(cells, threads)
    val_reports = [flat[i * n_folds:(i + 1) * n_folds] for i in range(len(candidates))]
    best = select_candidate(candidates, val_reports)
    test = fit_and_eval(candidates[best], train_cfg, _pick(data, plan.dev_indices),
                        _pick(data, plan.test_indices), "test")
    return CrossvalResult(list(candidates), val_reports, best, test)


# ---------------------------------------------------------------- learning curve

@dataclass
class CurveRow:
    fraction: float
    seed: int
    n_train: int
    report: EvalReport


def learning_curve(data: list[BoldSequence], model_cfg: ModelConfig, train_cfg: TrainConfig,
                   fractions=CURVE_FRACTIONS, seeds=CURVE_SEEDS, test_frac: float = 0.2,
                   n_folds: int = 5, threads: int = 1) -> list[CurveRow]:
    """Retrain from scratch on nested, class-stratified subject subsets of dev;
    every cell is scored on the same held-out test set."""
    plan = make_split(data, test_frac, n_folds, seed=train_cfg.seed)
    test = _pick(data, plan.test_indices)
    cells, meta = [], []
    for seed in seeds:
        for frac in fractions:
            idx = subsample(data, plan.dev_indices, frac, seed)
            cells.append((model_cfg.replace(seed=seed), train_cfg.replace(seed=seed),
                          _pick(data, idx), test, "test"))
            meta.append((frac, seed, len(idx)))
    reports = run_cells(cells, threads)
    return [CurveRow(f, s, n, r) for (f, s, n), r in zip(meta, reports)]


# ---------------------------------------------------------------- ablation grid

@dataclass(frozen=True)
class Variant:
    name: str
    table: str
    multiscale: bool
    differential: bool
    tau_set: tuple[int, ...]

    def apply(self, base: ModelConfig) -> ModelConfig:
        return base.replace(enable_multiscale=self.multiscale, enable_differential=self.differential,
                            tau_set=self.tau_set if self.multiscale else (1,))


def grid_variants(base: ModelConfig) -> list[Variant]:
    out = [Variant(f"M{int(m)}D{int(d)}", "components", m, d, base.tau_set)
           for m in (False, True) for d in (False, True)]
    for k in range(1, 6):
        tau = tuple(range(1, k + 1))
        out.append(Variant("tau" + "".join(map(str, tau)), "scales", True, True, tau))
    return out


def config_key(cfg: ModelConfig) -> tuple:
    # enable_multiscale only ever acts through tau_set
    return tuple(sorted((k, v) for k, v in cfg.to_items().items() if k != "enable_multiscale"))


@dataclass
class AblationResult:
    variants: list[Variant]
    reports: list[list[EvalReport]]  # [variant][seed]
    param_counts: list[int] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [report_row(v.name, 100, r) for v, reps in zip(self.variants, self.reports) for r in reps]

    def summary(self) -> list[dict]:
        out = []
        for v, reps, n in zip(self.variants, self.reports, self.param_counts):
            row = {"variant": v.name, "table": v.table, "multiscale": v.multiscale,
                   "differential": v.differential, "tau_set": list(v.tau_set), "params": n,
                   "n_seeds": len(reps)}
            for metric in ("accuracy", "macro_f1", "auc"):
                row[metric] = mean_sd([getattr(r, metric) for r in reps])
            out.append(row)
        return out

    def mean_accuracy(self, name: str) -> float:
        i = [v.name for v in self.variants].index(name)
        return statistics.fmean(r.accuracy for r in self.reports[i])


def ablation_grid(train_data: list[BoldSequence], test_data: list[BoldSequence], base_cfg: ModelConfig,
                  train_cfg: TrainConfig, seeds=CURVE_SEEDS, threads: int = 1) -> AblationResult:
    """The four component variants plus five nested scale sets.

    Variants whose effective configuration coincides (M1D1 and tau123, M0D1
    and tau1) are trained once and reported under both names.
    """
    variants = grid_variants(base_cfg)
    unique: dict[tuple, int] = {}
    cells = []
    slots = []
    for v in variants:
        cfg = v.apply(base_cfg)
        key = config_key(cfg)
        if key not in unique:
            unique[key] = len(cells)
            for s in seeds:
                cells.append((cfg.replace(seed=s), train_cfg.replace(seed=s), train_data, test_data, "test"))
        slots.append(unique[key])
    flat = run_cells(cells, threads)
    n = len(seeds)
    reports = [flat[start:start + n] for start in slots]
    return AblationResult(variants, reports, [param_count(v.apply(base_cfg)) for v in variants])


# ---------------------------------------------------------------- reports

def mean_sd(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None}
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return {"mean": statistics.fmean(vals), "sd": sd}


def report_row(variant: str, fraction, r: EvalReport) -> dict:
    return {"variant": variant, "fraction": fraction, "seed": r.seed, "split": r.split,
            "accuracy": repr(r.accuracy), "macro_f1": repr(r.macro_f1),
            "auc": "" if r.auc is None else repr(r.auc)}


def write_report_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def summarize_rows(rows: list[dict]) -> list[dict]:
    """mean and sd per (variant, fraction, split) cell, over seeds."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        split = r["split"].split("/")[-1]
        cells.setdefault((r["variant"], str(r["fraction"]), split), []).append(r)
    out = []
    for (variant, frac, split), rs in cells.items():
        entry = {"variant": variant, "fraction": frac, "split": split, "n": len(rs)}
        for metric in ("accuracy", "macro_f1", "auc"):
            entry[metric] = mean_sd([float(r[metric]) if r[metric] != "" else None for r in rs])
        out.append(entry)
    return out


def write_summary_json(path, summary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def curve_rows(rows: list[CurveRow], variant: str = "full") -> list[dict]:
    return [report_row(variant, r.fraction, r.report) for r in rows]
