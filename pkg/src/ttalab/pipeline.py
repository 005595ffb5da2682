"""End-to-end pipelines: train, calibrate, adapt, evaluate, compare.

A run is fully reproducible from its manifest: the config, the dataset
content hash, and the checkpoint hashes are all recorded. Stages reuse
existing artifacts when their configuration matches, so threshold sweeps
share one trained stack.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_suite, load_task, save_suite, save_task
from .data import Dataset, SyntheticTaskSpec, gen_dataset, load_dataset
from .metrics import MetricsReport, SampleMetrics, mae, psnr, ssim, wilcoxon_signed_rank
from .recon import ReconSuite, train_recon_suite, unadapted_output_error
from .search import STRATEGY_NAMES, TtaRunner, calibrate_threshold
from .tasknet import TaskModel, train_task
from .tensor import LrSchedule

REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = [
    "sample_id", "split", "triggered", "omega", "eps_unadapted", "eps_best",
    "configs_evaluated", "adapt_steps_total", "forwards_total",
    "mae_base", "psnr_base", "ssim_base", "mae_tta", "psnr_tta", "ssim_tta",
]


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs; serialises to a single JSON object."""

    workdir: str = "runs/default"
    seed: int = 0
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    # task model
    n_layers: int = 7
    base_channels: int = 16
    max_channels: int = 64
    # training (hold/decay epochs follow the 50/50 and 20/80 schedule shapes)
    task_lr: float = 2e-4
    task_hold: int = 15
    task_decay: int = 15
    recon_lr: float = 1e-3
    recon_hold: int = 6
    recon_decay: int = 24
    batch_size: int = 8
    # test-time adaptation
    strategy: str = "grid"
    percentile: float = 95.0
    steps: int = 5
    adaptor_lr: float = 3e-4
    adaptor_width: int = 8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tau_transductive: bool = False
    fs_faithful_pseudocode: bool = False
    tpe_trials: int = 20
    tpe_start: int = 5
    tpe_gamma: float = 0.25
    tpe_candidates: int = 24
    # reporting
    psnr_max: str = "generated"  # generated | range
    dump_traces: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.psnr_max not in ("generated", "range"):
            raise ValueError("psnr_max must be 'generated' or 'range'")
        if not 0.0 < self.percentile < 100.0:
            raise ValueError("percentile must be in (0,100)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        if "data" in d and isinstance(d["data"], dict):
            d["data"] = SyntheticTaskSpec.from_dict(d["data"])
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return RunConfig(**d)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def task_schedule(self) -> LrSchedule:
        return LrSchedule(self.task_lr, self.task_hold, self.task_decay)

    def recon_schedule(self) -> LrSchedule:
        return LrSchedule(self.recon_lr, self.recon_hold, self.recon_decay)

    def run_name(self) -> str:
        return f"{self.strategy}_p{self.percentile:g}_M{self.steps}_seed{self.seed}"


# ---------------------------------------------------------------------------
# stage functions (each reuses an existing artifact when the config matches)


def ensure_dataset(cfg: RunConfig) -> Dataset:
    ddir = Path(cfg.workdir) / "data"
    if (ddir / "index.json").exists():
        index = json.loads((ddir / "index.json").read_text())
        if index.get("spec") == cfg.data.to_dict():
            return load_dataset(ddir, verify=False)
    return gen_dataset(cfg.data, ddir)


def _task_matches(model: TaskModel, cfg: RunConfig) -> bool:
    c = model.config_dict()
    return (c["n_layers"] == cfg.n_layers and c["base_channels"] == cfg.base_channels
            and c["max_channels"] == cfg.max_channels and c["seed"] == cfg.seed
            and c["image_size"] == cfg.data.image_size
            and c["trained_epochs"] == cfg.task_schedule().total_epochs)


def ensure_task(cfg: RunConfig, dataset: Dataset) -> TaskModel:
    tdir = Path(cfg.workdir) / "task"
    if (tdir / "manifest.json").exists():
        model = load_task(tdir)
        if _task_matches(model, cfg):
            return model
    model = TaskModel(n_layers=cfg.n_layers, io_channels=1, image_size=cfg.data.image_size,
                      base_channels=cfg.base_channels, max_channels=cfg.max_channels,
                      seed=cfg.seed)
    train_task(model, dataset.pairs("train"), cfg.task_schedule(),
               seed=cfg.seed, batch_size=cfg.batch_size)
    save_task(model, tdir)
    return model


def ensure_suite(cfg: RunConfig, task: TaskModel, dataset: Dataset) -> ReconSuite:
    sdir = Path(cfg.workdir) / "recon"
    if (sdir / "manifest.json").exists():
        try:
            suite = load_suite(sdir, task)
            if suite.all_trained():
                return suite
        except ValueError:
            pass
    suite = ReconSuite(task, seed=cfg.seed)
    train_recon_suite(suite, task, dataset.pairs("train"), cfg.recon_schedule(),
                      seed=cfg.seed, batch_size=cfg.batch_size)
    save_suite(suite, sdir)
    return suite


def calibration_errors(task: TaskModel, suite: ReconSuite, dataset: Dataset,
                       transductive: bool = False) -> list[float]:
    """Unadapted eps_y on the calibration split (or the whole test set)."""
    splits = ("id_test", "ood_test") if transductive else ("calib",)
    errors = []
    for split in splits:
        for x, _ in dataset.pairs(split):
            errors.append(unadapted_output_error(suite, task, x))
    return errors


def _to_unit(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _image_metrics(output: np.ndarray, target: np.ndarray, psnr_max: str) -> tuple[float, float, float]:
    o, t = _to_unit(output), _to_unit(target)
    try:
        p = psnr(o, t, max_value=None if psnr_max == "generated" else 1.0)
    except ValueError:
        p = float("nan")
    return mae(o, t), p, ssim(o, t)


def _runner(cfg: RunConfig, task: TaskModel, suite: ReconSuite) -> TtaRunner:
    return TtaRunner(task=task, suite=suite, m_steps=cfg.steps,
                     adaptor_lr=cfg.adaptor_lr, adaptor_width=cfg.adaptor_width,
                     loss_weights=cfg.loss_weights, seed=cfg.seed,
                     fs_faithful_pseudocode=cfg.fs_faithful_pseudocode,
                     tpe_trials=cfg.tpe_trials, tpe_start=cfg.tpe_start,
                     tpe_gamma=cfg.tpe_gamma, tpe_candidates=cfg.tpe_candidates)


def run_tta(cfg: RunConfig, task: TaskModel, suite: ReconSuite, dataset: Dataset,
            tau: float, trace_dir: Path | None = None) -> list[dict]:
    """Gate and adapt every test sample; returns one report row per sample."""
    runner = _runner(cfg, task, suite)
    rows = []
    sample_index = 0
    for split in ("id_test", "ood_test"):
        for sid, x, y in dataset.samples[split]:
            sink = [] if trace_dir is not None else None
            outcome = runner.run_sample(x, cfg.strategy, tau,
                                        sample_index=sample_index, trace_sink=sink)
            base_out, eps_unadapted = runner.unadapted(x)
            mae_b, psnr_b, ssim_b = _image_metrics(base_out, y, cfg.psnr_max)
            mae_t, psnr_t, ssim_t = _image_metrics(outcome.output, y, cfg.psnr_max)
            rows.append({
                "sample_id": sid, "split": split,
                "triggered": outcome.triggered,
                "omega": str(outcome.omega_star) if outcome.omega_star else "",
                "eps_unadapted": eps_unadapted, "eps_best": outcome.eps_best,
                "configs_evaluated": outcome.budget.configs_evaluated,
                "adapt_steps_total": outcome.budget.adapt_steps_total,
                "forwards_total": outcome.budget.forwards_total,
                "mae_base": mae_b, "psnr_base": psnr_b, "ssim_base": ssim_b,
                "mae_tta": mae_t, "psnr_tta": psnr_t, "ssim_tta": ssim_t,
            })
            if trace_dir is not None and sink:
                trace_dir.mkdir(parents=True, exist_ok=True)
                payload = {"sample_id": sid, "traces": [t.to_dict() for t in sink]}
                (trace_dir / f"{sid}.json").write_text(json.dumps(payload, indent=2))
            sample_index += 1
    return rows


def metrics_report(rows: list[dict], which: str = "tta") -> MetricsReport:
    samples = [SampleMetrics(sample_id=r["sample_id"], mae=r[f"mae_{which}"],
                             psnr=r[f"psnr_{which}"], ssim=r[f"ssim_{which}"])
               for r in rows]
    subset = {r["sample_id"] for r in rows if r["triggered"]}
    return MetricsReport(samples=samples, subset_ids=subset)


@dataclass
class RunReport:
    config: RunConfig
    tau: float
    rows: list[dict]
    summary: dict
    run_dir: Path


def write_report_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in REPORT_COLUMNS})


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            r["triggered"] = r["triggered"] == "True"
            for key in REPORT_COLUMNS:
                if key in ("sample_id", "split", "omega", "triggered"):
                    continue
                r[key] = int(r[key]) if key.endswith(("_evaluated", "_total")) else float(r[key])
            rows.append(r)
    return rows


def write_budget_csv(rows: list[dict], path: Path) -> None:
    cols = ["sample_id", "triggered", "configs_evaluated", "adapt_steps_total", "forwards_total"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in cols})


def build_summary(cfg: RunConfig, tau: float, rows: list[dict], runtime_s: float) -> dict:
    rep_tta = metrics_report(rows, "tta")
    rep_base = metrics_report(rows, "base")
    triggered = [r for r in rows if r["triggered"]]
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "strategy": cfg.strategy,
        "percentile": cfg.percentile,
        "seed": cfg.seed,
        "tau": tau,
        "n_test": len(rows),
        "n_triggered": len(triggered),
        "triggered_by_split": {
            split: sum(1 for r in triggered if r["split"] == split)
            for split in ("id_test", "ood_test")
        },
        "with_tta": rep_tta.summary(),
        "no_tta": rep_base.summary(),
        "runtime_seconds": runtime_s,
    }


def pipeline_run(cfg: RunConfig) -> RunReport:
    """train T -> train suite -> calibrate tau -> adapt test set -> artifacts."""
    start = time.time()
    dataset = ensure_dataset(cfg)
    task = ensure_task(cfg, dataset)
    suite = ensure_suite(cfg, task, dataset)
    errors = calibration_errors(task, suite, dataset, transductive=cfg.tau_transductive)
    tau = calibrate_threshold(errors, cfg.percentile)
    run_dir = Path(cfg.workdir) / "runs" / cfg.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    trace_dir = run_dir / "traces" if cfg.dump_traces else None
    rows = run_tta(cfg, task, suite, dataset, tau, trace_dir=trace_dir)
    summary = build_summary(cfg, tau, rows, runtime_s=time.time() - start)
    write_report_csv(rows, run_dir / "report.csv")
    write_budget_csv(rows, run_dir / "budget.csv")
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "tau": tau,
        "dataset_sha256": json.loads((Path(cfg.workdir) / "data" / "index.json")
                                     .read_text())["content_sha256"],
        "task_checksum": task.checksum(),
        "suite_checksum": suite.checksum(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return RunReport(config=cfg, tau=tau, rows=rows, summary=summary, run_dir=run_dir)


# ---------------------------------------------------------------------------
# strategy comparison (pairwise Wilcoxon + Bonferroni)

_COMPARE_METRICS = ("ssim", "mae", "psnr")


def _averaged_by_strategy(named_rows: list[tuple[str, list[dict]]]) -> dict[str, dict[str, dict]]:
    """strategy -> sample_id -> averaged per-sample metrics (across repeat runs)."""
    grouped: dict[str, list[list[dict]]] = {}
    for name, rows in named_rows:
        grouped.setdefault(name, []).append(rows)
    out = {}
    for name, runs in grouped.items():
        ids = [r["sample_id"] for r in runs[0]]
        idset = set(ids)
        for rows in runs[1:]:
            if {r["sample_id"] for r in rows} != idset:
                raise ValueError(f"sample-id mismatch across runs of {name}")
        merged = {}
        for sid in ids:
            vals = {m: [] for m in _COMPARE_METRICS}
            for rows in runs:
                row = next(r for r in rows if r["sample_id"] == sid)
                for m in _COMPARE_METRICS:
                    vals[m].append(row[f"{m}_tta"])
            merged[sid] = {m: float(np.nanmean(v)) for m, v in vals.items()}
        out[name] = merged
    return out


def compare_strategies(named_rows: list[tuple[str, list[dict]]], alpha: float = 0.05) -> dict:
    """Pairwise Wilcoxon matrix over per-sample TTA metrics, Bonferroni-corrected.

    named_rows: (strategy name, report rows) per run; repeat runs of the same
    strategy (e.g. the random searches over 3 seeds) are averaged per sample
    before testing. m = number of strategy pairs; alpha_corr = alpha/m is
    applied per metric family.
    """
    if len(named_rows) < 2:
        raise ValueError("need at least two reports to compare")
    per_strategy = _averaged_by_strategy(named_rows)
    names = sorted(per_strategy)
    base_ids = sorted(per_strategy[names[0]])
    for name in names[1:]:
        if sorted(per_strategy[name]) != base_ids:
            raise ValueError("sample-id mismatch between strategies")
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    if not pairs:
        raise ValueError("need at least two distinct strategies")
    alpha_corr = alpha / len(pairs)
    cells = {}
    for a, b in pairs:
        cell = {}
        for m in _COMPARE_METRICS:
            va = [per_strategy[a][sid][m] for sid in base_ids]
            vb = [per_strategy[b][sid][m] for sid in base_ids]
            try:
                p = wilcoxon_signed_rank(va, vb)
                cell[m] = {"p": p, "significant": p < alpha_corr}
            except ValueError as err:
                cell[m] = {"p": None, "significant": False, "note": str(err)}
        cells[f"{a}|{b}"] = cell
    return {"alpha": alpha, "m": len(pairs), "alpha_corr": alpha_corr,
            "strategies": names, "cells": cells}


def write_wilcoxon_csv(comparison: dict, path: Path) -> None:
    names = comparison["strategies"]
    header_note = (f"alpha={comparison['alpha']} m={comparison['m']} "
                   f"alpha_corr={comparison['alpha_corr']:.6g}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([header_note] + names)
        for a in names:
            row = [a]
            for b in names:
                if a == b:
                    row.append("-")
                    continue
                key = f"{a}|{b}" if f"{a}|{b}" in comparison["cells"] else f"{b}|{a}"
                cell = comparison["cells"][key]
                parts = []
                for m in _COMPARE_METRICS:
                    entry = cell[m]
                    if entry["p"] is None:
                        parts.append(f"{m}:all-zero")
                    else:
                        flag = "*" if entry["significant"] else ""
                        parts.append(f"{m}:{entry['p']:.4g}{flag}")
                row.append(" ".join(parts))
            writer.writerow(row)
