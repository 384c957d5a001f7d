"""Hyperparameter sweeps over fine-tuning strategies, with resumable cell storage."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError
from .layer import MixtureConfig
from .models import build_model, init_base, pretrain_base
from .robustness import RobustnessReport, pairwise_wilcoxon, spread, summarize
from .tasks import SyntheticTask, generate_task
from .trainer import RunRecord, TrainConfig, train

STRATEGIES = ("full", "lora", "monteclora", "monteclora-sparse", "monteclora-posthoc")
CSV_COLUMNS = (
    "strategy", "task", "learning_rate", "batch_size", "seed", "steps",
    "final_train_loss", "val_nll", "val_acc", "wall_s", "diverged",
)


@dataclass
class SweepGrid:
    strategies: tuple = ("lora", "monteclora")
    learning_rates: tuple = (1.0, 0.3, 0.1)
    batch_sizes: tuple = (8, 32, 64)
    seeds: tuple = (0, 1, 2, 3, 4)
    task: SyntheticTask = field(default_factory=lambda: SyntheticTask(separation=3.0))
    shift: float = math.pi / 3
    n_train: int = 128
    n_val: int = 2000
    steps: int = 200
    optimizer: str = "sgd"
    schedule: str = "constant"
    arch: str = "mlp"
    rank: int = 8
    placement: str = "all"
    lora_alpha: float = 16.0
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    pretrain_steps: int = 800
    pretrain_lr: float = 1e-2
    pretrain_samples: int = 4000

    def __post_init__(self):
        for axis in ("strategies", "learning_rates", "batch_sizes", "seeds"):
            values = tuple(getattr(self, axis))
            if not values:
                raise ConfigError(f"sweep axis {axis} is empty", axis)
            setattr(self, axis, values)
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; choose from {list(STRATEGIES)}", "strategies")

    @property
    def n_cells(self) -> int:
        return len(self.strategies) * len(self.learning_rates) * len(self.batch_sizes) * len(self.seeds)

    def task_name(self) -> str:
        return f"{self.task.kind}-shift{self.shift:.4f}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strategies"] = list(self.strategies)
        return out


class Cell(NamedTuple):
    strategy: str
    learning_rate: float
    batch_size: int
    seed: int


def grid_cells(grid: SweepGrid) -> list:
    return [
        Cell(s, float(lr), int(bs), int(seed))
        for s in grid.strategies for lr in grid.learning_rates for bs in grid.batch_sizes for seed in grid.seeds
    ]


def cell_config(grid: SweepGrid, cell: Cell) -> dict:
    shared = grid.to_dict()
    for axis in ("strategies", "learning_rates", "batch_sizes", "seeds"):
        shared.pop(axis)
    return {**cell._asdict(), "task_name": grid.task_name(), "grid": shared}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


class Prepared(NamedTuple):
    base: object
    target: object


def prepare(grid: SweepGrid) -> Prepared:
    """Pretrain the frozen base on the source task and draw the shifted target task."""
    source = generate_task(grid.task, grid.pretrain_samples, grid.n_val)
    base = init_base(grid.arch, in_dim=grid.task.dim, n_classes=grid.task.classes, seed=grid.task.seed)
    base = pretrain_base(base, source, steps=grid.pretrain_steps, lr=grid.pretrain_lr, seed=grid.task.seed,
                         min_accuracy=None)
    target = generate_task(grid.task.shifted(grid.task.shift + grid.shift), grid.n_train, grid.n_val)
    return Prepared(base, target)


def build_cell_model(grid: SweepGrid, base, cell: Cell):
    strategy = cell.strategy
    if strategy == "full":
        return build_model(grid.arch, "full", base=base, seed=cell.seed)
    if strategy == "lora":
        return build_model(grid.arch, "lora", grid.rank, base=base, seed=cell.seed, placement=grid.placement,
                           lora_alpha=grid.lora_alpha)
    mode = "sparse" if strategy == "monteclora-sparse" else "standard"
    mixture = MixtureConfig(**{**asdict(grid.mixture), "mode": mode})
    return build_model(grid.arch, "monteclora", grid.rank, mixture=mixture, base=base, seed=cell.seed,
                       placement=grid.placement, lora_alpha=grid.lora_alpha)


def run_cell(grid: SweepGrid, prepared: Prepared, cell: Cell) -> RunRecord:
    config = cell_config(grid, cell)
    try:
        model = build_cell_model(grid, prepared.base, cell)
        cfg = TrainConfig(
            learning_rate=cell.learning_rate, batch_size=cell.batch_size, steps=grid.steps,
            optimizer=grid.optimizer, seed=cell.seed, schedule=grid.schedule,
            posthoc_after=grid.steps // 2 if cell.strategy == "monteclora-posthoc" else None,
        )
        return train(model, prepared.target, cfg, config_snapshot=config)
    except Exception as exc:  # a failed cell must not stop the sweep
        return RunRecord(config=config, losses=[], val_nll=float("nan"), val_acc=float("nan"),
                         diverged=True, failed=True, error=f"{type(exc).__name__}: {exc}")


def _run_cell_job(args):
    return run_cell(*args)


class SweepResult(list):
    """Records in grid order, plus counts of trained, skipped and failed cells."""

    def __init__(self, records, trained: int, skipped: int):
        super().__init__(records)
        self.trained = trained
        self.skipped = skipped

    @property
    def failed(self) -> int:
        return sum(r.failed for r in self)


def run_sweep(grid: SweepGrid, out_dir=None, jobs: int = 1, prepared: Prepared | None = None,
              cells: list | None = None) -> SweepResult:
    """Run every cell; with ``out_dir`` completed cells are stored and later skipped."""
    cells = grid_cells(grid) if cells is None else list(cells)
    cell_dir = None
    found = {}
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
        for cell in cells:
            path = cell_dir / f"{config_hash(cell_config(grid, cell))}.json"
            if path.exists():
                found[cell] = RunRecord.from_dict(json.loads(path.read_text()))
    todo = [c for c in cells if c not in found]
    if todo and prepared is None:
        prepared = prepare(grid)
    jobs = max(1, min(int(jobs), len(todo))) if todo else 1

    def store(cell: Cell, record: RunRecord) -> None:
        # Written as each cell finishes so an interrupted sweep resumes where it stopped.
        found[cell] = record
        if cell_dir is not None and not record.failed:
            name = config_hash(cell_config(grid, cell))
            (cell_dir / f"{name}.json").write_text(record.to_json(include_timing=True))
            with open(Path(out_dir) / "runs.log", "a") as log:
                log.write(record.to_json(include_timing=True) + "\n")

    if jobs == 1:
        for cell in todo:
            store(cell, run_cell(grid, prepared, cell))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, record in zip(todo, pool.map(_run_cell_job, [(grid, prepared, c) for c in todo])):
                store(cell, record)
    return SweepResult([found[c] for c in cells], trained=len(todo), skipped=len(cells) - len(todo))


# -- reporting ------------------------------------------------------------------------


def record_row(record: RunRecord) -> dict:
    cfg = record.config
    return {
        "strategy": cfg["strategy"], "task": cfg.get("task_name", ""), "learning_rate": cfg["learning_rate"],
        "batch_size": cfg["batch_size"], "seed": cfg["seed"], "steps": record.steps,
        "final_train_loss": record.final_train_loss, "val_nll": record.val_nll, "val_acc": record.val_acc,
        "wall_s": record.wall_s, "diverged": int(record.diverged),
    }


def build_report(records) -> RobustnessReport:
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ContractError("no successful records to report")
    by_strategy = {}
    for r in ok:
        by_strategy.setdefault(r.config["strategy"], []).append(r)
    report = RobustnessReport(failed_cells=len(records) - len(ok))
    paired = {}
    for name, recs in sorted(by_strategy.items()):
        report.strategies[name] = summarize(
            [r.val_acc for r in recs], [r.val_nll for r in recs], sum(r.diverged for r in recs)
        )
        paired[name] = {(r.config["learning_rate"], r.config["batch_size"], r.config["seed"]): r.val_acc for r in recs}
    report.wilcoxon = pairwise_wilcoxon(paired)
    return report


def seed_block_spreads(records) -> dict:
    """strategy -> {seed: accuracy spread over that seed's learning-rate x batch-size cells}."""
    blocks = {}
    for r in records:
        if r.failed:
            continue
        blocks.setdefault(r.config["strategy"], {}).setdefault(r.config["seed"], []).append(r.val_acc)
    return {s: {seed: spread(v) for seed, v in sorted(b.items())} for s, b in blocks.items()}


def emit_report(records, out_dir, plots: bool = True) -> dict:
    """Write runs.csv, report.txt and (optionally) plots/; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(records)
    paths = {"csv": out / "runs.csv", "report": out / "report.txt"}
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            if not r.failed:
                writer.writerow(record_row(r))
    body = report.to_dict()
    body["seed_block_spreads"] = {s: {str(k): v for k, v in b.items()} for s, b in seed_block_spreads(records).items()}
    paths["report"].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    if plots:
        paths.update(_plot(records, out / "plots"))
    return paths


def _plot(records, plot_dir: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in records if not r.failed]
    names = sorted({r.config["strategy"] for r in ok})
    written = {}
    for metric in ("val_acc", "val_nll"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.boxplot([[getattr(r, metric) for r in ok if r.config["strategy"] == n] for n in names])
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel(metric)
        fig.tight_layout()
        written[metric] = plot_dir / f"{metric}.png"
        fig.savefig(written[metric], dpi=100)
        plt.close(fig)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        for r in ok:
            if r.config["strategy"] == name:
                ax.plot(np.asarray(r.losses, dtype=float), lw=0.6, alpha=0.5, color="C3" if r.diverged else "C0")
        ax.set_title(name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
    axes[0][0].set_ylabel("training loss")
    fig.tight_layout()
    written["loss_curves"] = plot_dir / "loss_curves.png"
    fig.savefig(written["loss_curves"], dpi=100)
    plt.close(fig)
    return written
