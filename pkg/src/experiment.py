#!/usr/bin/env python3
"""
Fine-tune-size sweep

One source model is trained per seed and reused by every transfer and
no-training cell of that seed. Each cell is evaluated on the same fixed target
test set. Results go to a ResultsDatabase as they arrive so an interrupted
sweep can be resumed.
"""

import json
import logging
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .config import build_config, from_dict, get_worker_count, to_dict
from .data import Cohort, check_zone, split_cohort, split_finetune
from .database import ResultsDatabase
from .errors import ConfigError
from .exporter import ResultsExporter
from .loss import X_SWEEP
from .metrics import MetricsReport, evaluate_cohort
from .model import ModelConfig, build_model
from .phantom import PhantomConfig, generate_phantom_cohort
from .postprocess import PostprocessConfig, derive_min_size_threshold, postprocess_predictions
from .storage import read_dataset
from .transfer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    predict_cohort,
    save_checkpoint,
    scheme_for_zone,
    train_from_scratch,
    train_source,
    with_overrides,
)

logger = logging.getLogger(__name__)

REGIMES = ("transfer", "scratch", "no-training", "source")
X_REGIMES = ("transfer", "scratch")
PLOT_FORMATS = ("svg", "png")

PHANTOM_FINETUNE_SIZES = [2, 4, 8, 16]
FULL_FINETUNE_SIZES = [8, 30, 42, 70, 85, 106, 115]


@dataclass
class ExperimentPlan:
    """
    Sweep grid and everything needed to reproduce it

    Attributes:
        zone: WG or TZ
        regimes: Subset of transfer, scratch, no-training, source
        finetune_sizes: Strictly increasing target patient counts
        x_values: Empty-slice rewards swept for transfer and scratch cells
        seeds: One source model and one run per cell per seed
        fixed_test_size: Target patients held out for evaluation
        source_split: train/val/test ratios of the source cohort
        split_seed: Seed of every patient-level split (fixes the test set)
        phantom: Phantom parameters used when no dataset directories are given
        source_dataset, target_dataset: Dataset directories written by write_dataset
        model, source_train, finetune: Network shape and training settings
        freeze_bottleneck: Keep the bottleneck frozen in the zone's fine-tune scheme
        postprocess: Applied to test predictions before evaluation when enabled
        averaging: 'slice' or 'patient' Dice averaging
        record_timing: Store wall-clock seconds per cell (breaks byte-identical reruns)
        plot_format: svg or png
        bar_sizes: Sizes shown in the metric bar chart (default: smallest and largest)
        bar_x_values: X values compared in the metric bar chart (default: 0 and 1 where swept)
        workers: Parallel cell workers (default: WORKBENCH_WORKERS or 1)
    """
    zone: str = "WG"
    regimes: List[str] = field(default_factory=lambda: ["transfer", "scratch", "no-training"])
    finetune_sizes: List[int] = field(default_factory=lambda: list(PHANTOM_FINETUNE_SIZES))
    x_values: List[float] = field(default_factory=lambda: [0.0, 1.0])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    fixed_test_size: int = 6
    source_split: List[float] = field(default_factory=lambda: [3.0, 1.0, 1.5])
    split_seed: int = 0
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(n_patients=24))
    source_dataset: Optional[str] = None
    target_dataset: Optional[str] = None
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_levels=3, base_channels=8))
    source_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, augment=True))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, augment=False))
    freeze_bottleneck: bool = True
    postprocess: PostprocessConfig = field(default_factory=lambda: PostprocessConfig(enabled=False))
    averaging: str = "slice"
    record_timing: bool = False
    plot_format: str = "svg"
    bar_sizes: Optional[List[int]] = None
    bar_x_values: Optional[List[float]] = None
    workers: Optional[int] = None

    def __post_init__(self):
        check_zone(self.zone)
        unknown = sorted(set(self.regimes) - set(REGIMES))
        if unknown or not self.regimes:
            raise ConfigError(f"regimes must be a non-empty subset of {REGIMES}, got {self.regimes}")
        sizes = list(self.finetune_sizes)
        if not sizes or sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"finetune_sizes must be positive and strictly increasing, got {sizes}")
        if not self.x_values or any(not 0.0 <= x <= 1.0 for x in self.x_values):
            raise ConfigError(f"x_values must be non-empty and within [0, 1], got {self.x_values}")
        if len(set(self.x_values)) != len(self.x_values):
            raise ConfigError(f"x_values contain duplicates: {self.x_values}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be non-empty and unique, got {self.seeds}")
        if self.fixed_test_size < 1:
            raise ConfigError(f"fixed_test_size must be >= 1, got {self.fixed_test_size}")
        if len(self.source_split) != 3:
            raise ConfigError(f"source_split needs train/val/test ratios, got {self.source_split}")
        if self.target_dataset is None and sizes[-1] + self.fixed_test_size > self.phantom.n_patients:
            raise ConfigError(
                f"largest fine-tune size {sizes[-1]} plus fixed_test_size {self.fixed_test_size} "
                f"exceeds the {self.phantom.n_patients} phantom target patients"
            )
        if (self.phantom.height, self.phantom.width) != (self.model.height, self.model.width) \
                and (self.source_dataset is None or self.target_dataset is None):
            raise ConfigError("phantom image size must match model height/width")
        if self.averaging not in ("slice", "patient"):
            raise ConfigError(f"averaging must be 'slice' or 'patient', got {self.averaging!r}")
        if self.plot_format not in PLOT_FORMATS:
            raise ConfigError(f"plot_format must be one of {PLOT_FORMATS}, got {self.plot_format!r}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.bar_x_values is not None and not set(self.bar_x_values) <= set(self.x_values):
            raise ConfigError(f"bar_x_values {self.bar_x_values} must be among x_values {self.x_values}")

    def planned_keys(self) -> List["CellKey"]:
        """Every cell of the grid, in output order"""
        keys = []
        for regime in REGIMES:
            if regime not in self.regimes:
                continue
            for x in (sorted(self.x_values) if regime in X_REGIMES else [None]):
                for size in (self.finetune_sizes if regime != "source" else [None]):
                    for seed in self.seeds:
                        keys.append(CellKey(self.zone, regime, x, size, seed))
        return keys

    def selected_bar_sizes(self) -> List[int]:
        if self.bar_sizes:
            return list(self.bar_sizes)
        return sorted({self.finetune_sizes[0], self.finetune_sizes[-1]})

    def selected_bar_x_values(self) -> List[float]:
        if self.bar_x_values:
            return sorted(self.bar_x_values)
        return [x for x in (0.0, 1.0) if x in self.x_values] or sorted(self.x_values)


PHANTOM_PRESET: Dict[str, Any] = {}

FULL_PRESET: Dict[str, Any] = {
    "finetune_sizes": list(FULL_FINETUNE_SIZES),
    "x_values": list(X_SWEEP),
    "seeds": [0],
    "fixed_test_size": 33,
    "phantom": {"n_patients": 148},
    "model": {"n_levels": 4, "base_channels": 16},
    "source_train": {"epochs": 25},
    "finetune": {"epochs": 25},
}

PRESETS = {
    "phantom": PHANTOM_PRESET,
    "full": FULL_PRESET,
}


def plan_from_dict(data: Dict[str, Any], overrides: Optional[List[str]] = None) -> ExperimentPlan:
    """
    Build a plan from JSON, starting from a named preset

    A top-level "preset" key ('phantom' or 'full') selects the starting values;
    every other key overrides them, then the dotted `--set` overrides apply.
    """
    values = dict(data)
    preset = values.pop("preset", "phantom")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
    return build_config(ExperimentPlan, PRESETS[preset], values, overrides=overrides)


@dataclass(frozen=True)
class CellKey:
    zone: str
    regime: str
    x: Optional[float]
    size: Optional[int]
    seed: int

    def sort_key(self) -> Tuple:
        return (self.zone, REGIMES.index(self.regime),
                -1.0 if self.x is None else self.x,
                -1 if self.size is None else self.size,
                self.seed)

    def label(self) -> str:
        x = "none" if self.x is None else format(self.x, "g")
        size = "none" if self.size is None else str(self.size)
        return f"{self.zone}_{self.regime}_x{x}_n{size}_seed{self.seed}"


@dataclass
class CellResult:
    """
    Outcome of one sweep cell

    Attributes:
        key: Cell coordinates
        status: 'ok' or 'failed'
        report: Metrics on the fixed test set (after post-processing when enabled)
        raw_report: Metrics before post-processing (only when post-processing is on)
        runtime_s: Wall-clock seconds (only with record_timing)
        error: 'ErrorClass: message' for failed cells
    """
    key: CellKey
    status: str
    report: Optional[MetricsReport] = None
    raw_report: Optional[MetricsReport] = None
    runtime_s: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_record(self) -> Dict[str, Any]:
        """Flat dictionary used by ResultsDatabase / ResultsExporter"""
        report = self.report
        return {
            "zone": self.key.zone,
            "regime": self.key.regime,
            "x": self.key.x,
            "size": self.key.size,
            "seed": self.key.seed,
            "status": self.status,
            "mean_dsc": report.mean_dsc if report else None,
            "std_dsc": report.std_dsc if report else None,
            "sensitivity": report.sensitivity if report else None,
            "specificity": report.specificity if report else None,
            "precision": report.precision if report else None,
            "runtime_s": self.runtime_s,
            "report": report.to_dict() if report else None,
            "raw_report": self.raw_report.to_dict() if self.raw_report else None,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "CellResult":
        key = CellKey(record["zone"], record["regime"], record["x"], record["size"], record["seed"])
        report = MetricsReport.from_dict(record["report"]) if record.get("report") else None
        raw = MetricsReport.from_dict(record["raw_report"]) if record.get("raw_report") else None
        return cls(key=key, status=record["status"], report=report, raw_report=raw,
                   runtime_s=record.get("runtime_s"), error=record.get("error"))


@dataclass
class ExperimentResult:
    """Plan echo plus one CellResult per planned cell"""
    plan: ExperimentPlan
    cells: Dict[CellKey, CellResult] = field(default_factory=dict)

    def ordered_cells(self) -> List[CellResult]:
        return [self.cells[k] for k in sorted(self.cells, key=CellKey.sort_key)]

    def failed_cells(self) -> List[CellResult]:
        return [c for c in self.ordered_cells() if not c.ok]

    def select(self, regime: str, x: Optional[float] = None, size: Optional[int] = None) -> List[CellResult]:
        """Successful cells of one regime, optionally restricted to an X and a size"""
        return [
            c for c in self.ordered_cells()
            if c.ok and c.key.regime == regime
            and (x is None or c.key.x == x)
            and (size is None or c.key.size == size)
        ]

    @classmethod
    def from_records(cls, plan: ExperimentPlan, records: Iterable[Dict[str, Any]]) -> "ExperimentResult":
        result = cls(plan=plan)
        for record in records:
            cell = CellResult.from_record(record)
            result.cells[cell.key] = cell
        return result


# -------------------------------------------------------------------------
# Cohorts
# -------------------------------------------------------------------------

def load_cohorts(plan: ExperimentPlan) -> Tuple[Cohort, Cohort]:
    """Source and target cohorts: dataset directories when given, phantoms otherwise"""
    if plan.source_dataset:
        source = read_dataset(plan.source_dataset)
    else:
        source = generate_phantom_cohort(plan.phantom, "source")
    if plan.target_dataset:
        target = read_dataset(plan.target_dataset)
    else:
        target = generate_phantom_cohort(plan.phantom, "target")
    return source, target


# -------------------------------------------------------------------------
# Jobs (top-level so they pickle for the worker pool)
# -------------------------------------------------------------------------

@dataclass
class _SourceJob:
    plan: ExperimentPlan
    seed: int
    train: Cohort
    val: Cohort
    checkpoint: str


@dataclass
class _CellJob:
    plan: ExperimentPlan
    key: CellKey
    checkpoint: Optional[str]
    train: Optional[Cohort]
    test: Cohort
    min_pixels: Optional[int]


def _run_source_job(job: _SourceJob) -> Tuple[int, Optional[str]]:
    """Train and save the source model of one seed; returns (seed, error or None)"""
    try:
        config = with_overrides(job.plan.source_train, seed=job.seed, zone=job.plan.zone)
        model, _ = build_model(job.plan.model, seed=job.seed)
        model, log = train_source(model, job.train, job.val, config)
        save_checkpoint(model, job.checkpoint, extra={"zone": job.plan.zone, "seed": job.seed})
        log.to_csv(Path(job.checkpoint).with_suffix(".log.csv"))
        return job.seed, None
    except Exception as e:
        return job.seed, f"{type(e).__name__}: {e}"


def _evaluate(model, job: _CellJob) -> Tuple[MetricsReport, Optional[MetricsReport]]:
    plan = job.plan
    predictions = predict_cohort(model, job.test, plan.finetune.b_value_policy)
    raw = evaluate_cohort(predictions, job.test, plan.zone, plan.averaging)
    if not plan.postprocess.enabled:
        return raw, None
    cleaned = postprocess_predictions(predictions, plan.postprocess, plan.zone, job.min_pixels)
    return evaluate_cohort(cleaned, job.test, plan.zone, plan.averaging), raw


def _run_cell_job(job: _CellJob) -> CellResult:
    """Train (per regime) and evaluate one cell; failures are captured, not raised"""
    start = time.perf_counter()
    plan, key = job.plan, job.key
    try:
        if key.regime == "scratch":
            config = with_overrides(plan.finetune, seed=key.seed, zone=key.zone, loss_x=key.x)
            model, _ = train_from_scratch(plan.model, job.train, config, model_seed=key.seed)
        else:
            if job.checkpoint is None:
                raise RuntimeError("source model unavailable")
            model = load_checkpoint(job.checkpoint)
            if key.regime == "transfer":
                config = with_overrides(plan.finetune, seed=key.seed, zone=key.zone, loss_x=key.x)
                scheme = scheme_for_zone(key.zone, plan.model.n_levels, plan.freeze_bottleneck)
                model, _ = finetune(model, job.train, scheme, config)
        report, raw = _evaluate(model, job)
        result = CellResult(key=key, status="ok", report=report, raw_report=raw)
    except Exception as e:
        result = CellResult(key=key, status="failed", error=f"{type(e).__name__}: {e}")
    if plan.record_timing:
        result.runtime_s = time.perf_counter() - start
    return result


def _execute(function, jobs: List[Any], workers: int) -> List[Any]:
    """Run jobs inline or on a process pool; results come back in job order"""
    if workers <= 1 or len(jobs) <= 1:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(function, jobs))


# -------------------------------------------------------------------------
# Sweep
# -------------------------------------------------------------------------

# Plan keys that can change between a sweep and its resume
RESUME_SAFE_KEYS = ("regimes", "x_values", "seeds", "workers", "record_timing", "plot_format", "bar_sizes",
                    "bar_x_values")


def _changed_keys(stored: Any, current: Any, prefix: str = "") -> List[str]:
    if isinstance(stored, dict) and isinstance(current, dict):
        changed = []
        for key in sorted(set(stored) | set(current)):
            changed.extend(_changed_keys(stored.get(key), current.get(key), f"{prefix}{key}."))
        return changed
    return [] if stored == current else [prefix.rstrip(".")]


def check_resumable(stored: Optional[Dict[str, Any]], plan: ExperimentPlan, db_path: str):
    """
    Refuse to resume into a results database written by a different plan

    Regimes, X values and seeds may be added or dropped; anything that changes
    how an existing cell is computed may not.

    Raises:
        ConfigError: the stored plan differs outside RESUME_SAFE_KEYS
    """
    if stored is None:
        return
    current = json.loads(json.dumps(to_dict(plan)))
    changed = [key for key in _changed_keys(stored, current) if key.split(".")[0] not in RESUME_SAFE_KEYS]
    if changed:
        raise ConfigError(f"cannot resume {db_path}: plan changed in {', '.join(changed)}")


class SweepRunner:
    """Runs an ExperimentPlan and records every cell in a ResultsDatabase"""

    def __init__(self, plan: ExperimentPlan, db: Optional[ResultsDatabase] = None,
                 work_dir: Optional[str] = None, resume: bool = False):
        """
        Initialize runner

        Args:
            plan: Sweep grid
            db: Results database (cells are upserted as they finish)
            work_dir: Directory for source checkpoints (temporary when None)
            resume: Skip cells already completed in the database
        """
        self.plan = plan
        self.db = db
        self.work_dir = work_dir
        self.resume = resume
        self.workers = plan.workers or get_worker_count()
        self.stats = {'planned': 0, 'skipped': 0, 'completed': 0, 'failed': 0}

    def _checkpoint_path(self, base: Path, seed: int) -> Path:
        return base / "checkpoints" / f"source_{self.plan.zone}_seed{seed}.pt"

    def run(self, source: Cohort, target: Cohort) -> ExperimentResult:
        if self.work_dir is None:
            with tempfile.TemporaryDirectory(prefix="workbench-sweep-") as tmp:
                return self._run(source, target, Path(tmp))
        return self._run(source, target, Path(self.work_dir))

    def _run(self, source: Cohort, target: Cohort, base: Path) -> ExperimentResult:
        plan = self.plan
        keys = plan.planned_keys()
        self.stats['planned'] = len(keys)
        result = ExperimentResult(plan=plan)

        logger.info("=" * 80)
        logger.info(f"Starting {plan.zone} sweep: {len(keys)} cells, {self.workers} worker(s)")
        logger.info("=" * 80)

        if self.db is not None:
            if self.resume:
                check_resumable(self.db.get_plan(), plan, self.db.db_path)
            self.db.save_plan(to_dict(plan))
        done = set()
        if self.resume and self.db is not None:
            completed = self.db.get_completed_keys()
            for key in keys:
                if astuple(key) in completed:
                    result.cells[key] = CellResult.from_record(self.db.get_cell(*astuple(key)))
                    done.add(key)
            self.stats['skipped'] = len(done)
            if done:
                logger.info(f"  ℹ️  Resuming: {len(done)} completed cell(s) skipped")
        pending = [k for k in keys if k not in done]

        # Step 1: splits (identical for every cell)
        source_train, source_val, source_test = split_cohort(source, ratios=plan.source_split, seed=plan.split_seed)
        subsets, fixed_test = split_finetune(target, plan.fixed_test_size, plan.finetune_sizes, seed=plan.split_seed)
        min_pixels = None
        if plan.postprocess.enabled and plan.postprocess.min_pixels(plan.zone) is None:
            min_pixels = derive_min_size_threshold(source_train, plan.zone, plan.postprocess.threshold_fraction)
            logger.info(f"  Derived {plan.zone} size threshold: {min_pixels} pixels")

        # Step 2: source models, one per seed
        needs_source = {k.seed for k in pending if k.regime in ("transfer", "no-training", "source")}
        checkpoints: Dict[int, Optional[str]] = {}
        source_jobs = []
        for seed in sorted(needs_source):
            path = self._checkpoint_path(base, seed)
            checkpoints[seed] = str(path)
            if self.resume and path.is_file():
                logger.info(f"  ℹ️  Reusing source model for seed {seed}: {path}")
                continue
            source_jobs.append(_SourceJob(plan, seed, source_train, source_val, str(path)))
        if source_jobs:
            logger.info(f"\n[Step 1] Training {len(source_jobs)} source model(s)...")
        for seed, error in _execute(_run_source_job, source_jobs, self.workers):
            if error:
                logger.warning(f"  ✗ Source training failed for seed {seed}: {error}")
                checkpoints[seed] = None
            else:
                logger.info(f"  ✓ Source model for seed {seed} saved")

        # Step 3: cells; no-training runs once per seed and is copied to every size
        jobs, baseline_targets = [], {}
        for key in pending:
            if key.regime == "no-training":
                base_key = replace(key, size=None)
                if base_key not in baseline_targets:
                    baseline_targets[base_key] = []
                    jobs.append(_CellJob(plan, base_key, checkpoints.get(key.seed), None, fixed_test, min_pixels))
                baseline_targets[base_key].append(key)
            elif key.regime == "source":
                jobs.append(_CellJob(plan, key, checkpoints.get(key.seed), None, source_test, min_pixels))
            else:
                jobs.append(_CellJob(plan, key, checkpoints.get(key.seed), subsets[key.size], fixed_test, min_pixels))

        logger.info(f"\n[Step 2] Running {len(jobs)} cell job(s)...")
        for cell in _execute(_run_cell_job, jobs, self.workers):
            targets = baseline_targets.get(cell.key, [cell.key])
            for key in targets:
                self._record(result, replace(cell, key=key))

        logger.info("\n" + "=" * 80)
        logger.info("Sweep Complete!")
        logger.info("=" * 80)
        logger.info(f"Planned: {self.stats['planned']}")
        logger.info(f"Completed: {self.stats['completed']}")
        logger.info(f"Skipped: {self.stats['skipped']}")
        logger.info(f"Failed: {self.stats['failed']}")
        return result

    def _record(self, result: ExperimentResult, cell: CellResult):
        result.cells[cell.key] = cell
        if cell.ok:
            self.stats['completed'] += 1
            dsc = cell.report.mean_dsc
            logger.info(f"  ✓ {cell.key.label()}: DSC {'-' if dsc is None else f'{dsc:.4f}'}")
        else:
            self.stats['failed'] += 1
            logger.warning(f"  ⚠️  {cell.key.label()} failed: {cell.error}")
        if self.db is not None:
            self.db.upsert_cell(cell.to_record())


def run_sweep(plan: ExperimentPlan,
              source_cohort: Cohort,
              target_cohort: Cohort,
              db: Optional[ResultsDatabase] = None,
              work_dir: Optional[str] = None,
              resume: bool = False) -> ExperimentResult:
    """
    Run every cell of the plan

    Args:
        plan: Sweep grid
        source_cohort: Source-domain patients (split train/val/test by plan.source_split)
        target_cohort: Target-domain patients (fixed test set plus nested fine-tune subsets)
        db: Optional results database, updated cell by cell
        work_dir: Where source checkpoints are kept (needed for resume)
        resume: Skip cells already completed in db

    Returns:
        ExperimentResult with every planned cell present, failed ones flagged
    """
    if plan.finetune_sizes[-1] + plan.fixed_test_size > len(target_cohort):
        raise ConfigError(
            f"largest fine-tune size {plan.finetune_sizes[-1]} plus fixed_test_size "
            f"{plan.fixed_test_size} exceeds the target cohort of {len(target_cohort)} patients"
        )
    return SweepRunner(plan, db=db, work_dir=work_dir, resume=resume).run(source_cohort, target_cohort)


# -------------------------------------------------------------------------
# Summaries
# -------------------------------------------------------------------------

def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def seed_mean(cells: List[CellResult], metric: str = "mean_dsc") -> Optional[float]:
    """Average of one report metric over the given cells (None values skipped)"""
    return _mean([getattr(c.report, metric) for c in cells if c.report is not None])


@dataclass
class BestX:
    x: float
    mean_dsc: float
    n_seeds: int


def select_best_x(result: ExperimentResult) -> Dict[Tuple[str, int], BestX]:
    """
    Best X per (regime, size): highest seed-averaged Dice, lowest X on ties

    Only transfer and scratch cells carry an X.
    """
    best: Dict[Tuple[str, int], BestX] = {}
    for regime in X_REGIMES:
        for size in result.plan.finetune_sizes:
            for x in sorted(result.plan.x_values):
                cells = result.select(regime, x=x, size=size)
                value = seed_mean(cells)
                if value is None:
                    continue
                current = best.get((regime, size))
                if current is None or value > current.mean_dsc:
                    best[(regime, size)] = BestX(x=x, mean_dsc=value, n_seeds=len(cells))
    return best


def _cells_at_best_x(result: ExperimentResult, best: Dict[Tuple[str, int], BestX],
                     regime: str, size: int) -> List[CellResult]:
    if regime in X_REGIMES:
        choice = best.get((regime, size))
        return result.select(regime, x=choice.x, size=size) if choice else []
    return result.select(regime, size=size)


def curve_series(result: ExperimentResult) -> Dict[str, Tuple[List[int], List[float]]]:
    """
    Dice against fine-tune size, one series per regime present in the result

    Transfer and scratch use the best X per size; the no-training baseline is
    the same source model at every size.
    """
    best = select_best_x(result)
    series = {}
    for regime in ("transfer", "scratch", "no-training"):
        if regime not in result.plan.regimes:
            continue
        sizes, values = [], []
        for size in result.plan.finetune_sizes:
            value = seed_mean(_cells_at_best_x(result, best, regime, size))
            if value is not None:
                sizes.append(size)
                values.append(value)
        series[regime] = (sizes, values)
    return series


BAR_METRICS = ("sensitivity", "specificity", "precision")


BarGroup = Tuple[str, Optional[float], int]


def bar_series(result: ExperimentResult,
               sizes: Optional[List[int]] = None,
               x_values: Optional[List[float]] = None) -> Dict[BarGroup, Dict[str, Optional[float]]]:
    """
    Seed-averaged detection metrics per bar group (regime, X, size)

    Transfer and scratch get one group per compared X (default: X=0 next to X=1),
    no-training one group with X None. Groups are ordered by regime, size, then X.
    """
    chosen_sizes = sizes if sizes is not None else result.plan.selected_bar_sizes()
    chosen_x = sorted(x_values) if x_values is not None else result.plan.selected_bar_x_values()
    bars: Dict[BarGroup, Dict[str, Optional[float]]] = {}
    for regime in ("transfer", "scratch", "no-training"):
        if regime not in result.plan.regimes:
            continue
        for size in chosen_sizes:
            for x in (chosen_x if regime in X_REGIMES else [None]):
                cells = result.select(regime, x=x, size=size)
                bars[(regime, x, size)] = {metric: seed_mean(cells, metric) for metric in BAR_METRICS}
    return bars


def best_x_rows(result: ExperimentResult) -> List[Dict[str, Any]]:
    """select_best_x flattened into JSON rows ordered by regime and size"""
    best = select_best_x(result)
    return [
        {"regime": regime, "size": size, "x": choice.x, "mean_dsc": choice.mean_dsc, "n_seeds": choice.n_seeds}
        for (regime, size), choice in sorted(best.items(), key=lambda item: (REGIMES.index(item[0][0]), item[0][1]))
    ]


def persist_results(result: ExperimentResult, out_dir) -> Dict[str, Any]:
    """
    Write per-cell JSON, the aggregate CSV and the best-X summary

    The results database in out_dir is brought in line with the result first, so
    the exported files always describe exactly the planned cells.

    Returns:
        Export summary (file paths and counts)
    """
    output = Path(out_dir)
    output.mkdir(parents=True, exist_ok=True)
    db = ResultsDatabase(str(output / "results.db"))
    try:
        db.save_plan(to_dict(result.plan))
        for cell in result.ordered_cells():
            db.upsert_cell(cell.to_record())
        db.retain_cells([cell.to_record() for cell in result.ordered_cells()])
        exporter = ResultsExporter(db, str(output))
        summary = exporter.export_all()
        summary["best_x"] = str(exporter.export_best_x(best_x_rows(result)))
        return summary
    finally:
        db.close()


def load_result(db: ResultsDatabase) -> ExperimentResult:
    """Rebuild an ExperimentResult from a results database"""
    plan_data = db.get_plan()
    if plan_data is None:
        raise ConfigError(f"{db.db_path}: no plan stored in results database")
    return ExperimentResult.from_records(from_dict(ExperimentPlan, plan_data), db.get_all_cells())
