#!/usr/bin/env python3
"""
Tests for the sweep runner, best-X selection, persistence and plots
"""

import json
import sys
from dataclasses import astuple, replace
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

import src.experiment as experiment
from src.config import to_dict
from src.database import ResultsDatabase
from src.errors import ConfigError
from src.experiment import (
    FULL_FINETUNE_SIZES,
    CellKey,
    CellResult,
    ExperimentPlan,
    ExperimentResult,
    SweepRunner,
    bar_series,
    best_x_rows,
    check_resumable,
    curve_series,
    load_cohorts,
    load_result,
    persist_results,
    plan_from_dict,
    run_sweep,
    select_best_x,
)
from src.exporter import read_aggregate_csv
from src.loss import X_SWEEP, LossConfig
from src.metrics import MetricsReport
from src.model import ModelConfig
from src.phantom import DomainShift, PhantomConfig
from src.plots import emit_curve_plot, emit_metric_bars, emit_prediction_overlay
from src.postprocess import PostprocessConfig
from src.transfer import TrainConfig


def _report(dsc, sensitivity=0.9, specificity=0.8, precision=0.7):
    return MetricsReport(mean_dsc=dsc, std_dsc=0.05, sensitivity=sensitivity, specificity=specificity,
                         precision=precision, n_slices_total=20, n_slices_with_prostate=10)


def _synthetic_result(plan, dsc_for):
    """Every planned cell ok, with DSC given by dsc_for(key)"""
    result = ExperimentResult(plan=plan)
    for key in plan.planned_keys():
        result.cells[key] = CellResult(key=key, status="ok", report=_report(dsc_for(key)))
    return result


def _reference_pattern(key):
    """Transfer prefers X=0, scratch prefers X=1, baseline flat"""
    if key.regime == "no-training":
        return 0.6
    bonus = 0.01 * key.size + 0.001 * key.seed
    if key.regime == "transfer":
        return 0.8 - 0.1 * key.x + bonus
    return 0.5 + 0.1 * key.x + bonus


SYNTHETIC_PLAN = ExperimentPlan(finetune_sizes=[2, 4, 8], x_values=[1.0, 0.0, 0.5], seeds=[0, 1])


def _tiny_plan(**changes):
    values = dict(
        regimes=["transfer", "scratch", "no-training", "source"],
        finetune_sizes=[1, 2],
        x_values=[0.0, 1.0],
        seeds=[0],
        fixed_test_size=1,
        phantom=PhantomConfig(n_patients=4, slices_per_patient=4, height=16, width=16, b_values=[0.0, 800.0],
                              domain_shift=DomainShift(b_values=[100.0, 800.0])),
        model=ModelConfig(n_levels=2, base_channels=4, height=16, width=16),
        source_train=TrainConfig(epochs=1, batch_size=8, augment=True, loss=LossConfig(family="conventional")),
        finetune=TrainConfig(epochs=1, batch_size=8),
        workers=1,
    )
    values.update(changes)
    return ExperimentPlan(**values)


@pytest.fixture(scope="module")
def tiny_sweep(tmp_path_factory):
    plan = _tiny_plan()
    source, target = load_cohorts(plan)
    work_dir = tmp_path_factory.mktemp("sweep")
    return run_sweep(plan, source, target, work_dir=str(work_dir))


# -------------------------------------------------------------------------
# Plans
# -------------------------------------------------------------------------

def test_planned_keys_order_and_count():
    plan = ExperimentPlan()
    keys = plan.planned_keys()
    assert len(keys) == 2 * 4 * 3 + 2 * 4 * 3 + 4 * 3
    assert keys[0] == CellKey("WG", "transfer", 0.0, 2, 0)
    assert keys[-1] == CellKey("WG", "no-training", None, 16, 2)
    assert all(k.x is None for k in keys if k.regime == "no-training")

    with_source = ExperimentPlan(regimes=["source", "transfer"], seeds=[0])
    assert [k.regime for k in with_source.planned_keys()][-1] == "source"
    assert with_source.planned_keys()[-1].size is None


def test_plan_validation():
    with pytest.raises(ConfigError):
        ExperimentPlan(finetune_sizes=[4, 2])
    with pytest.raises(ConfigError):
        ExperimentPlan(finetune_sizes=[2, 20])
    with pytest.raises(ConfigError):
        ExperimentPlan(x_values=[0.0, 0.0])
    with pytest.raises(ConfigError):
        ExperimentPlan(regimes=["transfer", "fine"])
    with pytest.raises(ConfigError):
        ExperimentPlan(plot_format="pdf")
    with pytest.raises(ConfigError):
        ExperimentPlan(model=ModelConfig(height=32, width=32))


def test_presets():
    phantom = plan_from_dict({})
    assert phantom == ExperimentPlan()
    assert phantom.finetune_sizes == [2, 4, 8, 16]

    full = plan_from_dict({"preset": "full", "zone": "TZ"})
    assert full.zone == "TZ"
    assert full.finetune_sizes == FULL_FINETUNE_SIZES
    assert full.x_values == list(X_SWEEP)
    assert full.phantom.n_patients == 148
    assert full.model.n_levels == 4
    assert full.source_train.augment and not full.finetune.augment
    assert full.source_train.loss.family == "modified"
    assert full.source_train.loss.x == 0.0

    override = plan_from_dict({"phantom": {"n_patients": 30}, "finetune": {"loss": {"x": 0.5}}})
    assert override.phantom.n_patients == 30
    assert override.phantom.height == 64
    assert override.finetune.epochs == 10

    dotted = plan_from_dict({"preset": "full"}, overrides=["zone=TZ", "finetune.loss.x=0.3", "seeds=[0,1]"])
    assert dotted.zone == "TZ"
    assert dotted.finetune.loss.x == 0.3
    assert dotted.seeds == [0, 1]
    assert dotted.model.n_levels == 4

    with pytest.raises(ConfigError):
        plan_from_dict({"preset": "huge"})
    with pytest.raises(ConfigError, match="finetune.bogus"):
        plan_from_dict({}, overrides=["finetune.bogus=1"])
    with pytest.raises(ConfigError):
        plan_from_dict({"sizes": [1, 2]})


def test_cell_key_label_and_record_round_trip():
    key = CellKey("TZ", "no-training", None, 8, 1)
    assert key.label() == "TZ_no-training_xnone_n8_seed1"
    cell = CellResult(key=key, status="ok", report=_report(0.5))
    assert CellResult.from_record(cell.to_record()) == cell


# -------------------------------------------------------------------------
# Summaries
# -------------------------------------------------------------------------

def test_best_x_selection_follows_the_dsc():
    best = select_best_x(_synthetic_result(SYNTHETIC_PLAN, _reference_pattern))
    for size in (2, 4, 8):
        assert best[("transfer", size)].x == 0.0
        assert best[("scratch", size)].x == 1.0
        assert best[("transfer", size)].n_seeds == 2
    assert best[("transfer", 2)].mean_dsc == pytest.approx(0.8 + 0.02 + 0.0005)


def test_best_x_ties_go_to_the_lowest_x():
    best = select_best_x(_synthetic_result(SYNTHETIC_PLAN, lambda key: 0.7))
    assert {choice.x for choice in best.values()} == {0.0}


def test_best_x_rows_order():
    rows = best_x_rows(_synthetic_result(SYNTHETIC_PLAN, _reference_pattern))
    assert [(r["regime"], r["size"]) for r in rows] == [
        ("transfer", 2), ("transfer", 4), ("transfer", 8), ("scratch", 2), ("scratch", 4), ("scratch", 8),
    ]


def test_curve_series():
    series = curve_series(_synthetic_result(SYNTHETIC_PLAN, _reference_pattern))
    assert set(series) == {"transfer", "scratch", "no-training"}
    assert all(sizes == [2, 4, 8] for sizes, _ in series.values())
    baseline = series["no-training"][1]
    assert baseline == [baseline[0]] * 3
    assert series["transfer"][1] == pytest.approx([0.8205, 0.8405, 0.8805])


def test_curve_series_single_size():
    plan = ExperimentPlan(finetune_sizes=[4], x_values=[0.0], seeds=[0])
    series = curve_series(_synthetic_result(plan, _reference_pattern))
    assert series["scratch"] == ([4], [pytest.approx(0.54)])


def test_failed_cells_are_left_out_of_the_curves():
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    key = CellKey("WG", "transfer", 0.0, 2, 0)
    result.cells[key] = CellResult(key=key, status="failed", error="RuntimeError: boom")
    assert result.failed_cells()[0].key == key
    assert select_best_x(result)[("transfer", 2)].n_seeds == 1


def test_bar_series_compares_x_per_regime_and_size():
    result = ExperimentResult(plan=SYNTHETIC_PLAN)
    for key in SYNTHETIC_PLAN.planned_keys():
        sensitivity = 0.9 if key.x is None else 1.0 - 0.5 * key.x
        result.cells[key] = CellResult(key=key, status="ok", report=_report(0.7, sensitivity=sensitivity))

    bars = bar_series(result)
    assert list(bars) == [
        ("transfer", 0.0, 2), ("transfer", 1.0, 2), ("transfer", 0.0, 8), ("transfer", 1.0, 8),
        ("scratch", 0.0, 2), ("scratch", 1.0, 2), ("scratch", 0.0, 8), ("scratch", 1.0, 8),
        ("no-training", None, 2), ("no-training", None, 8),
    ]
    assert bars[("transfer", 0.0, 8)]["sensitivity"] == 1.0
    assert bars[("scratch", 1.0, 2)]["sensitivity"] == 0.5
    assert bars[("no-training", None, 8)] == {"sensitivity": 0.9, "specificity": 0.8, "precision": 0.7}

    only = bar_series(result, [4], [0.5])
    assert list(only) == [("transfer", 0.5, 4), ("scratch", 0.5, 4), ("no-training", None, 4)]
    assert only[("transfer", 0.5, 4)]["sensitivity"] == 0.75


def test_bar_x_values_default_and_validation():
    assert SYNTHETIC_PLAN.selected_bar_x_values() == [0.0, 1.0]
    assert ExperimentPlan(x_values=[0.3, 0.6]).selected_bar_x_values() == [0.3, 0.6]
    assert ExperimentPlan(x_values=[0.0, 0.5, 1.0], bar_x_values=[0.5]).selected_bar_x_values() == [0.5]
    with pytest.raises(ConfigError):
        ExperimentPlan(x_values=[0.0, 1.0], bar_x_values=[0.5])


# -------------------------------------------------------------------------
# Persistence and plots
# -------------------------------------------------------------------------

def test_persist_and_reparse(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    summary = persist_results(result, tmp_path)
    assert summary["cells_exported"] == len(SYNTHETIC_PLAN.planned_keys())

    rows = read_aggregate_csv(tmp_path / "results.csv")
    assert len(rows) == len(SYNTHETIC_PLAN.planned_keys())
    assert [(r["regime"], r["X"], r["size"], r["seed"]) for r in rows] == \
        [(k.regime, k.x, k.size, k.seed) for k in SYNTHETIC_PLAN.planned_keys()]
    for row in rows:
        cell = result.cells[CellKey(row["zone"], row["regime"], row["X"], row["size"], row["seed"])]
        assert row["mean_dsc"] == cell.report.mean_dsc
        assert row["precision"] == cell.report.precision
        assert row["runtime_s"] is None

    assert (tmp_path / "cells" / "WG_transfer_x0.5_n4_seed1.json").is_file()
    assert (tmp_path / "best_x.json").is_file()


def test_persist_flags_failed_cells(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    key = CellKey("WG", "scratch", 1.0, 8, 1)
    result.cells[key] = CellResult(key=key, status="failed", error="ValueError: no slices")
    persist_results(result, tmp_path)
    failed = [r for r in read_aggregate_csv(tmp_path / "results.csv") if r["status"] == "failed"]
    assert len(failed) == 1
    assert failed[0]["mean_dsc"] is None and failed[0]["size"] == 8


def test_persist_drops_cells_outside_the_result(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    persist_results(result, tmp_path)
    smaller_plan = ExperimentPlan(finetune_sizes=[2], x_values=[0.0], seeds=[0])
    persist_results(_synthetic_result(smaller_plan, _reference_pattern), tmp_path)
    assert len(read_aggregate_csv(tmp_path / "results.csv")) == len(smaller_plan.planned_keys())
    assert len(list((tmp_path / "cells").glob("*.json"))) == len(smaller_plan.planned_keys())


def test_load_result_from_database(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    persist_results(result, tmp_path)
    db = ResultsDatabase(str(tmp_path / "results.db"))
    try:
        loaded = load_result(db)
        assert loaded.plan == SYNTHETIC_PLAN
        assert loaded.cells == result.cells
        stats = db.get_statistics()
        assert stats["total_cells"] == len(result.cells)
        assert stats["failed_count"] == 0
    finally:
        db.close()


def test_statistics_file_has_no_timestamps(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    persist_results(result, tmp_path)
    first = (tmp_path / "statistics.json").read_bytes()
    persist_results(result, tmp_path)
    assert (tmp_path / "statistics.json").read_bytes() == first
    stats = json.loads(first)["statistics"]
    assert set(stats) == {"total_cells", "by_regime", "by_status", "ok_count", "failed_count",
                          "mean_dsc_by_regime"}


def test_completed_keys_and_single_cell_lookup(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    persist_results(result, tmp_path)
    db = ResultsDatabase(str(tmp_path / "results.db"))
    try:
        assert db.get_completed_keys() == {astuple(k) for k in SYNTHETIC_PLAN.planned_keys()}
        key = CellKey("WG", "no-training", None, 4, 1)
        assert CellResult.from_record(db.get_cell(*astuple(key))) == result.cells[key]
        assert db.get_cell("WG", "transfer", 0.3, 2, 0) is None
    finally:
        db.close()


def test_plots_are_written_and_reproducible(tmp_path):
    result = _synthetic_result(SYNTHETIC_PLAN, _reference_pattern)
    a = emit_curve_plot(result, "WG", tmp_path / "a" / "curve.svg")
    b = emit_curve_plot(result, "WG", tmp_path / "b" / "curve.svg")
    assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()
    bars = emit_metric_bars(result, None, tmp_path / "bars.png")
    assert bars.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_plots_handle_degenerate_results(tmp_path):
    plan = ExperimentPlan(finetune_sizes=[4], x_values=[0.0], seeds=[0])
    single = _synthetic_result(plan, _reference_pattern)
    assert emit_curve_plot(single, None, tmp_path / "single.svg").is_file()
    empty = ExperimentResult(plan=plan)
    assert emit_curve_plot(empty, None, tmp_path / "empty.svg").is_file()
    assert emit_metric_bars(empty, [4], tmp_path / "empty_bars.svg").is_file()


def test_prediction_overlay(tmp_path):
    image = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    truth = np.zeros((16, 16), dtype=np.uint8)
    truth[4:12, 4:12] = 1
    shifted = np.roll(truth, 2, axis=1)
    panels = {"transfer X=0": shifted, "empty": np.zeros_like(truth)}
    a = emit_prediction_overlay(image, truth, panels, tmp_path / "a.svg", title="target-000")
    b = emit_prediction_overlay(image, truth, panels, tmp_path / "b.svg", title="target-000")
    assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()

    with pytest.raises(ValueError):
        emit_prediction_overlay(image, truth, {}, tmp_path / "none.svg")
    with pytest.raises(ValueError):
        emit_prediction_overlay(image, truth, {"small": truth[:8]}, tmp_path / "bad.svg")


# -------------------------------------------------------------------------
# End-to-end on tiny phantoms
# -------------------------------------------------------------------------

def test_tiny_sweep_has_every_cell(tiny_sweep):
    keys = tiny_sweep.plan.planned_keys()
    assert len(keys) == 2 * 2 + 2 * 2 + 2 + 1
    assert set(tiny_sweep.cells) == set(keys)
    assert tiny_sweep.failed_cells() == []
    for cell in tiny_sweep.cells.values():
        assert 0.0 <= cell.report.mean_dsc <= 1.0
        assert cell.runtime_s is None


def test_no_training_is_constant_across_sizes(tiny_sweep):
    baseline = tiny_sweep.select("no-training")
    assert len(baseline) == 2
    assert baseline[0].report == baseline[1].report


def test_sweep_is_deterministic(tiny_sweep, tmp_path):
    plan = tiny_sweep.plan
    again = run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path / "work"))
    persist_results(tiny_sweep, tmp_path / "first")
    persist_results(again, tmp_path / "second")
    for name in ("results.csv", "best_x.json", "statistics.json"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    first_cells = sorted(p.name for p in (tmp_path / "first" / "cells").iterdir())
    assert first_cells == sorted(p.name for p in (tmp_path / "second" / "cells").iterdir())
    for name in first_cells:
        assert (tmp_path / "first" / "cells" / name).read_bytes() == \
            (tmp_path / "second" / "cells" / name).read_bytes()


def test_resume_skips_completed_cells(tmp_path):
    plan = _tiny_plan(regimes=["transfer", "no-training"], x_values=[0.0])
    source, target = load_cohorts(plan)
    db = ResultsDatabase(str(tmp_path / "results.db"))
    try:
        first = SweepRunner(plan, db=db, work_dir=str(tmp_path))
        first.run(source, target)
        assert first.stats["completed"] == 4
        assert (tmp_path / "checkpoints" / "source_WG_seed0.pt").is_file()
        assert (tmp_path / "checkpoints" / "source_WG_seed0.log.csv").is_file()

        second = SweepRunner(plan, db=db, work_dir=str(tmp_path), resume=True)
        resumed = second.run(source, target)
        assert second.stats["skipped"] == 4
        assert second.stats["completed"] == 0
        assert set(resumed.cells) == set(plan.planned_keys())
    finally:
        db.close()


def test_resume_rejects_a_changed_plan(tmp_path):
    plan = _tiny_plan(regimes=["no-training"], finetune_sizes=[1])
    source, target = load_cohorts(plan)
    db = ResultsDatabase(str(tmp_path / "results.db"))
    try:
        SweepRunner(plan, db=db, work_dir=str(tmp_path)).run(source, target)

        changed = replace(plan, finetune=replace(plan.finetune, epochs=3))
        with pytest.raises(ConfigError, match="finetune.epochs"):
            SweepRunner(changed, db=db, work_dir=str(tmp_path), resume=True).run(source, target)

        # more seeds and fewer workers leave the completed cells valid
        grown = replace(plan, seeds=[0, 1], workers=None)
        runner = SweepRunner(grown, db=db, work_dir=str(tmp_path), resume=True)
        runner.run(source, target)
        assert runner.stats["skipped"] == 1
        assert runner.stats["completed"] == 1
    finally:
        db.close()


def test_check_resumable_lists_every_changed_key():
    plan = _tiny_plan()
    stored = to_dict(plan)
    check_resumable(None, plan, "results.db")
    check_resumable(stored, replace(plan, x_values=[0.0], plot_format="png"), "results.db")
    changed = replace(plan, split_seed=4, model=replace(plan.model, base_channels=8))
    with pytest.raises(ConfigError, match="model.base_channels, split_seed"):
        check_resumable(stored, changed, "results.db")


def test_failures_are_recorded_and_the_sweep_continues(monkeypatch, tmp_path):
    def broken(*args, **kwargs):
        raise RuntimeError("out of memory")

    monkeypatch.setattr(experiment, "train_from_scratch", broken)
    plan = _tiny_plan(regimes=["scratch", "no-training"], x_values=[0.0])
    result = run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path))
    failed = result.failed_cells()
    assert {c.key.regime for c in failed} == {"scratch"}
    assert failed[0].error == "RuntimeError: out of memory"
    assert len(result.select("no-training")) == 2


def test_failed_source_model_fails_dependent_cells(monkeypatch, tmp_path):
    def broken(*args, **kwargs):
        raise ValueError("diverged")

    monkeypatch.setattr(experiment, "train_source", broken)
    plan = _tiny_plan(regimes=["transfer", "scratch"], x_values=[0.0], finetune_sizes=[1])
    result = run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path))
    assert result.cells[CellKey("WG", "transfer", 0.0, 1, 0)].error == "RuntimeError: source model unavailable"
    assert result.cells[CellKey("WG", "scratch", 0.0, 1, 0)].ok


def test_timing_is_recorded_on_request(tmp_path):
    plan = _tiny_plan(regimes=["scratch"], x_values=[0.0], finetune_sizes=[1], record_timing=True)
    result = run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path))
    assert all(c.runtime_s is not None and c.runtime_s > 0 for c in result.cells.values())


def test_postprocessing_keeps_the_raw_report(tmp_path):
    plan = _tiny_plan(regimes=["no-training"], postprocess=PostprocessConfig(enabled=True, disk_radius=1))
    result = run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path))
    for cell in result.cells.values():
        assert cell.raw_report is not None
        assert cell.report.n_slices_total == cell.raw_report.n_slices_total


def test_run_sweep_rejects_small_target_cohort(source_cohort, target_cohort):
    plan = _tiny_plan(finetune_sizes=[1, 2, 4], phantom=PhantomConfig(n_patients=8, height=16, width=16))
    with pytest.raises(ConfigError, match="exceeds"):
        run_sweep(plan, source_cohort, target_cohort)


# -------------------------------------------------------------------------
# Phantom acceptance runs (WORKBENCH_RUN_SLOW=1)
# -------------------------------------------------------------------------

def _seed_means(result, regime):
    sizes, values = curve_series(result)[regime]
    return dict(zip(sizes, values))


@pytest.fixture(scope="module")
def phantom_sweep(tmp_path_factory):
    plan = plan_from_dict({"x_values": [0.0, 1.0], "postprocess": {"enabled": True}})
    return run_sweep(plan, *load_cohorts(plan), work_dir=str(tmp_path_factory.mktemp("phantom")))


@pytest.mark.slow
def test_phantom_transfer_beats_baselines(phantom_sweep):
    assert phantom_sweep.failed_cells() == []
    transfer = _seed_means(phantom_sweep, "transfer")
    scratch = _seed_means(phantom_sweep, "scratch")
    baseline = _seed_means(phantom_sweep, "no-training")
    sizes = phantom_sweep.plan.finetune_sizes
    for size in sizes:
        assert transfer[size] >= baseline[size] + 0.05
    assert transfer[sizes[0]] >= scratch[sizes[0]] + 0.05
    assert len(set(baseline.values())) == 1


@pytest.mark.slow
def test_phantom_transfer_grows_with_size(phantom_sweep):
    transfer = _seed_means(phantom_sweep, "transfer")
    values = [transfer[s] for s in phantom_sweep.plan.finetune_sizes]
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    assert len(drops) <= 1
    assert all(drop <= 0.02 for drop in drops)


@pytest.mark.slow
def test_phantom_scratch_small_data_prefers_zero_reward(phantom_sweep):
    smallest = phantom_sweep.plan.finetune_sizes[0]
    at_zero = experiment.seed_mean(phantom_sweep.select("scratch", x=0.0, size=smallest))
    at_one = experiment.seed_mean(phantom_sweep.select("scratch", x=1.0, size=smallest))
    assert at_zero >= at_one - 0.02


@pytest.mark.slow
def test_phantom_postprocessing_effect_is_small(phantom_sweep):
    deltas = [
        cell.report.mean_dsc - cell.raw_report.mean_dsc
        for cell in phantom_sweep.select("transfer")
    ]
    assert -0.005 <= float(np.mean(deltas)) <= 0.05
