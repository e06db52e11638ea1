#!/usr/bin/env python3
"""
Command-line interface

Every subcommand is a thin wrapper over the library: it resolves the config,
calls one or two module operations and writes the artifacts plus a
resolved_config.json echo into --out-dir.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .config import build_config, load_json_config, write_resolved_config
from .data import split_cohort, split_finetune
from .database import ResultsDatabase
from .errors import ConfigError, MisalignedCohortError
from .experiment import load_cohorts, load_result, persist_results, plan_from_dict, run_sweep
from .metrics import base_apex_analysis, base_apex_size_band, evaluate_cohort
from .model import ModelConfig, build_model
from .phantom import PhantomConfig, generate_phantom_cohort
from .plots import emit_curve_plot, emit_metric_bars, emit_prediction_overlay
from .postprocess import PostprocessConfig, derive_min_size_threshold, postprocess_predictions
from .storage import read_dataset, read_predictions, write_dataset, write_predictions
from .transfer import (
    SCHEMES,
    TrainConfig,
    finetune,
    load_checkpoint,
    make_scheme,
    predict_cohort,
    save_checkpoint,
    scheme_for_zone,
    train_source,
    with_overrides,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("generate-phantom", "train-source", "finetune", "predict", "postprocess", "evaluate", "sweep", "plot")


@dataclass
class RunConfig:
    """Settings shared by the single-step subcommands (the sweep has its own plan)"""
    zone: str = "WG"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    source_split: List[float] = field(default_factory=lambda: [3.0, 1.0, 1.5])
    split_seed: int = 0
    fixed_test_size: int = 2
    source_train: TrainConfig = field(default_factory=lambda: TrainConfig(augment=True))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(augment=False))
    freeze_bottleneck: bool = True
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    averaging: str = "slice"
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.zone not in ("WG", "TZ"):
            raise ConfigError(f"zone must be WG or TZ, got {self.zone!r}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError(f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_workbench.py",
        description="Transfer-learning prostate DWI segmentation workbench",
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. --set finetune.epochs=3 (repeatable)')
    common.add_argument('--out-dir', default='results', help='Output directory (default: results)')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='Warnings and errors only')

    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('generate-phantom', parents=[common], help='Write synthetic source/target cohorts')
    p.add_argument('--domain', choices=['source', 'target', 'both'], default='both',
                   help='Which domain to generate (default: both)')

    p = sub.add_parser('train-source', parents=[common], help='Train a model on a source dataset')
    p.add_argument('--dataset', required=True, help='Source dataset directory')

    p = sub.add_parser('finetune', parents=[common], help='Fine-tune a source model on target patients')
    p.add_argument('--checkpoint', required=True, help='Pretrained checkpoint')
    p.add_argument('--dataset', required=True, help='Target dataset directory')
    p.add_argument('--size', type=int, required=True, help='Number of fine-tune patients')
    p.add_argument('--scheme', choices=SCHEMES, help='Freezing scheme (default: the zone\'s scheme)')

    p = sub.add_parser('predict', parents=[common], help='Predict masks for a dataset')
    p.add_argument('--checkpoint', required=True, help='Model checkpoint')
    p.add_argument('--dataset', required=True, help='Dataset directory')
    p.add_argument('--patients', help='Comma-separated patient ids (default: all)')

    p = sub.add_parser('postprocess', parents=[common], help='Clean predicted masks')
    p.add_argument('--predictions', required=True, help='Predictions directory')
    p.add_argument('--reference', help='Dataset used to derive the size threshold when none is configured')

    p = sub.add_parser('evaluate', parents=[common], help='Score predictions against ground truth')
    p.add_argument('--predictions', required=True, help='Predictions directory')
    p.add_argument('--dataset', required=True, help='Ground-truth dataset directory')

    p = sub.add_parser('sweep', parents=[common], help='Run the fine-tune-size sweep')
    p.add_argument('--resume', action='store_true', help='Skip cells already completed in --out-dir')
    p.add_argument('--no-plots', action='store_true', help='Skip plot generation')

    p = sub.add_parser('plot', parents=[common], help='Plot an existing sweep or overlay predictions')
    p.add_argument('--results', help='Sweep output directory (default: --out-dir unless --predictions is given)')
    p.add_argument('--predictions', action='append', help='Predictions directory to overlay (repeatable, one panel each)')
    p.add_argument('--dataset', help='Ground-truth dataset for --predictions')
    p.add_argument('--patient', help='Patient id for --predictions')
    p.add_argument('--slice', type=int, help='Slice index (default: largest ground-truth mask)')

    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stdout, force=True)


def _run_config(args) -> RunConfig:
    return build_config(RunConfig, load_json_config(args.config), overrides=args.overrides)


def _echo(args, config, **inputs) -> Path:
    extra = {"subcommand": args.command, "version": __version__, "inputs": inputs}
    return write_resolved_config(config, args.out_dir, extra=extra)


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


# -------------------------------------------------------------------------
# Subcommands
# -------------------------------------------------------------------------

def cmd_generate_phantom(args) -> int:
    config = _run_config(args)
    _echo(args, config, domain=args.domain)
    domains = ['source', 'target'] if args.domain == 'both' else [args.domain]
    for domain in domains:
        cohort = generate_phantom_cohort(config.phantom, domain)
        manifest = write_dataset(cohort, Path(args.out_dir) / domain)
        print(f"✓ {domain} dataset written: {manifest}")
    return 0


def cmd_train_source(args) -> int:
    config = _run_config(args)
    _echo(args, config, dataset=args.dataset)
    cohort = read_dataset(args.dataset)
    train, val, test = split_cohort(cohort, ratios=config.source_split, seed=config.split_seed)
    print(f"Split {len(cohort)} patients: {len(train)} train, {len(val)} val, {len(test)} test")
    train_config = with_overrides(config.source_train, zone=config.zone)
    model, _ = build_model(config.model, seed=config.model_seed)
    model, log = train_source(model, train, val, train_config)
    out_dir = Path(args.out_dir)
    checkpoint = save_checkpoint(model, out_dir / "source_model.pt", extra={"zone": config.zone})
    log.to_csv(out_dir / "training_log.csv")
    _write_json(out_dir / "splits.json", {
        "train": train.patient_ids, "val": val.patient_ids, "test": test.patient_ids,
    })
    print(f"✓ Source model saved: {checkpoint} (best epoch {log.best_epoch})")
    return 0


def cmd_finetune(args) -> int:
    config = _run_config(args)
    _echo(args, config, checkpoint=args.checkpoint, dataset=args.dataset, size=args.size, scheme=args.scheme)
    pretrained = load_checkpoint(args.checkpoint)
    target = read_dataset(args.dataset)
    subsets, test = split_finetune(target, config.fixed_test_size, [args.size], seed=config.split_seed)
    if args.scheme:
        scheme = make_scheme(args.scheme, pretrained.config.n_levels, config.freeze_bottleneck)
    else:
        scheme = scheme_for_zone(config.zone, pretrained.config.n_levels, config.freeze_bottleneck)
    train_config = with_overrides(config.finetune, zone=config.zone)
    model, log = finetune(pretrained, subsets[args.size], scheme, train_config)
    out_dir = Path(args.out_dir)
    checkpoint = save_checkpoint(model, out_dir / "finetuned_model.pt",
                                 extra={"zone": config.zone, "scheme": scheme.name, "size": args.size})
    log.to_csv(out_dir / "training_log.csv")
    _write_json(out_dir / "splits.json", {"finetune": subsets[args.size].patient_ids, "test": test.patient_ids})
    print(f"✓ Fine-tuned model saved: {checkpoint} ({scheme.name}, {args.size} patients)")
    return 0


def cmd_predict(args) -> int:
    config = _run_config(args)
    _echo(args, config, checkpoint=args.checkpoint, dataset=args.dataset, patients=args.patients)
    model = load_checkpoint(args.checkpoint)
    cohort = read_dataset(args.dataset)
    if args.patients:
        cohort = cohort.subset([p.strip() for p in args.patients.split(',') if p.strip()])
    predictions = predict_cohort(model, cohort, config.finetune.b_value_policy, config.binarize_threshold)
    manifest = write_predictions(predictions, Path(args.out_dir) / "predictions", config.zone)
    print(f"✓ Predictions for {len(predictions)} patients written: {manifest}")
    return 0


def cmd_postprocess(args) -> int:
    config = _run_config(args)
    _echo(args, config, predictions=args.predictions, reference=args.reference)
    zone, predictions = read_predictions(args.predictions)
    min_pixels = config.postprocess.min_pixels(zone)
    if config.postprocess.enabled and min_pixels is None:
        if not args.reference:
            raise ConfigError(f"no {zone} size threshold configured; set postprocess.min_mask_pixels_"
                              f"{zone.lower()} or pass --reference")
        min_pixels = derive_min_size_threshold(read_dataset(args.reference), zone,
                                               config.postprocess.threshold_fraction)
        print(f"Derived {zone} size threshold: {min_pixels} pixels")
    cleaned = postprocess_predictions(predictions, config.postprocess, zone, min_pixels)
    manifest = write_predictions(cleaned, Path(args.out_dir) / "postprocessed", zone)
    print(f"✓ Post-processed predictions written: {manifest}")
    return 0


def cmd_evaluate(args) -> int:
    config = _run_config(args)
    _echo(args, config, predictions=args.predictions, dataset=args.dataset)
    zone, predictions = read_predictions(args.predictions)
    cohort = read_dataset(args.dataset)
    report = evaluate_cohort(predictions, cohort, zone, config.averaging)
    mispredictions = base_apex_analysis(predictions, cohort, zone, base_apex_size_band(cohort, zone))
    output = _write_json(Path(args.out_dir) / "metrics.json", {
        "zone": zone,
        "report": report.to_dict(),
        "mispredictions": mispredictions.to_dict(),
    })
    dsc = "-" if report.mean_dsc is None else f"{report.mean_dsc:.4f} ± {report.std_dsc:.4f}"
    print(f"{zone} DSC: {dsc} over {report.n_slices_with_prostate} prostate slices")
    print(f"Mispredicted slices: {mispredictions.n_mispredicted} "
          f"({mispredictions.n_base_apex} base/apex, {mispredictions.n_midgland} mid-gland)")
    print(f"✓ Metrics written: {output}")
    return 0


def _emit_plots(result, out_dir: Path) -> List[Path]:
    suffix = result.plan.plot_format
    return [
        emit_curve_plot(result, result.plan.zone, out_dir / f"dsc_curve_{result.plan.zone}.{suffix}"),
        emit_metric_bars(result, None, out_dir / f"detection_bars_{result.plan.zone}.{suffix}"),
    ]


def cmd_sweep(args) -> int:
    plan = plan_from_dict(load_json_config(args.config), overrides=args.overrides)
    out_dir = Path(args.out_dir)
    _echo(args, plan, resume=args.resume)
    source, target = load_cohorts(plan)
    db = ResultsDatabase(str(out_dir / "results.db"))
    try:
        result = run_sweep(plan, source, target, db=db, work_dir=str(out_dir), resume=args.resume)
    finally:
        db.close()
    summary = persist_results(result, out_dir)
    if not args.no_plots:
        _emit_plots(result, out_dir)
    failed = result.failed_cells()
    print(f"✓ Sweep complete: {len(result.cells)} cells, {len(failed)} failed; CSV at {summary['csv']}")
    return 0


def _load_sweep(results_dir: Path):
    db_path = results_dir / "results.db"
    if not db_path.is_file():
        raise ConfigError(f"no results database at {db_path}")
    db = ResultsDatabase(str(db_path))
    try:
        return load_result(db)
    finally:
        db.close()


def _panel_label(directory: str) -> str:
    return "/".join(Path(directory).resolve().parts[-2:])


def _emit_overlay(args, out_dir: Path) -> Path:
    if not args.dataset or not args.patient:
        raise ConfigError("--predictions needs --dataset and --patient")
    cohort = read_dataset(args.dataset)
    try:
        patient = cohort.get(args.patient)
    except KeyError:
        raise ConfigError(f"patient {args.patient!r} is not in {args.dataset}")

    zone, panels = None, {}
    for directory in args.predictions:
        pred_zone, volumes = read_predictions(directory)
        if zone is not None and pred_zone != zone:
            raise ConfigError(f"{directory}: {pred_zone} predictions cannot be shown next to {zone}")
        zone = pred_zone
        volume = volumes.get(args.patient)
        if volume is None or volume.shape != patient.masks(zone).shape:
            raise MisalignedCohortError(f"{directory}: no {zone} predictions matching patient {args.patient}")
        panels[_panel_label(directory)] = volume

    ground_truth = patient.masks(zone)
    index = args.slice
    if index is None:
        # largest ground-truth mask
        index = int(np.argmax(ground_truth.reshape(patient.n_slices, -1).sum(axis=1)))
    if not 0 <= index < patient.n_slices:
        raise ConfigError(f"--slice {index} is outside 0..{patient.n_slices - 1}")
    b_value = patient.b_values[0]
    return emit_prediction_overlay(
        patient.image(index, b_value),
        ground_truth[index],
        {label: volume[index] for label, volume in panels.items()},
        out_dir / f"overlay_{zone}_{args.patient}_slice{index:03d}.svg",
        title=f"{args.patient} {zone}, slice {index}, b={b_value:g}",
    )


def cmd_plot(args) -> int:
    out_dir = Path(args.out_dir)
    results_dir = None
    if args.results or not args.predictions:
        results_dir = Path(args.results or args.out_dir)

    written, plan = [], {}
    if results_dir is not None:
        result = _load_sweep(results_dir)
        plan = result.plan
        written.extend(_emit_plots(result, out_dir))
    if args.predictions:
        written.append(_emit_overlay(args, out_dir))
    _echo(args, plan, results=str(results_dir) if results_dir else None, predictions=args.predictions,
          dataset=args.dataset, patient=args.patient, slice=args.slice)
    for path in written:
        print(f"✓ {path}")
    return 0


COMMANDS = {
    "generate-phantom": cmd_generate_phantom,
    "train-source": cmd_train_source,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "postprocess": cmd_postprocess,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def _fail(error: BaseException, code: int) -> int:
    message = str(error).replace('\n', ' ') or "interrupted"
    print(f"error: {type(error).__name__}: {message}", file=sys.stderr)
    return code


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one subcommand

    Returns:
        0 on success, 2 for usage or config errors, 1 for runtime failures
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        return _fail(e, 2)
    except KeyboardInterrupt as e:
        return _fail(e, 1)
    except Exception as e:
        logger.debug("Traceback", exc_info=True)
        return _fail(e, 1)
