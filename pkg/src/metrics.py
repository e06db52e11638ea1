#!/usr/bin/env python3
"""
Evaluation of predicted mask volumes

Dice statistics are computed only over slices whose ground truth contains the
zone. Slice-level detection (is the predicted mask non-empty?) gives
sensitivity, specificity and precision. The misprediction analysis splits the
detection errors into base/apex and mid-gland slices.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .data import Cohort, check_zone
from .errors import MisalignedCohortError
from .loss import modified_dsc
from .postprocess import base_apex_pixel_counts

AVERAGING = ("slice", "patient")


@dataclass
class Confusion:
    """Slice-level detection counts"""
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    """
    Attributes:
        mean_dsc, std_dsc: Dice statistics over slices with non-empty ground truth
            (None when there are no such slices)
        sensitivity, specificity, precision: Detection rates (None when undefined)
    """
    mean_dsc: Optional[float]
    std_dsc: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    n_slices_total: int
    n_slices_with_prostate: int
    confusion: Confusion = field(default_factory=Confusion)
    averaging: str = "slice"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        values = dict(data)
        values["confusion"] = Confusion(**values.get("confusion", {}))
        return cls(**values)


@dataclass
class SizeBand:
    """Range of ground-truth pixel counts seen on base/apex slices"""
    min_pixels: int
    max_pixels: int


@dataclass
class MispredictionSummary:
    n_mispredicted: int
    n_base_apex: int
    n_midgland: int
    slices: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def slice_dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Smoothing-free Dice; two empty masks score 1"""
    return modified_dsc(pred, gt, 1.0)


def dsc_statistics(per_slice_dscs) -> Tuple[float, float]:
    """
    Mean and population standard deviation

    Raises:
        ValueError: empty input
    """
    values = np.asarray(list(per_slice_dscs), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no Dice values to summarise")
    return float(values.mean()), float(values.std())


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def check_alignment(pred_volumes: Dict[str, np.ndarray], gt: Cohort, zone: str):
    """
    Raises:
        MisalignedCohortError: patient sets or volume shapes differ
    """
    pred_ids = set(pred_volumes)
    gt_ids = set(gt.patient_ids)
    if pred_ids != gt_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise MisalignedCohortError(
            f"patients differ: missing predictions for {missing}, predictions without ground truth for {extra}"
        )
    for patient in gt.patients:
        pred_shape = np.asarray(pred_volumes[patient.patient_id]).shape
        gt_shape = patient.masks(zone).shape
        if pred_shape != gt_shape:
            raise MisalignedCohortError(
                f"{patient.patient_id}: prediction shape {pred_shape} != ground truth shape {gt_shape}"
            )


def evaluate_cohort(pred_volumes: Dict[str, np.ndarray],
                    gt: Cohort,
                    zone: str,
                    averaging: str = "slice") -> MetricsReport:
    """
    Dice statistics and slice-level detection metrics

    Args:
        pred_volumes: {patient_id: binary mask volume (n_slices × H × W)}
        gt: Ground-truth cohort
        zone: WG or TZ
        averaging: 'slice' pools all prostate slices; 'patient' averages per patient first

    Returns:
        MetricsReport
    """
    check_zone(zone)
    if averaging not in AVERAGING:
        raise ValueError(f"averaging must be one of {AVERAGING}, got {averaging!r}")
    check_alignment(pred_volumes, gt, zone)

    confusion = Confusion()
    slice_scores: List[float] = []
    patient_scores: List[float] = []
    for patient in gt.patients:
        pred = np.asarray(pred_volumes[patient.patient_id]).astype(bool)
        truth = patient.masks(zone).astype(bool)
        scores = []
        for k in range(patient.n_slices):
            gt_positive = bool(truth[k].any())
            pred_positive = bool(pred[k].any())
            if gt_positive and pred_positive:
                confusion.tp += 1
            elif gt_positive:
                confusion.fn += 1
            elif pred_positive:
                confusion.fp += 1
            else:
                confusion.tn += 1
            if gt_positive:
                scores.append(slice_dsc(pred[k], truth[k]))
        slice_scores.extend(scores)
        if scores:
            patient_scores.append(float(np.mean(scores)))

    pooled = slice_scores if averaging == "slice" else patient_scores
    mean_dsc, std_dsc = dsc_statistics(pooled) if pooled else (None, None)
    return MetricsReport(
        mean_dsc=mean_dsc,
        std_dsc=std_dsc,
        sensitivity=_ratio(confusion.tp, confusion.tp + confusion.fn),
        specificity=_ratio(confusion.tn, confusion.tn + confusion.fp),
        precision=_ratio(confusion.tp, confusion.tp + confusion.fp),
        n_slices_total=confusion.total,
        n_slices_with_prostate=confusion.tp + confusion.fn,
        confusion=confusion,
        averaging=averaging,
    )


def base_apex_size_band(cohort: Cohort, zone: str) -> SizeBand:
    """Min/max ground-truth pixel count over every patient's base and apex slices"""
    counts = base_apex_pixel_counts(cohort, zone)
    if not counts:
        raise ValueError(f"cohort has no {zone} masks")
    return SizeBand(min(counts), max(counts))


def base_apex_analysis(pred_volumes: Dict[str, np.ndarray],
                       gt: Cohort,
                       zone: str,
                       size_band: Optional[SizeBand] = None) -> MispredictionSummary:
    """
    Classify slice-level detection errors as base/apex or mid-gland

    A mispredicted slice (false positive or false negative) is mid-gland when the
    same patient has detection-positive slices both before and after it;
    otherwise it is base/apex. With a size band, a mispredicted slice also
    counts as base/apex when its ground-truth mask is non-empty and
    gt_pixels <= size_band.max_pixels. The band's lower bound is not used:
    masks smaller than the smallest base/apex mask count as base/apex too.
    """
    check_zone(zone)
    check_alignment(pred_volumes, gt, zone)

    summary = MispredictionSummary(0, 0, 0)
    for patient in gt.patients:
        pred = np.asarray(pred_volumes[patient.patient_id]).astype(bool)
        truth = patient.masks(zone).astype(bool)
        positives = pred.reshape(pred.shape[0], -1).any(axis=1)
        for k in range(patient.n_slices):
            gt_pixels = int(np.count_nonzero(truth[k]))
            gt_positive = gt_pixels > 0
            if bool(positives[k]) == gt_positive:
                continue
            midgland = bool(positives[:k].any()) and bool(positives[k + 1:].any())
            if midgland and size_band is not None and 0 < gt_pixels <= size_band.max_pixels:
                midgland = False
            summary.n_mispredicted += 1
            if midgland:
                summary.n_midgland += 1
            else:
                summary.n_base_apex += 1
            summary.slices.append({
                "patient_id": patient.patient_id,
                "slice_index": k,
                "error": "FN" if gt_positive else "FP",
                "location": "mid-gland" if midgland else "base/apex",
            })
    return summary
