#!/usr/bin/env python3
"""
Morphological clean-up of predicted masks

Per slice: closing (fill holes), opening (remove specks), then dismiss masks
smaller than a zone-specific pixel threshold. The threshold is 90% of the mean
size of the base and apex masks (the smallest prostate cross-sections) over a
reference cohort.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .data import Cohort, check_zone
from .errors import ConfigError

logger = logging.getLogger(__name__)

ORDERS = ("close-open", "open-close")


@dataclass
class PostprocessConfig:
    """
    Attributes:
        disk_radius: Radius of the disk structuring element in pixels
        min_mask_pixels_wg, min_mask_pixels_tz: Size thresholds; None means derive
            them from a reference cohort with derive_min_size_threshold
        threshold_fraction: Fraction of the mean base/apex size used as threshold
        order: 'close-open' or 'open-close'
        enabled: False turns post-processing into the identity
    """
    disk_radius: int = 2
    min_mask_pixels_wg: Optional[int] = None
    min_mask_pixels_tz: Optional[int] = None
    threshold_fraction: float = 0.9
    order: str = "close-open"
    enabled: bool = True

    def __post_init__(self):
        if self.disk_radius < 1:
            raise ConfigError(f"disk_radius must be >= 1, got {self.disk_radius}")
        for name in ("min_mask_pixels_wg", "min_mask_pixels_tz"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if not 0 < self.threshold_fraction <= 1:
            raise ConfigError(f"threshold_fraction must be in (0, 1], got {self.threshold_fraction}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")

    def min_pixels(self, zone: str) -> Optional[int]:
        return self.min_mask_pixels_wg if check_zone(zone) == "WG" else self.min_mask_pixels_tz


def disk(radius: int) -> np.ndarray:
    """Boolean disk structuring element of the given radius"""
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def close_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """
    Morphological closing (dilation then erosion)

    The mask is zero-padded by the radius first so the result is the closing
    of the mask in the unbounded plane, cropped back; it always contains the input.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    structure = disk(radius)
    padded = np.pad(m, radius)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, structure=structure),
        structure=structure,
        border_value=0,
    )
    return closed[radius:-radius, radius:-radius].astype(np.uint8)


def open_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Morphological opening (erosion then dilation); result is contained in the input"""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    structure = disk(radius)
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return ndimage.binary_dilation(eroded, structure=structure).astype(np.uint8)


def base_apex_pixel_counts(cohort: Cohort, zone: str) -> List[int]:
    """
    Pixel counts of each patient's first and last non-empty mask

    A patient whose zone appears on a single slice contributes that slice once.
    Patients without any mask for the zone are skipped.
    """
    counts = []
    for patient in cohort.patients:
        masks = patient.masks(zone)
        indices = patient.prostate_slices(zone)
        if indices.size == 0:
            continue
        ends = sorted({int(indices[0]), int(indices[-1])})
        counts.extend(int(np.count_nonzero(masks[k])) for k in ends)
    return counts


def derive_min_size_threshold(cohort: Cohort, zone: str, fraction: float = 0.9) -> int:
    """
    Minimum mask size: floor(fraction × mean base/apex pixel count)

    Computed with exact rational arithmetic so e.g. a mean of 400/3 gives 120.

    Raises:
        ValueError: no patient has a mask for the zone
    """
    check_zone(zone)
    counts = base_apex_pixel_counts(cohort, zone)
    if not counts:
        raise ValueError(f"cohort has no {zone} masks to derive a threshold from")
    mean = Fraction(sum(counts), len(counts))
    return math.floor(Fraction(str(fraction)) * mean)


def filter_small_masks(masks: np.ndarray, min_pixels: int) -> np.ndarray:
    """Empty every slice whose mask has 0 < pixels < min_pixels; other slices unchanged"""
    volume = np.asarray(masks).astype(np.uint8)
    single = volume.ndim == 2
    if single:
        volume = volume[None]
    out = volume.copy()
    counts = np.count_nonzero(volume.reshape(volume.shape[0], -1), axis=1)
    out[(counts > 0) & (counts < min_pixels)] = 0
    return out[0] if single else out


def postprocess_volume(pred_masks: np.ndarray,
                       config: PostprocessConfig,
                       zone: str,
                       min_pixels: Optional[int] = None) -> np.ndarray:
    """
    Clean a predicted mask volume (n_slices × H × W)

    Args:
        pred_masks: Binary predictions
        config: Post-processing settings
        zone: WG or TZ (selects the size threshold)
        min_pixels: Overrides the configured threshold

    Returns:
        Cleaned mask volume
    """
    volume = np.asarray(pred_masks).astype(np.uint8)
    if not config.enabled:
        return volume.copy()
    threshold = min_pixels if min_pixels is not None else config.min_pixels(zone)
    if threshold is None:
        raise ConfigError(f"no {zone} size threshold configured; derive one from a reference cohort")

    first, second = (close_mask, open_mask) if config.order == "close-open" else (open_mask, close_mask)
    cleaned = np.stack([second(first(m, config.disk_radius), config.disk_radius) for m in volume]) \
        if len(volume) else volume.copy()
    return filter_small_masks(cleaned, threshold)


def postprocess_predictions(predictions: Dict[str, np.ndarray],
                            config: PostprocessConfig,
                            zone: str,
                            min_pixels: Optional[int] = None) -> Dict[str, np.ndarray]:
    """postprocess_volume applied to every patient"""
    return {pid: postprocess_volume(volume, config, zone, min_pixels) for pid, volume in predictions.items()}
