#!/usr/bin/env python3
"""
Cohort, volume and slice types

Also holds the patient-level cohort splitters, b-value sample flattening and the
geometric augmentation used for source-domain training.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage
from torch.utils.data import Dataset

ZONES = ("WG", "TZ")
DOMAINS = ("source", "target")

SeedLike = Union[int, Sequence[int]]


def check_zone(zone: str) -> str:
    """Validate a zone name (WG or TZ)"""
    if zone not in ZONES:
        raise ValueError(f"zone must be one of {ZONES}, got {zone!r}")
    return zone


def _binary(mask: np.ndarray, name: str) -> np.ndarray:
    """Return mask as uint8, raising if it holds anything but 0/1"""
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr.astype(np.uint8)


@dataclass
class SliceSample:
    """One single-channel image (one b-value of one slice) with its WG and TZ masks"""
    image: np.ndarray
    b_value: float
    wg_mask: np.ndarray
    tz_mask: np.ndarray
    patient_id: str
    slice_index: int

    def mask(self, zone: str) -> np.ndarray:
        return self.wg_mask if check_zone(zone) == "WG" else self.tz_mask

    def validate(self):
        """Check mask values, TZ inside WG, and matching shapes"""
        wg = _binary(self.wg_mask, "wg_mask")
        tz = _binary(self.tz_mask, "tz_mask")
        if not (self.image.shape == wg.shape == tz.shape):
            raise ValueError(
                f"{self.patient_id}/{self.slice_index}: image {self.image.shape}, "
                f"wg {wg.shape} and tz {tz.shape} shapes differ"
            )
        if np.any(tz > wg):
            raise ValueError(f"{self.patient_id}/{self.slice_index}: TZ mask extends outside WG")


@dataclass
class PatientVolume:
    """
    All slices of one patient

    images has shape (n_slices, n_b_values, H, W); the masks have shape
    (n_slices, H, W) and are shared by every b-value of a slice.
    """
    patient_id: str
    b_values: List[float]
    images: np.ndarray
    wg_masks: np.ndarray
    tz_masks: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.wg_masks = _binary(self.wg_masks, f"{self.patient_id} wg_masks")
        self.tz_masks = _binary(self.tz_masks, f"{self.patient_id} tz_masks")
        self.b_values = [float(b) for b in self.b_values]
        if self.images.ndim != 4:
            raise ValueError(f"{self.patient_id}: images must be (slices, b_values, H, W), got {self.images.shape}")
        n_slices, n_b, height, width = self.images.shape
        if n_b != len(self.b_values):
            raise ValueError(f"{self.patient_id}: {n_b} image planes per slice but {len(self.b_values)} b-values")
        for name, masks in (("wg_masks", self.wg_masks), ("tz_masks", self.tz_masks)):
            if masks.shape != (n_slices, height, width):
                raise ValueError(f"{self.patient_id}: {name} shape {masks.shape} does not match images {self.images.shape}")

    @property
    def n_slices(self) -> int:
        return int(self.images.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def masks(self, zone: str) -> np.ndarray:
        return self.wg_masks if check_zone(zone) == "WG" else self.tz_masks

    def image(self, slice_index: int, b_value: float) -> np.ndarray:
        return self.images[slice_index, self.b_values.index(float(b_value))]

    def prostate_slices(self, zone: str = "WG") -> np.ndarray:
        """Indices of slices whose mask for the zone is non-empty"""
        masks = self.masks(zone)
        return np.flatnonzero(masks.reshape(masks.shape[0], -1).any(axis=1))

    def validate(self):
        """
        Check TZ ⊆ WG on every slice and that the prostate occupies one contiguous run

        Raises:
            ValueError: an invariant does not hold
        """
        if np.any(self.tz_masks > self.wg_masks):
            raise ValueError(f"{self.patient_id}: TZ mask extends outside WG")
        indices = self.prostate_slices("WG")
        if indices.size and indices[-1] - indices[0] + 1 != indices.size:
            raise ValueError(f"{self.patient_id}: prostate slices are not contiguous ({indices.tolist()})")

    def equals(self, other: "PatientVolume") -> bool:
        """Bit-exact comparison"""
        return (
            self.patient_id == other.patient_id
            and self.b_values == other.b_values
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.wg_masks, other.wg_masks)
            and np.array_equal(self.tz_masks, other.tz_masks)
        )


@dataclass
class Cohort:
    """Patients from one institution/scanner (source or target domain)"""
    domain_tag: str
    b_values: List[float]
    patients: List[PatientVolume] = field(default_factory=list)

    def __post_init__(self):
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"domain_tag must be one of {DOMAINS}, got {self.domain_tag!r}")
        self.b_values = [float(b) for b in self.b_values]

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def patient_ids(self) -> List[str]:
        return [p.patient_id for p in self.patients]

    @property
    def shape(self) -> Optional[Tuple[int, int]]:
        return self.patients[0].shape if self.patients else None

    def get(self, patient_id: str) -> PatientVolume:
        for patient in self.patients:
            if patient.patient_id == patient_id:
                return patient
        raise KeyError(patient_id)

    def subset(self, patient_ids: Sequence[str]) -> "Cohort":
        """Cohort restricted to the given patients, in the given order"""
        by_id = {p.patient_id: p for p in self.patients}
        return Cohort(self.domain_tag, list(self.b_values), [by_id[pid] for pid in patient_ids])

    def validate(self):
        """
        Check unique ids, shared image size and b-values, and per-patient invariants

        Raises:
            ValueError: an invariant does not hold
        """
        ids = self.patient_ids
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids are not unique")
        shapes = {p.shape for p in self.patients}
        if len(shapes) > 1:
            raise ValueError(f"patients have different image sizes: {sorted(shapes)}")
        for patient in self.patients:
            if patient.b_values != self.b_values:
                raise ValueError(f"{patient.patient_id}: b-values {patient.b_values} differ from cohort {self.b_values}")
            patient.validate()

    def equals(self, other: "Cohort") -> bool:
        """Bit-exact comparison of two cohorts"""
        return (
            self.domain_tag == other.domain_tag
            and self.b_values == other.b_values
            and len(self.patients) == len(other.patients)
            and all(a.equals(b) for a, b in zip(self.patients, other.patients))
        )


# -------------------------------------------------------------------------
# Splitting (always at patient level)
# -------------------------------------------------------------------------

def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """
    Distribute `total` items over `ratios` with largest-remainder rounding

    Ties on the remainder go to the earlier part.

    Returns:
        List of counts summing to total
    """
    if not ratios or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be non-negative with a positive sum, got {list(ratios)}")
    weights = [Fraction(str(r)) for r in ratios]
    weight_sum = sum(weights)
    quotas = [total * w / weight_sum for w in weights]
    counts = [math.floor(q) for q in quotas]
    remaining = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remaining]:
        counts[i] += 1
    return counts


def split_cohort(cohort: Cohort,
                 ratios: Optional[Sequence[float]] = None,
                 sizes: Optional[Sequence[int]] = None,
                 seed: int = 0) -> Tuple[Cohort, Cohort, Cohort]:
    """
    Split a cohort into train / validation / test patients

    Exactly one of ratios or sizes must be given.

    Args:
        cohort: Cohort to split
        ratios: Relative sizes, e.g. (3, 1, 1.5)
        sizes: Explicit patient counts (train, val, test); may sum to less than the cohort
        seed: Shuffle seed

    Returns:
        (train, val, test) cohorts with disjoint patients
    """
    if (ratios is None) == (sizes is None):
        raise ValueError("give either ratios or sizes")
    if ratios is not None:
        if len(ratios) != 3:
            raise ValueError(f"expected 3 ratios, got {len(ratios)}")
        counts = largest_remainder(len(cohort), ratios)
    else:
        counts = [int(s) for s in sizes]
        if len(counts) != 3 or any(c < 0 for c in counts):
            raise ValueError(f"expected 3 non-negative sizes, got {list(sizes)}")
        if sum(counts) > len(cohort):
            raise ValueError(f"requested {sum(counts)} patients but cohort has {len(cohort)}")

    order = np.random.default_rng(seed).permutation(len(cohort))
    ids = [cohort.patients[i].patient_id for i in order]
    train_end = counts[0]
    val_end = train_end + counts[1]
    test_end = val_end + counts[2]
    return (
        cohort.subset(ids[:train_end]),
        cohort.subset(ids[train_end:val_end]),
        cohort.subset(ids[val_end:test_end]),
    )


def split_finetune(cohort: Cohort,
                   test_size: int,
                   finetune_sizes: Sequence[int],
                   seed: int = 0) -> Tuple[Dict[int, Cohort], Cohort]:
    """
    Carve a fixed test set and nested fine-tuning subsets out of a target cohort

    The test set depends only on the seed, and subset(n) is a prefix of the same
    shuffled pool for every n, so smaller subsets are contained in larger ones.

    Args:
        cohort: Target cohort
        test_size: Number of fixed test patients
        finetune_sizes: Requested fine-tuning subset sizes
        seed: Shuffle seed

    Returns:
        ({size: subset}, fixed_test)
    """
    if test_size < 0:
        raise ValueError(f"test_size must be >= 0, got {test_size}")
    largest = max(finetune_sizes, default=0)
    if any(s < 0 for s in finetune_sizes):
        raise ValueError(f"fine-tune sizes must be >= 0, got {list(finetune_sizes)}")
    if largest + test_size > len(cohort):
        raise ValueError(
            f"fine-tune size {largest} plus test size {test_size} exceeds cohort of {len(cohort)} patients"
        )
    order = np.random.default_rng(seed).permutation(len(cohort))
    ids = [cohort.patients[i].patient_id for i in order]
    test_ids = ids[:test_size]
    pool = ids[test_size:]
    subsets = {int(size): cohort.subset(pool[:size]) for size in finetune_sizes}
    return subsets, cohort.subset(test_ids)


def finetune_size_grid(pool_size: int, step_fraction: float = 0.1) -> List[int]:
    """
    Fine-tuning sizes at regular fractions of the pool (10%, 20%, ... 100%)

    Returns:
        Strictly increasing list of positive sizes
    """
    if pool_size < 1 or not 0 < step_fraction <= 1:
        raise ValueError("pool_size must be >= 1 and step_fraction in (0, 1]")
    steps = int(round(1 / step_fraction))
    sizes = sorted({max(1, int(round(pool_size * k / steps))) for k in range(1, steps + 1)})
    return sizes


# -------------------------------------------------------------------------
# Sample flattening and augmentation
# -------------------------------------------------------------------------

def enumerate_slices(cohort: Cohort, zone: str) -> List[SliceSample]:
    """
    Flatten a cohort into independent single-channel samples

    Every (slice, b-value) pair becomes one sample; order is patient, slice, b-value.
    """
    check_zone(zone)
    samples = []
    for patient in cohort.patients:
        for k in range(patient.n_slices):
            for j, b_value in enumerate(patient.b_values):
                samples.append(SliceSample(
                    image=patient.images[k, j],
                    b_value=b_value,
                    wg_mask=patient.wg_masks[k],
                    tz_mask=patient.tz_masks[k],
                    patient_id=patient.patient_id,
                    slice_index=k,
                ))
    return samples


def augment_slice(sample: SliceSample,
                  seed: SeedLike,
                  hflip: Optional[bool] = None,
                  vflip: Optional[bool] = None,
                  quarter_turns: Optional[int] = None,
                  angle: Optional[float] = None,
                  max_angle: float = 15.0) -> SliceSample:
    """
    Random flips and rotations applied identically to the image and both masks

    Any of the random choices can be forced through the keyword arguments; the
    random stream is consumed the same way either way. Masks are resampled with
    nearest neighbour so they stay binary.

    Args:
        sample: Source-domain training sample
        seed: RNG seed (int or sequence of ints)
        hflip, vflip: Force the horizontal / vertical flip
        quarter_turns: Force the number of 90° rotations (odd values need a square image)
        angle: Force the small-angle rotation in degrees
        max_angle: Range of the small-angle rotation

    Returns:
        New SliceSample
    """
    rng = np.random.default_rng(seed)
    draw_h = rng.random() < 0.5
    draw_v = rng.random() < 0.5
    draw_k = int(rng.integers(0, 4))
    draw_angle = float(rng.uniform(-max_angle, max_angle))

    do_h = draw_h if hflip is None else hflip
    do_v = draw_v if vflip is None else vflip
    k = (draw_k if quarter_turns is None else quarter_turns) % 4
    theta = draw_angle if angle is None else angle

    height, width = sample.image.shape
    if k % 2 and height != width:
        if quarter_turns is not None:
            raise ValueError("odd quarter turns need a square image")
        k = (k + 1) % 4

    def transform(array: np.ndarray, is_mask: bool) -> np.ndarray:
        out = array
        if do_h:
            out = out[:, ::-1]
        if do_v:
            out = out[::-1, :]
        if k:
            out = np.rot90(out, k)
        if theta:
            if is_mask:
                out = ndimage.rotate(out, theta, reshape=False, order=0, mode='constant', cval=0)
            else:
                out = ndimage.rotate(out, theta, reshape=False, order=1, mode='nearest')
        return np.ascontiguousarray(out)

    return SliceSample(
        image=transform(sample.image, False).astype(np.float32),
        b_value=sample.b_value,
        wg_mask=transform(sample.wg_mask, True).astype(np.uint8),
        tz_mask=transform(sample.tz_mask, True).astype(np.uint8),
        patient_id=sample.patient_id,
        slice_index=sample.slice_index,
    )


class SliceDataset(Dataset):
    """Torch dataset over flattened slice samples for one zone"""

    def __init__(self, samples: List[SliceSample], zone: str, augment: bool = False, seed: int = 0):
        """
        Args:
            samples: Flattened samples (see enumerate_slices)
            zone: WG or TZ
            augment: Apply augment_slice on access (source-domain training only)
            seed: Base seed for augmentation draws
        """
        self.samples = samples
        self.zone = check_zone(zone)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        """Augmentation draws depend on (seed, epoch, index)"""
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int):
        sample = self.samples[idx]
        if self.augment:
            sample = augment_slice(sample, seed=(self.seed, self.epoch, idx))
        image = torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float32))[None]
        mask = torch.from_numpy(sample.mask(self.zone).astype(np.float32))[None]
        return image, mask
