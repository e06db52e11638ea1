#!/usr/bin/env python3
"""
Synthetic dual-domain DWI phantoms

Each patient is a stack of axial slices. The whole gland is an ellipse whose area
rises from the base, peaks mid-gland and falls toward the apex; the transition
zone is a concentric smaller ellipse. Pixel intensities follow the mono-exponential
diffusion model S0 * exp(-b * ADC) per tissue plus Gaussian noise. The target
domain adds blur, an intensity scale/offset and its own noise level, standing in
for a different scanner and protocol.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .data import Cohort, DOMAINS, PatientVolume
from .errors import ConfigError

logger = logging.getLogger(__name__)

SOURCE_B_VALUES = [0.0, 400.0, 1000.0, 1600.0]
TARGET_B_VALUES = [100.0, 400.0, 1000.0, 1600.0]

# Gland size relative to the image, and TZ size relative to the gland
WG_SEMI_AXES = (0.22, 0.16)
TZ_SCALE = 0.55
BASE_APEX_SCALE = 0.3


@dataclass
class DomainShift:
    """Acquisition differences applied to the target domain only"""
    blur_sigma: float = 1.0
    intensity_scale: float = 0.7
    intensity_offset: float = 0.1
    noise_sigma_target: float = 0.04
    b_values: List[float] = field(default_factory=lambda: list(TARGET_B_VALUES))

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma_target < 0:
            raise ConfigError("domain_shift sigmas must be >= 0")
        if not self.b_values:
            raise ConfigError("domain_shift.b_values must not be empty")


@dataclass
class PhantomConfig:
    """Phantom cohort parameters (ADC in mm²/s, b-values in s/mm²)"""
    n_patients: int = 8
    slices_per_patient: int = 24
    height: int = 64
    width: int = 64
    b_values: List[float] = field(default_factory=lambda: list(SOURCE_B_VALUES))
    adc_wg: float = 0.0016
    adc_tz: float = 0.0012
    adc_background: float = 0.0025
    s0_wg: float = 1.0
    s0_tz: float = 1.1
    s0_background: float = 0.8
    noise_sigma: float = 0.02
    domain_shift: DomainShift = field(default_factory=DomainShift)
    prostate_slice_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ConfigError(f"n_patients must be >= 0, got {self.n_patients}")
        for name in ("slices_per_patient", "height", "width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.b_values:
            raise ConfigError("b_values must not be empty")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 < self.prostate_slice_fraction <= 1:
            raise ConfigError(f"prostate_slice_fraction must be in (0, 1], got {self.prostate_slice_fraction}")
        if min(self.adc_wg, self.adc_tz, self.adc_background) < 0:
            raise ConfigError("ADC values must be >= 0")

    def b_values_for(self, domain: str) -> List[float]:
        return list(self.b_values) if domain == "source" else list(self.domain_shift.b_values)

    def n_prostate_slices(self) -> int:
        return max(1, math.floor(self.prostate_slice_fraction * self.slices_per_patient + 0.5))


def ellipse_mask(height: int, width: int, center: Tuple[int, int],
                 semi_axes: Tuple[float, float], angle: float) -> np.ndarray:
    """
    Filled, rotated ellipse

    Args:
        height, width: Image size
        center: (row, col) of the centre pixel, always inside the ellipse
        semi_axes: (along x, along y) in pixels
        angle: Orientation in radians

    Returns:
        Boolean mask
    """
    yy, xx = np.mgrid[0:height, 0:width]
    dx = xx - center[1]
    dy = yy - center[0]
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    a, b = semi_axes
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _patient_geometry(config: PhantomConfig, rng: np.random.Generator):
    """Draw the per-patient shape parameters"""
    n_prostate = config.n_prostate_slices()
    start = int(rng.integers(0, config.slices_per_patient - n_prostate + 1))
    jitter_r = max(1, config.height // 16)
    jitter_c = max(1, config.width // 16)
    center = (
        config.height // 2 + int(rng.integers(-jitter_r, jitter_r + 1)),
        config.width // 2 + int(rng.integers(-jitter_c, jitter_c + 1)),
    )
    size_scale = float(rng.uniform(0.85, 1.15))
    aspect = float(rng.uniform(0.9, 1.1))
    angle = float(rng.uniform(-math.pi / 9, math.pi / 9))
    semi_axes = (
        WG_SEMI_AXES[0] * config.width * size_scale * aspect,
        WG_SEMI_AXES[1] * config.height * size_scale / aspect,
    )
    return start, n_prostate, center, semi_axes, angle


def generate_patient(config: PhantomConfig, domain: str, index: int) -> PatientVolume:
    """
    Generate one phantom patient

    Deterministic in (config.rng_seed, domain, index), so patients can be
    generated independently and in any order.
    """
    domain_code = DOMAINS.index(domain)
    rng = np.random.default_rng([config.rng_seed, domain_code, index])
    b_values = config.b_values_for(domain)
    height, width = config.height, config.width
    n_slices = config.slices_per_patient

    start, n_prostate, center, semi_axes, angle = _patient_geometry(config, rng)

    wg_masks = np.zeros((n_slices, height, width), dtype=np.uint8)
    tz_masks = np.zeros((n_slices, height, width), dtype=np.uint8)
    for k in range(n_prostate):
        # Small at base and apex, largest mid-gland
        profile = math.sin(math.pi * (k + 0.5) / n_prostate)
        scale = BASE_APEX_SCALE + (1.0 - BASE_APEX_SCALE) * profile
        wg_axes = (semi_axes[0] * scale, semi_axes[1] * scale)
        tz_axes = (wg_axes[0] * TZ_SCALE, wg_axes[1] * TZ_SCALE)
        wg = ellipse_mask(height, width, center, wg_axes, angle)
        tz = ellipse_mask(height, width, center, tz_axes, angle) & wg
        wg_masks[start + k] = wg
        tz_masks[start + k] = tz

    images = np.empty((n_slices, len(b_values), height, width), dtype=np.float32)
    shift = config.domain_shift
    for k in range(n_slices):
        wg = wg_masks[k].astype(bool)
        tz = tz_masks[k].astype(bool)
        s0 = np.full((height, width), config.s0_background, dtype=np.float64)
        adc = np.full((height, width), config.adc_background, dtype=np.float64)
        s0[wg] = config.s0_wg
        adc[wg] = config.adc_wg
        s0[tz] = config.s0_tz
        adc[tz] = config.adc_tz
        for j, b_value in enumerate(b_values):
            clean = s0 * np.exp(-b_value * adc)
            if domain == "target":
                if shift.blur_sigma > 0:
                    clean = ndimage.gaussian_filter(clean, shift.blur_sigma)
                clean = clean * shift.intensity_scale + shift.intensity_offset
                sigma = shift.noise_sigma_target
            else:
                sigma = config.noise_sigma
            noise = rng.normal(0.0, sigma, size=(height, width)) if sigma > 0 else 0.0
            images[k, j] = clean + noise

    return PatientVolume(
        patient_id=f"{domain}-{index:03d}",
        b_values=b_values,
        images=images,
        wg_masks=wg_masks,
        tz_masks=tz_masks,
    )


def generate_phantom_cohort(config: PhantomConfig, domain: str) -> Cohort:
    """
    Generate a full phantom cohort for one domain

    Args:
        config: Phantom parameters
        domain: 'source' or 'target'

    Returns:
        Cohort with config.n_patients patients
    """
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    patients = [generate_patient(config, domain, i) for i in range(config.n_patients)]
    cohort = Cohort(domain_tag=domain, b_values=config.b_values_for(domain), patients=patients)
    cohort.validate()
    logger.info(f"✓ Generated {domain} phantom cohort: {len(patients)} patients, "
                f"{config.slices_per_patient} slices, {config.height}x{config.width}")
    return cohort
