#!/usr/bin/env python3
"""
On-disk dataset format

A dataset root holds `manifest.json` plus one raw file per slice image and mask:

    manifest.json
    <patient_id>/slice_000_b400.f32   little-endian float32, row-major H×W
    <patient_id>/slice_000_wg.u8      uint8 {0,1}, row-major H×W
    <patient_id>/slice_000_tz.u8

Prediction (mask) volumes use the same raw mask files with their own manifest.
Every file is listed with its SHA-256 so truncation or corruption is reported
with the offending file name.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .data import Cohort, PatientVolume, check_zone
from .errors import DatasetIntegrityError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
DATASET_FORMAT = "dwi-workbench-dataset"
MASKS_FORMAT = "dwi-workbench-masks"

IMAGE_DTYPE = np.dtype('<f4')
MASK_DTYPE = np.dtype('<u1')

MaskVolumes = Dict[str, np.ndarray]


def _b_tag(b_value: float) -> str:
    return f"b{b_value:g}"


def _write_array(root: Path, relative: str, array: np.ndarray, dtype: np.dtype) -> Dict[str, str]:
    """Write one raw array and return its manifest entry"""
    data = np.ascontiguousarray(array, dtype=dtype).tobytes()
    path = root / relative
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(data)
    return {"file": relative, "sha256": hashlib.sha256(data).hexdigest()}


def _read_array(root: Path, entry: Dict[str, Any], dtype: np.dtype, shape: Tuple[int, int]) -> np.ndarray:
    """
    Read and verify one raw array

    Raises:
        DatasetIntegrityError: file missing, wrong size, or checksum mismatch
    """
    try:
        relative = entry["file"]
    except (KeyError, TypeError):
        raise DatasetIntegrityError(root / MANIFEST_NAME, f"malformed file entry {entry!r}")
    path = root / relative
    if not path.is_file():
        raise DatasetIntegrityError(path, "file missing")
    data = path.read_bytes()
    expected = dtype.itemsize * shape[0] * shape[1]
    if len(data) != expected:
        raise DatasetIntegrityError(path, f"truncated or oversized: expected {expected} bytes, found {len(data)}")
    digest = entry.get("sha256")
    if digest is not None and hashlib.sha256(data).hexdigest() != digest:
        raise DatasetIntegrityError(path, "checksum mismatch")
    array = np.frombuffer(data, dtype=dtype).reshape(shape)
    if dtype == MASK_DTYPE and array.size and array.max() > 1:
        raise DatasetIntegrityError(path, "mask contains values other than 0/1")
    return array.astype(dtype.newbyteorder('='))


def _load_manifest(root: Path, expected_format: str) -> Dict[str, Any]:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetIntegrityError(manifest_path, "manifest not found")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetIntegrityError(manifest_path, f"invalid JSON ({e})")
    if manifest.get("format") != expected_format:
        raise DatasetIntegrityError(manifest_path, f"not a {expected_format} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetIntegrityError(
            manifest_path, f"format version {manifest.get('format_version')} != supported {FORMAT_VERSION}"
        )
    return manifest


def _write_manifest(root: Path, manifest: Dict[str, Any]) -> Path:
    manifest_path = root / MANIFEST_NAME
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
        f.write('\n')
    return manifest_path


def write_dataset(cohort: Cohort, root_path) -> Path:
    """
    Write a cohort to disk

    Args:
        cohort: Cohort to write
        root_path: Dataset root directory (created if needed)

    Returns:
        Path of the manifest
    """
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    shape = cohort.shape or (0, 0)

    patients = []
    for patient in cohort.patients:
        height, width = patient.shape
        slices = []
        for k in range(patient.n_slices):
            prefix = f"{patient.patient_id}/slice_{k:03d}"
            images = []
            for j, b_value in enumerate(patient.b_values):
                entry = _write_array(root, f"{prefix}_{_b_tag(b_value)}.f32", patient.images[k, j], IMAGE_DTYPE)
                images.append({"b_value": b_value, **entry})
            slices.append({
                "slice_index": k,
                "images": images,
                "wg_mask": _write_array(root, f"{prefix}_wg.u8", patient.wg_masks[k], MASK_DTYPE),
                "tz_mask": _write_array(root, f"{prefix}_tz.u8", patient.tz_masks[k], MASK_DTYPE),
            })
        patients.append({
            "patient_id": patient.patient_id,
            "height": height,
            "width": width,
            "n_slices": patient.n_slices,
            "slices": slices,
        })

    manifest = {
        "format": DATASET_FORMAT,
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "domain_tag": cohort.domain_tag,
        "b_values": list(cohort.b_values),
        "height": shape[0],
        "width": shape[1],
        "patients": patients,
    }
    manifest_path = _write_manifest(root, manifest)
    logger.info(f"✓ Wrote {len(patients)} patients to {root}")
    return manifest_path


def read_dataset(root_path) -> Cohort:
    """
    Read a cohort written by write_dataset

    Raises:
        DatasetIntegrityError: manifest or slice file missing, truncated or corrupt
    """
    root = Path(root_path)
    manifest = _load_manifest(root, DATASET_FORMAT)
    manifest_path = root / MANIFEST_NAME
    try:
        b_values = [float(b) for b in manifest["b_values"]]
        patients = []
        for entry in manifest["patients"]:
            shape = (int(entry["height"]), int(entry["width"]))
            slices = sorted(entry["slices"], key=lambda s: s["slice_index"])
            if [s["slice_index"] for s in slices] != list(range(int(entry["n_slices"]))):
                raise DatasetIntegrityError(manifest_path, f"{entry['patient_id']}: slice indices are not contiguous from 0")
            images = np.empty((len(slices), len(b_values)) + shape, dtype=np.float32)
            wg_masks = np.empty((len(slices),) + shape, dtype=np.uint8)
            tz_masks = np.empty((len(slices),) + shape, dtype=np.uint8)
            for k, slice_entry in enumerate(slices):
                by_b = {float(img["b_value"]): img for img in slice_entry["images"]}
                if sorted(by_b) != sorted(b_values):
                    raise DatasetIntegrityError(
                        manifest_path, f"{entry['patient_id']} slice {k}: b-values {sorted(by_b)} != {b_values}"
                    )
                for j, b_value in enumerate(b_values):
                    images[k, j] = _read_array(root, by_b[b_value], IMAGE_DTYPE, shape)
                wg_masks[k] = _read_array(root, slice_entry["wg_mask"], MASK_DTYPE, shape)
                tz_masks[k] = _read_array(root, slice_entry["tz_mask"], MASK_DTYPE, shape)
            patients.append(PatientVolume(
                patient_id=entry["patient_id"],
                b_values=b_values,
                images=images,
                wg_masks=wg_masks,
                tz_masks=tz_masks,
            ))
        cohort = Cohort(domain_tag=manifest["domain_tag"], b_values=b_values, patients=patients)
        cohort.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetIntegrityError(manifest_path, f"manifest does not validate ({e})")
    return cohort


def write_predictions(masks: MaskVolumes, root_path, zone: str) -> Path:
    """
    Write per-patient binary mask volumes (n_slices × H × W)

    Args:
        masks: {patient_id: mask volume}
        root_path: Output directory
        zone: WG or TZ

    Returns:
        Path of the manifest
    """
    check_zone(zone)
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    patients = []
    for patient_id, volume in masks.items():
        volume = np.asarray(volume)
        if volume.ndim != 3:
            raise ValueError(f"{patient_id}: mask volume must be (slices, H, W), got {volume.shape}")
        slices = [
            {"slice_index": k, **_write_array(root, f"{patient_id}/slice_{k:03d}_{zone.lower()}.u8", volume[k], MASK_DTYPE)}
            for k in range(volume.shape[0])
        ]
        patients.append({
            "patient_id": patient_id,
            "height": int(volume.shape[1]),
            "width": int(volume.shape[2]),
            "n_slices": int(volume.shape[0]),
            "slices": slices,
        })
    manifest = {
        "format": MASKS_FORMAT,
        "format_version": FORMAT_VERSION,
        "byte_order": "little",
        "zone": zone,
        "patients": patients,
    }
    return _write_manifest(root, manifest)


def read_predictions(root_path) -> Tuple[str, MaskVolumes]:
    """
    Read mask volumes written by write_predictions

    Returns:
        (zone, {patient_id: mask volume})
    """
    root = Path(root_path)
    manifest = _load_manifest(root, MASKS_FORMAT)
    manifest_path = root / MANIFEST_NAME
    masks: MaskVolumes = {}
    try:
        zone = check_zone(manifest["zone"])
        for entry in manifest["patients"]:
            shape = (int(entry["height"]), int(entry["width"]))
            slices = sorted(entry["slices"], key=lambda s: s["slice_index"])
            volume = np.empty((len(slices),) + shape, dtype=np.uint8)
            for k, slice_entry in enumerate(slices):
                volume[k] = _read_array(root, slice_entry, MASK_DTYPE, shape)
            masks[entry["patient_id"]] = volume
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetIntegrityError(manifest_path, f"manifest does not validate ({e})")
    return zone, masks
