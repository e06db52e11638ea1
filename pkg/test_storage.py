#!/usr/bin/env python3
"""
Tests for the on-disk dataset and prediction formats
"""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.errors import DatasetIntegrityError
from src.storage import MANIFEST_NAME, read_dataset, read_predictions, write_dataset, write_predictions


@pytest.fixture
def dataset_dir(tmp_path, source_cohort):
    root = tmp_path / "source"
    write_dataset(source_cohort, root)
    return root


def _manifest(root):
    with open(root / MANIFEST_NAME, 'r', encoding='utf-8') as f:
        return json.load(f)


def _first_image_file(root):
    return root / _manifest(root)["patients"][0]["slices"][0]["images"][0]["file"]


def test_round_trip_is_bit_exact(dataset_dir, source_cohort):
    assert read_dataset(dataset_dir).equals(source_cohort)


def test_manifest_lists_checksums(dataset_dir):
    manifest = _manifest(dataset_dir)
    assert manifest["format_version"] == 1
    assert manifest["domain_tag"] == "source"
    assert manifest["b_values"] == [0.0, 800.0]
    entry = manifest["patients"][0]["slices"][0]["images"][0]
    data = (dataset_dir / entry["file"]).read_bytes()
    assert len(data) == 16 * 16 * 4
    assert hashlib.sha256(data).hexdigest() == entry["sha256"]
    assert entry["file"] == "source-000/slice_000_b0.f32"


def test_truncated_file_names_the_file(dataset_dir):
    path = _first_image_file(dataset_dir)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(DatasetIntegrityError) as excinfo:
        read_dataset(dataset_dir)
    assert excinfo.value.path == str(path)
    assert "truncated" in str(excinfo.value)


def test_corrupted_file_fails_checksum(dataset_dir):
    path = _first_image_file(dataset_dir)
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DatasetIntegrityError, match="checksum mismatch"):
        read_dataset(dataset_dir)


def test_missing_file(dataset_dir):
    path = dataset_dir / "source-001" / "slice_003_wg.u8"
    path.unlink()
    with pytest.raises(DatasetIntegrityError) as excinfo:
        read_dataset(dataset_dir)
    assert excinfo.value.path == str(path)


def test_missing_manifest_and_wrong_version(tmp_path, dataset_dir):
    with pytest.raises(DatasetIntegrityError, match="manifest not found"):
        read_dataset(tmp_path / "nowhere")

    manifest = _manifest(dataset_dir)
    manifest["format_version"] = 2
    (dataset_dir / MANIFEST_NAME).write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(DatasetIntegrityError, match="format version"):
        read_dataset(dataset_dir)


def test_mask_values_outside_zero_one(tmp_path):
    wg = np.zeros((1, 4, 4), dtype=np.uint8)
    root = tmp_path / "pred"
    write_predictions({"p": wg}, root, "WG")
    path = root / "p" / "slice_000_wg.u8"
    path.write_bytes(bytes([2] + [0] * 15))
    manifest = _manifest(root)
    manifest["patients"][0]["slices"][0]["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
    (root / MANIFEST_NAME).write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(DatasetIntegrityError, match="0/1"):
        read_predictions(root)


def test_predictions_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    masks = {
        "target-000": (rng.random((5, 8, 8)) < 0.3).astype(np.uint8),
        "target-001": np.zeros((3, 8, 8), dtype=np.uint8),
    }
    write_predictions(masks, tmp_path / "pred", "TZ")
    zone, loaded = read_predictions(tmp_path / "pred")
    assert zone == "TZ"
    assert list(loaded) == list(masks)
    for patient_id, volume in masks.items():
        np.testing.assert_array_equal(loaded[patient_id], volume)


def test_predictions_reject_dataset_manifest(dataset_dir):
    with pytest.raises(DatasetIntegrityError, match="not a"):
        read_predictions(dataset_dir)
