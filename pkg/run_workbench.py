#!/usr/bin/env python3
"""
Main entry point for the segmentation workbench

Usage:
    # Synthetic source/target cohorts
    python run_workbench.py generate-phantom --out-dir data

    # Source training, then fine-tuning on 8 target patients
    python run_workbench.py train-source --dataset data/source --out-dir runs/source
    python run_workbench.py finetune --checkpoint runs/source/source_model.pt --dataset data/target --size 8 --out-dir runs/ft8

    # Full sweep (CSV, per-cell JSON and plots)
    python run_workbench.py sweep --config docs/plans/phantom_wg.json --out-dir results/wg
"""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import dispatch


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
