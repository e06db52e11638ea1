#!/usr/bin/env python3
"""
Quick script to regenerate sweep CSV/JSON files and plots from an existing results database
"""

import argparse
import logging
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.database import ResultsDatabase
from src.exporter import ResultsExporter
from src.experiment import best_x_rows, load_result
from src.plots import emit_curve_plot, emit_metric_bars


def main():
    parser = argparse.ArgumentParser(description='Regenerate sweep outputs from results.db')
    parser.add_argument('results_dir', nargs='?', default='results', help='Directory holding results.db')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    results_dir = Path(args.results_dir)

    print("Loading database...")
    db = ResultsDatabase(str(results_dir / "results.db"))

    try:
        result = load_result(db)

        print("Initializing exporter...")
        exporter = ResultsExporter(db, str(results_dir))

        print("\nExporting cells and aggregate CSV...")
        exporter.export_all()

        print("Exporting best-X summary...")
        exporter.export_best_x(best_x_rows(result))

        print("Plotting...")
        suffix = result.plan.plot_format
        emit_curve_plot(result, result.plan.zone, results_dir / f"dsc_curve_{result.plan.zone}.{suffix}")
        emit_metric_bars(result, None, results_dir / f"detection_bars_{result.plan.zone}.{suffix}")
    except Exception as e:
        print(f"\n✗ Error: {e}")
        sys.exit(1)
    finally:
        db.close()

    print("\n✓ Results regenerated!")


if __name__ == "__main__":
    main()
