#!/usr/bin/env python3
"""
Results exporter

Exports sweep cells from the results database to one JSON file per cell and an
aggregate CSV. Files contain no timestamps, so the same cells always produce the
same bytes.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from .database import ResultsDatabase

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "zone", "regime", "X", "size", "seed", "status",
    "mean_dsc", "std_dsc", "sensitivity", "specificity", "precision", "runtime_s",
]
FLOAT_COLUMNS = {"X", "mean_dsc", "std_dsc", "sensitivity", "specificity", "precision", "runtime_s"}
INT_COLUMNS = {"size", "seed"}

RESULTS_CSV = "results.csv"
BEST_X_JSON = "best_x.json"
STATISTICS_JSON = "statistics.json"


def _csv_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cell_filename(record: Dict[str, Any]) -> str:
    x = "none" if record['x'] is None else format(record['x'], "g")
    size = "none" if record['size'] is None else str(record['size'])
    return f"{record['zone']}_{record['regime']}_x{x}_n{size}_seed{record['seed']}.json"


def read_aggregate_csv(path) -> List[Dict[str, Any]]:
    """
    Parse an aggregate CSV back into typed rows

    Empty fields become None; numeric columns become float/int.
    """
    rows = []
    with open(path, 'r', newline='', encoding='utf-8') as f:
        for raw in csv.DictReader(f):
            row = {}
            for column in CSV_COLUMNS:
                text = raw.get(column, "")
                if text == "":
                    row[column] = None
                elif column in FLOAT_COLUMNS:
                    row[column] = float(text)
                elif column in INT_COLUMNS:
                    row[column] = int(text)
                else:
                    row[column] = text
            rows.append(row)
    return rows


class ResultsExporter:
    """Export sweep cells to JSON and CSV"""

    def __init__(self, db: ResultsDatabase, output_dir: str = "results"):
        """
        Initialize exporter

        Args:
            db: ResultsDatabase instance
            output_dir: Output directory for exported files
        """
        self.db = db
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def export_cells(self) -> List[Path]:
        """
        Write one JSON file per cell into cells/

        Cell files left over from an earlier export of other cells are removed.

        Returns:
            Written paths in cell order
        """
        cells_dir = self.output_dir / "cells"
        cells_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for record in self.db.get_all_cells():
            output_file = cells_dir / cell_filename(record)
            with open(output_file, 'w', encoding='utf-8') as f:
                json.dump(record, f, indent=2, sort_keys=True, ensure_ascii=False)
                f.write('\n')
            written.append(output_file)
        for stale in sorted(set(cells_dir.glob("*.json")) - set(written)):
            stale.unlink()
            logger.debug(f"Removed stale cell file {stale.name}")
        return written

    def export_csv(self) -> Path:
        """Write the aggregate CSV, one row per cell"""
        output_file = self.output_dir / RESULTS_CSV
        with open(output_file, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CSV_COLUMNS)
            for record in self.db.get_all_cells():
                writer.writerow([
                    _csv_value(record['zone']),
                    _csv_value(record['regime']),
                    _csv_value(record['x']),
                    _csv_value(record['size']),
                    _csv_value(record['seed']),
                    _csv_value(record['status']),
                    _csv_value(record['mean_dsc']),
                    _csv_value(record['std_dsc']),
                    _csv_value(record['sensitivity']),
                    _csv_value(record['specificity']),
                    _csv_value(record['precision']),
                    _csv_value(record['runtime_s']),
                ])
        return output_file

    def export_best_x(self, rows: List[Dict[str, Any]]) -> Path:
        """Write the best-X summary (one entry per regime and size)"""
        output_file = self.output_dir / BEST_X_JSON
        with open(output_file, 'w', encoding='utf-8') as f:
            json.dump({"best_x": rows}, f, indent=2, sort_keys=True)
            f.write('\n')
        return output_file

    def export_statistics_only(self) -> Dict[str, Any]:
        """
        Export only statistics

        Returns:
            Dictionary with statistics
        """
        stats = self.db.get_statistics()

        stats_data = {'statistics': stats}

        output_file = self.output_dir / STATISTICS_JSON
        with open(output_file, 'w', encoding='utf-8') as f:
            json.dump(stats_data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write('\n')

        logger.info(f"Exported statistics to {output_file}")

        return stats_data

    def export_all(self) -> Dict[str, Any]:
        """
        Export cell files, the aggregate CSV and statistics

        Returns:
            Dictionary with export metadata
        """
        cells = self.export_cells()
        csv_file = self.export_csv()
        self.export_statistics_only()
        logger.info(f"Exported {len(cells)} cells to {csv_file}")
        return {
            'csv': str(csv_file),
            'cells_exported': len(cells),
            'cells_dir': str(self.output_dir / "cells"),
        }
