#!/usr/bin/env python3
"""
Database layer for storing sweep cell results
"""

import json
import math
import sqlite3
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple

# SQLite treats NULLs as distinct under UNIQUE, so "no X" / "no size" are stored as sentinels
NO_X = -1.0
NO_SIZE = -1

REGIME_ORDER = ("transfer", "scratch", "no-training", "source")

CellKeyTuple = Tuple[str, str, Optional[float], Optional[int], int]


class ResultsDatabase:
    """SQLite database for sweep cells, keyed by (zone, regime, x, size, seed)"""

    def __init__(self, db_path: str = "results/results.db"):
        """
        Initialize database connection

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = db_path
        self.conn = sqlite3.connect(db_path)
        self.conn.row_factory = sqlite3.Row
        self._create_tables()

    def _create_tables(self):
        """Create database tables if they don't exist"""
        cursor = self.conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cells (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                zone TEXT NOT NULL,
                regime TEXT NOT NULL,  -- 'transfer', 'scratch', 'no-training', 'source'
                x REAL NOT NULL,  -- -1 when the regime has no X
                size INTEGER NOT NULL,  -- fine-tune patients, -1 for the source regime
                seed INTEGER NOT NULL,
                status TEXT NOT NULL,  -- 'ok' or 'failed'
                mean_dsc REAL,
                std_dsc REAL,
                sensitivity REAL,
                specificity REAL,
                precision REAL,
                runtime_s REAL,
                report TEXT,  -- MetricsReport as JSON
                raw_report TEXT,  -- before post-processing, JSON
                error TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                UNIQUE(zone, regime, x, size, seed)
            )
        """)

        # Single-row table holding the plan echo
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS plan (
                id INTEGER PRIMARY KEY CHECK (id = 1),
                plan TEXT NOT NULL,
                saved_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_cells_regime ON cells(regime)
        """)
        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_cells_status ON cells(status)
        """)

        self.conn.commit()

    @staticmethod
    def _key_values(record: Dict[str, Any]) -> Tuple[str, str, float, int, int]:
        x = record.get('x')
        size = record.get('size')
        return (
            record['zone'],
            record['regime'],
            NO_X if x is None else float(x),
            NO_SIZE if size is None else int(size),
            int(record['seed']),
        )

    def upsert_cell(self, record: Dict[str, Any]) -> int:
        """
        Insert or update one cell result

        Args:
            record: Flat cell dictionary (CellResult.to_record); 'report' and
                'raw_report' are dictionaries or None

        Returns:
            Row ID
        """
        cursor = self.conn.cursor()
        zone, regime, x, size, seed = self._key_values(record)
        report = json.dumps(record['report'], sort_keys=True) if record.get('report') is not None else None
        raw_report = json.dumps(record['raw_report'], sort_keys=True) if record.get('raw_report') is not None else None

        cursor.execute("""
            INSERT INTO cells (
                zone, regime, x, size, seed, status,
                mean_dsc, std_dsc, sensitivity, specificity, precision,
                runtime_s, report, raw_report, error
            )
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(zone, regime, x, size, seed) DO UPDATE SET
                status = excluded.status,
                mean_dsc = excluded.mean_dsc,
                std_dsc = excluded.std_dsc,
                sensitivity = excluded.sensitivity,
                specificity = excluded.specificity,
                precision = excluded.precision,
                runtime_s = excluded.runtime_s,
                report = excluded.report,
                raw_report = excluded.raw_report,
                error = excluded.error,
                updated_at = CURRENT_TIMESTAMP
        """, (
            zone, regime, x, size, seed, record['status'],
            record.get('mean_dsc'), record.get('std_dsc'), record.get('sensitivity'),
            record.get('specificity'), record.get('precision'),
            record.get('runtime_s'), report, raw_report, record.get('error'),
        ))

        self.conn.commit()
        return cursor.lastrowid

    def _row_to_record(self, row: sqlite3.Row) -> Dict[str, Any]:
        record = dict(row)
        record['x'] = None if record['x'] == NO_X else record['x']
        record['size'] = None if record['size'] == NO_SIZE else record['size']
        record['report'] = json.loads(record['report']) if record['report'] else None
        record['raw_report'] = json.loads(record['raw_report']) if record['raw_report'] else None
        for column in ('id', 'created_at', 'updated_at'):
            record.pop(column, None)
        return record

    def get_cell(self, zone: str, regime: str, x: Optional[float], size: Optional[int],
                 seed: int) -> Optional[Dict[str, Any]]:
        """
        Get one cell by key

        Returns:
            Cell dictionary or None if not found
        """
        cursor = self.conn.cursor()
        key = self._key_values({'zone': zone, 'regime': regime, 'x': x, 'size': size, 'seed': seed})
        cursor.execute("""
            SELECT * FROM cells WHERE zone = ? AND regime = ? AND x = ? AND size = ? AND seed = ?
        """, key)
        row = cursor.fetchone()
        return self._row_to_record(row) if row else None

    def get_all_cells(self, status: Optional[str] = None, regime: Optional[str] = None) -> List[Dict[str, Any]]:
        """
        Get all cells in deterministic order (zone, regime, x, size, seed)

        Args:
            status: Filter by status ('ok' or 'failed')
            regime: Filter by regime

        Returns:
            List of cell dictionaries
        """
        cursor = self.conn.cursor()

        query = "SELECT * FROM cells WHERE 1=1"
        params = []

        if status:
            query += " AND status = ?"
            params.append(status)

        if regime:
            query += " AND regime = ?"
            params.append(regime)

        order_case = " ".join(f"WHEN '{name}' THEN {i}" for i, name in enumerate(REGIME_ORDER))
        query += f" ORDER BY zone, CASE regime {order_case} ELSE {len(REGIME_ORDER)} END, x, size, seed"

        cursor.execute(query, params)
        return [self._row_to_record(row) for row in cursor.fetchall()]

    def get_completed_keys(self) -> Set[CellKeyTuple]:
        """Keys of cells that finished successfully"""
        cursor = self.conn.cursor()
        cursor.execute("SELECT zone, regime, x, size, seed FROM cells WHERE status = 'ok'")
        return {
            (row['zone'], row['regime'], None if row['x'] == NO_X else row['x'],
             None if row['size'] == NO_SIZE else row['size'], row['seed'])
            for row in cursor.fetchall()
        }

    def retain_cells(self, records: Iterable[Dict[str, Any]]) -> int:
        """
        Delete every cell whose key is not among the given records

        Returns:
            Number of deleted rows
        """
        keep = {self._key_values(r) for r in records}
        cursor = self.conn.cursor()
        cursor.execute("SELECT id, zone, regime, x, size, seed FROM cells")
        stale = [row['id'] for row in cursor.fetchall()
                 if (row['zone'], row['regime'], row['x'], row['size'], row['seed']) not in keep]
        cursor.executemany("DELETE FROM cells WHERE id = ?", [(row_id,) for row_id in stale])
        self.conn.commit()
        return len(stale)

    def save_plan(self, plan: Dict[str, Any]):
        """Store (or replace) the plan echo"""
        cursor = self.conn.cursor()
        cursor.execute("""
            INSERT INTO plan (id, plan) VALUES (1, ?)
            ON CONFLICT(id) DO UPDATE SET plan = excluded.plan, saved_at = CURRENT_TIMESTAMP
        """, (json.dumps(plan, sort_keys=True),))
        self.conn.commit()

    def get_plan(self) -> Optional[Dict[str, Any]]:
        cursor = self.conn.cursor()
        cursor.execute("SELECT plan FROM plan WHERE id = 1")
        row = cursor.fetchone()
        return json.loads(row['plan']) if row else None

    def get_statistics(self) -> Dict[str, Any]:
        """
        Get database statistics

        Returns:
            Dictionary with statistics
        """
        cursor = self.conn.cursor()

        stats = {}

        # Total cells
        cursor.execute("SELECT COUNT(*) FROM cells")
        stats['total_cells'] = cursor.fetchone()[0]

        # By regime
        cursor.execute("""
            SELECT regime, COUNT(*) as count
            FROM cells
            GROUP BY regime
            ORDER BY regime
        """)
        stats['by_regime'] = {row['regime']: row['count'] for row in cursor.fetchall()}

        # By status
        cursor.execute("""
            SELECT status, COUNT(*) as count
            FROM cells
            GROUP BY status
            ORDER BY status
        """)
        by_status = {row['status']: row['count'] for row in cursor.fetchall()}
        stats['by_status'] = by_status
        stats['ok_count'] = by_status.get('ok', 0)
        stats['failed_count'] = by_status.get('failed', 0)

        # Mean Dice per regime over successful cells (order-independent sum)
        cursor.execute("""
            SELECT regime, mean_dsc
            FROM cells
            WHERE status = 'ok' AND mean_dsc IS NOT NULL
            ORDER BY regime
        """)
        by_regime: Dict[str, List[float]] = {}
        for row in cursor.fetchall():
            by_regime.setdefault(row['regime'], []).append(row['mean_dsc'])
        stats['mean_dsc_by_regime'] = {
            regime: math.fsum(values) / len(values) for regime, values in by_regime.items()
        }

        return stats

    def close(self):
        """Close database connection"""
        self.conn.close()
