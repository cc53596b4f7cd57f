import sqlite3
import json
import logging
import os
from contextlib import closing, contextmanager
from typing import List, Dict, Optional

logger = logging.getLogger(__name__)

class RunLedger:
    """SQLite log of training runs, per-node results and evaluation reports"""

    def __init__(self, db_path: str = "./data/heml_runs.db"):
        self.db_path = db_path
        # Create data directory if it doesn't exist
        directory = os.path.dirname(db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.init_database()

    @contextmanager
    def get_connection(self):
        """Open a connection with row factory; commit (or roll back) and close on exit"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        with closing(conn), conn:
            yield conn

    def init_database(self):
        """Initialize database with all required tables"""
        with self.get_connection() as conn:
            conn.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    command TEXT NOT NULL,
                    manifest_hash TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    config TEXT NOT NULL,
                    out_dir TEXT,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            ''')

            conn.execute('''
                CREATE TABLE IF NOT EXISTS node_results (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    node_key TEXT NOT NULL,
                    name TEXT NOT NULL,
                    segment_id TEXT NOT NULL,
                    final_loss REAL,
                    best_epoch INTEGER,
                    FOREIGN KEY (run_id) REFERENCES runs (id),
                    UNIQUE(run_id, node_key)
                )
            ''')

            conn.execute('''
                CREATE TABLE IF NOT EXISTS epoch_losses (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    node_key TEXT NOT NULL,
                    epoch INTEGER NOT NULL,
                    loss REAL NOT NULL,
                    val_p1 REAL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            ''')

            conn.execute('''
                CREATE TABLE IF NOT EXISTS eval_reports (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    node_key TEXT NOT NULL,
                    split TEXT NOT NULL,
                    k INTEGER NOT NULL,
                    precision REAL NOT NULL,
                    n_queries INTEGER NOT NULL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            ''')

            conn.execute('CREATE INDEX IF NOT EXISTS idx_epoch_losses_run_node ON epoch_losses (run_id, node_key, epoch)')
            conn.execute('CREATE INDEX IF NOT EXISTS idx_eval_reports_run ON eval_reports (run_id, node_key)')

            conn.commit()
            logger.info(f"Run ledger initialized at {self.db_path}")

    def start_run(self, command: str, manifest_hash: str, seed: int, config: Dict,
                  out_dir: str = None) -> Optional[int]:
        """Register a run and return its id"""
        try:
            with self.get_connection() as conn:
                cursor = conn.execute('''
                    INSERT INTO runs (command, manifest_hash, seed, config, out_dir)
                    VALUES (?, ?, ?, ?, ?)
                ''', (command, manifest_hash, str(seed), json.dumps(config, sort_keys=True), out_dir))
                conn.commit()
                logger.info(f"Started ledger run {cursor.lastrowid} ({command})")
                return cursor.lastrowid
        except Exception as e:
            logger.error(f"Error starting run: {e}")
            return None

    def add_node_result(self, run_id: int, checkpoint) -> bool:
        """Record a node's final loss, best epoch and per-epoch history"""
        node_key = str(checkpoint.node_id)
        try:
            with self.get_connection() as conn:
                conn.execute('''
                    INSERT INTO node_results (run_id, node_key, name, segment_id, final_loss, best_epoch)
                    VALUES (?, ?, ?, ?, ?, ?)
                ''', (run_id, node_key, checkpoint.name, checkpoint.segment_id,
                      checkpoint.final_loss, checkpoint.best_epoch))

                val_history = list(checkpoint.val_history) + [None] * (len(checkpoint.history) - len(checkpoint.val_history))
                conn.executemany('''
                    INSERT INTO epoch_losses (run_id, node_key, epoch, loss, val_p1)
                    VALUES (?, ?, ?, ?, ?)
                ''', [(run_id, node_key, epoch, loss, val)
                      for epoch, (loss, val) in enumerate(zip(checkpoint.history, val_history))])
                conn.commit()
                return True
        except Exception as e:
            logger.error(f"Error recording node {node_key}: {e}")
            return False

    def add_eval_report(self, run_id: int, report, split: str) -> bool:
        """Record one EvalReport (one row per K)"""
        try:
            with self.get_connection() as conn:
                conn.executemany('''
                    INSERT INTO eval_reports (run_id, node_key, split, k, precision, n_queries)
                    VALUES (?, ?, ?, ?, ?, ?)
                ''', [(run_id, str(report.node_id), split, k, precision, report.n_queries)
                      for k, precision in report.precisions.items()])
                conn.commit()
                return True
        except Exception as e:
            logger.error(f"Error recording eval report for node {report.node_id}: {e}")
            return False

    def get_run(self, run_id: int) -> Optional[Dict]:
        """Get run by id, config decoded"""
        try:
            with self.get_connection() as conn:
                row = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()
                if not row:
                    return None
                run = dict(row)
                run['seed'] = int(run['seed'])
                run['config'] = json.loads(run['config'])
                return run
        except Exception as e:
            logger.error(f"Error getting run: {e}")
            return None

    def get_runs(self, limit: int = 20) -> List[Dict]:
        """Most recent runs first"""
        try:
            with self.get_connection() as conn:
                cursor = conn.execute('SELECT * FROM runs ORDER BY id DESC LIMIT ?', (limit,))
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error getting runs: {e}")
            return []

    def get_node_results(self, run_id: int) -> List[Dict]:
        try:
            with self.get_connection() as conn:
                cursor = conn.execute('SELECT * FROM node_results WHERE run_id = ? ORDER BY id', (run_id,))
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error getting node results: {e}")
            return []

    def get_epoch_losses(self, run_id: int, node_key) -> List[float]:
        try:
            with self.get_connection() as conn:
                cursor = conn.execute('''
                    SELECT loss FROM epoch_losses WHERE run_id = ? AND node_key = ? ORDER BY epoch
                ''', (run_id, str(node_key)))
                return [row['loss'] for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error getting epoch losses: {e}")
            return []

    def get_eval_reports(self, run_id: int) -> List[Dict]:
        try:
            with self.get_connection() as conn:
                cursor = conn.execute('SELECT * FROM eval_reports WHERE run_id = ? ORDER BY id', (run_id,))
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error getting eval reports: {e}")
            return []
