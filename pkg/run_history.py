import json
import sqlite3
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from logger import setup_logger

logger = setup_logger(__name__)

LOSS_COLUMNS = ("total", "cos", "con", "ce_action", "ce_object")


class RunHistory:
    """SQLite ledger of training runs: one row per optimizer step and per evaluation"""

    def __init__(self, db_path: Union[str, Path] = "history.db"):

        self.db_path = str(db_path)
        self.conn = None
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._initialize_database()
        logger.info(f"Run history initialized with database: {self.db_path}")

    def _initialize_database(self):
        """Create the runs / steps / evaluations tables"""
        self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row

        cursor = self.conn.cursor()

        # ==================== TABLE 1: Runs ====================
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                config_hash TEXT,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                metadata TEXT
            )
        """)

        # ==================== TABLE 2: Steps ====================
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS steps (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                epoch INTEGER NOT NULL,
                step INTEGER NOT NULL,
                total REAL NOT NULL,
                cos REAL NOT NULL,
                con REAL NOT NULL,
                ce_action REAL NOT NULL,
                ce_object REAL NOT NULL,
                lr REAL,
                timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        # ==================== TABLE 3: Evaluations ====================
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS evaluations (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                epoch INTEGER NOT NULL,
                split TEXT NOT NULL,
                metrics TEXT NOT NULL,
                timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_steps_run
            ON steps(run_id, epoch)
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_evaluations_run
            ON evaluations(run_id)
        """)

        self.conn.commit()

    def create_run(self, run_id: str, config_hash: Optional[str] = None, metadata: Optional[Dict] = None) -> bool:

        try:
            cursor = self.conn.cursor()
            metadata_json = json.dumps(metadata, sort_keys=True) if metadata else "{}"

            cursor.execute("""
                INSERT OR IGNORE INTO runs (run_id, config_hash, metadata)
                VALUES (?, ?, ?)
            """, (run_id, config_hash, metadata_json))

            self.conn.commit()
            logger.info(f"Run registered: {run_id}")
            return True
        except Exception as e:
            logger.error(f"Error creating run: {e}")
            return False

    def log_step(
        self,
        run_id: str,
        epoch: int,
        step: int,
        losses: Dict[str, float],
        lr: Optional[float] = None
    ) -> bool:

        try:
            cursor = self.conn.cursor()
            cursor.execute("""
                INSERT INTO steps (run_id, epoch, step, total, cos, con, ce_action, ce_object, lr)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
            """, (run_id, epoch, step, *(float(losses[c]) for c in LOSS_COLUMNS), lr))

            self.conn.commit()
            return True
        except Exception as e:
            logger.error(f"Error logging step {step}: {e}")
            return False

    def log_evaluation(self, run_id: str, epoch: int, split: str, metrics: Dict[str, float]) -> bool:

        try:
            cursor = self.conn.cursor()
            cursor.execute("""
                INSERT INTO evaluations (run_id, epoch, split, metrics)
                VALUES (?, ?, ?, ?)
            """, (run_id, epoch, split, json.dumps(metrics, sort_keys=True)))

            self.conn.commit()
            logger.debug(f"Evaluation stored for run {run_id}, epoch {epoch}, split {split}")
            return True
        except Exception as e:
            logger.error(f"Error logging evaluation: {e}")
            return False

    def get_steps(self, run_id: str, epoch: Optional[int] = None) -> List[Dict[str, Any]]:

        try:
            cursor = self.conn.cursor()

            if epoch is not None:
                cursor.execute("""
                    SELECT epoch, step, total, cos, con, ce_action, ce_object, lr
                    FROM steps
                    WHERE run_id = ? AND epoch = ?
                    ORDER BY step ASC
                """, (run_id, epoch))
            else:
                cursor.execute("""
                    SELECT epoch, step, total, cos, con, ce_action, ce_object, lr
                    FROM steps
                    WHERE run_id = ?
                    ORDER BY step ASC
                """, (run_id,))

            return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error retrieving steps: {e}")
            return []

    def get_evaluations(self, run_id: str, split: Optional[str] = None) -> List[Dict[str, Any]]:

        try:
            cursor = self.conn.cursor()

            if split:
                cursor.execute("""
                    SELECT epoch, split, metrics FROM evaluations
                    WHERE run_id = ? AND split = ?
                    ORDER BY id ASC
                """, (run_id, split))
            else:
                cursor.execute("""
                    SELECT epoch, split, metrics FROM evaluations
                    WHERE run_id = ?
                    ORDER BY id ASC
                """, (run_id,))

            evaluations = []
            for row in cursor.fetchall():
                try:
                    metrics = json.loads(row['metrics'])
                except json.JSONDecodeError:
                    metrics = {}
                evaluations.append({'epoch': row['epoch'], 'split': row['split'], 'metrics': metrics})
            return evaluations
        except Exception as e:
            logger.error(f"Error retrieving evaluations: {e}")
            return []

    def get_epoch_history(self, run_id: str) -> List[Dict[str, Any]]:
        """Mean of every loss component per epoch, in epoch order"""

        try:
            cursor = self.conn.cursor()
            cursor.execute("""
                SELECT epoch, COUNT(*) AS steps,
                       AVG(total) AS total, AVG(cos) AS cos, AVG(con) AS con,
                       AVG(ce_action) AS ce_action, AVG(ce_object) AS ce_object
                FROM steps
                WHERE run_id = ?
                GROUP BY epoch
                ORDER BY epoch ASC
            """, (run_id,))
            return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Error retrieving epoch history: {e}")
            return []

    def get_run_stats(self, run_id: str) -> Dict[str, Any]:

        try:
            cursor = self.conn.cursor()

            cursor.execute("SELECT COUNT(*) as count FROM steps WHERE run_id = ?", (run_id,))
            step_count = cursor.fetchone()['count']

            cursor.execute("SELECT COUNT(*) as count FROM evaluations WHERE run_id = ?", (run_id,))
            eval_count = cursor.fetchone()['count']

            cursor.execute("SELECT config_hash, created_at FROM runs WHERE run_id = ?", (run_id,))
            run_info = cursor.fetchone()

            return {
                'run_id': run_id,
                'step_count': step_count,
                'evaluation_count': eval_count,
                'config_hash': run_info['config_hash'] if run_info else None,
                'created_at': run_info['created_at'] if run_info else None
            }
        except Exception as e:
            logger.error(f"Error getting run stats: {e}")
            return {}

    def clear_run(self, run_id: str) -> bool:

        try:
            cursor = self.conn.cursor()

            cursor.execute("DELETE FROM steps WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM evaluations WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM runs WHERE run_id = ?", (run_id,))

            self.conn.commit()
            logger.info(f"Run cleared: {run_id}")
            return True
        except Exception as e:
            logger.error(f"Error clearing run: {e}")
            return False

    def close(self):

        if self.conn:
            self.conn.close()
            self.conn = None
            logger.debug("Run history connection closed")

    def __del__(self):

        self.close()
