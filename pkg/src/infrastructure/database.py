import sqlite3
from pathlib import Path

DB_NAME = "grid.db"


class ResultsDB:
    """SQLite ledger of factor-grid outcomes, tuned for several writer processes."""

    def __init__(self, db_path: str | Path = DB_NAME):
        self.db_path = str(db_path)
        self.conn = sqlite3.connect(self.db_path, timeout=30.0)
        self.cursor = self.conn.cursor()
        self._init_db()

    def _init_db(self):
        """Initialize schema and the concurrency PRAGMAs."""
        self.cursor.execute("PRAGMA journal_mode = WAL")
        self.cursor.execute("PRAGMA synchronous = NORMAL")
        self.cursor.execute("PRAGMA cache_size = -2000")
        self.cursor.execute("PRAGMA temp_store = MEMORY")
        self.cursor.execute("PRAGMA busy_timeout = 30000")

        self.conn.execute('''
            CREATE TABLE IF NOT EXISTS results (
                label TEXT NOT NULL,
                suite TEXT NOT NULL,
                replicate TEXT NOT NULL,
                t TEXT NOT NULL,
                m TEXT NOT NULL,
                pe TEXT NOT NULL,
                b TEXT NOT NULL,
                e TEXT NOT NULL,
                da REAL,
                status TEXT NOT NULL,
                PRIMARY KEY(label, suite, replicate)
            )
        ''')
        self.conn.execute("CREATE INDEX IF NOT EXISTS idx_results_status ON results(status)")

        self.conn.commit()

    def execute_query(self, query: str, params: tuple = ()):
        self.cursor.execute(query, params)
        return self.cursor.fetchall()

    def execute_single(self, query: str, params: tuple = ()):
        self.cursor.execute(query, params)
        return self.cursor.fetchone()

    def execute_update(self, query: str, params: tuple = ()) -> int:
        """Run one write in its own transaction; a failed write rolls back and re-raises."""
        with self.conn:
            self.cursor.execute(query, params)
        return self.cursor.rowcount

    def close(self):
        self.conn.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
