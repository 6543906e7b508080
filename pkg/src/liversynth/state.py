"""SQLite-backed ledger of pipeline stage runs."""
from __future__ import annotations

import json
import sqlite3
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict


class StageStatus(str, Enum):
    IDLE = "IDLE"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


@dataclass
class StageState:
    run: str
    stage: str
    status: StageStatus = StageStatus.IDLE
    fingerprint: str = ""
    attempts: int = 0
    data: Dict[str, Any] | None = None
    updated_at: int | None = None

    def to_row(self) -> tuple[Any, ...]:
        updated = self.updated_at or int(time.time())
        return (
            self.run,
            self.stage,
            self.status.value,
            self.fingerprint,
            self.attempts,
            json.dumps(self.data or {}, sort_keys=True),
            updated,
        )

    @classmethod
    def from_row(cls, row: tuple[Any, ...]) -> "StageState":
        run, stage, status, fingerprint, attempts, data_json, updated_at = row
        return cls(
            run=run,
            stage=stage,
            status=StageStatus(status),
            fingerprint=fingerprint,
            attempts=attempts,
            data=json.loads(data_json) if data_json else {},
            updated_at=updated_at,
        )


class StateStore:
    """Encapsulates SQLite operations for per-run stage state."""

    def __init__(self, db_path: Path):
        self.db_path = Path(db_path).expanduser()
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.db_path)
        self._conn.row_factory = sqlite3.Row
        self._ensure_schema()

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "StateStore":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def _ensure_schema(self) -> None:
        self._conn.executescript(
            """
            CREATE TABLE IF NOT EXISTS stage_state (
                run TEXT NOT NULL,
                stage TEXT NOT NULL,
                status TEXT NOT NULL,
                fingerprint TEXT NOT NULL DEFAULT '',
                attempts INTEGER NOT NULL DEFAULT 0,
                data TEXT,
                updated_at INTEGER NOT NULL,
                PRIMARY KEY (run, stage)
            );
            """
        )
        self._conn.commit()

    def load_stage_state(self, run: str, stage: str) -> StageState:
        cur = self._conn.execute(
            "SELECT run, stage, status, fingerprint, attempts, data, updated_at\n"
            "FROM stage_state WHERE run = ? AND stage = ?",
            (run, stage),
        )
        row = cur.fetchone()
        if row:
            return StageState.from_row(tuple(row))
        return StageState(run=run, stage=stage)

    def save_stage_state(self, state: StageState) -> None:
        self._conn.execute(
            "INSERT INTO stage_state (run, stage, status, fingerprint, attempts, data, updated_at)\n"
            "VALUES (?, ?, ?, ?, ?, ?, ?)\n"
            "ON CONFLICT(run, stage) DO UPDATE SET\n"
            " status = excluded.status,\n"
            " fingerprint = excluded.fingerprint,\n"
            " attempts = excluded.attempts,\n"
            " data = excluded.data,\n"
            " updated_at = excluded.updated_at",
            state.to_row(),
        )
        self._conn.commit()

    def reset_run(self, run: str) -> None:
        self._conn.execute("DELETE FROM stage_state WHERE run = ?", (run,))
        self._conn.commit()

    def list_stage_states(self, run: str | None = None) -> list[StageState]:
        """Return tracked stage states, latest update first."""
        query = "SELECT run, stage, status, fingerprint, attempts, data, updated_at FROM stage_state"
        params: tuple[Any, ...] = ()
        if run is not None:
            query += " WHERE run = ?"
            params = (run,)
        cur = self._conn.execute(query + " ORDER BY updated_at DESC, stage", params)
        return [StageState.from_row(tuple(row)) for row in cur.fetchall()]
