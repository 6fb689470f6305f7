"""Append-only JSONL persistence, dedup by program id, and funnel accounting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .model import DatasetRecord, dumps_record, loads_record

CHECKPOINT_NAME = "checkpoint"
OUT_NAME = "out.jsonl"
REJECTS_NAME = "rejects.jsonl"


class StoreError(Exception):
    pass


class MissingCheckpoint(StoreError):
    def __init__(self, stage: str):
        super().__init__(f"stage {stage!r} has no readable checkpoint")
        self.stage = stage


@dataclass(frozen=True)
class LoadResult:
    rows: tuple[dict, ...]
    malformed: int


def append_rows(path: str | Path, rows: Iterable[dict]) -> int:
    """Append each row as one JSON line; a row is written in a single call."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "a", encoding="utf-8") as handle:
        for row in rows:
            handle.write(dumps_record(row) + "\n")
            handle.flush()
            count += 1
    return count


def load_rows(path: str | Path) -> LoadResult:
    """Read JSONL rows, skipping and counting malformed lines instead of aborting."""
    rows: list[dict] = []
    malformed = 0
    if not Path(path).exists():
        return LoadResult((), 0)
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(loads_record(line))
            except (ValueError, TypeError):
                malformed += 1
    return LoadResult(tuple(rows), malformed)


def rewrite_rows(path: str | Path, rows: Sequence[dict]) -> None:
    """Replace file contents atomically (write to a sibling, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(dumps_record(row) + "\n")
    os.replace(tmp, path)


def append_records(path: str | Path, records: Iterable[DatasetRecord]) -> int:
    return append_rows(path, (r.to_dict() for r in records))


def load_records(path: str | Path) -> tuple[tuple[DatasetRecord, ...], int]:
    loaded = load_rows(path)
    malformed = loaded.malformed
    records: list[DatasetRecord] = []
    for row in loaded.rows:
        try:
            records.append(DatasetRecord.from_dict(row))
        except (KeyError, ValueError, TypeError):
            malformed += 1
    return tuple(records), malformed


def dedup(records: Sequence) -> list:
    """Keep the first record per program id; stable and idempotent."""
    seen: set[str] = set()
    kept = []
    for record in records:
        rid = record.id if hasattr(record, "id") else record["id"]
        if rid in seen:
            continue
        seen.add(rid)
        kept.append(record)
    return kept


@dataclass(frozen=True)
class StageCheckpoint:
    stage: str
    in_count: int
    out_count: int
    rejected: dict = field(default_factory=dict)
    cursor: int = 0
    processed_digest: str = ""
    complete: bool = False

    def __post_init__(self) -> None:
        if self.in_count != self.out_count + sum(self.rejected.values()):
            raise ValueError(
                f"stage {self.stage}: in ({self.in_count}) != out ({self.out_count}) "
                f"+ rejected ({sum(self.rejected.values())})"
            )

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "in": self.in_count,
            "out": self.out_count,
            "rejected": dict(self.rejected),
            "cursor": self.cursor,
            "processed_digest": self.processed_digest,
            "complete": self.complete,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StageCheckpoint":
        return cls(
            stage=data["stage"],
            in_count=int(data["in"]),
            out_count=int(data["out"]),
            rejected=dict(data.get("rejected") or {}),
            cursor=int(data.get("cursor", 0)),
            processed_digest=data.get("processed_digest", ""),
            complete=bool(data.get("complete", False)),
        )


def write_checkpoint(stage_dir: str | Path, checkpoint: StageCheckpoint) -> None:
    path = Path(stage_dir) / CHECKPOINT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(dumps_record(checkpoint.to_dict()) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_checkpoint(stage_dir: str | Path) -> StageCheckpoint | None:
    path = Path(stage_dir) / CHECKPOINT_NAME
    if not path.exists():
        return None
    try:
        return StageCheckpoint.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError):
        return None


@dataclass(frozen=True)
class FunnelStage:
    stage: str
    in_count: int
    out_count: int
    rejected: dict
    retention: float | None

    @classmethod
    def from_checkpoint(cls, cp: StageCheckpoint) -> "FunnelStage":
        retention = None if cp.in_count == 0 else cp.out_count / cp.in_count
        return cls(cp.stage, cp.in_count, cp.out_count, dict(cp.rejected), retention)


@dataclass(frozen=True)
class FunnelReport:
    stages: tuple[FunnelStage, ...]

    def stage(self, name: str) -> FunnelStage:
        for entry in self.stages:
            if entry.stage == name:
                return entry
        raise KeyError(name)

    def summary_pairs(self) -> list[tuple[str, str]]:
        pairs: list[tuple[str, str]] = [("stages", str(len(self.stages)))]
        for entry in self.stages:
            key = entry.stage.replace("-", "_")
            pairs.append((f"{key}_in", str(entry.in_count)))
            pairs.append((f"{key}_out", str(entry.out_count)))
        if self.stages:
            pairs.append(("final", str(self.stages[-1].out_count)))
        return pairs


def funnel_report(run_dir: str | Path, stage_order: Sequence[str]) -> FunnelReport:
    """Aggregate per-stage checkpoints; a stage directory without one is an error."""
    run_dir = Path(run_dir)
    stages: list[FunnelStage] = []
    for stage in stage_order:
        stage_dir = run_dir / stage
        if not stage_dir.exists():
            continue
        checkpoint = read_checkpoint(stage_dir)
        if checkpoint is None:
            raise MissingCheckpoint(stage)
        stages.append(FunnelStage.from_checkpoint(checkpoint))
    return FunnelReport(tuple(stages))
