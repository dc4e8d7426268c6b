"""Run records and the append-only JSON-lines results log."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

from ..errors import ContractViolation, DataError

# fields that legitimately differ between otherwise identical runs
VOLATILE = ("wall_seconds",)


@dataclass(frozen=True)
class RunRecord:
    method: str
    scenario: str
    dataset_id: str
    seed: int
    ways: int
    shots: int
    queries: int
    episode_id: str
    balanced_accuracy: float
    config_hash: str = ""
    params_trunk: int | None = None
    params_head: int | None = None
    nodes: int | None = None
    depth: float | None = None
    train_ways: int | None = None
    wall_seconds: float = 0.0
    record_id: str = field(default="")

    def __post_init__(self):
        if not 0.0 <= self.balanced_accuracy <= 1.0:
            raise ContractViolation(f"balanced accuracy {self.balanced_accuracy} outside [0, 1]")
        if not self.record_id:
            object.__setattr__(self, "record_id", self._make_id())

    def _make_id(self) -> str:
        key = {k: v for k, v in asdict(self).items()
               if k not in VOLATILE + ("record_id", "balanced_accuracy", "nodes", "depth",
                                       "params_trunk", "params_head")}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    def stable_dict(self) -> dict:
        """Everything except wall-clock timing."""
        return {k: v for k, v in self.to_dict().items() if k not in VOLATILE}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"results record has unknown fields {sorted(unknown)}")
        return cls(**d)


class ResultsLog:
    """One JSON object per line; records are only ever appended."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, records: Iterable[RunRecord]) -> int:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        n = 0
        with open(self.path, "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
                n += 1
        return n

    def read(self) -> list[RunRecord]:
        return read_records(self.path)


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results log not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from None
    return out
