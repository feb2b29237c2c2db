"""Line-delimited JSON event log."""

from __future__ import annotations

import json
import os
import threading
from typing import IO, Any, Iterator

KINDS = (
    "poll",
    "decision",
    "switch_start",
    "switch_phase",
    "switch_end",
    "abort",
    "activation",
    "deactivation",
    "alarm",
    "kpi",
    "request",
    "buffer_init",
)


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class EventLog:
    def __init__(self, sink: IO[str] | None = None) -> None:
        self.records: list[dict[str, Any]] = []
        self._sink = sink
        self._lock = threading.Lock()

    def emit(self, time_s: float, kind: str, payload: dict[str, Any]) -> dict[str, Any]:
        if kind not in KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        record = {"time_s": time_s, "kind": kind, "payload": payload}
        with self._lock:
            self.records.append(record)
            if self._sink is not None:
                self._sink.write(dumps(record) + "\n")
        return record

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, *kinds: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] in kinds]

    def flush(self) -> None:
        with self._lock:
            if self._sink is not None:
                self._sink.flush()

    def text(self) -> str:
        return "".join(dumps(r) + "\n" for r in self.records)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())


def read_log(path: str | os.PathLike) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
