"""JSON-lines emission of measurements and execution traces.

Two record families share the writer: measurement records (kinds
throughput-window, response-time, invoke-latency, write-latency,
queue-depth) and instrumentation records (kinds step, transition, action,
event-handled). One JSON object per line, flushed per line so a killed
process loses at most the line being written.
"""

from __future__ import annotations

import json
import threading
import time
from typing import IO, Optional, Union

MEASUREMENT_KINDS = ("throughput-window", "response-time", "invoke-latency", "write-latency", "queue-depth")
TRACE_KINDS = ("step", "transition", "action", "event-handled")


def record(kind: str, instance: Optional[str], value, unit: str, ts: Optional[float] = None, **detail) -> dict:
    rec = {
        "kind": kind,
        "instance": instance,
        "value": value,
        "unit": unit,
        "ts": time.time() if ts is None else ts,
    }
    if detail:
        rec.update(detail)
    return rec


class Emitter:
    def emit(self, rec: dict) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class NullEmitter(Emitter):
    def emit(self, rec: dict) -> None:
        pass


class MemoryEmitter(Emitter):
    """Collects records in memory; test and report aggregation helper."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[dict] = []

    def emit(self, rec: dict) -> None:
        with self._lock:
            self.records.append(rec)

    def by_kind(self, kind: str) -> list[dict]:
        with self._lock:
            return [r for r in self.records if r.get("kind") == kind]


class JsonlEmitter(Emitter):
    def __init__(self, target: Union[str, IO[str]]):
        self._lock = threading.Lock()
        if isinstance(target, str):
            self._fp: IO[str] = open(target, "a", encoding="utf-8")
            self._owns = True
        else:
            self._fp = target
            self._owns = False

    def emit(self, rec: dict) -> None:
        line = json.dumps(rec, separators=(",", ":"), sort_keys=True)
        with self._lock:
            self._fp.write(line + "\n")
            self._fp.flush()

    def close(self) -> None:
        with self._lock:
            if self._owns:
                self._fp.close()


def read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
