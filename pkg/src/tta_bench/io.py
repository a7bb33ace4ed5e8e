"""Atomic file writes and the JSONL record sink."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Iterable, Sequence


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


class JsonlSink:
    """Append-only record file; each append rewrites the file atomically so a crash never leaves a torn line."""

    def __init__(self, path) -> None:
        self.path = Path(path)
        self._lines: list[str] = []
        self._lock = threading.Lock()
        atomic_write_text(self.path, "")

    def __call__(self, record) -> None:
        line = record.to_json() if hasattr(record, "to_json") else json.dumps(record, sort_keys=True)
        with self._lock:
            self._lines.append(line)
            atomic_write_text(self.path, "".join(l + "\n" for l in self._lines))

    def __len__(self) -> int:
        return len(self._lines)


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: malformed record: {exc}") from exc
    return out
