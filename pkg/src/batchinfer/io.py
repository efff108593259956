"""File-backed dataset source and shard-keyed, idempotent output sink."""

from __future__ import annotations

import base64
import bisect
import enum
import json
import os
import threading
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .core import SeededRng

MANIFEST_NAME = "manifest.json"
RECORDS_PER_FILE = 100_000
STAGING_DIR = ".staging"


@dataclass(frozen=True)
class Record:
    id: int
    payload: bytes


@dataclass(frozen=True)
class FileSpan:
    file: str
    start: int
    end: int


@dataclass
class DatasetManifest:
    dataset_size: int
    payload_bytes: int
    seed: int
    files: list[FileSpan]
    root: Path = field(default=Path("."), compare=False)

    def to_json(self) -> dict:
        return {
            "dataset_size": self.dataset_size,
            "payload_bytes": self.payload_bytes,
            "seed": self.seed,
            "files": [{"file": f.file, "start_index": f.start, "end_index": f.end} for f in self.files],
        }

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as f:
            d = json.load(f)
        files = [FileSpan(x["file"], int(x["start_index"]), int(x["end_index"])) for x in d["files"]]
        m = cls(int(d["dataset_size"]), int(d["payload_bytes"]), int(d["seed"]), files, root=path.parent)
        m.validate()
        return m

    def validate(self) -> None:
        pos = 0
        for span in self.files:
            if span.start != pos or span.end <= span.start:
                raise ValueError(f"manifest files do not tile the dataset at index {pos}")
            pos = span.end
        if pos != self.dataset_size:
            raise ValueError("manifest files do not cover the dataset")


class FetchError(Exception):
    """Some records of a range could not be read. Carries the readable ones."""

    def __init__(self, message: str, records: list[Record], missing: list[int]):
        super().__init__(message)
        self.records = records
        self.missing = missing


def generate_dataset(
    size: int,
    payload_bytes: int,
    seed: int,
    out_dir: Union[str, Path],
    records_per_file: int = RECORDS_PER_FILE,
) -> DatasetManifest:
    if size < 0:
        raise ValueError("size must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed).stream("dataset")
    files = []
    for k, start in enumerate(range(0, size, records_per_file)):
        end = min(start + records_per_file, size)
        name = f"part-{k:05d}.jsonl"
        payloads = rng.integers(0, 256, size=(end - start, payload_bytes), dtype=np.uint8)
        with open(out / name, "w") as f:
            for i, row in zip(range(start, end), payloads):
                f.write('{"id": %d, "payload": "%s"}\n' % (i, base64.b64encode(row.tobytes()).decode()))
        files.append(FileSpan(name, start, end))
    manifest = DatasetManifest(size, payload_bytes, seed, files, root=out)
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


class DatasetReader:
    """Range reads over a manifest. Safe to share between threads."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._starts = [f.start for f in manifest.files]
        self._offsets: dict[str, list[int]] = {}
        self._lock = threading.Lock()

    def _line_offsets(self, span: FileSpan) -> list[int]:
        offs = self._offsets.get(span.file)
        if offs is not None:
            return offs
        with self._lock:
            offs = self._offsets.get(span.file)
            if offs is None:
                offs = []
                pos = 0
                with open(self.manifest.root / span.file, "rb") as f:
                    for line in f:
                        offs.append(pos)
                        pos += len(line)
                self._offsets[span.file] = offs
        return offs

    def spans(self, start: int, end: int) -> list[FileSpan]:
        if start >= end:
            return []
        i = bisect.bisect_right(self._starts, start) - 1
        out = []
        while i < len(self.manifest.files) and self.manifest.files[i].start < end:
            out.append(self.manifest.files[i])
            i += 1
        return out

    def readable(self, start: int, end: int) -> bool:
        """True if at least one file backing [start, end) exists."""
        return any((self.manifest.root / s.file).exists() for s in self.spans(start, end))

    def read_range(self, start: int, end: int) -> list[Record]:
        if not 0 <= start <= end <= self.manifest.dataset_size:
            raise ValueError(f"range [{start}, {end}) outside dataset of {self.manifest.dataset_size}")
        records: list[Record] = []
        missing: list[int] = []
        for span in self.spans(start, end):
            lo, hi = max(start, span.start), min(end, span.end)
            try:
                offs = self._line_offsets(span)
                with open(self.manifest.root / span.file, "rb") as f:
                    f.seek(offs[lo - span.start])
                    for rid in range(lo, hi):
                        d = json.loads(f.readline())
                        if d["id"] != rid:
                            raise ValueError(f"record {rid} out of place in {span.file}")
                        records.append(Record(rid, base64.b64decode(d["payload"])))
            except (OSError, ValueError, KeyError, IndexError):
                got = {r.id for r in records}
                missing.extend(r for r in range(lo, hi) if r not in got)
        if missing:
            raise FetchError(f"{len(missing)} records unreadable in [{start}, {end})", records, missing)
        return records


def read_range(manifest: DatasetManifest, start: int, end: int) -> list[Record]:
    return DatasetReader(manifest).read_range(start, end)


# ---------------------------------------------------------------------------
# Output


@dataclass(frozen=True)
class ResultRecord:
    record_id: int
    status: str  # "ok" | "error"
    segments: tuple[bytes, ...] = ()
    error: Optional[dict] = None
    shard_id: int = -1
    attempt: int = 0
    worker_id: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "record_id": self.record_id,
                "segments": [base64.b64encode(s).decode() for s in self.segments],
                "status": self.status,
                "error": self.error,
                "shard_id": self.shard_id,
                "attempt": self.attempt,
                "worker_id": self.worker_id,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, d: dict) -> "ResultRecord":
        return cls(
            record_id=int(d["record_id"]),
            status=d["status"],
            segments=tuple(base64.b64decode(s) for s in d["segments"]),
            error=d.get("error"),
            shard_id=int(d["shard_id"]),
            attempt=int(d["attempt"]),
            worker_id=d["worker_id"],
        )


@dataclass(frozen=True)
class ShardOutput:
    shard_id: int
    attempt: int
    start: int
    end: int
    rows: tuple[ResultRecord, ...]

    def validate(self) -> None:
        ids = [r.record_id for r in self.rows]
        if ids != list(range(self.start, self.end)):
            raise ValueError(f"shard {self.shard_id} rows do not cover [{self.start}, {self.end}) in order")


class CommitResult(enum.Enum):
    Committed = "Committed"
    AlreadyCommitted = "AlreadyCommitted"


class CommitIOError(OSError):
    """Staging write failed; the commit may be retried."""


def shard_path(sink_dir: Union[str, Path], shard_id: int) -> Path:
    return Path(sink_dir) / f"shard-{shard_id}.jsonl"


def commit_shard(
    output: ShardOutput,
    sink_dir: Union[str, Path],
    before_publish: Optional[Callable[[Path], None]] = None,
) -> CommitResult:
    """Stage the shard file, then publish it with a no-clobber atomic link.

    The first publisher wins; later attempts leave the published file alone.
    ``before_publish`` is a kill-point hook for tests.
    """
    output.validate()
    sink = Path(sink_dir)
    final = shard_path(sink, output.shard_id)
    if final.exists():
        return CommitResult.AlreadyCommitted
    staging = sink / STAGING_DIR
    try:
        staging.mkdir(parents=True, exist_ok=True)
        tmp = staging / f"shard-{output.shard_id}.{output.attempt}.{uuid.uuid4().hex}.tmp"
        with open(tmp, "w") as f:
            for row in output.rows:
                f.write(row.to_json_line())
                f.write("\n")
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise CommitIOError(f"staging shard {output.shard_id} failed: {e}") from e
    try:
        if before_publish is not None:
            before_publish(tmp)
        os.link(tmp, final)
    except FileExistsError:
        return CommitResult.AlreadyCommitted
    finally:
        try:
            tmp.unlink()
        except FileNotFoundError:
            pass
    return CommitResult.Committed


@dataclass
class IntegrityReport:
    total_rows: int
    dataset_size: int
    missing: list[int]
    duplicates: list[int]
    errors_by_kind: dict[str, int]
    malformed_files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            not self.missing
            and not self.duplicates
            and not self.malformed_files
            and self.total_rows == self.dataset_size
        )

    @property
    def error_rows(self) -> int:
        return sum(self.errors_by_kind.values())

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "total_rows": self.total_rows,
            "dataset_size": self.dataset_size,
            "missing": self.missing,
            "duplicates": self.duplicates,
            "errors_by_kind": self.errors_by_kind,
            "error_rows": self.error_rows,
            "malformed_files": self.malformed_files,
        }


def iter_output(sink_dir: Union[str, Path]):
    for path in sorted(Path(sink_dir).glob("shard-*.jsonl")):
        with open(path) as f:
            for line in f:
                yield path, json.loads(line)


def verify_output(manifest: DatasetManifest, sink_dir: Union[str, Path]) -> IntegrityReport:
    seen: Counter = Counter()
    errors: Counter = Counter()
    total = 0
    malformed = []
    for path in sorted(Path(sink_dir).glob("shard-*.jsonl")):
        try:
            with open(path) as f:
                rows = [json.loads(line) for line in f]
        except (OSError, ValueError):
            malformed.append(path.name)
            continue
        for row in rows:
            total += 1
            seen[int(row["record_id"])] += 1
            if row["status"] != "ok":
                errors[row["error"]["kind"]] += 1
    missing = [i for i in range(manifest.dataset_size) if i not in seen]
    dupes = sorted(i for i, c in seen.items() if c > 1)
    return IntegrityReport(total, manifest.dataset_size, missing, dupes, dict(sorted(errors.items())), malformed)
