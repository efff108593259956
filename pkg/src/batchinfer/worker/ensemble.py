"""Per-origin accounting of DAG descendants and assembly of output rows."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

from ..core import TolerableError
from ..io import ResultRecord
from .synthetic import Item


@dataclass
class _Origin:
    pending: int
    group: int
    segments: list = field(default_factory=list)  # (lineage, payload)
    errors: list = field(default_factory=list)  # (lineage, TolerableError)


@dataclass
class _Group:
    shard_id: int
    attempt: int
    remaining: int
    rows: list = field(default_factory=list)


def build_row(record_id: int, segments, errors, shard_id: int, attempt: int, worker_id: str) -> ResultRecord:
    segs = tuple(p for _, p in sorted(segments, key=lambda s: s[0]))
    if errors:
        first = min(errors, key=lambda e: e[0])[1]
        msg = "; ".join(e.message for _, e in sorted(errors, key=lambda e: e[0]))
        return ResultRecord(record_id, "error", segs, {"kind": first.kind.value, "message": msg},
                            shard_id, attempt, worker_id)
    return ResultRecord(record_id, "ok", segs, None, shard_id, attempt, worker_id)


class Ensemble:
    """Tracks how many descendants of each origin record are still in flight.

    An origin starts with one pending item per DAG root. A non-sink node that
    turns an item into k outputs sent along e edges changes the count by
    k*e - 1; a sink output or an error resolves one pending item. When the
    count reaches zero the origin's row is final. Rows are released to the
    writer one loader batch ("group") at a time.
    """

    def __init__(self, worker_id: str, roots: int):
        self.worker_id = worker_id
        self.roots = roots
        self._lock = threading.Lock()
        self._origins: dict[int, _Origin] = {}
        self._groups: dict[int, _Group] = {}
        self._next_group = 0

    def open_group(self, shard_id: int, attempt: int, record_ids) -> int:
        with self._lock:
            gid = self._next_group
            self._next_group += 1
            ids = list(record_ids)
            self._groups[gid] = _Group(shard_id, attempt, len(ids))
            for rid in ids:
                self._origins[rid] = _Origin(self.roots, gid)
            return gid

    def _finish(self, rid: int) -> Optional[_Group]:
        o = self._origins.pop(rid)
        g = self._groups[o.group]
        g.rows.append(build_row(rid, o.segments, o.errors, g.shard_id, g.attempt, self.worker_id))
        g.remaining -= 1
        if g.remaining == 0:
            return self._groups.pop(o.group)
        return None

    def _close(self, done: list) -> list:
        return [sorted(g.rows, key=lambda r: r.record_id) for g in done]

    def reject(self, record_id: int, err: TolerableError) -> list:
        """Resolve an origin that never entered the DAG (fetch/parse failure)."""
        with self._lock:
            o = self._origins[record_id]
            o.errors.append(((), err))
            o.pending = 0
            done = [g for g in [self._finish(record_id)] if g]
        return self._close(done)

    def fail(self, item: Item, err: TolerableError) -> list:
        """Resolve one pending item as an error. Returns completed row batches."""
        with self._lock:
            o = self._origins[item.origin]
            o.errors.append((item.lineage, err))
            o.pending -= 1
            done = [g for g in [self._finish(item.origin)] if g] if o.pending == 0 else []
        return self._close(done)

    def forward(self, item: Item, n_outputs: int, edges: int) -> list:
        """Account for a non-sink node emitting outputs along ``edges`` edges.

        Must be called before the outputs are handed downstream.
        """
        with self._lock:
            o = self._origins[item.origin]
            o.pending += n_outputs * edges - 1
            done = [g for g in [self._finish(item.origin)] if g] if o.pending == 0 else []
        return self._close(done)

    def deliver(self, item: Item, outputs: list) -> list:
        """Resolve one pending item at the sink, keeping its outputs as segments."""
        with self._lock:
            o = self._origins[item.origin]
            for out in outputs:
                o.segments.append((out.lineage, out.payload))
            o.pending -= 1
            done = [g for g in [self._finish(item.origin)] if g] if o.pending == 0 else []
        return self._close(done)

    def in_flight(self) -> int:
        with self._lock:
            return len(self._origins)
