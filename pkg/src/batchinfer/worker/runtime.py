"""Per-node worker runtime.

A worker pulls shards from the sharding service, splits them into loader
batches and pushes them through three kinds of stages joined by bounded
queues::

    feeder -> [load_q] -> loaders -> [node inputs] -> predictor DAG -> ensemble -> [write_q] -> writers

Writers assemble rows per shard; once a shard is complete it is committed to
the sink and only then reported done. Each stage runs a pool of executor
threads whose size the autoscaler may change between ticks.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .. import metrics as m
from ..cluster import NodeSpec, WorkerFaults
from ..core import Counter, ErrorKind, FailureKind, Shard, SimClock, TolerableError
from ..dds import EXHAUSTED, ShardQueue, WorkerRejected
from ..io import CommitIOError, CommitResult, DatasetReader, FetchError, ShardOutput, commit_shard
from .autoscale import Autoscaler, Observation, ScaleAction
from .ensemble import Ensemble
from .spec import LOADER, WRITER, PipelineSpec
from .synthetic import DEGRADED, Attempt, Halted, Item, execute_batch, timeout_retry

log = logging.getLogger(__name__)

POLL_S = 0.002  # real seconds between checks of halt/stop flags while blocked


class StageQueue:
    """Bounded FIFO of batches; tracks the highest depth it ever reached."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self.high_water = 0

    def put(self, item, halt: threading.Event) -> bool:
        while True:
            try:
                self._q.put(item, timeout=POLL_S * 5)
            except queue.Full:
                if halt.is_set():
                    return False
                continue
            depth = self._q.qsize()
            if depth > self.high_water:
                self.high_water = depth
            return True

    def get(self, timeout: float = POLL_S):
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def qsize(self) -> int:
        return self._q.qsize()

    def occupancy(self) -> float:
        return self._q.qsize() / self.capacity

    def wait_for_room(self, halt: threading.Event) -> bool:
        """Block until the queue has a free slot. Returns False if halted first."""
        while self._q.full():
            if halt.wait(POLL_S):
                return False
        return True


class NodeInput:
    """Input side of a predictor node: a bounded queue plus a re-batching buffer.

    Batches are cut at exactly ``target`` items. A shorter batch is only cut
    while the worker is flushing (no more shards to pull, or draining) and no
    new input showed up during the last poll.
    """

    def __init__(self, capacity: int, target: int):
        self.queue = StageQueue(capacity)
        self.target = target
        self._buf: list = []
        self._lock = threading.Lock()
        self.partial_batches = 0
        self.cut_sizes: list[int] = []

    def take(self, should_stop: Callable[[], bool], flushing: threading.Event) -> Optional[list]:
        while not self._lock.acquire(timeout=POLL_S * 5):
            if should_stop():
                return None
        try:
            while len(self._buf) < self.target:
                got = self.queue.get()
                if got is None:
                    if should_stop():
                        return None
                    if flushing.is_set() and self._buf:
                        self.partial_batches += 1
                        break
                    continue
                self._buf.extend(got)
            out = self._buf[: self.target]
            del self._buf[: self.target]
            self.cut_sizes.append(len(out))
            return out
        finally:
            self._lock.release()

    def buffered(self) -> int:
        return len(self._buf)


class StagePool:
    """Executor threads of one stage. Removing an executor is quiescent: it
    finishes its current batch before exiting."""

    def __init__(self, name: str, body: Callable[[Callable[[], bool]], None], halt: threading.Event, worker_id: str):
        self.name = name
        self._body = body
        self._halt = halt
        self._worker_id = worker_id
        self._lock = threading.Lock()
        self._execs: list[tuple[threading.Thread, threading.Event]] = []
        self._seq = itertools.count()

    def _run(self, stop: threading.Event) -> None:
        should_stop = lambda: stop.is_set() or self._halt.is_set()
        try:
            while not should_stop():
                self._body(should_stop)
        except Halted:
            pass
        except Exception:
            log.exception("%s/%s executor crashed", self._worker_id, self.name)
            raise

    def add(self) -> None:
        stop = threading.Event()
        t = threading.Thread(
            target=self._run, args=(stop,), daemon=True,
            name=f"{self._worker_id}-{self.name}-{next(self._seq)}",
        )
        with self._lock:
            self._execs.append((t, stop))
        t.start()

    def remove(self) -> bool:
        with self._lock:
            live = [(t, s) for t, s in self._execs if not s.is_set()]
            if len(live) <= 1:
                return False
            live[-1][1].set()
            return True

    @property
    def count(self) -> int:
        with self._lock:
            return sum(1 for _, s in self._execs if not s.is_set())

    def threads(self) -> list[threading.Thread]:
        with self._lock:
            return [t for t, _ in self._execs]


@dataclass
class _OpenShard:
    shard: Shard
    rows: list = field(default_factory=list)


class Worker:
    """Runtime of one node: shard loop, stage pools, autoscaler tick."""

    def __init__(
        self,
        node: NodeSpec,
        spec: PipelineSpec,
        dds: ShardQueue,
        reader: DatasetReader,
        sink_dir,
        clock: SimClock,
        metrics: Optional[m.MetricsCollector] = None,
        faults: Optional[WorkerFaults] = None,
        on_self_crash: Optional[Callable[[str, FailureKind], None]] = None,
        idle_poll_ms: float = 5.0,
    ):
        self.node = node
        self.worker_id = node.node_id
        self.spec = spec
        self.dds = dds
        self.reader = reader
        self.sink_dir = Path(sink_dir)
        self.clock = clock
        self.metrics = metrics or m.MetricsCollector()
        self.faults = faults or WorkerFaults()
        self.on_self_crash = on_self_crash
        self.idle_poll_s = max(clock.real_seconds(idle_poll_ms), POLL_S)

        self.halt = threading.Event()
        self.flushing = threading.Event()
        self.draining = threading.Event()
        self.feeder_done = threading.Event()
        self.drained = threading.Event()
        self.killed = False

        self.restarts = Counter()
        self.committed_records = Counter()
        self.reports: list = []
        self._ordinals: dict[str, itertools.count] = {}
        self._ord_lock = threading.Lock()
        self._open: dict[int, _OpenShard] = {}
        self._open_lock = threading.Lock()
        self._busy_lock = threading.Lock()
        self._busy_device_s = 0.0

        self.load_q = StageQueue(spec.queue_capacity)
        self.write_q = StageQueue(spec.queue_capacity)
        self.inputs = {n.node_id: NodeInput(spec.queue_capacity, n.target_batch_size) for n in spec.nodes}
        self._roots = spec.roots()
        self._children = {n.node_id: spec.children(n.node_id) for n in spec.nodes}
        self._sink = spec.sink
        self.ensemble = Ensemble(self.worker_id, len(self._roots))

        self.pools: dict[str, StagePool] = {}
        self.autoscaler = Autoscaler(
            spec.autoscale,
            loader_max=spec.loader.max_executors,
            writer_max=spec.writer.max_executors,
            node_max={n.node_id: n.max_executors for n in spec.nodes},
            device_room=self._device_room,
        )
        self._threads: list[threading.Thread] = []

    # -- lifecycle --------------------------------------------------------

    def start(self) -> None:
        if self.spec.sequential:
            self._spawn(self._sequential_loop, "sequential")
        else:
            self.pools[LOADER] = StagePool(LOADER, self._loader_once, self.halt, self.worker_id)
            self.pools[WRITER] = StagePool(WRITER, self._writer_once, self.halt, self.worker_id)
            for n in self.spec.nodes:
                self.pools[n.node_id] = StagePool(n.node_id, self._node_body(n.node_id), self.halt, self.worker_id)
            for _ in range(self.spec.loader.initial_executors):
                self.pools[LOADER].add()
            for _ in range(self.spec.writer.initial_executors):
                self.pools[WRITER].add()
            for n in self.spec.nodes:
                for _ in range(n.executors):
                    self.pools[n.node_id].add()
            self._spawn(self._feeder, "feeder")
        self._spawn(self._tick_loop, "tick")

    def _spawn(self, fn, name: str) -> None:
        t = threading.Thread(target=self._guard(fn), daemon=True, name=f"{self.worker_id}-{name}")
        self._threads.append(t)
        t.start()

    def _guard(self, fn):
        def run():
            try:
                fn()
            except Halted:
                pass
        return run

    def kill(self) -> None:
        """The node died: stop at once, commit and report nothing further."""
        self.killed = True
        self.halt.set()

    def stop(self) -> None:
        self.halt.set()

    def drain(self) -> None:
        """Stop pulling shards; finish, commit and report what is in flight."""
        self.draining.set()
        self.flushing.set()

    def join(self, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        threads = list(self._threads)
        for p in self.pools.values():
            threads.extend(p.threads())
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()))
        return not any(t.is_alive() for t in threads)

    @property
    def finished(self) -> bool:
        return self.drained.is_set()

    # -- helpers ----------------------------------------------------------

    def _ordinal(self, stage: str) -> int:
        with self._ord_lock:
            c = self._ordinals.setdefault(stage, itertools.count())
            return next(c)

    def _attempt_factory(self, stage: str, ordinal: int, use_timeout: bool = True):
        tries = itertools.count()
        timeout = self.spec.timeout_ms if use_timeout else 0.0

        def make():
            att = Attempt(self.halt, self.clock.time_scale, timeout, self.node.speed_factor)
            att.hang_now = self.faults.hang_for(self.worker_id, stage, ordinal, next(tries))
            return att

        return make

    def _on_restart(self, stage: str):
        def cb():
            n = self.restarts.add()
            log.info("%s: %s executor timed out, restarted (%d total)", self.worker_id, stage, n)
            self.metrics.add(self.clock.now_ms(), self.worker_id, m.RESTARTS, 1)
        return cb

    def _device_room(self, node_id: str) -> bool:
        used = sum(self.pools[n.node_id].count * n.device_demand for n in self.spec.nodes if n.node_id in self.pools)
        return used + self.spec.node(node_id).device_demand <= self.spec.device_units

    def _emit_rows(self, groups: list) -> None:
        for rows in groups:
            if not self.write_q.put(rows, self.halt):
                raise Halted()

    # -- loading ----------------------------------------------------------

    def _open_shard(self, shard: Shard) -> None:
        with self._open_lock:
            self._open[shard.shard_id] = _OpenShard(shard)

    def _acquire(self):
        """One acquire round. Returns a Shard, None to keep idling, or False to stop."""
        if self.halt.is_set() or self.draining.is_set():
            return False
        try:
            shard = self.dds.acquire_shard(self.worker_id)
        except WorkerRejected:
            return False
        if shard is EXHAUSTED:
            self.flushing.set()
            if self.dds.is_complete():
                return False
            if self.halt.wait(self.idle_poll_s):
                return False
            return None
        self.flushing.clear()
        if not self.reader.readable(shard.start, shard.end):
            log.warning("%s: shard %d unreadable, declaring node failure", self.worker_id, shard.shard_id)
            if self.on_self_crash is not None:
                self.on_self_crash(self.worker_id, FailureKind.NetworkError)
            return False
        self._open_shard(shard)
        return shard

    def _feeder(self) -> None:
        bs = self.spec.batch_size
        try:
            while True:
                # claim a shard only once the pipeline can take its first batch,
                # so a slow worker does not sit on shards faster peers could run
                if not self.load_q.wait_for_room(self.halt):
                    return
                shard = self._acquire()
                if shard is False:
                    return
                if shard is None:
                    continue
                for a in range(shard.start, shard.end, bs):
                    if not self.load_q.put((shard, a, min(a + bs, shard.end)), self.halt):
                        return
        finally:
            self.feeder_done.set()

    def _load(self, shard: Shard, a: int, b: int):
        """Read and preprocess one loader batch. Returns (items, errors)."""
        ordinal = self._ordinal(LOADER)
        cost = self.spec.loader.cost_per_record * (b - a)

        def run(att: Attempt):
            if att.hang_now:
                att.hang()
            try:
                recs, missing = self.reader.read_range(a, b), []
            except FetchError as e:
                recs, missing = e.records, e.missing
            att.work(cost)
            return recs, missing

        res = timeout_retry(run, self._attempt_factory(LOADER, ordinal), self.spec.max_retries, self._on_restart(LOADER))
        errors: list[tuple[int, TolerableError]] = []
        items: list[Item] = []
        if res is DEGRADED:
            errors = [(r, TolerableError(ErrorKind.Timeout, f"loader timed out on batch [{a}, {b})")) for r in range(a, b)]
            return items, errors
        recs, missing = res
        for rid in missing:
            errors.append((rid, TolerableError(ErrorKind.FetchError, f"record {rid} could not be fetched")))
        injected = self.faults.record_errors
        for r in recs:
            kind = injected.get(r.id)
            if kind is not None:
                errors.append((r.id, TolerableError(ErrorKind(kind), f"injected {kind} on record {r.id}")))
            else:
                items.append(Item(r.id, (), r.payload))
        return items, errors

    def _loader_once(self, should_stop) -> None:
        task = self.load_q.get()
        if task is None:
            return
        shard, a, b = task
        items, errors = self._load(shard, a, b)
        self.ensemble.open_group(shard.shard_id, shard.attempt, range(a, b))
        done = []
        for rid, err in errors:
            done += self.ensemble.reject(rid, err)
        self._emit_rows(done)
        if items:
            for root in self._roots:
                if not self.inputs[root].queue.put(items, self.halt):
                    raise Halted()

    # -- prediction -------------------------------------------------------

    def _run_node(self, node_id: str, batch: list) -> list:
        node = self.spec.node(node_id)
        ordinal = self._ordinal(node_id)
        t0 = time.monotonic()

        def run(att: Attempt):
            return execute_batch(node, batch, att, self.spec.seed, hang=att.hang_now)

        try:
            res = timeout_retry(run, self._attempt_factory(node_id, ordinal), self.spec.max_retries, self._on_restart(node_id))
        finally:
            with self._busy_lock:
                self._busy_device_s += (time.monotonic() - t0) * node.device_demand
        if res is DEGRADED:
            err = TolerableError(ErrorKind.Timeout, f"{node_id} timed out after {self.spec.max_retries} retries")
            return [err] * len(batch)
        return res

    def _route(self, node_id: str, batch: list, outcomes: list) -> tuple[list, list]:
        """Account outcomes in the ensemble. Returns (outputs to forward, finished row groups)."""
        done: list = []
        forward: list = []
        children = self._children[node_id]
        is_sink = node_id == self._sink
        for item, out in zip(batch, outcomes):
            if isinstance(out, TolerableError):
                done += self.ensemble.fail(item, out)
            elif is_sink:
                done += self.ensemble.deliver(item, out)
            else:
                done += self.ensemble.forward(item, len(out), len(children))
                forward.extend(out)
        return forward, done

    def _node_body(self, node_id: str):
        inp = self.inputs[node_id]

        def once(should_stop) -> None:
            batch = inp.take(should_stop, self.flushing)
            if batch is None:
                return
            outcomes = self._run_node(node_id, batch)
            forward, done = self._route(node_id, batch, outcomes)
            if forward:
                for c in self._children[node_id]:
                    if not self.inputs[c].queue.put(forward, self.halt):
                        raise Halted()
            self._emit_rows(done)

        return once

    # -- writing ----------------------------------------------------------

    def _writer_once(self, should_stop) -> None:
        rows = self.write_q.get()
        if rows is None:
            return
        Attempt(self.halt, self.clock.time_scale, 0.0, self.node.speed_factor).work(
            self.spec.writer.cost_per_record * len(rows)
        )
        self._collect(rows)

    def _collect(self, rows: list) -> None:
        complete = []
        with self._open_lock:
            for r in rows:
                entry = self._open[r.shard_id]
                entry.rows.append(r)
                if len(entry.rows) == entry.shard.size:
                    complete.append(self._open.pop(r.shard_id))
        for entry in complete:
            self._commit(entry.shard, entry.rows)

    def _commit(self, shard: Shard, rows: list) -> None:
        if self.killed:
            return
        out = ShardOutput(shard.shard_id, shard.attempt, shard.start, shard.end,
                          tuple(sorted(rows, key=lambda r: r.record_id)))
        for i in range(5):
            try:
                result = commit_shard(out, self.sink_dir)
                break
            except CommitIOError:
                if i == 4:
                    raise
                time.sleep(0.01 * (i + 1))
        if result is CommitResult.Committed:
            now = self.clock.now_ms()
            self.committed_records.add(shard.size)
            self.metrics.add(now, self.worker_id, m.RECORDS_DONE, shard.size)
            self.metrics.add(now, self.worker_id, m.SHARDS_DONE, 1)
        if self.killed:
            return
        verdict = self.dds.report_done(self.worker_id, shard.shard_id, shard.attempt)
        self.reports.append((shard.shard_id, shard.attempt, result, verdict))

    def open_shards(self) -> int:
        with self._open_lock:
            return len(self._open)

    # -- sequential baseline ----------------------------------------------

    def _sequential_loop(self) -> None:
        bs = self.spec.batch_size
        order = self.spec.topo_order()
        try:
            while True:
                # claim a shard only once the pipeline can take its first batch,
                # so a slow worker does not sit on shards faster peers could run
                if not self.load_q.wait_for_room(self.halt):
                    return
                shard = self._acquire()
                if shard is False:
                    return
                if shard is None:
                    continue
                for a in range(shard.start, shard.end, bs):
                    b = min(a + bs, shard.end)
                    items, errors = self._load(shard, a, b)
                    self.ensemble.open_group(shard.shard_id, shard.attempt, range(a, b))
                    done = []
                    for rid, err in errors:
                        done += self.ensemble.reject(rid, err)
                    inbox = {n: [] for n in order}
                    for root in self._roots:
                        inbox[root].extend(items)
                    for node_id in order:
                        pending = inbox[node_id]
                        target = self.spec.node(node_id).target_batch_size
                        for i in range(0, len(pending), target):
                            chunk = pending[i:i + target]
                            outcomes = self._run_node(node_id, chunk)
                            forward, finished = self._route(node_id, chunk, outcomes)
                            done += finished
                            for c in self._children[node_id]:
                                inbox[c].extend(forward)
                    for rows in done:
                        Attempt(self.halt, self.clock.time_scale, 0.0, self.node.speed_factor).work(
                            self.spec.writer.cost_per_record * len(rows)
                        )
                        self._collect(rows)
        finally:
            self.feeder_done.set()

    # -- autoscaling ------------------------------------------------------

    def observe(self, util: float = 0.0) -> Observation:
        occ = {n: self.inputs[n].queue.occupancy() for n in self.inputs}
        roots = [occ[r] for r in self._roots]
        return Observation(
            predict_input=sum(roots) / len(roots),
            node_occupancy=occ,
            write=self.write_q.occupancy(),
            utilization=util,
            loaders=self.pools[LOADER].count if LOADER in self.pools else 1,
            writers=self.pools[WRITER].count if WRITER in self.pools else 1,
            predictors={n: (self.pools[n].count if n in self.pools else 1) for n in self.inputs},
        )

    def apply(self, action: ScaleAction) -> None:
        pool = self.pools[action.stage]
        if action.delta > 0:
            pool.add()
        else:
            pool.remove()
        log.debug("%s: %s %+d -> %d", self.worker_id, action.stage, action.delta, pool.count)

    def _sample(self, obs: Observation) -> None:
        now = self.clock.now_ms()
        add = self.metrics.add
        wid = self.worker_id
        add(now, wid, m.OCCUPANCY_PREFIX + "load", self.load_q.occupancy())
        for n, v in obs.node_occupancy.items():
            add(now, wid, m.OCCUPANCY_PREFIX + n, v)
        add(now, wid, m.OCCUPANCY_PREFIX + WRITER, obs.write)
        add(now, wid, m.UTILIZATION, obs.utilization)
        add(now, wid, m.EXECUTORS_PREFIX + LOADER, obs.loaders)
        for n, c in obs.predictors.items():
            add(now, wid, m.EXECUTORS_PREFIX + n, c)
        add(now, wid, m.EXECUTORS_PREFIX + WRITER, obs.writers)

    def _tick_loop(self) -> None:
        cfg = self.spec.autoscale
        interval = max(self.clock.real_seconds(cfg.tick_interval), POLL_S)
        last = time.monotonic()
        last_busy = 0.0
        while not self.halt.wait(interval):
            now = time.monotonic()
            with self._busy_lock:
                busy = self._busy_device_s
            devices = max(self.spec.device_units, 1)
            util = min(1.0, (busy - last_busy) / (devices * max(now - last, 1e-9)))
            last, last_busy = now, busy
            obs = self.observe(util)
            self._sample(obs)
            if self.draining.is_set() and self.feeder_done.is_set() and self.open_shards() == 0:
                self.drained.set()
                self.halt.set()
                return
            if cfg.enabled and not self.spec.sequential:
                for action in self.autoscaler.tick(obs):
                    self.apply(action)
