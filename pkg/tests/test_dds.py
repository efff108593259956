import io
import json
import threading
from collections import deque

import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from batchinfer.core import ConfigurationError, ProtocolError, ShardState
from batchinfer.dds import EXHAUSTED, ReportResult, ShardingMode, ShardQueue, WorkerRejected


def queue(size, shard, *workers, **kw):
    q = ShardQueue.partition(size, shard, **kw)
    for w in workers:
        q.register_worker(w)
    return q


def ranges(q):
    return [(s.start, s.end) for s in sorted(q.shards.values(), key=lambda s: s.shard_id)]


# -- partition -------------------------------------------------------------

def test_partition_small():
    q = queue(10, 4)
    assert ranges(q) == [(0, 4), (4, 8), (8, 10)]
    assert all(s.state is ShardState.TODO for s in q.shards.values())
    assert q.pending == [0, 1, 2]


def test_partition_empty_is_complete():
    q = queue(0, 4)
    assert q.shards == {} and q.is_complete()


def test_partition_million():
    q = queue(1_000_000, 512)
    assert len(q.shards) == 1954
    last = q.shards[1953]
    assert (last.start, last.end, last.size) == (999936, 1_000_000, 64)


def test_partition_rejects_zero_shard_size():
    with pytest.raises(ConfigurationError):
        ShardQueue.partition(10, 0)


@given(st.integers(0, 5000), st.integers(1, 700))
def test_partition_cover(size, shard_size):
    rs = ranges(ShardQueue.partition(size, shard_size))
    covered = [i for a, b in rs for i in range(a, b)]
    assert covered == list(range(size))
    assert all(b - a <= shard_size for a, b in rs)
    assert all(b - a == shard_size for a, b in rs[:-1])


# -- acquire ---------------------------------------------------------------

def test_acquire_fifo_head():
    q = queue(3, 1, "w1")
    s = q.acquire_shard("w1")
    assert (s.shard_id, s.state, s.assigned_worker) == (0, ShardState.DOING, "w1")
    assert q.pending == [1, 2]


def test_acquire_exhausted_while_in_flight():
    q = queue(2, 1, "w1", "w2")
    q.acquire_shard("w2")
    q.acquire_shard("w2")
    assert q.acquire_shard("w1") is EXHAUSTED
    assert not q.is_complete()


def test_acquire_unregistered_rejected():
    q = queue(2, 1)
    with pytest.raises(WorkerRejected):
        q.acquire_shard("ghost")


def test_acquire_records_assigned_at():
    t = [0]
    q = queue(2, 1, "w1", clock=lambda: t[0])
    t[0] = 123
    assert q.acquire_shard("w1").assigned_at == 123


# -- transcript replay oracle ------------------------------------------------

class ReferenceQueue:
    """Single-threaded model of the shard protocol used to replay transcripts."""

    def __init__(self, n):
        self.pending = deque(range(n))
        self.state = {i: ("TODO", None, 0) for i in range(n)}
        self.workers = set()

    def apply(self, op, args):
        w = args.get("worker")
        if op == "register_worker":
            self.workers.add(w)
            return "ok"
        if op == "acquire_shard":
            if w not in self.workers:
                return "Rejected"
            if not self.pending:
                return "Exhausted"
            sid = self.pending.popleft()
            att = self.state[sid][2]
            self.state[sid] = ("DOING", w, att)
            return {"shard_id": sid, "attempt": att}
        if op == "report_done":
            st_, owner, att = self.state[args["shard_id"]]
            if st_ == "DOING" and owner == w and att == args["attempt"]:
                self.state[args["shard_id"]] = ("DONE", None, att)
                return "Accepted"
            return "StaleAttempt"
        if op == "reclaim_worker":
            ids = sorted(s for s, (st_, o, _) in self.state.items() if st_ == "DOING" and o == w)
            for s in ids:
                self.state[s] = ("TODO", None, self.state[s][2] + 1)
                self.pending.append(s)
            self.workers.discard(w)
            return ids
        raise AssertionError(op)


def replay(transcript: str, n: int) -> ReferenceQueue:
    ref = ReferenceQueue(n)
    for line in transcript.splitlines():
        rec = json.loads(line)
        assert ref.apply(rec["op"], rec["args"]) == rec["result"], rec
    return ref


@pytest.mark.parametrize("trial", range(20))
def test_race_on_one_shard(trial):
    log = io.StringIO()
    q = queue(1, 1, "w1", "w2", transcript=log)
    barrier = threading.Barrier(2)
    got = {}

    def grab(w):
        barrier.wait()
        got[w] = q.acquire_shard(w)

    ts = [threading.Thread(target=grab, args=(w,)) for w in ("w1", "w2")]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    winners = [w for w, r in got.items() if r is not EXHAUSTED]
    assert len(winners) == 1
    assert [r for r in got.values() if r is EXHAUSTED] == [EXHAUSTED]
    ref = replay(log.getvalue(), 1)
    assert ref.state[0] == ("DOING", winners[0], 0)


def test_concurrent_stress_replays_and_conserves():
    log = io.StringIO()
    n_workers = 8
    q = queue(300, 1, transcript=log)
    stop = threading.Event()
    bad = []

    def snapshotter():
        while not stop.is_set():
            p = q.progress()
            if p.todo + p.doing + p.done != p.total:
                bad.append(p)

    def work(i):
        w = f"w{i}"
        q.register_worker(w)
        k = 0
        while True:
            try:
                s = q.acquire_shard(w)
            except WorkerRejected:
                q.register_worker(w)
                continue
            if s is EXHAUSTED:
                if q.is_complete():
                    return
                continue
            k += 1
            if k % 17 == 0:
                q.reclaim_worker(w)  # simulated crash and restart
                q.report_done(w, s.shard_id, s.attempt)  # zombie report, must be fenced
                q.register_worker(w)
            else:
                assert q.report_done(w, s.shard_id, s.attempt) is ReportResult.Accepted

    snap = threading.Thread(target=snapshotter)
    snap.start()
    ts = [threading.Thread(target=work, args=(i,)) for i in range(n_workers)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)
    stop.set()
    snap.join()
    assert not bad
    assert q.is_complete()
    q.check_invariants()
    ref = replay(log.getvalue(), 300)
    assert all(v[0] == "DONE" for v in ref.state.values())


# -- report_done ---------------------------------------------------------------

def test_report_happy_path():
    q = queue(2, 1, "w1")
    s = q.acquire_shard("w1")
    assert q.report_done("w1", s.shard_id, 0) is ReportResult.Accepted
    assert q.shards[0].state is ShardState.DONE


def test_late_report_after_reassignment_is_fenced():
    q = queue(1, 1, "w1", "w2")
    q.acquire_shard("w1")
    assert q.reclaim_worker("w1") == [0]
    s = q.acquire_shard("w2")
    assert (s.shard_id, s.attempt) == (0, 1)
    before = q.shards[0]
    assert q.report_done("w1", 0, 0) is ReportResult.StaleAttempt
    assert q.shards[0] == before
    assert q.report_done("w2", 0, 1) is ReportResult.Accepted


def test_report_done_twice_is_stale():
    q = queue(1, 1, "w1")
    q.acquire_shard("w1")
    q.report_done("w1", 0, 0)
    assert q.report_done("w1", 0, 0) is ReportResult.StaleAttempt
    assert q.shards[0].state is ShardState.DONE


def test_report_unknown_shard():
    q = queue(1, 1, "w1")
    with pytest.raises(ProtocolError):
        q.report_done("w1", 99, 0)


def test_report_wrong_worker_is_stale():
    q = queue(1, 1, "w1", "w2")
    q.acquire_shard("w1")
    assert q.report_done("w2", 0, 0) is ReportResult.StaleAttempt


# -- reclaim -------------------------------------------------------------------

def test_reclaim_goes_to_tail():
    q = queue(3, 1, "w1")
    q.acquire_shard("w1")
    assert q.pending == [1, 2]
    assert q.reclaim_worker("w1") == [0]
    assert q.pending == [1, 2, 0]
    assert q.shards[0].attempt == 1


def test_reclaim_multiple_in_id_order():
    q = queue(5, 1, "w1", "w2")
    for _ in range(3):
        q.acquire_shard("w1")
    q.acquire_shard("w2")
    assert q.reclaim_worker("w1") == [0, 1, 2]
    assert q.pending == [4, 0, 1, 2]


def test_reclaim_idle_and_twice():
    q = queue(3, 1, "w1", "w2")
    assert q.reclaim_worker("w2") == []
    q.acquire_shard("w1")
    assert q.reclaim_worker("w1") == [0]
    assert q.reclaim_worker("w1") == []
    assert q.reclaim_worker("nobody") == []


def test_reclaimed_worker_must_reregister():
    q = queue(3, 1, "w1")
    q.reclaim_worker("w1")
    with pytest.raises(WorkerRejected):
        q.acquire_shard("w1")


# -- progress / completion ----------------------------------------------------

def test_progress_counts():
    q = queue(3, 1, "w1")
    p = q.progress()
    assert (p.total, p.todo, p.doing, p.done) == (3, 3, 0, 0)
    q.acquire_shard("w1")
    p = q.progress()
    assert (p.todo, p.doing, p.done) == (2, 1, 0)


def test_is_complete():
    q = queue(2, 1, "w1")
    a = q.acquire_shard("w1")
    b = q.acquire_shard("w1")
    q.report_done("w1", a.shard_id, 0)
    assert not q.is_complete()  # pending empty, one DOING
    q.report_done("w1", b.shard_id, 0)
    assert q.is_complete()
    assert q.progress().per_worker_done == {"w1": 2}


# -- even partition -------------------------------------------------------------

def test_even_partition_contiguous_slots():
    q = queue(8, 1, "a", "b", mode=ShardingMode.EvenPartition, even_slots=2)
    got = {"a": [], "b": []}
    for w in got:
        while (s := q.acquire_shard(w)) is not EXHAUSTED:
            got[w].append(s.shard_id)
    assert got == {"a": [0, 1, 2, 3], "b": [4, 5, 6, 7]}


def test_even_partition_no_stealing_and_adoption():
    q = queue(4, 1, "a", "b", mode=ShardingMode.EvenPartition, even_slots=2)
    q.acquire_shard("a")
    for sid in (2, 3):
        s = q.acquire_shard("b")
        assert s.shard_id == sid
        q.report_done("b", sid, 0)
    assert q.acquire_shard("b") is EXHAUSTED  # a's slot still has shard 1
    q.reclaim_worker("a")
    q.register_worker("c")  # replacement adopts a's slot
    assert [q.acquire_shard("c").shard_id for _ in range(2)] == [1, 0]


# -- random interleavings --------------------------------------------------------

class ShardProtocolMachine(RuleBasedStateMachine):
    WORKERS = ("w0", "w1", "w2")

    def __init__(self):
        super().__init__()
        self.q = ShardQueue.partition(13, 2)
        self.ref = ReferenceQueue(len(self.q.shards))
        self.held = []  # (worker, shard_id, attempt) ever handed out
        self.done_once = set()

    def _do(self, op, **args):
        result = getattr(self.q, op)(**args)
        if result is EXHAUSTED:
            got = "Exhausted"
        elif hasattr(result, "shard_id"):
            got = {"shard_id": result.shard_id, "attempt": result.attempt}
        elif isinstance(result, ReportResult):
            got = result.value
        elif result is None:
            got = "ok"
        else:
            got = result
        assert got == self.ref.apply(op, args)
        return result

    @rule(w=st.sampled_from(WORKERS))
    def register(self, w):
        self._do("register_worker", worker=w)

    @rule(w=st.sampled_from(WORKERS))
    def acquire(self, w):
        if not self.q.is_registered(w):
            with pytest.raises(WorkerRejected):
                self.q.acquire_shard(w)
            return
        s = self._do("acquire_shard", worker=w)
        if s is not EXHAUSTED:
            self.held.append((w, s.shard_id, s.attempt))

    @precondition(lambda self: self.held)
    @rule(i=st.integers(0, 10_000))
    def report(self, i):
        w, sid, att = self.held[i % len(self.held)]
        before = self.q.shards[sid]
        r = self._do("report_done", worker=w, shard_id=sid, attempt=att)
        if r is ReportResult.Accepted:
            assert sid not in self.done_once
            self.done_once.add(sid)
        else:
            assert self.q.shards[sid] == before

    @rule(w=st.sampled_from(WORKERS))
    def reclaim(self, w):
        self._do("reclaim_worker", worker=w)

    @invariant()
    def conserved(self):
        self.q.check_invariants()
        p = self.q.progress()
        assert p.todo + p.doing + p.done == p.total
        assert {s for s in self.q.done} == self.done_once


TestShardProtocol = ShardProtocolMachine.TestCase
TestShardProtocol.settings = settings(max_examples=200, stateful_step_count=50, deadline=None)
