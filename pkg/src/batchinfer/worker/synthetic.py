"""Synthetic model execution with cooperative cancellation and timeout-retry."""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, TypeVar, Union

from ..core import ErrorKind, TolerableError, keyed_uniform
from .spec import PredictorNode

T = TypeVar("T")


@dataclass(frozen=True)
class Item:
    """One unit flowing through the predictor DAG.

    ``lineage`` is the path of (node_id, emission index) pairs that produced
    it from its origin record; it orders segments at the ensemble point and
    keys every random draw, so results do not depend on batching.
    """

    origin: int
    lineage: tuple = ()
    payload: bytes = b""


class BatchTimeout(Exception):
    pass


class Halted(Exception):
    """The worker was killed or stopped while a batch was running."""


class Attempt:
    """Execution context for one try of one batch.

    Sleeps are interruptible by the worker's halt event and bounded by the
    attempt deadline, which stands in for a watchdog killing a stuck executor.
    """

    def __init__(self, halt: threading.Event, time_scale: float, timeout_ms: float = 0.0, speed: float = 1.0):
        self.halt = halt
        self.time_scale = time_scale
        self.speed = speed
        self.hang_now = False
        self.deadline = time.monotonic() + timeout_ms * time_scale / 1000.0 if timeout_ms > 0 else None

    def _wait(self, secs: Optional[float]) -> None:
        if self.deadline is not None:
            left = self.deadline - time.monotonic()
            if secs is None or secs >= left:
                if self.halt.wait(max(left, 0.0)):
                    raise Halted()
                raise BatchTimeout()
        if secs is None:
            while not self.halt.wait(1.0):
                pass
            raise Halted()
        if secs > 0 and self.halt.wait(secs):
            raise Halted()
        if self.halt.is_set():
            raise Halted()

    def work(self, sim_ms: float) -> None:
        """Spend ``sim_ms`` of nominal work, stretched by the node speed factor."""
        self._wait(sim_ms * self.time_scale / 1000.0 / self.speed)

    def hang(self) -> None:
        self._wait(None)


def derive_payload(node_id: str, index: int, payload: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    h.update(node_id.encode())
    h.update(index.to_bytes(4, "little"))
    h.update(payload)
    return h.digest()


Outcome = Union[list, TolerableError]


def model_outputs(node: PredictorNode, item: Item, seed: int) -> Outcome:
    """Deterministic per-item result of a synthetic model: outputs or an error."""
    m = node.model
    if m.failure_rate > 0 and keyed_uniform(seed, "fail", node.node_id, item.origin, item.lineage) < m.failure_rate:
        return TolerableError(ErrorKind.InferenceError, f"{node.node_id}: synthetic inference failure on record {item.origin}")
    k = m.fanout.draw(keyed_uniform(seed, "fanout", node.node_id, item.origin, item.lineage))
    nid = node.node_id
    return [Item(item.origin, item.lineage + ((nid, j),), derive_payload(nid, j, item.payload)) for j in range(k)]


def execute_batch(node: PredictorNode, batch: list, attempt: Attempt, seed: int, hang: bool = False) -> list:
    """Run one batch; returns one Outcome per input, in input order."""
    if not batch:
        raise ValueError("batch must not be empty")
    if hang:
        attempt.hang()
    attempt.work(node.model.cost_per_record * len(batch))
    return [model_outputs(node, it, seed) for it in batch]


DEGRADED = object()


def timeout_retry(
    run: Callable[[Attempt], T],
    make_attempt: Callable[[], Attempt],
    max_retries: int,
    on_restart: Optional[Callable[[], None]] = None,
) -> Union[T, object]:
    """Run ``run`` until it finishes within its deadline.

    Every timeout counts as one executor restart. After ``max_retries``
    timeouts the batch is given up and DEGRADED is returned so the caller can
    emit per-record Timeout errors. Halted propagates.
    """
    exceeded = 0
    while True:
        try:
            return run(make_attempt())
        except BatchTimeout:
            exceeded += 1
            if on_restart is not None:
                on_restart()
            if exceeded >= max(max_retries, 1):
                return DEGRADED
