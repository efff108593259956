"""Shared domain types, failure taxonomy, clocks and deterministic randomness."""

from __future__ import annotations

import enum
import hashlib
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

WorkerId = str


class ShardState(enum.Enum):
    TODO = "TODO"
    DOING = "DOING"
    DONE = "DONE"


_LEGAL_TRANSITIONS = frozenset(
    {
        (ShardState.TODO, ShardState.DOING),
        (ShardState.DOING, ShardState.DONE),
        (ShardState.DOING, ShardState.TODO),
    }
)


class IllegalTransition(Exception):
    pass


def check_transition(src: ShardState, dst: ShardState) -> None:
    """Raise IllegalTransition unless src -> dst is one of the three shard lifecycle edges."""
    if (src, dst) not in _LEGAL_TRANSITIONS:
        raise IllegalTransition(f"{src.value} -> {dst.value}")


def is_legal_transition(src: ShardState, dst: ShardState) -> bool:
    return (src, dst) in _LEGAL_TRANSITIONS


class FailureKind(enum.Enum):
    NetworkError = "NetworkError"
    HardwareFailure = "HardwareFailure"
    Preemption = "Preemption"
    ConfigError = "ConfigError"
    ProgramError = "ProgramError"


_RETRYABLE = frozenset(
    {FailureKind.NetworkError, FailureKind.HardwareFailure, FailureKind.Preemption}
)


def is_retryable(kind: FailureKind) -> bool:
    return kind in _RETRYABLE


class ErrorKind(enum.Enum):
    """Per-record failures that are tagged onto output rows instead of aborting work."""

    ParseError = "ParseError"
    NanValue = "NanValue"
    InferenceError = "InferenceError"
    FetchError = "FetchError"
    Timeout = "Timeout"


@dataclass(frozen=True)
class TolerableError:
    kind: ErrorKind
    message: str

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "message": self.message}

    @classmethod
    def from_json(cls, data: dict) -> "TolerableError":
        return cls(ErrorKind(data["kind"]), data["message"])


@dataclass(frozen=True)
class Shard:
    shard_id: int
    start: int
    end: int
    state: ShardState = ShardState.TODO
    assigned_worker: Optional[WorkerId] = None
    attempt: int = 0
    assigned_at: int = 0

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"empty shard range [{self.start}, {self.end})")
        if (self.assigned_worker is not None) != (self.state is ShardState.DOING):
            raise ValueError("assigned_worker must be set iff state is DOING")

    @property
    def size(self) -> int:
        return self.end - self.start

    def transition(self, dst: ShardState, **changes) -> "Shard":
        check_transition(self.state, dst)
        return replace(self, state=dst, **changes)


class ConfigurationError(ValueError):
    """Invalid job or component configuration."""


class ProtocolError(RuntimeError):
    """A caller violated a component protocol (unknown ids, wrong lifecycle)."""


# ---------------------------------------------------------------------------
# Deterministic randomness


def _component_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class SeededRng:
    """Root of a family of independent, per-component random streams.

    Streams are derived from (seed, component name) only, so the order in
    which components ask for their stream does not change what they draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, component: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64([self.seed, _component_key(component)]))


def seeded_rng(seed: int) -> SeededRng:
    return SeededRng(seed)


_U53 = float(1 << 53)


def keyed_uniform(seed: int, *keys) -> float:
    """Uniform draw in [0, 1) that depends only on (seed, keys).

    Used where draws must not depend on batching or thread interleaving,
    e.g. per-record failure and fan-out decisions.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return (int.from_bytes(h.digest(), "little") >> 11) / _U53


# ---------------------------------------------------------------------------
# Clock


class SimClock:
    """Wall-clock driven simulation time in integer milliseconds.

    Scenario time advances ``1 / time_scale`` times faster than real time, so
    a 1000 ms scripted delay takes ``1000 * time_scale`` real milliseconds.
    """

    def __init__(self, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ConfigurationError("time_scale must be > 0")
        self.time_scale = float(time_scale)
        self._t0 = time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000.0 / self.time_scale)

    def now_exact_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0 / self.time_scale

    def real_seconds(self, sim_ms: float) -> float:
        return sim_ms * self.time_scale / 1000.0

    def sleep(self, sim_ms: float, interrupt: Optional[threading.Event] = None) -> bool:
        """Sleep for sim_ms of scenario time. Returns False if interrupted."""
        secs = self.real_seconds(sim_ms)
        if interrupt is None:
            if secs > 0:
                time.sleep(secs)
            return True
        return not interrupt.wait(secs) if secs > 0 else not interrupt.is_set()


@dataclass
class Counter:
    """Thread-safe integer counter."""

    value: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, n: int = 1) -> int:
        with self._lock:
            self.value += n
            return self.value
