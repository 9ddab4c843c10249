"""Bounded channels connecting simulated rank workers.

The only inter-rank communication path.  A channel can be killed to model a
dead neighbor: senders and receivers then fail with TransportFailure.
"""

from __future__ import annotations

import queue
import threading

from .errors import TransportFailure

_POLL_S = 0.02


class InProcChannel:
    """Thread-safe bounded queue with kill semantics."""

    def __init__(self, capacity: int = 2, name: str = ""):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._dead = threading.Event()
        self._reason = ""
        self.name = name

    def kill(self, reason: str) -> None:
        self._reason = reason
        self._dead.set()

    @property
    def dead(self) -> bool:
        return self._dead.is_set()

    def put(self, item) -> None:
        while True:
            if self._dead.is_set():
                raise TransportFailure(self._reason or f"channel {self.name} dead")
            try:
                self._q.put(item, timeout=_POLL_S)
                return
            except queue.Full:
                continue

    def get(self, stop: threading.Event | None = None):
        """Blocking get; raises TransportFailure if killed (or ``stop`` set) and drained."""
        while True:
            drained_dead = self._dead.is_set() or (stop is not None and stop.is_set())
            if drained_dead and self._q.empty():
                raise TransportFailure(self._reason or f"channel {self.name} stopped")
            try:
                return self._q.get(timeout=_POLL_S)
            except queue.Empty:
                continue


class MemoryTracker:
    """High-water accounting of payload bytes resident in one worker."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.high_water = 0

    def acquire(self, nbytes: int) -> None:
        with self._lock:
            self.current += nbytes
            if self.current > self.high_water:
                self.high_water = self.current

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes
