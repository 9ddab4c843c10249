"""Throttleable filesystem shim: token-bucket rate limits over local dirs.

A shared limiter over one directory plays the parallel file system; one
limiter per synthetic node plays that node's burst buffer.  Pacing is
cumulative — concurrent real work refills the budget — so the elapsed time
of a write stream converges to max(real time, bytes / rate).
"""

from __future__ import annotations

import threading
import time
from pathlib import Path

from .errors import IoFailure

CHUNK = 1 << 20  # acquire granularity; keeps concurrent writers interleaved


class RateLimiter:
    """Token pacing for a byte stream shared by any number of workers."""

    def __init__(self, rate_bytes_per_sec: float | None):
        if rate_bytes_per_sec is not None and rate_bytes_per_sec <= 0:
            raise ValueError("rate must be positive or None")
        self.rate = rate_bytes_per_sec
        self._lock = threading.Lock()
        self._t_next = time.monotonic()

    def acquire(self, nbytes: int) -> None:
        if self.rate is None or nbytes <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = self._t_next if self._t_next > now else now
            self._t_next = start + nbytes / self.rate
            deadline = self._t_next
        delay = deadline - time.monotonic()
        if delay > 0:
            time.sleep(delay)


class ThrottledSink:
    """File sink that charges a limiter per chunk written."""

    def __init__(self, path: Path, limiter: RateLimiter | None):
        self.path = path
        self._limiter = limiter
        try:
            self._f = open(path, "ab")
        except OSError as exc:
            raise IoFailure(f"open {path}: {exc}") from exc

    def write(self, data: bytes) -> None:
        view = memoryview(data)
        for off in range(0, len(view), CHUNK):
            chunk = view[off:off + CHUNK]
            if self._limiter is not None:
                self._limiter.acquire(len(chunk))
            self._f.write(chunk)

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        self._f.close()


class StorageTarget:
    """One directory behind one limiter (a PFS or one node's burst buffer)."""

    def __init__(self, root, limiter: RateLimiter | None = None, name: str = ""):
        self.root = Path(root)
        self.limiter = limiter
        self.name = name or str(root)

    def ensure(self) -> "StorageTarget":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def open_sink(self, relpath: str) -> ThrottledSink:
        if not self.root.is_dir():
            raise IoFailure(f"storage dir not found: {self.root}")
        return ThrottledSink(self.root / relpath, self.limiter)

    def copy_in(
        self,
        src: Path,
        relpath: str,
        offset: int = 0,
        length: int | None = None,
        extra_limiter: RateLimiter | None = None,
    ) -> int:
        """Copy a byte range of ``src`` into this target, charging its limiter.

        Appends at the destination's current end; returns bytes copied.
        """
        dst = self.root / relpath
        copied = 0
        try:
            with open(src, "rb") as fin, open(dst, "ab") as fout:
                fin.seek(offset)
                remaining = length
                while True:
                    n = CHUNK if remaining is None else min(CHUNK, remaining)
                    if n <= 0:
                        break
                    data = fin.read(n)
                    if not data:
                        break
                    if self.limiter is not None:
                        self.limiter.acquire(len(data))
                    if extra_limiter is not None:
                        extra_limiter.acquire(len(data))
                    fout.write(data)
                    copied += len(data)
                    if remaining is not None:
                        remaining -= len(data)
                fout.flush()
        except OSError as exc:
            raise IoFailure(f"copy {src} -> {dst}: {exc}") from exc
        return copied
