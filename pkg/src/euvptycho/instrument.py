"""Process-wide counters: propagations, gradient passes and live buffer bytes.

The buffer registry is a proxy for device memory: code that keeps arrays
alive across a computation (tape intermediates, optimiser moments, gradient
accumulators) registers their byte size and releases it when done.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager


class Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.propagations = 0
            self.gradient_passes = 0
            self.live_bytes = 0
            self.peak_bytes = 0

    def add_propagations(self, n: int):
        with self._lock:
            self.propagations += n

    def add_gradient_pass(self):
        with self._lock:
            self.gradient_passes += 1

    def allocate(self, nbytes: int):
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def release(self, nbytes: int):
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self):
        with self._lock:
            self.peak_bytes = self.live_bytes


counters = Counters()


@contextmanager
def tracked(*arrays):
    """Register ``arrays`` as live for the duration of the block."""
    n = sum(int(getattr(a, "nbytes", 0)) for a in arrays)
    counters.allocate(n)
    try:
        yield
    finally:
        counters.release(n)
