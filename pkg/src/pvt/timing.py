"""Per-stage wall-clock accounting.

The structuring fraction is the share of runtime spent turning an
unordered cloud into attention-ready structure and back: voxelize,
rule-book construction, and devoxelize, divided by the total over all
recorded stages.
"""

from __future__ import annotations

import time
from contextlib import contextmanager, nullcontext

STRUCTURING_STAGES = ("voxelize", "rulebook", "devoxelize")


class StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.seconds[name] = self.seconds.get(name, 0.0) + elapsed

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    def structuring_fraction(self) -> float:
        total = self.total
        if total == 0.0:
            return 0.0
        structuring = sum(self.seconds.get(s, 0.0) for s in STRUCTURING_STAGES)
        return structuring / total


def stage(timer: StageTimer | None, name: str):
    """Context manager that is a no-op when no timer is attached."""
    return nullcontext() if timer is None else timer.stage(name)
