"""Crash-point injection hooks for consistency testing.

Production code calls trip(point) at each step that a crash could
interleave with; tests install a hook that raises CrashPoint at a chosen
point and then verify the store still recovers. With no hook installed
the calls are no-ops.
"""

from __future__ import annotations

from typing import Callable, Optional

# Every named crash point in the save/stage/persist pipeline, in pipeline
# order. Tests sweep this list exhaustively.
CRASH_POINTS = (
    "store.dir.tensors-written",
    "store.dir.manifest-written",
    "store.dir.type-written",
    "store.dir.renamed",
    "store.tracker.temp-written",
    "store.tracker.renamed",
    "engine.stage.slot-written",
    "engine.stage.slot-valid",
    "engine.persist.committed",
)


class CrashPoint(Exception):
    def __init__(self, point: str):
        super().__init__(f"injected crash at {point}")
        self.point = point


_hook: Optional[Callable[[str], None]] = None


def set_crash_hook(fn: Optional[Callable[[str], None]]) -> None:
    global _hook
    _hook = fn


def crash_at(point: str) -> None:
    """Install a hook that raises the first time `point` is reached."""

    def hook(p: str) -> None:
        if p == point:
            set_crash_hook(None)
            raise CrashPoint(p)

    set_crash_hook(hook)


def clear() -> None:
    set_crash_hook(None)


def trip(point: str) -> None:
    if _hook is not None:
        _hook(point)
