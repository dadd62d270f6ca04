"""Asynchronous save pipeline and in-memory redundancy.

The training side stages compressed checkpoint blobs into a slot region
(a memory-mapped file holding K slots per rank); a background agent
drains VALID slots into the on-disk store. Recovery gathers each rank's
newest valid iteration and restarts everyone from the newest iteration
valid on all ranks, pruning anything newer.

Ranks are simulated as independent workers in one process group on one
machine; each rank persists into its own store root under a shared
parent. The "all-gather" is a blocking collection of RankReports.
"""

from __future__ import annotations

import hashlib
import mmap
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import faults, store
from .store import StoreConfig

REGION_MAGIC = b"BSSL"
REGION_VERSION = 1
REGION_HEADER = struct.Struct("<4sHIIQ")  # magic, version, ranks, K, capacity
SLOT_HEADER = struct.Struct("<BQQQ")  # state, iteration, length, checksum

STATE_EMPTY = 0
STATE_WRITING = 1
STATE_VALID = 2
STATE_PERSISTED = 3

STATE_NAMES = {0: "EMPTY", 1: "WRITING", 2: "VALID", 3: "PERSISTED"}


class EngineError(RuntimeError):
    pass


class StaleIterationError(EngineError):
    pass


class BackpressureError(EngineError):
    """All slots are pending persist; caller must wait for the agent."""


class PayloadTooLargeError(EngineError):
    pass


class ColdStartError(EngineError):
    """No iteration is valid on every rank; restart from scratch."""


def checksum(payload: bytes) -> int:
    """64-bit blake2b digest of a staged payload."""
    return int.from_bytes(
        hashlib.blake2b(payload, digest_size=8).digest(), "little"
    )


# Digest of the empty payload, for reference and tests.
EMPTY_CHECKSUM = checksum(b"")


@dataclass(frozen=True)
class SlotInfo:
    rank: int
    index: int
    state: int
    iteration: int
    length: int
    checksum: int

    @property
    def state_name(self) -> str:
        return STATE_NAMES.get(self.state, f"?{self.state}")


@dataclass(frozen=True)
class RankReport:
    rank: int
    latest_valid_iteration: int | None


class SlotRegion:
    """K fixed-capacity checkpoint slots per rank, in a memory-mapped file."""

    def __init__(self, path: Path, file, mm, ranks: int, redundancy: int,
                 capacity: int):
        self.path = Path(path)
        self._file = file
        self._mm = mm
        self.ranks = ranks
        self.redundancy = redundancy
        self.capacity = capacity
        self._lock = threading.Lock()

    # ---- lifecycle ----

    @classmethod
    def create(cls, path, ranks: int, redundancy: int, capacity: int) -> "SlotRegion":
        if ranks < 1 or redundancy < 1 or capacity < 1:
            raise EngineError("ranks, redundancy and capacity must be >= 1")
        path = Path(path)
        slot_bytes = SLOT_HEADER.size + capacity
        total = REGION_HEADER.size + ranks * redundancy * slot_bytes
        with open(path, "wb") as f:
            f.write(REGION_HEADER.pack(REGION_MAGIC, REGION_VERSION, ranks,
                                       redundancy, capacity))
            f.write(b"\x00" * (total - REGION_HEADER.size))
        return cls.open(path)

    @classmethod
    def open(cls, path) -> "SlotRegion":
        path = Path(path)
        f = open(path, "r+b")
        mm = mmap.mmap(f.fileno(), 0)
        magic, version, ranks, redundancy, capacity = REGION_HEADER.unpack_from(mm, 0)
        if magic != REGION_MAGIC:
            f.close()
            raise EngineError(f"bad slot-region magic {magic!r}")
        if version != REGION_VERSION:
            f.close()
            raise EngineError(f"unsupported slot-region version {version}")
        return cls(path, f, mm, ranks, redundancy, capacity)

    def close(self) -> None:
        self._mm.close()
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ---- slot addressing ----

    def _slot_offset(self, rank: int, index: int) -> int:
        slot_bytes = SLOT_HEADER.size + self.capacity
        return REGION_HEADER.size + (rank * self.redundancy + index) * slot_bytes

    def slot(self, rank: int, index: int) -> SlotInfo:
        off = self._slot_offset(rank, index)
        state, iteration, length, digest = SLOT_HEADER.unpack_from(self._mm, off)
        return SlotInfo(rank, index, state, iteration, length, digest)

    def slots(self, rank: int) -> list[SlotInfo]:
        return [self.slot(rank, i) for i in range(self.redundancy)]

    def all_slots(self) -> list[SlotInfo]:
        return [s for r in range(self.ranks) for s in self.slots(r)]

    def payload(self, rank: int, index: int) -> bytes:
        info = self.slot(rank, index)
        off = self._slot_offset(rank, index) + SLOT_HEADER.size
        return bytes(self._mm[off : off + info.length])

    def _write_header(self, rank: int, index: int, state: int, iteration: int,
                      length: int, digest: int) -> None:
        SLOT_HEADER.pack_into(self._mm, self._slot_offset(rank, index), state,
                              iteration, length, digest)

    def set_state(self, rank: int, index: int, state: int) -> None:
        info = self.slot(rank, index)
        self._write_header(rank, index, state, info.iteration, info.length,
                           info.checksum)

    def clear_slot(self, rank: int, index: int) -> None:
        self._write_header(rank, index, STATE_EMPTY, 0, 0, 0)

    def verify(self, rank: int, index: int) -> bool:
        info = self.slot(rank, index)
        if info.state not in (STATE_VALID, STATE_PERSISTED):
            return False
        return checksum(self.payload(rank, index)) == info.checksum

    # ---- producer side ----

    def stage(self, rank: int, payload: bytes, iteration: int) -> SlotInfo:
        """Copy a compressed checkpoint into a slot and mark it VALID.

        Returns once the bytes and checksum are recorded; persistence
        happens in the background, so caller-observed latency excludes
        disk time. Evicts the oldest already-persisted slot when the ring
        is full; if every slot is still pending persist, raises
        BackpressureError.
        """
        if len(payload) > self.capacity:
            raise PayloadTooLargeError(
                f"payload of {len(payload)} bytes exceeds slot capacity "
                f"{self.capacity}"
            )
        with self._lock:
            slots = self.slots(rank)
            staged = [s for s in slots if s.state != STATE_EMPTY]
            if staged and iteration <= max(s.iteration for s in staged):
                raise StaleIterationError(
                    f"rank {rank}: iteration {iteration} is not newer than "
                    f"staged {max(s.iteration for s in staged)}"
                )
            empty = [s for s in slots if s.state == STATE_EMPTY]
            if empty:
                target = empty[0]
            else:
                persisted = [s for s in slots if s.state == STATE_PERSISTED]
                if not persisted:
                    raise BackpressureError(
                        f"rank {rank}: all {self.redundancy} slots pending persist"
                    )
                target = min(persisted, key=lambda s: s.iteration)
            idx = target.index
            self._write_header(rank, idx, STATE_WRITING, iteration, len(payload), 0)
            off = self._slot_offset(rank, idx) + SLOT_HEADER.size
            self._mm[off : off + len(payload)] = payload
            faults.trip("engine.stage.slot-written")
            digest = checksum(payload)
            self._write_header(rank, idx, STATE_VALID, iteration, len(payload),
                               digest)
            faults.trip("engine.stage.slot-valid")
            return self.slot(rank, idx)


def rank_store(parent_root, rank: int, **cfg_kwargs) -> StoreConfig:
    """Each simulated rank persists into its own store root."""
    return StoreConfig(root=Path(parent_root) / f"rank_{rank:02d}", **cfg_kwargs)


class AsyncAgent:
    """Background consumer that persists VALID slots through the store."""

    def __init__(self, region: SlotRegion, store_root, poll_interval: float = 0.01,
                 **store_kwargs):
        self.region = region
        self.store_root = Path(store_root)
        self.poll_interval = poll_interval
        self.store_kwargs = store_kwargs
        self.errors: list[str] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def rank_config(self, rank: int) -> StoreConfig:
        return rank_store(self.store_root, rank, **self.store_kwargs)

    def persist_once(self) -> int:
        """Persist every currently VALID slot, oldest iteration first per
        rank. Returns the number of slots persisted."""
        done = 0
        for rank in range(self.region.ranks):
            pending = sorted(
                (s for s in self.region.slots(rank) if s.state == STATE_VALID),
                key=lambda s: s.iteration,
            )
            for info in pending:
                if not self.region.verify(rank, info.index):
                    self.errors.append(
                        f"rank {rank} iteration {info.iteration}: checksum mismatch"
                    )
                    continue
                blob = self.region.payload(rank, info.index)
                cfg = self.rank_config(rank)
                try:
                    manifest, tensors = store.unpack_blob(blob)
                    store.commit(cfg, manifest, tensors)
                    faults.trip("engine.persist.committed")
                except faults.CrashPoint:
                    raise
                except Exception as exc:  # keep slot VALID for retry
                    self.errors.append(
                        f"rank {rank} iteration {info.iteration}: {exc}"
                    )
                    continue
                self.region.set_state(rank, info.index, STATE_PERSISTED)
                done += 1
        return done

    def persist_loop(self) -> None:
        while not self._stop.is_set():
            if self.persist_once() == 0:
                self._stop.wait(self.poll_interval)

    def start(self) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self.persist_loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def drain(self, timeout: float = 30.0) -> None:
        """Block until no VALID slot remains (for tests and shutdown)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not any(s.state == STATE_VALID for s in self.region.all_slots()):
                return
            time.sleep(0.002)
        raise EngineError("timed out waiting for agent to drain slots")


def gather_reports(region: SlotRegion, store_root) -> list[RankReport]:
    """Simulated all-gather: each rank's newest valid iteration, looking at
    both its memory slots and its on-disk store."""
    reports = []
    for rank in range(region.ranks):
        valid = valid_iterations(region, store_root, rank)
        reports.append(RankReport(rank, max(valid) if valid else None))
    return reports


def valid_iterations(region: SlotRegion, store_root, rank: int) -> set[int]:
    valid = {
        s.iteration
        for s in region.slots(rank)
        if s.state in (STATE_VALID, STATE_PERSISTED)
        and region.verify(rank, s.index)
    }
    cfg = rank_store(store_root, rank)
    tracker = store.try_read_tracker(cfg)
    if tracker is not None:
        valid.update(
            it for it in store.list_iterations(cfg)
            if it <= tracker.latest_iteration
        )
    return valid


@dataclass
class RecoveryDecision:
    chosen_iteration: int
    reports: list[RankReport]
    pruned: list[tuple[int, int]] = field(default_factory=list)  # (rank, iteration)
    trace: list[str] = field(default_factory=list)


def recover(reports: list[RankReport], region: SlotRegion, store_root) -> RecoveryDecision:
    """Pick the newest iteration every rank holds a valid copy of, and
    prune everything newer from memory and disk.

    Raises ColdStartError when no common iteration exists.
    """
    trace = [
        "all-gather reports: "
        + " ".join(
            f"rank{r.rank}="
            + ("none" if r.latest_valid_iteration is None else str(r.latest_valid_iteration))
            for r in sorted(reports, key=lambda r: r.rank)
        )
    ]
    per_rank = {
        rank: valid_iterations(region, store_root, rank)
        for rank in range(region.ranks)
    }
    common = set.intersection(*per_rank.values()) if per_rank else set()
    if not common:
        trace.append("no iteration valid on all ranks: cold start")
        raise ColdStartError("no iteration is valid on every rank")
    chosen = max(common)
    trace.append(f"consensus iteration: {chosen}")

    pruned = []
    for rank in range(region.ranks):
        for s in region.slots(rank):
            if s.state != STATE_EMPTY and s.iteration > chosen:
                region.clear_slot(rank, s.index)
                pruned.append((rank, s.iteration))
        for it in store.prune_above(rank_store(store_root, rank), chosen):
            pruned.append((rank, it))
    for rank, it in sorted(set(pruned)):
        trace.append(f"pruned iteration {it} on rank {rank}")
    trace.append(f"recovering from iteration {chosen}")
    return RecoveryDecision(chosen, list(reports), sorted(set(pruned)), trace)


def status_report(region: SlotRegion) -> str:
    lines = [
        f"slot region {region.path}: {region.ranks} ranks x "
        f"{region.redundancy} slots, capacity {region.capacity} bytes"
    ]
    for s in region.all_slots():
        lines.append(
            f"rank {s.rank} slot {s.index}: {s.state_name:9s} "
            f"iteration={s.iteration} length={s.length}"
        )
    return "\n".join(lines)
