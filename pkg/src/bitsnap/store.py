"""On-disk layout and lifecycle of base/delta checkpoint chains.

Layout under the store root:

    latest_checkpointed_iteration.txt   tracker: latest iteration, then
                                        latest base iteration (two lines)
    iter_<7-digit>/type.txt             "base" or "delta" plus newline
    iter_<7-digit>/manifest.bin         per-tensor index into tensors.bin
    iter_<7-digit>/tensors.bin          concatenated encoded tensors

Every mutation is temp-file-then-rename; the tracker rename is the commit
point, so readers never observe a torn store. One writer at a time holds
an advisory lock file; readers need no coordination.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

from filelock import FileLock

from . import faults
from .bitmask import (
    DeltaRecord,
    decode_delta,
    deserialize_delta,
    encode_delta,
    serialize_delta,
)
from .quantizer import (
    build_clusters,
    dequantize,
    deserialize_quantized,
    quantize,
    serialize_quantized,
)
from .tensors import (
    Checkpoint,
    TensorBlob,
    deserialize_tensor,
    serialize_tensor,
)

TRACKER_NAME = "latest_checkpointed_iteration.txt"
LOCK_NAME = ".lock"
NEEDS_BASE_MARKER = ".needs_base"
DIR_PREFIX = "iter_"
DIR_DIGITS = 7

BLOB_MAGIC = b"BSBL"
BLOB_VERSION = 1

KIND_BASE = "base"
KIND_DELTA = "delta"

CODEC_RAW = "RAW"
CODEC_DELTA = "DELTA"
CODEC_QUANT = "QUANT"


class StoreError(RuntimeError):
    pass


class TrackerError(StoreError):
    pass


class MissingLinkError(StoreError):
    def __init__(self, iteration: int):
        super().__init__(f"checkpoint chain broken: iteration {iteration} missing")
        self.iteration = iteration


class MissingPreviousError(StoreError):
    pass


@dataclass
class StoreConfig:
    root: Path
    max_cached_iteration: int = 1  # checkpoints between base refreshes
    redundancy_depth: int = 2  # K staged iterations kept in memory
    quantizer_clusters: int = 16

    def __post_init__(self):
        self.root = Path(self.root)
        if self.effective_max_cached() < 1:
            raise StoreError("max_cached_iteration must be >= 1")
        if self.redundancy_depth < 1:
            raise StoreError("redundancy depth must be >= 1")

    def effective_max_cached(self) -> int:
        env = os.environ.get("MAX_CACHED_ITERATION")
        if env is not None:
            return int(env)
        return self.max_cached_iteration

    def tracker_path(self) -> Path:
        return self.root / TRACKER_NAME

    def iter_dir(self, iteration: int) -> Path:
        return self.root / f"{DIR_PREFIX}{iteration:0{DIR_DIGITS}d}"

    def lock(self) -> FileLock:
        return FileLock(str(self.root / LOCK_NAME))


@dataclass(frozen=True)
class TrackerState:
    latest_iteration: int
    latest_base_iteration: int

    def __post_init__(self):
        if self.latest_base_iteration > self.latest_iteration:
            raise TrackerError("base iteration is newer than latest iteration")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    group: str  # "model" | "optimizer"
    codec: str  # RAW | DELTA | QUANT
    offset: int
    length: int


@dataclass(frozen=True)
class CheckpointManifest:
    iteration: int
    kind: str  # base | delta
    base_iteration: int  # equals iteration for a base checkpoint
    tensors: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if self.kind not in (KIND_BASE, KIND_DELTA):
            raise StoreError(f"unknown checkpoint kind {self.kind!r}")
        if self.kind == KIND_DELTA and self.base_iteration >= self.iteration:
            raise StoreError("delta checkpoint must reference an older base")
        if self.kind == KIND_BASE and self.base_iteration != self.iteration:
            raise StoreError("base checkpoint must reference itself")
        for e in self.tensors:
            if e.group == "model" and e.codec not in (CODEC_RAW, CODEC_DELTA):
                raise StoreError(f"model tensor {e.name!r} has codec {e.codec}")
            if e.group == "optimizer" and e.codec not in (CODEC_QUANT, CODEC_RAW):
                raise StoreError(f"optimizer tensor {e.name!r} has codec {e.codec}")

    def to_bytes(self) -> bytes:
        doc = {
            "iteration": self.iteration,
            "kind": self.kind,
            "base_iteration": self.base_iteration,
            "tensors": [vars(e) for e in self.tensors],
        }
        return json.dumps(doc, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, b: bytes) -> "CheckpointManifest":
        try:
            doc = json.loads(b.decode("utf-8"))
            return cls(
                iteration=doc["iteration"],
                kind=doc["kind"],
                base_iteration=doc["base_iteration"],
                tensors=tuple(ManifestEntry(**e) for e in doc["tensors"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreError(f"corrupt manifest: {exc}") from exc


# --------------------------------------------------------------------------
# Tracker file
# --------------------------------------------------------------------------

def write_tracker(cfg: StoreConfig, state: TrackerState) -> None:
    path = cfg.tracker_path()
    tmp = path.with_suffix(".tmp")
    tmp.write_text(f"{state.latest_iteration}\n{state.latest_base_iteration}\n")
    faults.trip("store.tracker.temp-written")
    os.replace(tmp, path)
    faults.trip("store.tracker.renamed")


def read_tracker(cfg: StoreConfig) -> TrackerState:
    path = cfg.tracker_path()
    if not path.exists():
        raise TrackerError(f"tracker file not found at {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise TrackerError(f"malformed tracker file at {path}")
    try:
        return TrackerState(int(lines[0]), int(lines[1]))
    except ValueError as exc:
        raise TrackerError(f"malformed tracker file at {path}: {exc}") from exc


def try_read_tracker(cfg: StoreConfig):
    try:
        return read_tracker(cfg)
    except TrackerError:
        return None


# --------------------------------------------------------------------------
# Encoding a checkpoint into manifest + tensors blob
# --------------------------------------------------------------------------

def encode_checkpoint(
    ckpt: Checkpoint,
    prev: Checkpoint | None,
    kind: str,
    clusters: int = 16,
) -> tuple[CheckpointManifest, bytes]:
    """Compress a checkpoint into its on-disk representation.

    Base checkpoints store model states raw; delta checkpoints store them
    as bitmask deltas against prev, falling back to raw whenever the
    delta would not be smaller. Optimizer states are always quantized.
    """
    if kind == KIND_DELTA:
        if prev is None:
            raise MissingPreviousError(
                f"delta save at iteration {ckpt.iteration} needs the previous "
                "reconstructed checkpoint"
            )
        prev_map = {t.name: t for t in prev.model_states}
        if set(prev_map) != {t.name for t in ckpt.model_states}:
            raise StoreError("model-state structure differs from previous checkpoint")

    entries = []
    chunks = []
    offset = 0

    def add(name: str, group: str, codec: str, blob: bytes) -> None:
        nonlocal offset
        entries.append(
            ManifestEntry(name=name, group=group, codec=codec, offset=offset,
                          length=len(blob))
        )
        chunks.append(blob)
        offset += len(blob)

    for t in ckpt.model_states:
        if kind == KIND_BASE:
            add(t.name, "model", CODEC_RAW, serialize_tensor(t))
        else:
            rec = encode_delta(prev_map[t.name], t)
            raw = serialize_tensor(t)
            encoded = serialize_delta(rec)
            if len(encoded) < len(raw):
                add(t.name, "model", CODEC_DELTA, encoded)
            else:
                add(t.name, "model", CODEC_RAW, raw)

    for t in ckpt.optimizer_states:
        q = quantize(t, build_clusters(t, clusters))
        add(t.name, "optimizer", CODEC_QUANT, serialize_quantized(q))

    base_iter = ckpt.iteration if kind == KIND_BASE else prev.iteration
    manifest = CheckpointManifest(
        iteration=ckpt.iteration,
        kind=kind,
        base_iteration=base_iter,
        tensors=tuple(entries),
    )
    return manifest, b"".join(chunks)


def pack_blob(manifest: CheckpointManifest, tensors: bytes) -> bytes:
    """Self-contained staging payload: what the async agent persists."""
    mbytes = manifest.to_bytes()
    return b"".join([
        BLOB_MAGIC,
        struct.pack("<H", BLOB_VERSION),
        struct.pack("<Q", manifest.iteration),
        struct.pack("<Q", len(mbytes)),
        struct.pack("<Q", len(tensors)),
        mbytes,
        tensors,
    ])


def unpack_blob(blob: bytes) -> tuple[CheckpointManifest, bytes]:
    if blob[:4] != BLOB_MAGIC:
        raise StoreError(f"bad blob magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != BLOB_VERSION:
        raise StoreError(f"unsupported blob version {version}")
    _, mlen, tlen = struct.unpack_from("<QQQ", blob, 6)
    body = blob[30:]
    if len(body) != mlen + tlen:
        raise StoreError("truncated staging blob")
    return CheckpointManifest.from_bytes(body[:mlen]), body[mlen : mlen + tlen]


# --------------------------------------------------------------------------
# Commit / save / load
# --------------------------------------------------------------------------

def decide_kind(cfg: StoreConfig, iteration: int) -> str:
    """Base-refresh policy: a base, then max_cached_iteration - 1 deltas.

    Counts checkpoints saved since the last base (robust to irregular
    save cadence); a failed delta save also forces the next save to be a
    base via the needs-base marker.
    """
    if (cfg.root / NEEDS_BASE_MARKER).exists():
        return KIND_BASE
    tracker = try_read_tracker(cfg)
    if tracker is None:
        return KIND_BASE
    since_base = sum(
        1 for it in list_iterations(cfg) if it >= tracker.latest_base_iteration
    )
    if since_base >= cfg.effective_max_cached():
        return KIND_BASE
    return KIND_DELTA


def list_iterations(cfg: StoreConfig) -> list[int]:
    if not cfg.root.exists():
        return []
    out = []
    for p in sorted(cfg.root.iterdir()):
        if p.is_dir() and p.name.startswith(DIR_PREFIX):
            try:
                out.append(int(p.name[len(DIR_PREFIX):]))
            except ValueError:
                continue
    return out


def commit(cfg: StoreConfig, manifest: CheckpointManifest, tensors: bytes) -> None:
    """Write one checkpoint directory and advance the tracker atomically."""
    cfg.root.mkdir(parents=True, exist_ok=True)
    final_dir = cfg.iter_dir(manifest.iteration)
    tmp_dir = cfg.root / f".tmp_{final_dir.name}"
    with cfg.lock():
        try:
            if tmp_dir.exists():
                shutil.rmtree(tmp_dir)
            tmp_dir.mkdir()
            (tmp_dir / "tensors.bin").write_bytes(tensors)
            faults.trip("store.dir.tensors-written")
            (tmp_dir / "manifest.bin").write_bytes(manifest.to_bytes())
            faults.trip("store.dir.manifest-written")
            (tmp_dir / "type.txt").write_text(manifest.kind + "\n")
            faults.trip("store.dir.type-written")
            os.replace(tmp_dir, final_dir)
            faults.trip("store.dir.renamed")

            prev_tracker = try_read_tracker(cfg)
            if manifest.kind == KIND_BASE:
                base = manifest.iteration
            else:
                base = prev_tracker.latest_base_iteration if prev_tracker else manifest.base_iteration
            write_tracker(cfg, TrackerState(manifest.iteration, base))
            marker = cfg.root / NEEDS_BASE_MARKER
            if manifest.kind == KIND_BASE and marker.exists():
                marker.unlink()
        except faults.CrashPoint:
            raise
        except Exception:
            shutil.rmtree(tmp_dir, ignore_errors=True)
            raise


def save_checkpoint(
    cfg: StoreConfig,
    ckpt: Checkpoint,
    prev: Checkpoint | None = None,
) -> CheckpointManifest:
    kind = decide_kind(cfg, ckpt.iteration)
    try:
        manifest, tensors = encode_checkpoint(
            ckpt, prev, kind, cfg.quantizer_clusters
        )
        commit(cfg, manifest, tensors)
    except faults.CrashPoint:
        raise
    except Exception:
        if kind == KIND_DELTA:
            cfg.root.mkdir(parents=True, exist_ok=True)
            (cfg.root / NEEDS_BASE_MARKER).touch()
        raise
    return manifest


def read_manifest(cfg: StoreConfig, iteration: int) -> CheckpointManifest:
    d = cfg.iter_dir(iteration)
    if not d.exists():
        raise MissingLinkError(iteration)
    manifest = CheckpointManifest.from_bytes((d / "manifest.bin").read_bytes())
    type_token = (d / "type.txt").read_text().strip()
    if type_token != manifest.kind:
        raise StoreError(
            f"iteration {iteration}: type.txt says {type_token!r} but manifest "
            f"says {manifest.kind!r}"
        )
    if manifest.iteration != iteration:
        raise StoreError(
            f"directory {d.name} holds manifest for iteration {manifest.iteration}"
        )
    return manifest


def _read_entry(cfg: StoreConfig, manifest: CheckpointManifest, entry: ManifestEntry) -> bytes:
    data = (cfg.iter_dir(manifest.iteration) / "tensors.bin").read_bytes()
    return data[entry.offset : entry.offset + entry.length]


def load_checkpoint(cfg: StoreConfig, iteration: int | None = None) -> Checkpoint:
    """Reconstruct a saved checkpoint.

    Walks back to the anchoring base, decodes it, and applies the delta
    chain in ascending order. Model states come back bitwise identical;
    optimizer states are dequantized (within the quantizer error bound).
    """
    tracker = read_tracker(cfg)
    if iteration is None:
        iteration = tracker.latest_iteration

    chain: list[CheckpointManifest] = []
    it = iteration
    while True:
        manifest = read_manifest(cfg, it)
        chain.append(manifest)
        if manifest.kind == KIND_BASE:
            break
        it = manifest.base_iteration
    chain.reverse()

    model: dict[str, TensorBlob] = {}
    model_order: list[str] = []
    for manifest in chain:
        tensors_blob = (cfg.iter_dir(manifest.iteration) / "tensors.bin").read_bytes()
        if manifest.kind == KIND_BASE:
            model_order = []
        for e in manifest.tensors:
            if e.group != "model":
                continue
            raw = tensors_blob[e.offset : e.offset + e.length]
            if e.codec == CODEC_RAW:
                model[e.name] = deserialize_tensor(raw)
            else:
                model[e.name] = decode_delta(model[e.name], deserialize_delta(raw))
            if manifest.kind == KIND_BASE:
                model_order.append(e.name)
    if not model_order:
        model_order = list(model)

    final = chain[-1]
    tensors_blob = (cfg.iter_dir(final.iteration) / "tensors.bin").read_bytes()
    optimizer = []
    for e in final.tensors:
        if e.group != "optimizer":
            continue
        raw = tensors_blob[e.offset : e.offset + e.length]
        if e.codec == CODEC_QUANT:
            optimizer.append(dequantize(deserialize_quantized(raw)))
        else:
            optimizer.append(deserialize_tensor(raw))

    return Checkpoint(
        iteration=final.iteration,
        model_states=tuple(model[name] for name in model_order),
        optimizer_states=tuple(optimizer),
    )


# --------------------------------------------------------------------------
# Inspection, recovery and pruning
# --------------------------------------------------------------------------

def inspect(cfg: StoreConfig) -> dict:
    tracker = try_read_tracker(cfg)
    checkpoints = []
    for it in list_iterations(cfg):
        try:
            manifest = read_manifest(cfg, it)
        except StoreError as exc:
            checkpoints.append({"iteration": it, "error": str(exc)})
            continue
        size = (cfg.iter_dir(it) / "tensors.bin").stat().st_size
        checkpoints.append({
            "iteration": it,
            "kind": manifest.kind,
            "base_iteration": manifest.base_iteration,
            "tensors": len(manifest.tensors),
            "tensors_bytes": size,
        })
    return {
        "root": str(cfg.root),
        "tracker": None if tracker is None else {
            "latest_iteration": tracker.latest_iteration,
            "latest_base_iteration": tracker.latest_base_iteration,
        },
        "checkpoints": checkpoints,
    }


def recover_scan(cfg: StoreConfig) -> list[str]:
    """Bring the store back to a clean committed state after a crash.

    Removes temp debris and any checkpoint directory the tracker does not
    (transitively) account for; a directory newer than the tracker was
    never committed and is pruned.
    """
    actions = []
    if not cfg.root.exists():
        return actions
    for p in list(cfg.root.iterdir()):
        if p.name.startswith(".tmp_") or p.suffix == ".tmp":
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)
            actions.append(f"removed temp {p.name}")
    tracker = try_read_tracker(cfg)
    for it in list_iterations(cfg):
        if tracker is None or it > tracker.latest_iteration:
            shutil.rmtree(cfg.iter_dir(it), ignore_errors=True)
            actions.append(f"pruned uncommitted iteration {it}")
    return actions


def prune_above(cfg: StoreConfig, iteration: int) -> list[int]:
    """Remove every checkpoint newer than `iteration` and repair the tracker."""
    pruned = []
    with cfg.lock():
        for it in list_iterations(cfg):
            if it > iteration:
                shutil.rmtree(cfg.iter_dir(it), ignore_errors=True)
                pruned.append(it)
        remaining = list_iterations(cfg)
        if remaining:
            latest = max(remaining)
            it = latest
            while True:
                manifest = read_manifest(cfg, it)
                if manifest.kind == KIND_BASE:
                    break
                it = manifest.base_iteration
            write_tracker(cfg, TrackerState(latest, it))
        else:
            cfg.tracker_path().unlink(missing_ok=True)
    return pruned
