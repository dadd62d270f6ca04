"""Lossless delta compression of F16 model states.

A changed element is one whose raw 16-bit pattern differs from the base;
comparison is bitwise, never numeric, so NaNs and -0.0/+0.0 are handled
exactly. Changed positions are packed one bit per element (LSB-first
within each byte) and the target's values at those positions are stored
verbatim, in ascending index order. Storing target values rather than
arithmetic differences keeps reconstruction bit-exact: F16 subtraction
would round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensors import ElementType, TensorBlob, _Reader

DELTA_MAGIC = b"BSDL"
DELTA_VERSION = 1

# Serialized header for an empty name and rank-1 shape:
# magic(4) + version(2) + n(8) + n_c(8) + name_len(2) + rank(1) + extent(8)
DELTA_FIXED_OVERHEAD = 33


class DeltaError(ValueError):
    pass


@dataclass(frozen=True)
class DeltaRecord:
    """Packed change mask plus changed F16 values for one tensor."""

    tensor_name: str
    shape: tuple[int, ...]
    total_elements: int
    changed_count: int
    packed_mask: bytes
    payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        n, n_c = self.total_elements, self.changed_count
        if len(self.packed_mask) != (n + 7) // 8:
            raise DeltaError(
                f"mask is {len(self.packed_mask)} bytes, expected {(n + 7) // 8}"
            )
        if len(self.payload) != 2 * n_c:
            raise DeltaError(
                f"payload is {len(self.payload)} bytes, expected {2 * n_c}"
            )

    @property
    def serialized_size(self) -> int:
        return (
            DELTA_FIXED_OVERHEAD
            + len(self.tensor_name.encode("utf-8"))
            + 8 * (len(self.shape) - 1)
            + len(self.packed_mask)
            + len(self.payload)
        )


@dataclass(frozen=True)
class DeltaCheckpoint:
    """One iteration's model-state change set against its predecessor."""

    iteration: int
    base_iteration: int
    records: tuple[DeltaRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


def _as_u16(t: TensorBlob) -> np.ndarray:
    return np.frombuffer(t.data, dtype="<u2")


def _check_pair(base: TensorBlob, target: TensorBlob) -> None:
    if base.name != target.name:
        raise DeltaError(f"name mismatch: {base.name!r} vs {target.name!r}")
    if base.dtype is not ElementType.F16 or target.dtype is not ElementType.F16:
        raise DeltaError("delta encoding requires F16 tensors")
    if base.shape != target.shape:
        raise DeltaError(
            f"shape mismatch for {base.name!r}: {base.shape} vs {target.shape}"
        )


def encode_delta(base: TensorBlob, target: TensorBlob) -> DeltaRecord:
    """Bit i of the mask is set iff element i of target differs from base."""
    _check_pair(base, target)
    b = _as_u16(base)
    t = _as_u16(target)
    changed = b != t
    n = int(changed.size)
    n_c = int(np.count_nonzero(changed))
    mask = np.packbits(changed, bitorder="little")
    payload = t[changed].tobytes()
    return DeltaRecord(
        tensor_name=target.name,
        shape=target.shape,
        total_elements=n,
        changed_count=n_c,
        packed_mask=mask.tobytes(),
        payload=payload,
    )


def decode_delta(base: TensorBlob, rec: DeltaRecord) -> TensorBlob:
    """Inverse of encode_delta; reconstruction is bitwise exact."""
    if base.name != rec.tensor_name:
        raise DeltaError(f"name mismatch: {base.name!r} vs {rec.tensor_name!r}")
    if base.shape != rec.shape:
        raise DeltaError(
            f"shape mismatch for {base.name!r}: {base.shape} vs {rec.shape}"
        )
    if base.num_elements != rec.total_elements:
        raise DeltaError("element count mismatch")
    n = rec.total_elements
    mask = np.unpackbits(
        np.frombuffer(rec.packed_mask, dtype=np.uint8), bitorder="little"
    )
    if np.any(mask[n:]):
        raise DeltaError("nonzero padding bits in mask")
    changed = mask[:n].astype(bool)
    popcount = int(np.count_nonzero(changed))
    if popcount != rec.changed_count:
        raise DeltaError(
            f"mask popcount {popcount} != recorded changed_count {rec.changed_count}"
        )
    out = _as_u16(base).copy()
    out[changed] = np.frombuffer(rec.payload, dtype="<u2")
    return TensorBlob(
        name=base.name, dtype=ElementType.F16, shape=base.shape, data=out.tobytes()
    )


def _model_map(ckpt) -> dict:
    return {t.name: t for t in ckpt.model_states}


def chain_encode(base, targets) -> list[DeltaCheckpoint]:
    """Delta-encode a run of checkpoints, each against its predecessor.

    targets must share the base's model-state structure and have strictly
    increasing iteration numbers.
    """
    out = []
    prev = base
    for tgt in targets:
        if tgt.iteration <= prev.iteration:
            raise DeltaError(
                f"iterations must be strictly increasing: "
                f"{prev.iteration} then {tgt.iteration}"
            )
        prev_map = _model_map(prev)
        tgt_names = [t.name for t in tgt.model_states]
        if set(tgt_names) != set(prev_map):
            raise DeltaError(
                f"tensor structure mismatch at iteration {tgt.iteration}"
            )
        records = tuple(
            encode_delta(prev_map[t.name], t) for t in tgt.model_states
        )
        out.append(
            DeltaCheckpoint(
                iteration=tgt.iteration,
                base_iteration=prev.iteration,
                records=records,
            )
        )
        prev = tgt
    return out


def delta_size_bytes(n: int, n_c: int) -> int:
    """Serialized size of a delta: packed mask + verbatim payload + header.

    Callers compare against 2n (raw F16 bytes) to decide benefit; the
    break-even change fraction is 15/16 of the elements, minus half the
    header. The naive unpacked-mask variant would cost n + 2*n_c and break
    even at 1/2; it exists only for comparison, never as a storage path.
    """
    if not 0 <= n_c <= n:
        raise DeltaError(f"need 0 <= n_c <= n, got n={n}, n_c={n_c}")
    return (n + 7) // 8 + 2 * n_c + DELTA_FIXED_OVERHEAD


def naive_delta_size_bytes(n: int, n_c: int) -> int:
    """Unpacked one-byte-per-element mask variant, for comparison only."""
    if not 0 <= n_c <= n:
        raise DeltaError(f"need 0 <= n_c <= n, got n={n}, n_c={n_c}")
    return n + 2 * n_c + DELTA_FIXED_OVERHEAD


def serialize_delta(rec: DeltaRecord) -> bytes:
    name_b = rec.tensor_name.encode("utf-8")
    parts = [
        DELTA_MAGIC,
        struct.pack("<H", DELTA_VERSION),
        struct.pack("<Q", rec.total_elements),
        struct.pack("<Q", rec.changed_count),
        struct.pack("<H", len(name_b)),
        name_b,
        struct.pack("<B", len(rec.shape)),
    ]
    parts.extend(struct.pack("<Q", s) for s in rec.shape)
    parts.append(rec.packed_mask)
    parts.append(rec.payload)
    return b"".join(parts)


def deserialize_delta(b: bytes) -> DeltaRecord:
    r = _Reader(b)
    r.expect_magic(DELTA_MAGIC)
    v = r.u16()
    if v != DELTA_VERSION:
        raise DeltaError(f"unsupported delta version {v}")
    n = r.u64()
    n_c = r.u64()
    name = r.take(r.u16()).decode("utf-8")
    rank = r.u8()
    shape = tuple(r.u64() for _ in range(rank))
    mask = bytes(r.take((n + 7) // 8))
    payload = bytes(r.take(2 * n_c))
    return DeltaRecord(
        tensor_name=name,
        shape=shape,
        total_elements=n,
        changed_count=n_c,
        packed_mask=mask,
        payload=payload,
    )
