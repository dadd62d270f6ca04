"""Tensor container and checkpoint object model.

All serialized forms are little-endian and deterministic: equal inputs
produce identical bytes. F16 data is kept as raw IEEE 754 binary16 bytes
end to end; nothing here widens model-state values, so NaN payloads and
signed zeros survive round-trips bit-exactly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

TENSOR_MAGIC = b"BSNP"
CHECKPOINT_MAGIC = b"BSCK"
FORMAT_VERSION = 1

MAX_NAME_BYTES = 65535


class TensorFormatError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ElementType(enum.Enum):
    F16 = 0
    F32 = 1

    @property
    def itemsize(self) -> int:
        return 2 if self is ElementType.F16 else 4

    @property
    def numpy_dtype(self) -> str:
        # Raw bit-preserving view; F16 handled as uint16 to avoid FP rounding.
        return "<u2" if self is ElementType.F16 else "<f4"


@dataclass(frozen=True)
class TensorBlob:
    """A named flat numeric buffer; the unit of compression."""

    name: str
    dtype: ElementType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 0 for s in self.shape):
            raise ValueError(f"negative extent in shape {self.shape}")
        if len(self.name.encode("utf-8")) > MAX_NAME_BYTES:
            raise ValueError("tensor name exceeds 65535 bytes")
        expected = self.num_elements * self.dtype.itemsize
        if len(self.data) != expected:
            raise ValueError(
                f"tensor {self.name!r}: data is {len(self.data)} bytes, "
                f"shape {self.shape} requires {expected}"
            )

    @property
    def num_elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def nbytes(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Checkpoint:
    """One training iteration's saved state.

    Model states are F16, optimizer states F32; tensor order is stable
    across serialize/deserialize.
    """

    iteration: int
    model_states: tuple[TensorBlob, ...] = field(default_factory=tuple)
    optimizer_states: tuple[TensorBlob, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "model_states", tuple(self.model_states))
        object.__setattr__(self, "optimizer_states", tuple(self.optimizer_states))
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        names = [t.name for t in self.model_states] + [
            t.name for t in self.optimizer_states
        ]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor name within checkpoint")


def _pack_header(magic: bytes, dtype: ElementType, name: str, shape: tuple[int, ...]) -> bytes:
    name_b = name.encode("utf-8")
    parts = [
        magic,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<B", dtype.value),
        struct.pack("<H", len(name_b)),
        name_b,
        struct.pack("<B", len(shape)),
    ]
    parts.extend(struct.pack("<Q", s) for s in shape)
    return b"".join(parts)


def tensor_header_size(name: str, rank: int) -> int:
    """Exact byte count of the serialized header for a given name and rank."""
    return 4 + 2 + 1 + 2 + len(name.encode("utf-8")) + 1 + 8 * rank


def serialize_tensor(t: TensorBlob) -> bytes:
    return _pack_header(TENSOR_MAGIC, t.dtype, t.name, t.shape) + t.data


class _Reader:
    """Cursor over a byte buffer with truncation checks."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"need {n} bytes at offset {self.pos}, only "
                f"{len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {got!r}")

    def expect_version(self) -> None:
        v = self.u16()
        if v != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported format version {v}")


def _read_tensor(r: _Reader) -> TensorBlob:
    r.expect_magic(TENSOR_MAGIC)
    r.expect_version()
    dtype = ElementType(r.u8())
    name = r.take(r.u16()).decode("utf-8")
    rank = r.u8()
    shape = tuple(r.u64() for _ in range(rank))
    n = 1
    for s in shape:
        n *= s
    data = r.take(n * dtype.itemsize)
    return TensorBlob(name=name, dtype=dtype, shape=shape, data=bytes(data))


def deserialize_tensor(b: bytes) -> TensorBlob:
    return _read_tensor(_Reader(b))


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    """Whole-checkpoint container: all tensors concatenated behind a header."""
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<Q", ckpt.iteration),
        struct.pack("<I", len(ckpt.model_states)),
        struct.pack("<I", len(ckpt.optimizer_states)),
    ]
    parts.extend(serialize_tensor(t) for t in ckpt.model_states)
    parts.extend(serialize_tensor(t) for t in ckpt.optimizer_states)
    return b"".join(parts)


def deserialize_checkpoint(b: bytes) -> Checkpoint:
    r = _Reader(b)
    r.expect_magic(CHECKPOINT_MAGIC)
    r.expect_version()
    iteration = r.u64()
    n_model = r.u32()
    n_opt = r.u32()
    model = tuple(_read_tensor(r) for _ in range(n_model))
    opt = tuple(_read_tensor(r) for _ in range(n_opt))
    return Checkpoint(iteration=iteration, model_states=model, optimizer_states=opt)


def write_checkpoint_file(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(serialize_checkpoint(ckpt))


def read_checkpoint_file(path) -> Checkpoint:
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read())
