"""Lossy 8-bit compression of F32 optimizer states.

The value range is split into m clusters at the quantiles of a normal
distribution fitted to the tensor (mean/std), so cluster populations are
roughly balanced and clusters tighten near the mean where optimizer
values concentrate. Each cluster then gets asymmetric affine 8-bit
quantization: scale = max - min, offset = min, and each element maps to
the nearest of 256 evenly spaced codes.

The code-to-real map is the linear j -> j/255. It is exposed as a named
function so a non-linear map (e.g. a dynamic-tree layout) can be swapped
in without touching the cluster machinery.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .tensors import ElementType, TensorBlob, _Reader

QUANT_MAGIC = b"BSQT"
QUANT_VERSION = 1

MIN_CLUSTERS = 2
MAX_CLUSTERS = 16

# Denominator floor for mean relative error; near-zero optimizer moments
# otherwise dominate the metric.
MRE_EPSILON = 1e-12


class QuantizerError(ValueError):
    pass


def qmap(codes: np.ndarray) -> np.ndarray:
    """Map uint8 codes to the normalized domain [0, 1]."""
    return np.asarray(codes, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class ClusterTable:
    """Per-tensor clustering parameters for quantization."""

    m: int
    mean: float
    std: float
    boundaries: tuple[float, ...]  # m-1 ascending thresholds
    scales: tuple[float, ...]  # per cluster, max - min (0 if empty)
    offsets: tuple[float, ...]  # per cluster, min (0 if empty)

    def __post_init__(self):
        if not MIN_CLUSTERS <= self.m <= MAX_CLUSTERS:
            raise QuantizerError(f"cluster count {self.m} outside [2, 16]")
        if len(self.boundaries) != self.m - 1:
            raise QuantizerError("need m-1 boundaries")
        if len(self.scales) != self.m or len(self.offsets) != self.m:
            raise QuantizerError("need m scales and m offsets")
        b = self.boundaries
        if any(b[i] > b[i + 1] for i in range(len(b) - 1)):
            raise QuantizerError("boundaries must be ascending")


@dataclass(frozen=True)
class QuantizedTensor:
    """Cluster table, packed 4-bit labels and one u8 code per element."""

    name: str
    shape: tuple[int, ...]
    table: ClusterTable
    packed_labels: bytes  # two 4-bit labels per byte, low nibble = even index
    codes: bytes  # one u8 per element

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        n = self.num_elements
        if len(self.packed_labels) != (n + 1) // 2:
            raise QuantizerError("packed label bytes != ceil(n/2)")
        if len(self.codes) != n:
            raise QuantizerError("need one code byte per element")

    @property
    def num_elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


def _as_f32(t: TensorBlob) -> np.ndarray:
    if t.dtype is not ElementType.F32:
        raise QuantizerError(f"tensor {t.name!r} is not F32")
    return np.frombuffer(t.data, dtype="<f4")


def build_clusters(t: TensorBlob, m: int = MAX_CLUSTERS) -> ClusterTable:
    """Fit a normal distribution to t and cut it into m quantile clusters.

    Boundary k sits at mean + std * Phi^-1(k/m), k = 1..m-1, so i.i.d.
    normal data lands in each cluster with probability ~1/m. A constant
    tensor (std 0) degenerates to a single occupied cluster.
    """
    if not MIN_CLUSTERS <= m <= MAX_CLUSTERS:
        raise QuantizerError(f"cluster count {m} outside [2, 16]")
    values = _as_f32(t).astype(np.float64)
    if values.size == 0:
        raise QuantizerError(f"cannot cluster empty tensor {t.name!r}")
    mu = float(np.mean(values))
    sigma = float(np.std(values))
    ks = np.arange(1, m) / m
    boundaries = mu + sigma * ndtri(ks)
    labels = _assign_labels(values, boundaries)
    scales = np.zeros(m)
    offsets = np.zeros(m)
    for c in range(m):
        members = values[labels == c]
        if members.size:
            lo = float(np.min(members))
            hi = float(np.max(members))
            scales[c] = hi - lo
            offsets[c] = lo
    # Stored table is F32, matching the serialized form.
    f32 = lambda a: tuple(float(x) for x in np.asarray(a, dtype=np.float32))
    return ClusterTable(
        m=m,
        mean=float(np.float32(mu)),
        std=float(np.float32(sigma)),
        boundaries=f32(boundaries),
        scales=f32(scales),
        offsets=f32(offsets),
    )


def _assign_labels(values: np.ndarray, boundaries) -> np.ndarray:
    """Cluster index per element; an element exactly on a boundary joins
    the lower cluster."""
    return np.searchsorted(np.asarray(boundaries), values, side="left").astype(
        np.uint8
    )


def pack_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.size % 2:
        labels = np.append(labels, np.uint8(0))
    return (labels[0::2] | (labels[1::2] << 4)).tobytes()


def unpack_labels(packed: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(packed, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:n]


def quantize(t: TensorBlob, table: ClusterTable) -> QuantizedTensor:
    """Assign each element its cluster label and nearest 8-bit code.

    The emitted code is argmin_j |qmap(j) - (v - offset)/scale| with ties
    broken toward the smaller j; values outside their cluster's range are
    clamped to the endpoints.
    """
    values = _as_f32(t).astype(np.float64)
    labels = _assign_labels(values, table.boundaries)
    if int(labels.max(initial=0)) >= table.m:
        raise QuantizerError("internal: label overflow")
    scales = np.asarray(table.scales)
    offsets = np.asarray(table.offsets)
    s = scales[labels]
    b = offsets[labels]
    normalized = np.zeros_like(values)
    occupied = s > 0
    normalized[occupied] = (values[occupied] - b[occupied]) / s[occupied]
    np.clip(normalized, 0.0, 1.0, out=normalized)
    # Nearest code with half-way ties to the smaller j: ceil(x*255 - 0.5).
    codes = np.ceil(normalized * 255.0 - 0.5).astype(np.int64)
    np.clip(codes, 0, 255, out=codes)
    return QuantizedTensor(
        name=t.name,
        shape=t.shape,
        table=table,
        packed_labels=pack_labels(labels),
        codes=codes.astype(np.uint8).tobytes(),
    )


def dequantize(q: QuantizedTensor) -> TensorBlob:
    """Reconstruct element i as qmap(code_i) * scale_label + offset_label."""
    n = q.num_elements
    labels = unpack_labels(q.packed_labels, n)
    if n and int(labels.max()) >= q.table.m:
        raise QuantizerError(f"label {int(labels.max())} >= m={q.table.m}")
    codes = np.frombuffer(q.codes, dtype=np.uint8)
    s = np.asarray(q.table.scales)[labels]
    b = np.asarray(q.table.offsets)[labels]
    restored = (qmap(codes) * s + b).astype(np.float32)
    return TensorBlob(
        name=q.name, dtype=ElementType.F32, shape=q.shape, data=restored.tobytes()
    )


def quantized_size_bytes(n: int, m: int) -> int:
    """Idealized storage cost: 8m table bytes, packed 4-bit labels, one
    code byte per element, 8 bytes of shape. With m=16 this is
    (3/2)n + 136."""
    if not MIN_CLUSTERS <= m <= MAX_CLUSTERS:
        raise QuantizerError(f"cluster count {m} outside [2, 16]")
    return 8 * m + n + (n + 1) // 2 + 8


def serialized_quant_size(name: str, rank: int, n: int, m: int) -> int:
    """Exact size of serialize_quantized output."""
    header = (
        4 + 2 + 1  # magic, version, m
        + 4 + 4  # mean, std
        + 4 * (m - 1)  # boundaries
        + 8 * m  # scales + offsets
        + 2 + len(name.encode("utf-8"))
        + 1 + 8 * rank
    )
    return header + (n + 1) // 2 + n


def serialize_quantized(q: QuantizedTensor) -> bytes:
    t = q.table
    name_b = q.name.encode("utf-8")
    parts = [
        QUANT_MAGIC,
        struct.pack("<H", QUANT_VERSION),
        struct.pack("<B", t.m),
        struct.pack("<f", t.mean),
        struct.pack("<f", t.std),
        struct.pack(f"<{t.m - 1}f", *t.boundaries),
        struct.pack(f"<{t.m}f", *t.scales),
        struct.pack(f"<{t.m}f", *t.offsets),
        struct.pack("<H", len(name_b)),
        name_b,
        struct.pack("<B", len(q.shape)),
    ]
    parts.extend(struct.pack("<Q", s) for s in q.shape)
    parts.append(q.packed_labels)
    parts.append(q.codes)
    return b"".join(parts)


def deserialize_quantized(b: bytes) -> QuantizedTensor:
    r = _Reader(b)
    r.expect_magic(QUANT_MAGIC)
    v = r.u16()
    if v != QUANT_VERSION:
        raise QuantizerError(f"unsupported quantized-tensor version {v}")
    m = r.u8()
    mean = struct.unpack("<f", r.take(4))[0]
    std = struct.unpack("<f", r.take(4))[0]
    boundaries = struct.unpack(f"<{m - 1}f", r.take(4 * (m - 1)))
    scales = struct.unpack(f"<{m}f", r.take(4 * m))
    offsets = struct.unpack(f"<{m}f", r.take(4 * m))
    name = r.take(r.u16()).decode("utf-8")
    rank = r.u8()
    shape = tuple(r.u64() for _ in range(rank))
    n = 1
    for s in shape:
        n *= s
    packed = bytes(r.take((n + 1) // 2))
    codes = bytes(r.take(n))
    table = ClusterTable(
        m=m, mean=mean, std=std, boundaries=boundaries, scales=scales,
        offsets=offsets,
    )
    return QuantizedTensor(
        name=name, shape=shape, table=table, packed_labels=packed, codes=codes
    )


def precision_report(original: TensorBlob, restored: TensorBlob) -> dict:
    """Mean relative error and mean squared error of a reconstruction.

    MRE averages |o - r| / |o| over elements with |o| > MRE_EPSILON.
    """
    if original.shape != restored.shape or original.dtype is not restored.dtype:
        raise QuantizerError("precision_report requires matching shape and dtype")
    o = _as_f32(original).astype(np.float64)
    r = _as_f32(restored).astype(np.float64)
    err = o - r
    mse = float(np.mean(err**2)) if o.size else 0.0
    significant = np.abs(o) > MRE_EPSILON
    if np.any(significant):
        mre = float(np.mean(np.abs(err[significant]) / np.abs(o[significant])))
    else:
        mre = 0.0
    return {"mre": mre, "mse": mse}
