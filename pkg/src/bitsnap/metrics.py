"""Compression quality measurement.

The unified quality score is q = w1*cr + w2*cs + w3*ps over three
min-max-normalized factors: compression ratio (higher is better),
compression+decompression time over a no-op baseline (lower is better)
and precision loss as MSE of the restored optimizer states (lower is
better). Normalization bounds are caller-supplied corpus min/max and are
echoed into the report so scores are reproducible.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .quantizer import precision_report
from .store import KIND_BASE, KIND_DELTA, encode_checkpoint
from .tensors import Checkpoint, serialize_checkpoint, deserialize_checkpoint
from . import store

WEIGHT_TOLERANCE = 1e-9

# Defaults follow the qualitative LLM-training ordering (speed and
# precision weighted equally, both above ratio); they are configuration,
# not constants of the method.
DEFAULT_WEIGHTS = (0.2, 0.4, 0.4)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class QualityWeights:
    w1: float  # compression ratio
    w2: float  # speed
    w3: float  # precision

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise MetricsError("weights must be non-negative")
        if abs(self.w1 + self.w2 + self.w3 - 1.0) > WEIGHT_TOLERANCE:
            raise MetricsError(
                f"weights must sum to 1, got {self.w1 + self.w2 + self.w3}"
            )


@dataclass(frozen=True)
class FactorBounds:
    """Corpus min/max per raw factor, for min-max normalization."""

    cr: tuple[float, float]
    cs: tuple[float, float]
    ps: tuple[float, float]


@dataclass(frozen=True)
class QualityReport:
    cr_raw: float  # original bytes / compressed bytes
    cs_raw: float  # codec wall time minus no-op baseline, seconds
    ps_raw: float  # MSE of restored optimizer states
    cr: float
    cs: float
    ps: float
    q: float
    weights: tuple[float, float, float]
    bounds: dict

    def to_dict(self) -> dict:
        return asdict(self)


def normalize(value: float, lo: float, hi: float, higher_is_better: bool) -> float:
    """Min-max score in [0, 1]; a degenerate bound scores 1."""
    if hi < lo:
        raise MetricsError(f"bounds out of order: ({lo}, {hi})")
    if hi == lo:
        return 1.0
    x = (value - lo) / (hi - lo)
    x = min(1.0, max(0.0, x))
    return x if higher_is_better else 1.0 - x


def combine(weights: QualityWeights, cr: float, cs: float, ps: float) -> float:
    return weights.w1 * cr + weights.w2 * cs + weights.w3 * ps


def build_report(
    cr_raw: float,
    cs_raw: float,
    ps_raw: float,
    weights: QualityWeights,
    bounds: FactorBounds,
) -> QualityReport:
    cr = normalize(cr_raw, *bounds.cr, higher_is_better=True)
    cs = normalize(cs_raw, *bounds.cs, higher_is_better=False)
    ps = normalize(ps_raw, *bounds.ps, higher_is_better=False)
    return QualityReport(
        cr_raw=cr_raw, cs_raw=cs_raw, ps_raw=ps_raw,
        cr=cr, cs=cs, ps=ps,
        q=combine(weights, cr, cs, ps),
        weights=(weights.w1, weights.w2, weights.w3),
        bounds={"cr": bounds.cr, "cs": bounds.cs, "ps": bounds.ps},
    )


def _median_time(fn, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def measure(
    ckpt: Checkpoint,
    base: Checkpoint | None,
    weights: QualityWeights,
    bounds: FactorBounds,
    clusters: int = 16,
    warmup: int = 5,
    repeats: int = 20,
) -> QualityReport:
    """Run the codec pipeline over one checkpoint and score it.

    When `base` is given the model states go through the delta path
    against it; otherwise the checkpoint is treated as a base (raw model
    states). Timing is the median of `repeats` runs after `warmup`
    discarded runs, minus a serialize/deserialize-only baseline.
    """
    kind = KIND_BASE if base is None else KIND_DELTA

    def run_pipeline() -> tuple[int, Checkpoint]:
        manifest, tensors = encode_checkpoint(ckpt, base, kind, clusters)
        restored = _decode_in_memory(manifest, tensors, base)
        return len(tensors), restored

    def run_baseline() -> None:
        deserialize_checkpoint(serialize_checkpoint(ckpt))

    compressed_bytes, restored = run_pipeline()
    original_bytes = sum(t.nbytes for t in ckpt.model_states) + sum(
        t.nbytes for t in ckpt.optimizer_states
    )
    cr_raw = original_bytes / compressed_bytes if compressed_bytes else float("inf")

    pipeline_t = _median_time(lambda: run_pipeline(), warmup, repeats)
    baseline_t = _median_time(run_baseline, warmup, repeats)
    cs_raw = pipeline_t - baseline_t

    if ckpt.optimizer_states:
        mses = [
            precision_report(o, r)["mse"]
            for o, r in zip(ckpt.optimizer_states, restored.optimizer_states)
        ]
        ps_raw = float(np.mean(mses))
    else:
        ps_raw = 0.0

    return build_report(cr_raw, cs_raw, ps_raw, weights, bounds)


def _decode_in_memory(manifest, tensors: bytes, base: Checkpoint | None) -> Checkpoint:
    from .bitmask import decode_delta, deserialize_delta
    from .quantizer import dequantize, deserialize_quantized
    from .tensors import deserialize_tensor

    base_map = {t.name: t for t in base.model_states} if base else {}
    model = []
    optimizer = []
    for e in manifest.tensors:
        raw = tensors[e.offset : e.offset + e.length]
        if e.group == "model":
            if e.codec == store.CODEC_DELTA:
                model.append(decode_delta(base_map[e.name], deserialize_delta(raw)))
            else:
                model.append(deserialize_tensor(raw))
        else:
            if e.codec == store.CODEC_QUANT:
                optimizer.append(dequantize(deserialize_quantized(raw)))
            else:
                optimizer.append(deserialize_tensor(raw))
    return Checkpoint(
        iteration=manifest.iteration,
        model_states=tuple(model),
        optimizer_states=tuple(optimizer),
    )
