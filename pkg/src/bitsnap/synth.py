"""Synthetic checkpoint generators for tests, benchmarks and simulations."""

from __future__ import annotations

import numpy as np

from .tensors import Checkpoint, ElementType, TensorBlob


def random_f16_blob(rng: np.random.Generator, name: str, shape) -> TensorBlob:
    n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    bits = rng.integers(0, 1 << 16, size=n, dtype=np.uint16)
    return TensorBlob(name=name, dtype=ElementType.F16, shape=tuple(shape),
                      data=bits.astype("<u2").tobytes())


def random_f32_blob(rng: np.random.Generator, name: str, shape,
                    scale: float = 1.0) -> TensorBlob:
    n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    values = rng.normal(0.0, scale, size=n).astype("<f4")
    return TensorBlob(name=name, dtype=ElementType.F32, shape=tuple(shape),
                      data=values.tobytes())


def random_checkpoint(
    rng: np.random.Generator,
    iteration: int,
    model_shapes: dict | None = None,
    optimizer_shapes: dict | None = None,
) -> Checkpoint:
    model_shapes = model_shapes if model_shapes is not None else {
        "layer0.weight": (64, 32),
        "layer1.weight": (128,),
    }
    optimizer_shapes = optimizer_shapes if optimizer_shapes is not None else {
        "adam.exp_avg": (64, 32),
        "adam.exp_avg_sq": (128,),
    }
    return Checkpoint(
        iteration=iteration,
        model_states=tuple(
            random_f16_blob(rng, name, shape)
            for name, shape in model_shapes.items()
        ),
        optimizer_states=tuple(
            random_f32_blob(rng, name, shape)
            for name, shape in optimizer_shapes.items()
        ),
    )


def perturb_checkpoint(
    rng: np.random.Generator,
    ckpt: Checkpoint,
    iteration: int,
    change_fraction: float,
) -> Checkpoint:
    """Next-iteration checkpoint: flips ~change_fraction of each model
    tensor's elements to fresh bit patterns and resamples optimizer noise."""
    model = []
    for t in ckpt.model_states:
        values = np.frombuffer(t.data, dtype="<u2").copy()
        n = values.size
        k = int(round(n * change_fraction))
        if k:
            idx = rng.choice(n, size=k, replace=False)
            # XOR with a nonzero pattern guarantees the element changes.
            values[idx] ^= rng.integers(1, 1 << 16, size=k, dtype=np.uint16)
        model.append(TensorBlob(name=t.name, dtype=t.dtype, shape=t.shape,
                                data=values.tobytes()))
    optimizer = []
    for t in ckpt.optimizer_states:
        values = np.frombuffer(t.data, dtype="<f4")
        noise = rng.normal(0.0, 1e-3, size=values.size).astype("<f4")
        optimizer.append(TensorBlob(name=t.name, dtype=t.dtype, shape=t.shape,
                                    data=(values + noise).tobytes()))
    return Checkpoint(iteration=iteration, model_states=tuple(model),
                      optimizer_states=tuple(optimizer))
