import numpy as np
import pytest

from bitsnap.metrics import (
    FactorBounds,
    MetricsError,
    QualityWeights,
    build_report,
    combine,
    measure,
    normalize,
)
from bitsnap.synth import perturb_checkpoint, random_checkpoint

BOUNDS = FactorBounds(cr=(1.0, 16.0), cs=(0.0, 1.0), ps=(0.0, 1e-6))


def test_weights_must_sum_to_one():
    QualityWeights(0.2, 0.4, 0.4)
    with pytest.raises(MetricsError):
        QualityWeights(0.5, 0.5, 0.5)
    with pytest.raises(MetricsError):
        QualityWeights(-0.2, 0.6, 0.6)


def test_all_ones_scores_give_q_one():
    w = QualityWeights(1 / 3, 1 / 3, 1 / 3)
    assert combine(w, 1.0, 1.0, 1.0) == pytest.approx(1.0)


def test_documented_weighting_example():
    # Training-style weights with scores (1, 0.5, 0.5).
    w = QualityWeights(0.2, 0.4, 0.4)
    assert combine(w, 1.0, 0.5, 0.5) == pytest.approx(0.6)


def test_q_is_exact_weighted_sum(rng):
    for _ in range(200):
        raw = rng.dirichlet([1, 1, 1])
        w = QualityWeights(*raw)
        cr, cs, ps = rng.random(3)
        assert abs(combine(w, cr, cs, ps) - (w.w1 * cr + w.w2 * cs + w.w3 * ps)) < 1e-12


def test_normalization_orientation():
    assert normalize(16.0, 1.0, 16.0, higher_is_better=True) == 1.0
    assert normalize(1.0, 1.0, 16.0, higher_is_better=True) == 0.0
    assert normalize(0.0, 0.0, 1.0, higher_is_better=False) == 1.0
    assert normalize(1.0, 0.0, 1.0, higher_is_better=False) == 0.0
    # Degenerate bounds score 1.
    assert normalize(5.0, 5.0, 5.0, higher_is_better=True) == 1.0
    with pytest.raises(MetricsError):
        normalize(0.0, 1.0, 0.0, higher_is_better=True)


def test_increasing_w1_moves_q_toward_cr():
    cr, cs, ps = 0.9, 0.2, 0.2
    qs = []
    for w1 in (0.1, 0.3, 0.5, 0.7):
        w2 = 0.8 - w1  # w3 fixed at 0.2
        qs.append(combine(QualityWeights(w1, w2, 0.2), cr, cs, ps))
    assert all(a < b for a, b in zip(qs, qs[1:]))  # cr > cs here


def test_report_arithmetic_self_consistent(rng):
    rep = build_report(4.0, 0.25, 2e-7, QualityWeights(0.2, 0.4, 0.4), BOUNDS)
    assert rep.cr == normalize(4.0, 1.0, 16.0, True)
    assert rep.cs == normalize(0.25, 0.0, 1.0, False)
    assert rep.ps == normalize(2e-7, 0.0, 1e-6, False)
    assert rep.q == pytest.approx(0.2 * rep.cr + 0.4 * rep.cs + 0.4 * rep.ps)
    d = rep.to_dict()
    assert d["q"] == rep.q and d["bounds"]["cr"] == (1.0, 16.0)


def test_measure_end_to_end(rng):
    base = random_checkpoint(rng, 0, {"w": (4096,)}, {"m": (2048,)})
    nxt = perturb_checkpoint(rng, base, 10, 0.1)
    rep = measure(nxt, base, QualityWeights(0.2, 0.4, 0.4), BOUNDS,
                  warmup=1, repeats=3)
    assert rep.cr_raw > 1.0
    assert rep.ps_raw > 0.0  # quantization is lossy
    assert 0.0 <= rep.q <= 1.0


def test_measure_lossless_path_has_perfect_precision_score(rng):
    ckpt = random_checkpoint(rng, 0, {"w": (1024,)}, {})
    rep = measure(ckpt, None, QualityWeights(0.2, 0.4, 0.4), BOUNDS,
                  warmup=1, repeats=3)
    assert rep.ps_raw == 0.0
    assert rep.ps == 1.0
