import os

import numpy as np
import pytest

from bitsnap import faults, store
from bitsnap.store import (
    KIND_BASE,
    KIND_DELTA,
    MissingLinkError,
    MissingPreviousError,
    StoreConfig,
    StoreError,
    TrackerError,
    TrackerState,
    load_checkpoint,
    read_tracker,
    save_checkpoint,
    write_tracker,
)
from bitsnap.synth import perturb_checkpoint, random_checkpoint


@pytest.fixture
def cfg(tmp_path):
    return StoreConfig(root=tmp_path / "store", max_cached_iteration=5)


def save_chain(cfg, rng, iterations, change=0.1):
    """Save a run of checkpoints, returning the originals."""
    chain = [random_checkpoint(rng, iterations[0])]
    save_checkpoint(cfg, chain[0])
    for it in iterations[1:]:
        nxt = perturb_checkpoint(rng, chain[-1], it, change)
        save_checkpoint(cfg, nxt, prev=chain[-1])
        chain.append(nxt)
    return chain


def test_first_save_is_base(cfg, rng):
    ckpt = random_checkpoint(rng, 7)
    manifest = save_checkpoint(cfg, ckpt)
    assert manifest.kind == KIND_BASE
    assert read_tracker(cfg) == TrackerState(7, 7)
    assert (cfg.iter_dir(7) / "type.txt").read_text() == "base\n"


def test_base_refresh_every_max_cached_saves(cfg, rng):
    iterations = [0, 10, 20, 30, 40, 50]
    save_chain(cfg, rng, iterations)
    kinds = {it: store.read_manifest(cfg, it).kind for it in iterations}
    assert kinds == {
        0: KIND_BASE, 10: KIND_DELTA, 20: KIND_DELTA,
        30: KIND_DELTA, 40: KIND_DELTA, 50: KIND_BASE,
    }
    assert read_tracker(cfg) == TrackerState(50, 50)


def test_delta_needs_prev(cfg, rng):
    save_checkpoint(cfg, random_checkpoint(rng, 0))
    with pytest.raises(MissingPreviousError):
        save_checkpoint(cfg, random_checkpoint(rng, 1))


def test_load_after_base_is_bitwise(cfg, rng):
    ckpt = random_checkpoint(rng, 3)
    save_checkpoint(cfg, ckpt)
    loaded = load_checkpoint(cfg)
    assert [t.data for t in loaded.model_states] == [
        t.data for t in ckpt.model_states
    ]


def test_load_chained_deltas(cfg, rng):
    chain = save_chain(cfg, rng, [0, 10, 20, 30])
    for ckpt in chain:
        loaded = load_checkpoint(cfg, ckpt.iteration)
        assert [t.data for t in loaded.model_states] == [
            t.data for t in ckpt.model_states
        ]
        # Optimizer states are lossy but bounded.
        for o, r in zip(ckpt.optimizer_states, loaded.optimizer_states):
            ov = np.frombuffer(o.data, dtype="<f4")
            rv = np.frombuffer(r.data, dtype="<f4")
            assert np.max(np.abs(ov - rv)) < np.ptp(ov)


def test_missing_link_names_gap(cfg, rng):
    save_chain(cfg, rng, [0, 10, 20])
    import shutil

    shutil.rmtree(cfg.iter_dir(10))
    with pytest.raises(MissingLinkError) as exc:
        load_checkpoint(cfg, 20)
    assert exc.value.iteration == 10


def test_delta_save_shrinks_model_bytes(cfg, rng):
    shapes = {"weight": (50_000,)}
    base = random_checkpoint(rng, 0, shapes, {})
    save_checkpoint(cfg, base)
    nxt = perturb_checkpoint(rng, base, 10, 0.15)
    manifest = save_checkpoint(cfg, nxt, prev=base)
    assert manifest.kind == KIND_DELTA
    entry = manifest.tensors[0]
    raw_bytes = 2 * 50_000
    # ~15% change gives close to the 5x lossless ratio.
    assert raw_bytes / entry.length == pytest.approx(4.7, rel=0.05)


def test_delta_falls_back_to_raw_when_everything_changed(cfg, rng):
    shapes = {"weight": (4096,)}
    base = random_checkpoint(rng, 0, shapes, {})
    save_checkpoint(cfg, base)
    nxt = perturb_checkpoint(rng, base, 10, 1.0)
    manifest = save_checkpoint(cfg, nxt, prev=base)
    assert manifest.kind == KIND_DELTA
    assert manifest.tensors[0].codec == store.CODEC_RAW
    loaded = load_checkpoint(cfg, 10)
    assert loaded.model_states[0].data == nxt.model_states[0].data


def test_failed_delta_save_forces_next_base(cfg, rng):
    base = random_checkpoint(rng, 0)
    save_checkpoint(cfg, base)
    bad_prev = random_checkpoint(rng, 0, {"other": (4,)}, {})
    with pytest.raises(StoreError):
        save_checkpoint(cfg, perturb_checkpoint(rng, base, 10, 0.1), prev=bad_prev)
    manifest = save_checkpoint(cfg, perturb_checkpoint(rng, base, 20, 0.1),
                               prev=base)
    assert manifest.kind == KIND_BASE


def test_env_var_overrides_max_cached(cfg, rng, monkeypatch):
    monkeypatch.setenv("MAX_CACHED_ITERATION", "2")
    chain = save_chain(cfg, rng, [0, 10, 20, 30])
    kinds = [store.read_manifest(cfg, it).kind for it in (0, 10, 20, 30)]
    assert kinds == [KIND_BASE, KIND_DELTA, KIND_BASE, KIND_DELTA]


# ---- tracker ----

def test_tracker_roundtrip(cfg):
    cfg.root.mkdir(parents=True)
    write_tracker(cfg, TrackerState(100, 80))
    assert read_tracker(cfg) == TrackerState(100, 80)


def test_tracker_crash_before_rename_keeps_old_state(cfg):
    cfg.root.mkdir(parents=True)
    write_tracker(cfg, TrackerState(100, 80))
    faults.crash_at("store.tracker.temp-written")
    with pytest.raises(faults.CrashPoint):
        write_tracker(cfg, TrackerState(120, 80))
    assert read_tracker(cfg) == TrackerState(100, 80)


def test_malformed_tracker_refuses_to_guess(cfg):
    cfg.root.mkdir(parents=True)
    cfg.tracker_path().write_text("not a number\n")
    with pytest.raises(TrackerError):
        read_tracker(cfg)


def test_absent_tracker(cfg):
    with pytest.raises(TrackerError):
        read_tracker(cfg)


def test_tracker_ordering_invariant():
    with pytest.raises(TrackerError):
        TrackerState(10, 20)


def test_type_txt_disagreement_detected(cfg, rng):
    save_checkpoint(cfg, random_checkpoint(rng, 0))
    (cfg.iter_dir(0) / "type.txt").write_text("delta\n")
    with pytest.raises(StoreError, match="type.txt"):
        load_checkpoint(cfg, 0)


# ---- crash consistency on save ----

@pytest.mark.parametrize("point", [
    "store.dir.tensors-written",
    "store.dir.manifest-written",
    "store.dir.type-written",
    "store.dir.renamed",
    "store.tracker.temp-written",
])
def test_crash_during_save_leaves_store_loadable(cfg, rng, point):
    base = random_checkpoint(rng, 0)
    save_checkpoint(cfg, base)
    faults.crash_at(point)
    with pytest.raises(faults.CrashPoint):
        save_checkpoint(cfg, perturb_checkpoint(rng, base, 10, 0.1), prev=base)
    store.recover_scan(cfg)
    loaded = load_checkpoint(cfg)
    assert loaded.iteration == 0
    assert [t.data for t in loaded.model_states] == [
        t.data for t in base.model_states
    ]


def test_inspect_lists_chain(cfg, rng):
    save_chain(cfg, rng, [0, 10])
    info = store.inspect(cfg)
    assert info["tracker"] == {"latest_iteration": 10, "latest_base_iteration": 0}
    assert [c["kind"] for c in info["checkpoints"]] == [KIND_BASE, KIND_DELTA]


def test_prune_above_repairs_tracker(cfg, rng):
    save_chain(cfg, rng, [0, 10, 20])
    pruned = store.prune_above(cfg, 10)
    assert pruned == [20]
    assert read_tracker(cfg) == TrackerState(10, 0)
    assert load_checkpoint(cfg).iteration == 10


def test_blob_pack_roundtrip(cfg, rng):
    ckpt = random_checkpoint(rng, 5)
    manifest, tensors = store.encode_checkpoint(ckpt, None, KIND_BASE)
    blob = store.pack_blob(manifest, tensors)
    m2, t2 = store.unpack_blob(blob)
    assert m2 == manifest
    assert t2 == tensors
    with pytest.raises(StoreError):
        store.unpack_blob(blob[:-1])
    with pytest.raises(StoreError):
        store.unpack_blob(b"XXXX" + blob[4:])
