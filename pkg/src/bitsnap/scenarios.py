"""Scripted failure scenarios for the recovery protocol.

The flagship scenario reproduces the four-rank trace where every rank has
iterations 60 and 80 safely staged/persisted, rank 1 fails to copy its
data at iteration 100, and recovery therefore falls back to 80 and prunes
the partial iteration 100 everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import engine, store
from .engine import AsyncAgent, RecoveryDecision, SlotRegion
from .synth import perturb_checkpoint, random_checkpoint

LOST_RANK_RANKS = 4
LOST_RANK_INTERVAL = 20
LOST_RANK_ITERATIONS = (60, 80, 100)
LOST_RANK_FAILED_RANK = 1


def _blob_for(ckpt, prev, clusters=8) -> bytes:
    kind = store.KIND_BASE if prev is None else store.KIND_DELTA
    manifest, tensors = store.encode_checkpoint(ckpt, prev, kind, clusters)
    return store.pack_blob(manifest, tensors)


def simulate_lost_rank(workdir, seed: int = 0) -> RecoveryDecision:
    """Run the rank-1-fails-at-100 scenario and return the recovery decision."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    store_root = workdir / "stores"
    region_path = workdir / "slots.bin"

    rng = np.random.default_rng(seed)
    shapes = {"weight": (256,)}
    opt_shapes = {"moment": (256,)}

    # Per-rank checkpoint streams at iterations 60, 80, 100.
    streams = {}
    for rank in range(LOST_RANK_RANKS):
        base = random_checkpoint(rng, LOST_RANK_ITERATIONS[0], shapes, opt_shapes)
        chain = [base]
        for it in LOST_RANK_ITERATIONS[1:]:
            chain.append(perturb_checkpoint(rng, chain[-1], it, 0.1))
        streams[rank] = chain

    capacity = 4 * len(_blob_for(streams[0][0], None))
    region = SlotRegion.create(region_path, ranks=LOST_RANK_RANKS, redundancy=2,
                               capacity=capacity)
    agent = AsyncAgent(region, store_root, max_cached_iteration=1)
    try:
        # Iterations 60 and 80 reach shared memory on every rank and are
        # persisted by the agent.
        for step in (0, 1):
            for rank in range(LOST_RANK_RANKS):
                ckpt = streams[rank][step]
                prev = streams[rank][step - 1] if step else None
                region.stage(rank, _blob_for(ckpt, prev), ckpt.iteration)
            agent.persist_once()

        # Iteration 100: rank 1 crashes before copying its data.
        for rank in range(LOST_RANK_RANKS):
            if rank == LOST_RANK_FAILED_RANK:
                continue
            ckpt = streams[rank][2]
            region.stage(rank, _blob_for(ckpt, streams[rank][1]), ckpt.iteration)

        reports = engine.gather_reports(region, store_root)
        decision = engine.recover(reports, region, store_root)

        # Sanity: the chosen iteration must load on every rank.
        for rank in range(LOST_RANK_RANKS):
            loaded = store.load_checkpoint(agent.rank_config(rank),
                                           decision.chosen_iteration)
            assert loaded.iteration == decision.chosen_iteration
        return decision
    finally:
        region.close()


SCENARIOS = {"lost-rank": simulate_lost_rank}
