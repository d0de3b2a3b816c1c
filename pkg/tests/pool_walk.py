"""Random walk over the host buffer state machine, checked against a model."""

import random

from gpuoffload.bufpool import (HOST_CYCLE, HOST_EDGES, BufferPool, BufferPurpose,
                                InvalidTransition, PoolExhausted, PurposeOccupied)

IDLE = BufferPurpose.IDLE


def _unique(pool: BufferPool) -> bool:
    busy = [p for p in pool.purposes() if p is not IDLE]
    return len(busy) == len(set(busy))


def random_walk(steps: int, seed: int = 0) -> dict:
    """Apply ``steps`` random operations (legal and illegal) and drain.

    Returns counters; raises AssertionError on any model disagreement.
    """
    rng = random.Random(seed)
    pool = BufferPool(capacity=64, track_history=True)
    model = [IDLE] * len(pool.host_buffers)
    stats = {"accepted": 0, "rejected": 0, "illegal_accepted": 0, "duplicates_seen": 0}
    targets = list(HOST_CYCLE[1:])

    for _ in range(steps):
        op = rng.random()
        if op < 0.25:
            expect_ok = IDLE in model and BufferPurpose.PREPARING not in model
            try:
                buf = pool.acquire(rng.randrange(65))
                model[buf.buffer_id] = BufferPurpose.PREPARING
                ok = True
            except (PoolExhausted, PurposeOccupied):
                ok = False
            assert ok == expect_ok
        elif op < 0.35:
            i = rng.randrange(len(model))
            expect_ok = model[i] is BufferPurpose.FINISHING
            try:
                pool.release(pool.host_buffers[i])
                model[i] = IDLE
                ok = True
            except InvalidTransition:
                ok = False
            assert ok == expect_ok
        else:
            i = rng.randrange(len(model))
            nxt = rng.choice(targets)
            legal = (model[i], nxt) in HOST_EDGES
            free = all(model[j] is not nxt for j in range(len(model)) if j != i)
            try:
                pool.advance(pool.host_buffers[i], nxt)
                model[i] = nxt
                ok = True
                if not legal:
                    stats["illegal_accepted"] += 1
            except (InvalidTransition, PurposeOccupied):
                ok = False
            assert ok == (legal and free)
        stats["accepted" if ok else "rejected"] += 1
        if not _unique(pool):
            stats["duplicates_seen"] += 1
        assert pool.purposes() == model

    # drain: push every buffer forward to Idle, in stage order from the back
    order = {p: k for k, p in enumerate(HOST_CYCLE)}
    for _ in range(len(HOST_CYCLE) * len(model)):
        for buf in sorted(pool.host_buffers, key=lambda b: -order[b.purpose]):
            if buf.purpose is BufferPurpose.FINISHING:
                pool.release(buf)
            elif buf.purpose is not IDLE:
                nxt = HOST_CYCLE[order[buf.purpose] + 1]
                if pool.holder(nxt) is None:
                    pool.advance(buf, nxt)
    stats["all_idle"] = pool.all_idle()
    for buf in pool.host_buffers:
        for a, b in zip(buf.history, buf.history[1:]):
            if (a, b) not in HOST_EDGES:
                stats["illegal_accepted"] += 1
    return stats
