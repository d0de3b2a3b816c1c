import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuoffload.bufpool import (DEVICE_BUFFERS, HOST_BUFFERS, BufferPool, BufferPurpose,
                                InvalidTransition, PoolExhausted, PurposeOccupied,
                                RotationBlocked, SizeTooLarge)
from pool_walk import random_walk

P = BufferPurpose


def fill_distinct(pool):
    """Put the four host buffers into four distinct non-Idle purposes."""
    bufs = []
    for purposes in ([P.HOST_TO_DEVICE_DMA, P.DEVICE_TO_HOST_DMA, P.FINISHING],
                     [P.HOST_TO_DEVICE_DMA, P.DEVICE_TO_HOST_DMA],
                     [P.HOST_TO_DEVICE_DMA],
                     []):
        buf = pool.acquire(8)
        for p in purposes:
            pool.advance(buf, p)
        bufs.append(buf)
    return bufs


def test_static_allocation():
    pool = BufferPool(capacity=32)
    assert len(pool.host_buffers) == HOST_BUFFERS == 4
    assert len(pool.device_buffers) == DEVICE_BUFFERS == 3
    assert pool.all_idle()


def test_first_acquire():
    pool = BufferPool(capacity=32)
    buf = pool.acquire(16)
    assert buf.buffer_id == 0
    assert buf.purpose is P.PREPARING
    assert buf.payload() == bytes(16)


def test_fifth_acquire_exhausted():
    pool = BufferPool(capacity=32)
    bufs = fill_distinct(pool)
    assert sorted(b.purpose.value for b in bufs) == sorted(
        [P.PREPARING.value, P.HOST_TO_DEVICE_DMA.value, P.DEVICE_TO_HOST_DMA.value,
         P.FINISHING.value])
    with pytest.raises(PoolExhausted):
        pool.acquire(8)


def test_second_preparing_rejected():
    pool = BufferPool(capacity=32)
    pool.acquire(8)
    with pytest.raises(PurposeOccupied):
        pool.acquire(8)


def test_blocking_acquire_times_out():
    pool = BufferPool(capacity=32)
    pool.acquire(8)
    with pytest.raises(PurposeOccupied):
        pool.acquire(8, blocking=True, timeout=0.01)


def test_size_too_large():
    pool = BufferPool(capacity=32)
    with pytest.raises(SizeTooLarge):
        pool.acquire(33)


def test_advance_legal_and_illegal():
    pool = BufferPool(capacity=32)
    buf = pool.acquire(8)
    with pytest.raises(InvalidTransition):
        pool.advance(buf, P.FINISHING)
    pool.advance(buf, P.HOST_TO_DEVICE_DMA)
    assert buf.purpose is P.HOST_TO_DEVICE_DMA


def test_advance_uniqueness():
    pool = BufferPool(capacity=32)
    a = pool.acquire(8)
    pool.advance(a, P.HOST_TO_DEVICE_DMA)
    b = pool.acquire(8)
    with pytest.raises(PurposeOccupied):
        pool.advance(b, P.HOST_TO_DEVICE_DMA)


def test_advance_to_idle_needs_release():
    pool = BufferPool(capacity=32)
    buf = pool.acquire(8)
    with pytest.raises(InvalidTransition):
        pool.advance(buf, P.IDLE)


def test_release():
    pool = BufferPool(capacity=32)
    buf = pool.acquire(8)
    with pytest.raises(InvalidTransition):
        pool.release(buf)
    for p in (P.HOST_TO_DEVICE_DMA, P.DEVICE_TO_HOST_DMA, P.FINISHING):
        pool.advance(buf, p)
    before = pool.idle_count()
    pool.release(buf)
    assert pool.idle_count() == before + 1


def test_foreign_buffer_rejected():
    a, b = BufferPool(capacity=8), BufferPool(capacity=8)
    buf = a.acquire(1)
    with pytest.raises(InvalidTransition):
        b.advance(buf, P.HOST_TO_DEVICE_DMA)


def test_rebind_on_advance():
    pool = BufferPool(capacity=8)
    buf = pool.acquire(1, request_id=1)
    pool.advance(buf, P.HOST_TO_DEVICE_DMA)
    pool.advance(buf, P.DEVICE_TO_HOST_DMA, rebind=7)
    assert buf.bound_request == 7


def test_cycle_soak_ends_idle():
    pool = BufferPool(capacity=64)
    for i in range(10_000):
        buf = pool.acquire(i % 64, request_id=i)
        for p in (P.HOST_TO_DEVICE_DMA, P.DEVICE_TO_HOST_DMA, P.FINISHING):
            pool.advance(buf, p)
        pool.release(buf)
    assert pool.all_idle()


def test_rotation_cycle():
    pool = BufferPool(capacity=8)
    a, b, c = pool.device_roles()
    assert pool.rotate_device_buffers() == (b, c, a)
    assert a.purpose is P.DEVICE_OUTGOING and b.purpose is P.DEVICE_ACTIVE
    pool.rotate_device_buffers()
    assert pool.rotate_device_buffers() == (a, b, c)


def test_rotation_blocked_until_drained():
    pool = BufferPool(capacity=8)
    out = pool.outgoing
    out.bound_request = 3
    with pytest.raises(RotationBlocked):
        pool.rotate_device_buffers()
    assert not pool.can_rotate()
    pool.release(out)
    pool.rotate_device_buffers()
    assert pool.device_buffer_for(3) is None


def test_random_walk_small():
    stats = random_walk(2000, seed=1)
    assert stats["duplicates_seen"] == 0
    assert stats["illegal_accepted"] == 0
    assert stats["all_idle"]
    assert stats["accepted"] > 0 and stats["rejected"] > 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), steps=st.integers(1, 400))
def test_random_walk_property(seed, steps):
    stats = random_walk(steps, seed)
    assert stats["duplicates_seen"] == 0
    assert stats["illegal_accepted"] == 0
    assert stats["all_idle"]
