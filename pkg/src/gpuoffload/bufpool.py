"""Pinned-style staging buffers and their purpose state machine.

The host side has exactly four buffers.  Each one cycles through

    Idle -> Preparing -> HostToDeviceDma -> DeviceToHostDma -> Finishing -> Idle

and no two host buffers may hold the same non-Idle purpose at once, so at
most one request sits in each host stage.  The device side has exactly three
buffers whose roles (active, incoming, outgoing) rotate as a 3-cycle at each
service boundary.

A host buffer leaving HostToDeviceDma has already handed its input to device
memory, so it is rebound to whichever request's result it will receive.
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

HOST_BUFFERS = 4
DEVICE_BUFFERS = 3
DEFAULT_CAPACITY = 16 * 1024 * 1024


class PoolError(Exception):
    pass


class PoolExhausted(PoolError):
    """No Idle host buffer is available."""


class SizeTooLarge(PoolError):
    pass


class InvalidTransition(PoolError):
    pass


class PurposeOccupied(PoolError):
    """Another buffer already holds the requested purpose."""


class RotationBlocked(PoolError):
    """The outgoing device buffer has not finished its device-to-host copy."""


class BufferPurpose(str, enum.Enum):
    IDLE = "Idle"
    PREPARING = "Preparing"
    HOST_TO_DEVICE_DMA = "HostToDeviceDma"
    DEVICE_TO_HOST_DMA = "DeviceToHostDma"
    FINISHING = "Finishing"
    DEVICE_ACTIVE = "DeviceActive"
    DEVICE_INCOMING = "DeviceIncoming"
    DEVICE_OUTGOING = "DeviceOutgoing"
    DEVICE_IDLE = "DeviceIdle"


HOST_CYCLE = (
    BufferPurpose.IDLE,
    BufferPurpose.PREPARING,
    BufferPurpose.HOST_TO_DEVICE_DMA,
    BufferPurpose.DEVICE_TO_HOST_DMA,
    BufferPurpose.FINISHING,
)
HOST_EDGES = frozenset(zip(HOST_CYCLE, HOST_CYCLE[1:] + HOST_CYCLE[:1]))


@dataclass(eq=False)
class StagingBuffer:
    buffer_id: int
    capacity: int
    side: str = "host"
    length: int = 0
    purpose: BufferPurpose = BufferPurpose.IDLE
    bound_request: Optional[int] = None
    data: bytearray = field(default=None, repr=False)
    history: List[BufferPurpose] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.data is None:
            self.data = bytearray(self.capacity)

    def payload(self) -> bytes:
        return bytes(self.data[:self.length])

    def write(self, payload: bytes) -> None:
        n = len(payload)
        if n > self.capacity:
            raise SizeTooLarge(f"{n} bytes exceeds buffer capacity {self.capacity}")
        self.data[:n] = payload
        self.length = n


class BufferPool:
    """Four host staging buffers plus the three-buffer device rotation."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, track_history: bool = False,
                 on_change: Optional[Callable[[], None]] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.track_history = track_history
        self._on_change = on_change
        self._cond = threading.Condition(threading.RLock())
        self.host_buffers: Tuple[StagingBuffer, ...] = tuple(
            StagingBuffer(i, capacity, "host") for i in range(HOST_BUFFERS))
        self.device_buffers: Tuple[StagingBuffer, ...] = tuple(
            StagingBuffer(i, capacity, "device") for i in range(DEVICE_BUFFERS))
        # (active, incoming, outgoing)
        self._roles = list(self.device_buffers)
        for buf, purpose in zip(self._roles, (BufferPurpose.DEVICE_ACTIVE,
                                              BufferPurpose.DEVICE_INCOMING,
                                              BufferPurpose.DEVICE_OUTGOING)):
            buf.purpose = purpose
        if track_history:
            for buf in self.host_buffers + self.device_buffers:
                buf.history.append(buf.purpose)

    # -- helpers -------------------------------------------------------------

    def _set(self, buf: StagingBuffer, purpose: BufferPurpose) -> None:
        buf.purpose = purpose
        if self.track_history:
            buf.history.append(purpose)

    def _notify(self) -> None:
        self._cond.notify_all()
        if self._on_change is not None:
            self._on_change()

    def holder(self, purpose: BufferPurpose) -> Optional[StagingBuffer]:
        """The host buffer currently holding ``purpose`` (non-Idle), if any."""
        for buf in self.host_buffers:
            if buf.purpose is purpose:
                return buf
        return None

    def idle_count(self) -> int:
        return sum(b.purpose is BufferPurpose.IDLE for b in self.host_buffers)

    def all_idle(self) -> bool:
        return self.idle_count() == HOST_BUFFERS

    def purposes(self) -> List[BufferPurpose]:
        return [b.purpose for b in self.host_buffers]

    def can_acquire(self) -> bool:
        with self._cond:
            return self.idle_count() > 0 and self.holder(BufferPurpose.PREPARING) is None

    # -- host side -----------------------------------------------------------

    def _try_acquire(self, size: int, request_id: Optional[int]) -> StagingBuffer:
        if size > self.capacity:
            raise SizeTooLarge(f"{size} bytes exceeds buffer capacity {self.capacity}")
        if size < 0:
            raise ValueError("size must be non-negative")
        idle = [b for b in self.host_buffers if b.purpose is BufferPurpose.IDLE]
        if not idle:
            raise PoolExhausted("no Idle host buffer")
        if self.holder(BufferPurpose.PREPARING) is not None:
            raise PurposeOccupied("another buffer is already Preparing")
        buf = idle[0]
        buf.data[:size] = bytes(size)
        buf.length = size
        buf.bound_request = request_id if request_id is not None else -1 - buf.buffer_id
        self._set(buf, BufferPurpose.PREPARING)
        self._notify()
        return buf

    def acquire(self, size: int, request_id: Optional[int] = None,
                blocking: bool = False, timeout: Optional[float] = None) -> StagingBuffer:
        """Take an Idle host buffer into Preparing with ``size`` zeroed bytes.

        Non-blocking calls raise PoolExhausted / PurposeOccupied immediately;
        blocking calls wait (wall clock) up to ``timeout`` seconds.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                try:
                    return self._try_acquire(size, request_id)
                except (PoolExhausted, PurposeOccupied):
                    if not blocking:
                        raise
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise
                    self._cond.wait(remaining)

    def advance(self, buf: StagingBuffer, next_purpose: BufferPurpose,
                rebind: Optional[int] = None) -> None:
        """Move a host buffer along one legal edge of its purpose cycle."""
        next_purpose = BufferPurpose(next_purpose)
        with self._cond:
            self._check_host(buf)
            if next_purpose is BufferPurpose.IDLE:
                raise InvalidTransition("use release() to return a buffer to Idle")
            if (buf.purpose, next_purpose) not in HOST_EDGES:
                raise InvalidTransition(f"{buf.purpose.value} -> {next_purpose.value}")
            other = self.holder(next_purpose)
            if other is not None and other is not buf:
                raise PurposeOccupied(
                    f"buffer {other.buffer_id} already holds {next_purpose.value}")
            if rebind is not None:
                buf.bound_request = rebind
            self._set(buf, next_purpose)
            self._notify()

    def release(self, buf: StagingBuffer) -> None:
        """Return a Finishing host buffer to Idle, or mark a device buffer drained."""
        with self._cond:
            if buf.side == "device":
                self._check_device(buf)
                buf.bound_request = None
                buf.length = 0
                self._notify()
                return
            self._check_host(buf)
            if buf.purpose is not BufferPurpose.FINISHING:
                raise InvalidTransition(f"cannot release a {buf.purpose.value} buffer")
            buf.bound_request = None
            buf.length = 0
            self._set(buf, BufferPurpose.IDLE)
            self._notify()

    def _check_host(self, buf: StagingBuffer) -> None:
        if not any(buf is b for b in self.host_buffers):
            raise InvalidTransition("buffer does not belong to this pool's host side")

    def _check_device(self, buf: StagingBuffer) -> None:
        if not any(buf is b for b in self.device_buffers):
            raise InvalidTransition("buffer does not belong to this pool's device side")

    # -- device side ---------------------------------------------------------

    @property
    def active(self) -> StagingBuffer:
        return self._roles[0]

    @property
    def incoming(self) -> StagingBuffer:
        return self._roles[1]

    @property
    def outgoing(self) -> StagingBuffer:
        return self._roles[2]

    def device_roles(self) -> Tuple[StagingBuffer, StagingBuffer, StagingBuffer]:
        return tuple(self._roles)

    def device_buffer_for(self, request_id: int) -> Optional[StagingBuffer]:
        for buf in self.device_buffers:
            if buf.bound_request == request_id:
                return buf
        return None

    def can_rotate(self) -> bool:
        with self._cond:
            return self.outgoing.bound_request is None

    def rotate_device_buffers(self) -> Tuple[StagingBuffer, StagingBuffer, StagingBuffer]:
        """Shift roles: incoming -> active -> outgoing -> incoming.

        Returns the new (active, incoming, outgoing) assignment.
        """
        with self._cond:
            if self.outgoing.bound_request is not None:
                raise RotationBlocked(
                    f"outgoing buffer {self.outgoing.buffer_id} still holds request "
                    f"{self.outgoing.bound_request}")
            active, incoming, outgoing = self._roles
            self._roles = [incoming, outgoing, active]
            self._set(incoming, BufferPurpose.DEVICE_ACTIVE)
            self._set(outgoing, BufferPurpose.DEVICE_INCOMING)
            self._set(active, BufferPurpose.DEVICE_OUTGOING)
            self._notify()
            return tuple(self._roles)

    def wait_for_change(self, timeout: float) -> None:
        with self._cond:
            self._cond.wait(timeout)
