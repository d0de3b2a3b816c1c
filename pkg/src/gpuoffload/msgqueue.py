"""Request/response queues and the host<->device message mailbox."""

from __future__ import annotations

import collections
import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Optional

from .clock import VirtualClock

DEFAULT_QUEUE_CAPACITY = 64


class QueueFull(Exception):
    """The request queue is at capacity; retry or block."""


class QueueClosed(Exception):
    """The queue or mailbox has been shut down."""


class SlotOccupied(Exception):
    """A mailbox direction already holds an unconsumed message."""


class CompletionMode(str, enum.Enum):
    CALLBACK = "callback"
    BUSY_WAIT = "busy-wait"


class MessageKind(str, enum.Enum):
    SERVICE_CALL = "ServiceCall"
    COMPLETION = "Completion"
    SHUTDOWN = "Shutdown"


class Status(str, enum.Enum):
    OK = "Ok"
    UNKNOWN_SERVICE = "UnknownService"
    SERVICE_ERROR = "ServiceError"


class Side(str, enum.Enum):
    HOST = "host"
    DEVICE = "device"

    @property
    def other(self) -> "Side":
        return Side.DEVICE if self is Side.HOST else Side.HOST


def _side(side) -> Side:
    return side if side.__class__ is Side else Side(side)


_request_ids = itertools.count(1)


def next_request_id() -> int:
    # itertools.count is atomic under the GIL
    return next(_request_ids)


@dataclass
class ServiceRequest:
    """One offload invocation as placed on the request queue.

    ``input`` is the caller's payload; it is staged into a pinned buffer
    when the helper admits the request.  ``input_handle`` and
    ``output_handle`` record the host staging buffers once bound.
    """

    service_id: str
    input: bytes
    lanes: int = 512
    completion: CompletionMode = CompletionMode.BUSY_WAIT
    callback: Optional[Callable[["Response"], Any]] = None
    wants_output: bool = True
    request_id: int = field(default_factory=next_request_id)
    input_handle: Optional[int] = None
    output_handle: Optional[int] = None

    def __post_init__(self) -> None:
        if self.lanes < 1:
            raise ValueError(f"lanes must be >= 1, got {self.lanes}")
        self.completion = CompletionMode(self.completion)


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    request_id: Optional[int] = None
    service_id: Optional[str] = None
    lanes: Optional[int] = None
    status: Optional[Status] = None
    device_elapsed: Optional[float] = None
    detail: str = ""

    @classmethod
    def service_call(cls, request_id: int, service_id: str, lanes: int = 512) -> "Message":
        return cls(MessageKind.SERVICE_CALL, request_id, service_id, lanes=lanes)

    @classmethod
    def completion(cls, request_id: Optional[int], status: Status = Status.OK,
                   device_elapsed: float = 0.0, detail: str = "") -> "Message":
        return cls(MessageKind.COMPLETION, request_id, status=status,
                   device_elapsed=device_elapsed, detail=detail)

    @classmethod
    def shutdown(cls) -> "Message":
        return cls(MessageKind.SHUTDOWN)


@dataclass
class Response:
    request_id: int
    status: Status
    output: bytes = b""
    detail: str = ""
    latency_us: float = 0.0


class _Notifying:
    def __init__(self, on_change: Optional[Callable[[], None]] = None):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._on_change = on_change

    def _changed(self) -> None:
        # caller holds self._lock
        self._cond.notify_all()
        if self._on_change is not None:
            self._on_change()


class RequestQueue(_Notifying):
    """Bounded multi-producer / single-consumer FIFO of service requests."""

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY,
                 on_change: Optional[Callable[[], None]] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        super().__init__(on_change)
        self.capacity = capacity
        self._items: Deque[ServiceRequest] = collections.deque()
        self.closed = False
        self.enqueued = 0
        self.dequeued = 0

    def __len__(self) -> int:
        return len(self._items)

    def enqueue(self, request: ServiceRequest) -> None:
        with self._lock:
            if self.closed:
                raise QueueClosed("request queue is closed")
            if len(self._items) >= self.capacity:
                raise QueueFull(f"request queue at capacity {self.capacity}")
            self._items.append(request)
            self.enqueued += 1
            self._changed()

    def enqueue_blocking(self, request: ServiceRequest, timeout: Optional[float] = None) -> None:
        """Enqueue, waiting for space; raises QueueFull on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while not self.closed and len(self._items) >= self.capacity:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise QueueFull(f"request queue at capacity {self.capacity}")
                self._cond.wait(remaining)
            if self.closed:
                raise QueueClosed("request queue is closed")
            self._items.append(request)
            self.enqueued += 1
            self._changed()

    def dequeue(self) -> Optional[ServiceRequest]:
        """Remove and return the oldest request, or None when empty."""
        with self._lock:
            if not self._items:
                return None
            req = self._items.popleft()
            self.dequeued += 1
            self._changed()
            return req

    def peek(self) -> Optional[ServiceRequest]:
        with self._lock:
            return self._items[0] if self._items else None

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self._changed()


class ResponseQueue(_Notifying):
    """Single-producer / multi-consumer responses keyed by request id."""

    def __init__(self, on_change: Optional[Callable[[], None]] = None):
        super().__init__(on_change)
        self._items: Dict[int, Response] = {}
        self.closed = False
        self.delivered = 0

    def __len__(self) -> int:
        return len(self._items)

    def put(self, response: Response) -> None:
        with self._lock:
            if response.request_id in self._items:
                raise ValueError(f"duplicate response for request {response.request_id}")
            self._items[response.request_id] = response
            self.delivered += 1
            self._changed()

    def take(self, request_id: int) -> Optional[Response]:
        with self._lock:
            return self._items.pop(request_id, None)

    def wait(self, request_id: int, timeout: Optional[float] = None) -> Optional[Response]:
        """Block until the response for ``request_id`` arrives (or timeout)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while request_id not in self._items:
                if self.closed:
                    raise QueueClosed("response queue is closed")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._items.pop(request_id)

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self._changed()


@dataclass
class _InFlight:
    message: Message
    visible_at: float


class Mailbox(_Notifying):
    """One message slot per direction between host and device.

    A message posted by one side becomes visible to the other side only
    once the clock reaches ``post_time + transfer_delay``.  With a frozen
    clock (concurrent mode) delivery is a scheduling hop to the other
    thread.
    """

    def __init__(self, clock: Optional[VirtualClock] = None, transfer_delay: float = 0.0,
                 on_change: Optional[Callable[[], None]] = None):
        super().__init__(on_change)
        if transfer_delay < 0:
            raise ValueError("transfer_delay must be non-negative")
        self.clock = clock if clock is not None else VirtualClock(frozen=True)
        self.transfer_delay = float(transfer_delay)
        # keyed by receiving side
        self._slots: Dict[Side, Optional[_InFlight]] = {Side.HOST: None, Side.DEVICE: None}
        self.closed = False
        self.posted = {Side.HOST: 0, Side.DEVICE: 0}

    @property
    def host_slot(self) -> Optional[Message]:
        slot = self._slots[Side.HOST]
        return slot.message if slot else None

    @property
    def device_slot(self) -> Optional[Message]:
        slot = self._slots[Side.DEVICE]
        return slot.message if slot else None

    def can_post(self, side: Side) -> bool:
        return not self.closed and self._slots[_side(side).other] is None

    def post(self, side: Side, message: Message) -> None:
        """Send ``message`` from ``side`` to the opposite side."""
        side = _side(side)
        with self._lock:
            if self.closed:
                raise QueueClosed("mailbox is closed")
            dest = side.other
            if self._slots[dest] is not None:
                raise SlotOccupied(f"{side.value}->{dest.value} slot holds an unconsumed message")
            self._slots[dest] = _InFlight(message, self.clock.now() + self.transfer_delay)
            self.posted[side] += 1
            self._changed()

    def _ready(self, side: Side) -> Optional[_InFlight]:
        slot = self._slots[side]
        if slot is None:
            return None
        if self.clock.frozen or self.clock.now() >= slot.visible_at:
            return slot
        return None

    def peek(self, side: Side) -> Optional[Message]:
        with self._lock:
            slot = self._ready(_side(side))
            return slot.message if slot else None

    def poll(self, side: Side) -> Optional[Message]:
        """Consume the message delivered to ``side``, if it has arrived."""
        side = _side(side)
        with self._lock:
            slot = self._ready(side)
            if slot is None:
                return None
            self._slots[side] = None
            self._changed()
            return slot.message

    def wait(self, side: Side, timeout: Optional[float] = None) -> Optional[Message]:
        """Block (wall clock) until a message is deliverable to ``side``, then peek it."""
        side = _side(side)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while self._ready(side) is None:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._slots[side].message

    def next_delivery_time(self) -> Optional[float]:
        """Earliest simulated time at which a pending message becomes visible."""
        with self._lock:
            times = [s.visible_at for s in self._slots.values() if s is not None]
        return min(times) if times else None

    def close(self) -> None:
        with self._lock:
            self.closed = True
            self._changed()
