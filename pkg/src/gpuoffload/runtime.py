"""Host-side orchestration: caller API, helper loop, pipeline and dispatcher.

Requests flow through five stages::

    Preparing -> HostToDeviceDma -> DeviceExecuting -> DeviceToHostDma -> Finishing

with at most one request per stage.  Preparing, the two DMA stages and
Finishing each hold one of the four host staging buffers; the executing
request lives only in device memory.  When a request's result is ready, the
host buffer that last uploaded input (its data now in device memory) is
rebound to receive that result.

Deterministic mode runs helper and device in one context under a virtual
clock and is what every timing figure comes from.  Concurrent mode runs the
helper and the resident kernel in their own threads; there the cost model
only orders events and timing is not meaningful.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import services
from .bufpool import (DEFAULT_CAPACITY, BufferPool, BufferPurpose, SizeTooLarge,
                      StagingBuffer)
from .clock import VirtualClock
from .device import (DEFAULT_COST_MODEL, ConfigError, CostModelParams, DeviceMode,
                     NskDevice, ServiceDescriptor, ServiceError, ServiceRegistry,
                     UnknownService, default_descriptors, load_cost_model,
                     parse_flat_config)
from .msgqueue import (DEFAULT_QUEUE_CAPACITY, CompletionMode, Mailbox, Message, MessageKind,
                       QueueClosed, QueueFull, RequestQueue, Response, ResponseQueue,
                       ServiceRequest, Side, Status)

logger = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB
DEFAULT_CALIBRATION_SIZES = tuple(2 ** k for k in range(10, 25))  # 1 KiB .. 16 MiB


class Timeout(Exception):
    pass


class NotCalibrated(Exception):
    pass


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    CONCURRENT = "concurrent"


class Stage(str, enum.Enum):
    PREPARING = "Preparing"
    HOST_TO_DEVICE_DMA = "HostToDeviceDma"
    DEVICE_EXECUTING = "DeviceExecuting"
    DEVICE_TO_HOST_DMA = "DeviceToHostDma"
    FINISHING = "Finishing"


STAGES = tuple(Stage)


class Path(str, enum.Enum):
    CPU = "cpu"
    DEVICE = "device"


# -- configuration -----------------------------------------------------------

def parse_size(text: str) -> int:
    """Parse ``4096``, ``8KiB``, ``16MiB``, ``1K`` style sizes."""
    s = str(text).strip()
    units = {"gib": 1024 ** 3, "mib": MiB, "kib": KiB, "g": 1024 ** 3, "m": MiB, "k": KiB,
             "b": 1}
    lower = s.lower()
    for suffix, mult in units.items():
        if lower.endswith(suffix):
            num = lower[: -len(suffix)].strip()
            break
    else:
        num, mult = lower, 1
    try:
        value = float(num) * mult
    except ValueError:
        raise ConfigError(f"bad size {text!r}") from None
    if value != int(value):
        raise ConfigError(f"size {text!r} is not a whole number of bytes")
    return int(value)


def parse_sizes(text: str) -> List[int]:
    """Parse a size list: ``A:B:xK`` (geometric) or comma-separated sizes."""
    text = str(text).strip()
    if not text:
        raise ConfigError("empty size list")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3 or not parts[2].lower().startswith("x"):
            raise ConfigError(f"range must look like A:B:xK, got {text!r}")
        start, stop = parse_size(parts[0]), parse_size(parts[1])
        try:
            factor = float(parts[2][1:])
        except ValueError:
            raise ConfigError(f"bad factor in {text!r}") from None
        if start <= 0 or stop < start or factor <= 1:
            raise ConfigError(f"invalid range {text!r}")
        sizes, s = [], float(start)
        while s <= stop * (1 + 1e-12):
            sizes.append(int(round(s)))
            s *= factor
    else:
        sizes = [parse_size(p) for p in text.split(",") if p.strip()]
    if not sizes or any(s <= 0 for s in sizes):
        raise ConfigError(f"sizes must be positive: {text!r}")
    if sizes != sorted(sizes):
        raise ConfigError("sizes must be ascending")
    return sizes


@dataclass
class RuntimeConfig:
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    buffer_capacity: int = DEFAULT_CAPACITY
    cost_model: CostModelParams = DEFAULT_COST_MODEL
    cost_model_path: Optional[str] = None
    mode: Mode = Mode.DETERMINISTIC
    calibration_sizes: Tuple[int, ...] = DEFAULT_CALIBRATION_SIZES
    pipelined: bool = True
    force_traditional: bool = False
    call_timeout_s: float = 30.0
    # deterministic mode: give up when a call's simulated latency exceeds this
    sim_deadline_us: float = math.inf

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.queue_capacity < 1 or self.buffer_capacity < 1:
            raise ConfigError("capacities must be positive")
        if self.cost_model_path:
            self.cost_model = load_cost_model(self.cost_model_path)

    def replace(self, **changes) -> "RuntimeConfig":
        if "cost_model" in changes:
            # an explicit model wins over the file it may have come from
            changes.setdefault("cost_model_path", None)
        return dataclasses.replace(self, **changes)


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def load_runtime_config(path: Union[str, os.PathLike]) -> RuntimeConfig:
    """Read a runtime config file of ``key = value`` lines.

    Keys: queue_capacity, buffer_capacity, cost_model (path, relative to the
    config file), mode, calibration_sizes, pipelined, force_traditional,
    call_timeout_s, sim_deadline_us.
    """
    with open(path) as fh:
        raw = parse_flat_config(fh.read())
    base_dir = os.path.dirname(os.path.abspath(path))
    kwargs: Dict[str, object] = {}
    try:
        for key, value in raw.items():
            if key in ("queue_capacity", "buffer_capacity"):
                kwargs[key] = parse_size(value)
            elif key in ("cost_model", "cost_model_path"):
                kwargs["cost_model_path"] = os.path.join(base_dir, value)
            elif key == "mode":
                kwargs["mode"] = Mode(value)
            elif key == "calibration_sizes":
                kwargs["calibration_sizes"] = tuple(parse_sizes(value))
            elif key in ("pipelined", "force_traditional"):
                kwargs[key] = _BOOL[value.lower()]
            elif key in ("call_timeout_s", "sim_deadline_us"):
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown runtime config key {key!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    return RuntimeConfig(**kwargs)


# -- pipeline bookkeeping -----------------------------------------------------

@dataclass(frozen=True)
class PipelineSnapshot:
    time_us: float
    stages: Dict[Stage, Optional[int]]

    def occupied(self) -> int:
        return sum(v is not None for v in self.stages.values())


@dataclass
class _Flight:
    request: ServiceRequest
    submitted_at: float
    wall_start: float
    traditional: bool
    stage: Optional[Stage] = None
    ready_at: float = 0.0
    host_buf: Optional[StagingBuffer] = None
    completed: bool = False  # device finished
    status: Status = Status.OK
    detail: str = ""
    device_elapsed: float = 0.0
    output_len: int = 0
    uploaded: bool = False
    launch_result: Optional[Tuple[Status, float, str]] = None
    stages_seen: List[Stage] = field(default_factory=list)


@dataclass
class CalibrationTable:
    service_id: str
    crossover_bytes: float
    samples: List[Tuple[int, float, float]]  # (size, cpu_us, device_us)

    def path_for(self, size: int) -> Path:
        return Path.DEVICE if size >= self.crossover_bytes else Path.CPU


def crossover_from_samples(samples: Sequence[Tuple[int, float, float]]) -> float:
    """Smallest sampled size where the device is no slower than the CPU."""
    for size, cpu_us, dev_us in samples:
        if dev_us <= cpu_us:
            return size
    return math.inf


def dispatch(service_id: str, size: int, table: Optional[CalibrationTable]) -> Path:
    """CPU below the calibrated crossover, DEVICE at or above it."""
    if table is None or table.service_id != service_id:
        raise NotCalibrated(f"no calibration for {service_id!r}")
    return table.path_for(size)


# -- runtime -----------------------------------------------------------------

class Runtime:
    """The offload runtime: request queue, helper, mailbox, device.

    Typical use::

        rt = Runtime()
        out = rt.call("aes128-ecb-encrypt", data)
    """

    def __init__(self, config: Optional[RuntimeConfig] = None,
                 descriptors: Optional[Iterable[ServiceDescriptor]] = None, **overrides):
        config = config or RuntimeConfig()
        if overrides:
            config = config.replace(**overrides)
        self.config = config
        self.cost_model = config.cost_model
        self.mode = config.mode
        concurrent = self.mode is Mode.CONCURRENT
        self.clock = VirtualClock(frozen=concurrent)
        self._activity = threading.Condition()
        self._generation = 0
        self._waiters = 0
        # only the concurrent threads need waking on state changes
        poke = self._poke if concurrent else None
        self.requests = RequestQueue(config.queue_capacity, on_change=poke)
        self.responses = ResponseQueue()
        self.mailbox = Mailbox(self.clock, self.cost_model.msg_rtt_us / 2, on_change=poke)
        self.pool = BufferPool(config.buffer_capacity, on_change=poke)
        self.registry = ServiceRegistry(default_descriptors() if descriptors is None else descriptors)
        self.device = NskDevice(
            self.registry, self.mailbox, self.pool, self.cost_model,
            DeviceMode.TRADITIONAL if config.force_traditional else DeviceMode.NSK)
        self.calibration: Dict[str, CalibrationTable] = {}

        self._stages: Dict[Stage, Optional[_Flight]] = {s: None for s in STAGES}
        self._flights: Dict[int, _Flight] = {}
        self._spent: Optional[StagingBuffer] = None  # uploaded host buffer awaiting rebind
        self._shutdown_requested = False
        self._shutdown_posted = False
        self.closed = False
        self.completed = 0
        self.history: List[Tuple[int, Stage, float]] = []
        self.record_history = False
        self._threads: List[threading.Thread] = []
        self._stop = threading.Event()
        self._started = False
        self._local = threading.local()

    @property
    def last_response(self) -> Optional[Response]:
        """Response of the calling thread's most recent :meth:`call`."""
        return getattr(self._local, "response", None)

    # -- lifecycle -----------------------------------------------------------

    def register_service(self, descriptor: ServiceDescriptor) -> None:
        self.device.register_service(descriptor)

    def start(self) -> "Runtime":
        """Launch the resident kernel (and, in concurrent mode, the threads)."""
        if self._started:
            return self
        self._started = True
        self.device.launch()
        if self.mode is Mode.CONCURRENT:
            helper = threading.Thread(target=self._helper_main, name="offload-helper", daemon=True)
            self._threads.append(helper)
            if self.device.mode is DeviceMode.NSK:
                dev = threading.Thread(target=self._device_main, name="nsk", daemon=True)
                self._threads.append(dev)
            for t in self._threads:
                t.start()
        return self

    def shutdown(self, timeout: float = 10.0) -> None:
        """Drain outstanding work, stop the kernel and close the queues."""
        if self.closed:
            return
        self._shutdown_requested = True
        self._poke()
        if not self._started:
            self._close()
            return
        if self.mode is Mode.DETERMINISTIC:
            self._run_until(lambda: self.closed)
        else:
            deadline = time.monotonic() + timeout
            while not self.closed and time.monotonic() < deadline:
                self._wait_change(self._generation, 0.01)
            self._stop.set()
            self._poke()
            for t in self._threads:
                t.join(timeout)
            if not self.closed:
                raise Timeout("runtime did not shut down in time")

    def __enter__(self) -> "Runtime":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def _close(self) -> None:
        self.requests.close()
        self.mailbox.close()
        self.closed = True
        self.responses.close()
        self._poke()

    def _poke(self) -> None:
        # Bump first, then look for sleepers.  A waiter registers before it
        # rechecks the generation, so it either sees the bump or gets notified.
        self._generation += 1
        if self._waiters:
            with self._activity:
                self._activity.notify_all()

    def _wait_change(self, seen: int, timeout: float) -> None:
        with self._activity:
            self._waiters += 1
            try:
                if self._generation == seen and not self._stop.is_set():
                    self._activity.wait(timeout)
            finally:
                self._waiters -= 1

    @property
    def in_flight(self) -> int:
        return len(self._flights)

    # -- caller API ----------------------------------------------------------

    def _check_request(self, service_id: str, data: bytes) -> None:
        if len(data) == 0:
            raise services.BadLength("input must be non-empty")
        if len(data) > self.pool.capacity:
            raise SizeTooLarge(f"{len(data)} bytes exceeds staging capacity {self.pool.capacity}")
        descriptor = self.registry.get(service_id)
        if descriptor is not None:
            g = descriptor.parallel_granularity
            if g and len(data) % g:
                raise services.BadLength(
                    f"{service_id}: length {len(data)} not a multiple of {g}")

    def submit(self, service_id: str, data: bytes, lanes: Optional[int] = None,
               callback: Optional[Callable[[Response], object]] = None,
               wants_output: bool = True, block: bool = False) -> int:
        """Place a request on the request queue and return its id.

        Raises QueueFull when the queue is at capacity and ``block`` is false.
        """
        self._check_request(service_id, data)
        if not self._started:
            self.start()
        lanes = self.cost_model.resident_lanes if lanes is None else lanes
        req = ServiceRequest(service_id, bytes(data), lanes,
                             CompletionMode.CALLBACK if callback else CompletionMode.BUSY_WAIT,
                             callback, wants_output)
        if block and self.mode is Mode.CONCURRENT:
            self.requests.enqueue_blocking(req, self.config.call_timeout_s)
        elif block:
            while True:
                try:
                    self.requests.enqueue(req)
                    break
                except QueueFull:
                    if not self._drive_once():
                        raise
        else:
            self.requests.enqueue(req)
        return req.request_id

    def call(self, service_id: str, data: bytes, lanes: Optional[int] = None,
             mode: Union[CompletionMode, str] = CompletionMode.BUSY_WAIT,
             callback: Optional[Callable[[Response], object]] = None) -> bytes:
        """Run a service on the device and return its output.

        ``mode="callback"`` blocks until the completion callback has fired
        (``callback`` is invoked first, on the helper's context);
        ``mode="busy-wait"`` polls the response queue.
        """
        mode = CompletionMode(mode)
        if mode is CompletionMode.CALLBACK:
            box: List[Response] = []
            done = threading.Event()

            def _cb(resp: Response) -> None:
                try:
                    if callback is not None:
                        callback(resp)
                finally:
                    box.append(resp)
                    done.set()

            rid = self.submit(service_id, data, lanes, callback=_cb, block=True)
            if self.mode is Mode.DETERMINISTIC:
                self._run_until(done.is_set, rid)
            elif not done.wait(self.config.call_timeout_s):
                raise Timeout(f"request {rid} timed out")
            resp = box[0]
        else:
            rid = self.submit(service_id, data, lanes, block=True)
            resp = self.wait(rid)
        self._local.response = resp
        return self._unwrap(resp)

    def wait(self, request_id: int) -> Response:
        """Busy-wait on the response queue for ``request_id``."""
        if self.mode is Mode.DETERMINISTIC:
            box: List[Response] = []

            def arrived() -> bool:
                resp = self.responses.take(request_id)
                if resp is not None:
                    box.append(resp)
                return bool(box)

            self._run_until(arrived, request_id)
            return box[0]
        deadline = time.monotonic() + self.config.call_timeout_s
        pause = 0.0
        while True:
            resp = self.responses.take(request_id)
            if resp is not None:
                return resp
            if time.monotonic() > deadline:
                raise Timeout(f"request {request_id} timed out")
            if pause < 1e-4:
                time.sleep(pause)
                pause = pause * 2 if pause else 1e-6
            else:
                resp = self.responses.wait(request_id, 0.01)
                if resp is not None:
                    return resp

    @staticmethod
    def _unwrap(resp: Response) -> bytes:
        if resp.status is Status.OK:
            return resp.output
        if resp.status is Status.UNKNOWN_SERVICE:
            raise UnknownService(resp.detail)
        if resp.detail.startswith(("BadLength", "GranularityViolation")):
            raise services.BadLength(resp.detail)
        raise ServiceError(resp.detail)

    def run_workload(self, service_id: str, payloads: Sequence[bytes],
                     lanes: Optional[int] = None) -> Tuple[List[bytes], float]:
        """Submit ``payloads`` back to back; return outputs and simulated makespan."""
        if self.mode is not Mode.DETERMINISTIC:
            raise RuntimeError("run_workload needs deterministic mode")
        start = self.clock.now()
        ids = [self.submit(service_id, p, lanes, block=True) for p in payloads]
        self._run_until(lambda: not self._flights and not len(self.requests))
        outputs = [self._unwrap(self.responses.take(rid)) for rid in ids]
        return outputs, self.clock.now() - start

    # -- deterministic driver ------------------------------------------------

    def _next_event_time(self) -> Optional[float]:
        now = self.clock.now()
        times = [f.ready_at for f in self._stages.values() if f is not None and f.ready_at > now]
        for t in (self.mailbox.next_delivery_time(), self.device.next_event_time()):
            if t is not None and t > now:
                times.append(t)
        return min(times) if times else None

    def _drive_once(self, until: Optional[float] = None) -> bool:
        """Do all work possible now, else advance the clock to the next event."""
        progressed = self.helper_step()
        progressed = self.device.step() or progressed
        if progressed:
            return True
        t = self._next_event_time()
        if t is None:
            return False
        if until is not None and t > until:
            self.clock.advance_to(until)
            return False
        self.clock.advance_to(t)
        return True

    def _run_until(self, predicate: Callable[[], bool], request_id: Optional[int] = None) -> None:
        start = self.clock.now()
        while not predicate():
            if not self._drive_once():
                raise Timeout(f"runtime idle before request {request_id} completed")
            if self.clock.now() - start > self.config.sim_deadline_us:
                raise Timeout(f"request {request_id} exceeded {self.config.sim_deadline_us} us")

    def pipeline_tick(self, now: float) -> PipelineSnapshot:
        """Advance the deterministic pipeline to simulated time ``now``."""
        if self.mode is not Mode.DETERMINISTIC:
            raise RuntimeError("pipeline_tick needs deterministic mode")
        if not self._started:
            self.start()
        while self.clock.now() <= now:
            if not self._drive_once(until=now):
                if self.clock.now() < now:
                    self.clock.advance_to(now)
                break
        return self.snapshot()

    def snapshot(self) -> PipelineSnapshot:
        return PipelineSnapshot(self.clock.now(), {
            s: (f.request.request_id if f is not None else None) for s, f in self._stages.items()})

    # -- helper --------------------------------------------------------------

    def _helper_main(self) -> None:
        while not self._stop.is_set() and not self.closed:
            seen = self._generation
            try:
                progressed = self.helper_step()
            except QueueClosed:
                break
            except Exception:
                logger.exception("helper step failed")
                raise
            if not progressed:
                self._wait_change(seen, 0.05)

    def _device_main(self) -> None:
        # same loop as NskDevice.nsk_main, woken by any runtime state change
        while self.device.running and not self._stop.is_set():
            seen = self._generation
            try:
                progressed = self.device.step()
            except QueueClosed:
                break
            if not progressed:
                self._wait_change(seen, 0.05)

    def _ready(self, f: _Flight) -> bool:
        return self.clock.frozen or self.clock.now() >= f.ready_at

    def _enter(self, f: _Flight, stage: Stage, duration: float) -> None:
        if f.stage is not None:
            self._stages[f.stage] = None
        if self._stages[stage] is not None:
            raise AssertionError(f"stage {stage.value} already occupied")
        self._stages[stage] = f
        f.stage = stage
        f.ready_at = self.clock.now() + duration
        f.stages_seen.append(stage)
        if self.record_history:
            self.history.append((f.request.request_id, stage, self.clock.now()))

    def helper_step(self) -> bool:
        """Perform at most one action per pipeline stage; True if any progress."""
        progressed = False
        for action in (self._step_finishing, self._step_download, self._step_poll,
                       self._step_start_download, self._step_to_device, self._step_flush,
                       self._step_upload,
                       self._step_admit, self._step_shutdown):
            if action():
                progressed = True
        return progressed

    def _step_finishing(self) -> bool:
        f = self._stages[Stage.FINISHING]
        if f is None or not self._ready(f):
            return False
        buf = f.host_buf
        output = buf.payload() if f.status is Status.OK and f.request.wants_output else b""
        self.pool.release(buf)
        self._stages[Stage.FINISHING] = None
        del self._flights[f.request.request_id]
        resp = Response(f.request.request_id, f.status, output, f.detail,
                        self.clock.now() - f.submitted_at)
        resp.wall_us = (time.perf_counter() - f.wall_start) * 1e6
        resp.device_elapsed = f.device_elapsed
        self.completed += 1
        if f.request.callback is not None:
            f.request.callback(resp)
        else:
            self.responses.put(resp)
        return True

    def _step_download(self) -> bool:
        f = self._stages[Stage.DEVICE_TO_HOST_DMA]
        if f is None or not self._ready(f) or self._stages[Stage.FINISHING] is not None:
            return False
        if self.pool.holder(BufferPurpose.FINISHING) is not None:
            return False
        dev = self.pool.device_buffer_for(f.request.request_id)
        if f.output_len:
            f.host_buf.write(dev.payload()[:f.output_len])
        else:
            f.host_buf.length = 0
        self.pool.release(dev)
        self.pool.advance(f.host_buf, BufferPurpose.FINISHING)
        self._enter(f, Stage.FINISHING, self.cost_model.copy_us(f.output_len))
        return True

    def _step_poll(self) -> bool:
        f = self._stages[Stage.DEVICE_EXECUTING]
        if f is not None and f.traditional and not f.completed and self._ready(f):
            self._device_done(f, *f.launch_result)
            return True
        msg = self.mailbox.poll(Side.HOST)
        if msg is None:
            return False
        if msg.kind is not MessageKind.COMPLETION:
            raise RuntimeError(f"host received unexpected {msg.kind.value}")
        if msg.request_id is None:  # shutdown acknowledgement
            self._close()
            return True
        f = self._stages[Stage.DEVICE_EXECUTING]
        if f is None or f.request.request_id != msg.request_id:
            raise RuntimeError(f"completion for request {msg.request_id} not on the device")
        self._device_done(f, msg.status, msg.device_elapsed or 0.0, msg.detail)
        return True

    def _device_done(self, f: _Flight, status: Status, elapsed: float, detail: str) -> None:
        f.completed = True
        f.status = status
        f.detail = detail
        f.device_elapsed = elapsed
        dev = self.pool.device_buffer_for(f.request.request_id)
        f.output_len = dev.length if (status is Status.OK and f.request.wants_output) else 0

    def _download_buffer(self, request_id: int) -> Optional[StagingBuffer]:
        """Host buffer to receive a result: the spent upload buffer, or a fresh one."""
        if self._spent is not None:
            buf, self._spent = self._spent, None
            self.pool.advance(buf, BufferPurpose.DEVICE_TO_HOST_DMA, rebind=request_id)
            for other in self._flights.values():
                if other.host_buf is buf:
                    other.host_buf = None
            return buf
        if (self.pool.holder(BufferPurpose.HOST_TO_DEVICE_DMA) is None
                and self.pool.holder(BufferPurpose.PREPARING) is None
                and self.pool.idle_count() > 0):
            # nothing upstream will free a buffer: walk an idle one round
            buf = self.pool.acquire(0, request_id)
            self.pool.advance(buf, BufferPurpose.HOST_TO_DEVICE_DMA)
            self.pool.advance(buf, BufferPurpose.DEVICE_TO_HOST_DMA)
            return buf
        return None

    def _step_start_download(self) -> bool:
        f = self._stages[Stage.DEVICE_EXECUTING]
        if f is None or not f.completed:
            return False
        if (self._stages[Stage.DEVICE_TO_HOST_DMA] is not None
                or self.pool.holder(BufferPurpose.DEVICE_TO_HOST_DMA) is not None):
            return False
        buf = self._download_buffer(f.request.request_id)
        if buf is None:
            return False
        f.host_buf = buf
        self._enter(f, Stage.DEVICE_TO_HOST_DMA, self.cost_model.transfer_us(f.output_len))
        return True

    def _step_to_device(self) -> bool:
        if self._stages[Stage.DEVICE_EXECUTING] is not None:
            return False
        f = self._stages[Stage.HOST_TO_DEVICE_DMA]
        if f is None or not f.uploaded:
            return False
        if f.traditional:
            if not self.pool.can_rotate() or self.device.busy:
                return False
            active, _, _ = self.pool.rotate_device_buffers()
            status, elapsed, detail = self.device.launch_kernel(f.request, active)
            self._enter(f, Stage.DEVICE_EXECUTING, elapsed)
            f.launch_result = (status, elapsed, detail)
            return True
        if not self.mailbox.can_post(Side.HOST):
            return False
        self.mailbox.post(Side.HOST, Message.service_call(
            f.request.request_id, f.request.service_id, f.request.lanes))
        self._enter(f, Stage.DEVICE_EXECUTING, 0.0)
        return True

    def _step_flush(self) -> bool:
        # A spent buffer whose request already reached the device and that no
        # finished result is waiting for passes through as an empty bubble,
        # freeing the upload purpose for the next request.
        buf = self._spent
        if buf is None or self._stages[Stage.HOST_TO_DEVICE_DMA] is not None:
            return False
        if (self.pool.holder(BufferPurpose.DEVICE_TO_HOST_DMA) is not None
                or self.pool.holder(BufferPurpose.FINISHING) is not None):
            return False
        self._spent = None
        for other in self._flights.values():
            if other.host_buf is buf:
                other.host_buf = None
        self.pool.advance(buf, BufferPurpose.DEVICE_TO_HOST_DMA)
        self.pool.advance(buf, BufferPurpose.FINISHING)
        self.pool.release(buf)
        return True

    def _step_upload(self) -> bool:
        f = self._stages[Stage.HOST_TO_DEVICE_DMA]
        if f is not None and not f.uploaded and self._ready(f):
            # data lands in the device's incoming buffer, which must be free by now
            incoming = self.pool.incoming
            if incoming.bound_request is not None:
                return False
            incoming.bound_request = f.request.request_id
            incoming.write(f.host_buf.payload())
            f.uploaded = True
            self._spent = f.host_buf
            return True
        f = self._stages[Stage.PREPARING]
        if f is None or not self._ready(f) or self._stages[Stage.HOST_TO_DEVICE_DMA] is not None:
            return False
        if self.pool.holder(BufferPurpose.HOST_TO_DEVICE_DMA) is not None:
            return False
        # the incoming buffer may still hold the input of the request just sent
        # to the device; it is rotated out before this transfer can land
        incoming = self.pool.incoming.bound_request
        on_device = self._stages[Stage.DEVICE_EXECUTING]
        if incoming is not None and (on_device is None or on_device.request.request_id != incoming):
            return False
        self.pool.advance(f.host_buf, BufferPurpose.HOST_TO_DEVICE_DMA)
        self._enter(f, Stage.HOST_TO_DEVICE_DMA,
                    self.cost_model.transfer_us(len(f.request.input)))
        return True

    def _step_admit(self) -> bool:
        if self._shutdown_posted:
            return False
        if not self.config.pipelined and self._flights:
            return False
        if not len(self.requests) or self._stages[Stage.PREPARING] is not None:
            return False
        if not self.pool.can_acquire():
            return False
        req = self.requests.dequeue()
        if req is None:
            return False
        traditional = (self.device.mode is DeviceMode.TRADITIONAL
                       or req.lanes > self.cost_model.resident_lanes)
        f = _Flight(req, self.clock.now(), time.perf_counter(), traditional)
        buf = self.pool.acquire(len(req.input), req.request_id)
        buf.write(req.input)
        req.input_handle = buf.buffer_id
        f.host_buf = buf
        self._flights[req.request_id] = f
        self._enter(f, Stage.PREPARING, self.cost_model.copy_us(len(req.input)))
        return True

    def _step_shutdown(self) -> bool:
        if not self._shutdown_requested or self._shutdown_posted:
            return False
        if self._flights or len(self.requests):
            return False
        if self.device.mode is not DeviceMode.NSK or not self.device.running:
            self._shutdown_posted = True
            self._close()
            return True
        if not self.mailbox.can_post(Side.HOST):
            return False
        self.mailbox.post(Side.HOST, Message.shutdown())
        self._shutdown_posted = True
        return True

    # -- dispatcher ------------------------------------------------------------

    def calibrate(self, service_id: str, sizes: Optional[Sequence[int]] = None,
                  seed: int = 0) -> CalibrationTable:
        """Microbenchmark both paths at each size and record the crossover."""
        descriptor = self.registry.lookup(service_id)
        sizes = list(sizes or self.config.calibration_sizes)
        if sizes != sorted(sizes):
            raise ValueError("sizes must be ascending")
        bench = self
        if self.mode is not Mode.DETERMINISTIC or self._flights or len(self.requests):
            bench = Runtime(self.config.replace(mode=Mode.DETERMINISTIC),
                            descriptors=list(self.registry))
        rng = np.random.default_rng(seed)
        samples = []
        for size in sizes:
            data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
            bench.call(service_id, data)
            device_us = bench.last_response.latency_us
            cpu_out, cpu_us = run_on_cpu(descriptor, data, self.cost_model)
            samples.append((size, cpu_us, device_us))
        if bench is not self:
            bench.shutdown()
        table = CalibrationTable(service_id, crossover_from_samples(samples), samples)
        self.calibration[service_id] = table
        return table

    def dispatch(self, service_id: str, size: int,
                 table: Optional[CalibrationTable] = None) -> Path:
        return dispatch(service_id, size, table or self.calibration.get(service_id))

    def run(self, service_id: str, data: bytes, lanes: Optional[int] = None) -> Tuple[bytes, Path]:
        """Dispatch by size, then run on the chosen path."""
        path = self.dispatch(service_id, len(data))
        if path is Path.DEVICE:
            return self.call(service_id, data, lanes), path
        out, _ = run_on_cpu(self.registry.lookup(service_id), data, self.cost_model)
        return out, path


def run_on_cpu(descriptor: ServiceDescriptor, data: bytes,
               cost_model: CostModelParams) -> Tuple[bytes, float]:
    """Run a service on the host; return output and simulated host time."""
    if descriptor.cpu_handler is not None:
        out = descriptor.cpu_handler(data)
    else:
        out = descriptor.handler(data, 1)
    return out, cost_model.cpu_us(len(data))
