"""Simulated co-processor: cost model, service registry and the NSK loop.

Handlers do the real computation; elapsed times come from the cost model so
benchmarks are reproducible to the bit.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import os
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from . import services
from .bufpool import BufferPool, StagingBuffer
from .clock import VirtualClock
from .msgqueue import Mailbox, Message, MessageKind, QueueClosed, ServiceRequest, Side, SlotOccupied, Status

logger = logging.getLogger(__name__)

BASE_LANES = 512


class DeviceError(Exception):
    pass


class DuplicateService(DeviceError):
    pass


class RegistrationAfterLaunch(DeviceError):
    pass


class UnknownService(DeviceError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class ServiceError(DeviceError):
    pass


class LanesExceeded(DeviceError):
    pass


class GranularityViolation(services.BadLength):
    pass


class ConfigError(ValueError):
    pass


# -- cost model ----------------------------------------------------------------

@dataclass(frozen=True)
class CostModelParams:
    """Timing constants of the simulated device, in microseconds and bytes.

    Defaults come from :func:`fit_latency_constants` applied to the measured
    NSK latencies (16.7/17.3/18.3 us at 512/1024/2048 lanes for a 4 KB
    round trip) with a 1.3x traditional-launch ratio.  The remaining rates put
    the AES CPU/device crossover between 4 KiB and 8 KiB and the large-job
    speedup at about 6x.
    """

    msg_rtt_us: float = 6.790133333333333
    launch_fixed_us: float = 11.780133333333334
    dma_latency_us: float = 4.0
    dma_bandwidth_bytes_per_us: float = 8000.0
    per_block_exec_us: float = 0.865
    resident_lanes: int = 512
    lane_scale_us: float = 0.8
    cpu_bytes_per_us: float = 300.0
    host_copy_bytes_per_us: float = 10000.0

    _RATES = ("dma_bandwidth_bytes_per_us", "cpu_bytes_per_us", "host_copy_bytes_per_us",
              "resident_lanes")

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or math.isnan(value):
                raise ConfigError(f"{f.name} must be a number, got {value!r}")
            # additive overheads may be zero (degenerate "free device" models)
            if value < 0 or (f.name in self._RATES and value <= 0):
                raise ConfigError(f"{f.name} must be positive, got {value!r}")
        if int(self.resident_lanes) != self.resident_lanes:
            raise ConfigError("resident_lanes must be an integer")
        object.__setattr__(self, "resident_lanes", int(self.resident_lanes))

    def replace(self, **changes) -> "CostModelParams":
        return dataclasses.replace(self, **changes)

    def transfer_us(self, n_bytes: int) -> float:
        if n_bytes <= 0:
            return 0.0
        return self.dma_latency_us + n_bytes / self.dma_bandwidth_bytes_per_us

    def copy_us(self, n_bytes: int) -> float:
        """Host memcpy between a caller buffer and a pinned staging buffer."""
        return n_bytes / self.host_copy_bytes_per_us

    def lane_overhead_us(self, lanes: int) -> float:
        if lanes <= BASE_LANES:
            return 0.0
        return self.lane_scale_us * math.log2(lanes / BASE_LANES)

    def exec_us(self, blocks: int, lanes: int) -> float:
        if blocks <= 0:
            return 0.0
        return self.per_block_exec_us * math.ceil(blocks / lanes)

    def cpu_us(self, n_bytes: int) -> float:
        return services.cpu_cost_us(n_bytes, self.cpu_bytes_per_us)


DEFAULT_COST_MODEL = CostModelParams()


def parse_flat_config(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip('"').strip("'")
    return out


def cost_model_from_mapping(values: Mapping[str, object],
                            base: CostModelParams = DEFAULT_COST_MODEL) -> CostModelParams:
    names = {f.name for f in dataclasses.fields(CostModelParams)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown cost-model key {key!r}")
        try:
            changes[key] = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: not a number: {value!r}") from None
    return base.replace(**changes)


def load_cost_model(path: Union[str, os.PathLike]) -> CostModelParams:
    """Read a cost model file of flat ``key = number`` pairs."""
    with open(path) as fh:
        return cost_model_from_mapping(parse_flat_config(fh.read()))


def dump_cost_model(params: CostModelParams) -> str:
    return "".join(f"{f.name} = {getattr(params, f.name)!r}\n"
                   for f in dataclasses.fields(params))


# -- services ------------------------------------------------------------------

Handler = Callable[[bytes, int], bytes]


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: str
    name: str
    handler: Handler
    required_lanes: int = BASE_LANES
    # bytes per independent work unit; 0 means the service does no device work
    parallel_granularity: int = services.BLOCK_SIZE
    # host implementation of the same service, for the CPU path
    cpu_handler: Optional[Callable[[bytes], bytes]] = None

    def blocks(self, n_bytes: int) -> int:
        if self.parallel_granularity == 0:
            return 0
        return n_bytes // self.parallel_granularity


def echo_descriptor() -> ServiceDescriptor:
    return ServiceDescriptor(services.ECHO, "echo", services.echo, parallel_granularity=0,
                             cpu_handler=services.echo)


def aes_descriptors(key: Union[services.AesKey, bytes] = services.DEFAULT_KEY
                    ) -> Tuple[ServiceDescriptor, ServiceDescriptor]:
    key = key if isinstance(key, services.AesKey) else services.AesKey(key)
    enc, dec = services.Direction.ENCRYPT, services.Direction.DECRYPT
    return (
        ServiceDescriptor(services.AES_ENCRYPT, "AES-128-ECB encrypt",
                          services.device_handler(enc, key),
                          cpu_handler=lambda data: services.cpu_reference(services.EcbJob(enc, key, data))),
        ServiceDescriptor(services.AES_DECRYPT, "AES-128-ECB decrypt",
                          services.device_handler(dec, key),
                          cpu_handler=lambda data: services.cpu_reference(services.EcbJob(dec, key, data))),
    )


def default_descriptors(key=services.DEFAULT_KEY) -> Tuple[ServiceDescriptor, ...]:
    return (echo_descriptor(),) + aes_descriptors(key)


class ServiceRegistry:
    def __init__(self, descriptors: Iterable[ServiceDescriptor] = ()):
        self._services: Dict[str, ServiceDescriptor] = {}
        self.frozen = False
        for d in descriptors:
            self.register(d)

    def register(self, descriptor: ServiceDescriptor) -> None:
        if self.frozen:
            raise RegistrationAfterLaunch(
                f"cannot register {descriptor.service_id!r}: NSK already launched")
        if descriptor.service_id in self._services:
            raise DuplicateService(descriptor.service_id)
        self._services[descriptor.service_id] = descriptor

    def lookup(self, service_id: str) -> ServiceDescriptor:
        try:
            return self._services[service_id]
        except KeyError:
            raise UnknownService(f"no service registered as {service_id!r}") from None

    def get(self, service_id: str) -> Optional[ServiceDescriptor]:
        return self._services.get(service_id)

    def __contains__(self, service_id: str) -> bool:
        return service_id in self._services

    def __iter__(self):
        return iter(self._services.values())

    def __len__(self) -> int:
        return len(self._services)


def execute_service(descriptor: ServiceDescriptor, input: bytes,
                    output: Union[StagingBuffer, bytearray, None], lanes: int,
                    cost_model: CostModelParams = DEFAULT_COST_MODEL,
                    nsk_mode: bool = True) -> float:
    """Run ``descriptor``'s handler and return its simulated execution time.

    The result is written into ``output`` (a staging buffer or bytearray).
    Time is ``per_block_exec_us * ceil(blocks / lanes)``.
    """
    if lanes < 1:
        raise ValueError("lanes must be >= 1")
    g = descriptor.parallel_granularity
    if g and len(input) % g:
        raise GranularityViolation(
            f"{descriptor.service_id}: length {len(input)} not a multiple of {g}")
    if nsk_mode and lanes > cost_model.resident_lanes:
        raise LanesExceeded(f"{lanes} lanes > {cost_model.resident_lanes} resident")
    result = descriptor.handler(input, lanes)
    if isinstance(output, StagingBuffer):
        output.write(result)
    elif output is not None:
        output[:] = result
    return cost_model.exec_us(descriptor.blocks(len(input)), lanes)


def _service_cost_terms(n_input_bytes: int, lanes: int, cost_model: CostModelParams,
                        descriptor: Optional[ServiceDescriptor],
                        n_output_bytes: Optional[int]) -> float:
    n_out = n_input_bytes if n_output_bytes is None else n_output_bytes
    blocks = descriptor.blocks(n_input_bytes) if descriptor is not None else 0
    cm = cost_model
    return (cm.lane_overhead_us(lanes)
            + cm.copy_us(n_input_bytes) + cm.transfer_us(n_input_bytes)
            + cm.exec_us(blocks, lanes)
            + cm.transfer_us(n_out) + cm.copy_us(n_out))


def nsk_round_trip_cost(n_input_bytes: int, lanes: int,
                        cost_model: CostModelParams = DEFAULT_COST_MODEL,
                        descriptor: Optional[ServiceDescriptor] = None,
                        n_output_bytes: Optional[int] = None) -> float:
    """Caller-observed latency of one request through the resident kernel.

    With no descriptor the service is empty (no device work).  Output size
    defaults to the input size; pass 0 for services with no result.
    """
    return cost_model.msg_rtt_us + _service_cost_terms(
        n_input_bytes, lanes, cost_model, descriptor, n_output_bytes)


def traditional_round_trip_cost(n_input_bytes: int, lanes: int,
                                cost_model: CostModelParams = DEFAULT_COST_MODEL,
                                descriptor: Optional[ServiceDescriptor] = None,
                                n_output_bytes: Optional[int] = None) -> float:
    return cost_model.launch_fixed_us + _service_cost_terms(
        n_input_bytes, lanes, cost_model, descriptor, n_output_bytes)


def fit_latency_constants(measurements: Mapping[int, float], traditional_ratio: float,
                          n_bytes: int = 4096,
                          base: CostModelParams = DEFAULT_COST_MODEL) -> CostModelParams:
    """Solve for message, lane and launch constants from latency measurements.

    ``measurements`` maps lane counts to measured empty-kernel round trips of
    ``n_bytes``.  Latency is modelled as ``c0 + lane_scale * log2(lanes/512)``;
    ``c0`` and ``lane_scale`` are least-squares estimates.  The transfer and
    copy terms from ``base`` are subtracted from ``c0`` to get the message
    round trip, and the launch cost is set so traditional/NSK equals
    ``traditional_ratio`` at the base lane count.
    """
    lanes = np.array(sorted(measurements), dtype=float)
    y = np.array([measurements[int(l)] for l in lanes], dtype=float)
    design = np.column_stack([np.ones_like(lanes), np.log2(lanes / BASE_LANES)])
    (c0, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    data_terms = 2 * (base.copy_us(n_bytes) + base.transfer_us(n_bytes))
    msg_rtt = c0 - data_terms
    if msg_rtt < 0:
        raise ConfigError("transfer terms exceed the measured round trip")
    launch_fixed = msg_rtt + (traditional_ratio - 1.0) * c0
    return base.replace(msg_rtt_us=float(msg_rtt), lane_scale_us=float(slope),
                        launch_fixed_us=float(launch_fixed))


# -- the device --------------------------------------------------------------

class DeviceMode(str, enum.Enum):
    NSK = "nsk"
    TRADITIONAL = "traditional"


@dataclass
class _Running:
    request_id: int
    buffer: StagingBuffer
    status: Status
    elapsed: float
    done_at: float
    detail: str = ""


class NskDevice:
    """Device-side state: registry, mailbox endpoint, device buffers.

    In NSK mode the kernel is launched once and then serves ServiceCall
    messages until it receives Shutdown.  :meth:`step` is one iteration of
    that loop and never blocks, so a deterministic driver can interleave it
    with the host under a virtual clock; :meth:`nsk_main` runs the loop in a
    dedicated thread.
    """

    def __init__(self, registry: ServiceRegistry, mailbox: Mailbox, pool: BufferPool,
                 cost_model: CostModelParams = DEFAULT_COST_MODEL,
                 mode: DeviceMode = DeviceMode.NSK):
        self.registry = registry
        self.mailbox = mailbox
        self.buffers = pool
        self.cost_model = cost_model
        self.mode = DeviceMode(mode)
        self.running = False
        self.launched = False
        self.launches = 0
        self.services_run = 0
        self._current: Optional[_Running] = None
        self._pending: Optional[Message] = None
        self._shutdown_seen = False
        self._exec_lock = threading.Lock()

    @property
    def clock(self) -> VirtualClock:
        return self.mailbox.clock

    def register_service(self, descriptor: ServiceDescriptor) -> None:
        if self.launched:
            raise RegistrationAfterLaunch(
                f"cannot register {descriptor.service_id!r}: NSK already launched")
        self.registry.register(descriptor)

    def launch(self) -> None:
        """Start the resident kernel (NSK mode); idempotent."""
        if self.mode is not DeviceMode.NSK or self.launched:
            return
        self.registry.frozen = True
        self.launched = True
        self.running = True
        self.launches += 1
        logger.debug("NSK launched with %d services", len(self.registry))

    @property
    def busy(self) -> bool:
        return self._current is not None or self._pending is not None

    def next_event_time(self) -> Optional[float]:
        return self._current.done_at if self._current is not None else None

    def _run(self, request_id: int, service_id: str, lanes: int, buf: StagingBuffer,
             nsk_mode: bool) -> Tuple[Status, float, str]:
        descriptor = self.registry.get(service_id)
        if descriptor is None:
            buf.length = 0
            return Status.UNKNOWN_SERVICE, 0.0, f"no service registered as {service_id!r}"
        data = buf.payload()
        try:
            with self._exec_lock:  # one handler at a time
                elapsed = execute_service(descriptor, data, buf, lanes, self.cost_model,
                                          nsk_mode=nsk_mode)
        except Exception as exc:  # a resident kernel must survive bad input
            buf.length = 0
            return Status.SERVICE_ERROR, 0.0, f"{type(exc).__name__}: {exc}"
        self.services_run += 1
        return Status.OK, elapsed + self.cost_model.lane_overhead_us(lanes), ""

    def step(self) -> bool:
        """One non-blocking iteration of the NSK loop; True if anything happened."""
        if not self.running:
            return False
        now = self.clock.now()
        if self._current is not None:
            if not self.clock.frozen and now < self._current.done_at:
                return False
            cur, self._current = self._current, None
            self._pending = Message.completion(cur.request_id, cur.status, cur.elapsed, cur.detail)
        if self._pending is not None:
            try:
                self.mailbox.post(Side.DEVICE, self._pending)
            except SlotOccupied:
                return False
            if self._pending.kind is MessageKind.COMPLETION and self._shutdown_seen:
                # the ack stays readable; further posts raise QueueClosed
                self.running = False
                self.mailbox.close()
            self._pending = None
            return True
        msg = self.mailbox.peek(Side.DEVICE)
        if msg is None:
            return False
        if msg.kind is MessageKind.SHUTDOWN:
            self.mailbox.poll(Side.DEVICE)
            self._shutdown_seen = True
            self._pending = Message.completion(None, Status.OK, 0.0, "shutdown")
            self.step()
            return True
        if msg.kind is not MessageKind.SERVICE_CALL:
            raise DeviceError(f"device received unexpected {msg.kind.value}")
        if not self.buffers.can_rotate():
            return False
        self.mailbox.poll(Side.DEVICE)
        active, _, _ = self.buffers.rotate_device_buffers()
        if active.bound_request != msg.request_id:
            raise DeviceError(
                f"ServiceCall {msg.request_id} but active buffer holds {active.bound_request}")
        status, elapsed, detail = self._run(msg.request_id, msg.service_id,
                                            msg.lanes or BASE_LANES, active, nsk_mode=True)
        self._current = _Running(msg.request_id, active, status, elapsed, now + elapsed, detail)
        return True

    def nsk_main(self, idle_wait: float = 0.001) -> None:
        """Run the resident loop until Shutdown has been acknowledged."""
        self.launch()
        while self.running:
            try:
                progressed = self.step()
            except QueueClosed:
                break
            if not progressed:
                self.mailbox.wait(Side.DEVICE, idle_wait)
                if self.busy or self.mailbox.peek(Side.DEVICE) is not None:
                    # blocked on a full slot or an undrained buffer
                    self.buffers.wait_for_change(idle_wait)

    def launch_kernel(self, request: ServiceRequest, buf: StagingBuffer) -> Tuple[Status, float, str]:
        """Traditional launch of one request against device buffer ``buf``.

        Returns (status, device time, detail); device time includes the fixed
        launch cost.
        """
        self.launches += 1
        status, elapsed, detail = self._run(request.request_id, request.service_id,
                                            request.lanes, buf, nsk_mode=False)
        return status, self.cost_model.launch_fixed_us + elapsed, detail


def launch_traditional(state: NskDevice, request: ServiceRequest,
                       cost_model: Optional[CostModelParams] = None) -> Tuple[Message, bytes]:
    """Run ``request`` with a one-off kernel launch outside any pipeline.

    Returns the Completion (``device_elapsed`` holds the full modeled cost:
    launch, staging, both transfers and execution) and the output bytes.
    """
    cm = cost_model or state.cost_model
    scratch = StagingBuffer(-1, max(len(request.input), 1), side="device")
    scratch.write(request.input)
    state.launches += 1
    saved, state.cost_model = state.cost_model, cm
    try:
        status, elapsed, detail = state._run(request.request_id, request.service_id,
                                             request.lanes, scratch, nsk_mode=False)
    finally:
        state.cost_model = saved
    output = scratch.payload() if status is Status.OK and request.wants_output else b""
    total = (cm.launch_fixed_us + elapsed + cm.copy_us(len(request.input))
             + cm.transfer_us(len(request.input)) + cm.transfer_us(len(output))
             + cm.copy_us(len(output)))
    return Message.completion(request.request_id, status, total, detail), output
