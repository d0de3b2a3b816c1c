"""Simulated GPU offload runtime with a persistent device kernel.

Requests go through a bounded queue to a helper that stages them in
pinned-style buffers, moves them by modeled DMA and hands them to a
resident kernel over a one-slot mailbox.  A deterministic virtual clock
makes every latency figure reproducible.
"""

from .bufpool import (BufferPool, BufferPurpose, InvalidTransition, PoolError, PoolExhausted,
                      PurposeOccupied, RotationBlocked, SizeTooLarge, StagingBuffer)
from .clock import VirtualClock
from .device import (DEFAULT_COST_MODEL, ConfigError, CostModelParams, DeviceMode,
                     DuplicateService, GranularityViolation, LanesExceeded, NskDevice,
                     RegistrationAfterLaunch, ServiceDescriptor, ServiceError, ServiceRegistry,
                     UnknownService, execute_service, launch_traditional, load_cost_model,
                     nsk_round_trip_cost, traditional_round_trip_cost)
from .msgqueue import (CompletionMode, Mailbox, Message, MessageKind, QueueClosed, QueueFull,
                       RequestQueue, Response, ResponseQueue, ServiceRequest, Side,
                       SlotOccupied, Status)
from .runtime import (CalibrationTable, Mode, NotCalibrated, Path, PipelineSnapshot, Runtime,
                      RuntimeConfig, Stage, Timeout, dispatch, load_runtime_config)
from .services import (AES_DECRYPT, AES_ENCRYPT, ECHO, AesKey, BadLength, EcbJob,
                       aes128_ecb_decrypt, aes128_ecb_encrypt, cpu_reference)

__version__ = "0.1.0"

__all__ = [
    "BufferPool", "BufferPurpose", "InvalidTransition", "PoolError", "PoolExhausted",
    "PurposeOccupied", "RotationBlocked", "SizeTooLarge", "StagingBuffer", "VirtualClock",
    "DEFAULT_COST_MODEL", "ConfigError", "CostModelParams", "DeviceMode", "DuplicateService",
    "GranularityViolation", "LanesExceeded", "NskDevice", "RegistrationAfterLaunch",
    "ServiceDescriptor", "ServiceError", "ServiceRegistry", "UnknownService",
    "execute_service", "launch_traditional", "load_cost_model", "nsk_round_trip_cost",
    "traditional_round_trip_cost", "CompletionMode", "Mailbox", "Message", "MessageKind",
    "QueueClosed", "QueueFull", "RequestQueue", "Response", "ResponseQueue", "ServiceRequest",
    "Side", "SlotOccupied", "Status", "CalibrationTable", "Mode", "NotCalibrated", "Path",
    "PipelineSnapshot", "Runtime", "RuntimeConfig", "Stage", "Timeout", "dispatch",
    "load_runtime_config", "AES_DECRYPT", "AES_ENCRYPT", "ECHO", "AesKey", "BadLength",
    "EcbJob", "aes128_ecb_decrypt", "aes128_ecb_encrypt", "cpu_reference",
]
