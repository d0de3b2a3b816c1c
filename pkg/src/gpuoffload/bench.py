"""Benchmark harness: launch latency, AES size sweep, calibration, soak.

All timing comes from the deterministic runtime, so the CSV for a given
config and cost model is identical from run to run.  Run as::

    python -m gpuoffload.bench latency --out lat.csv
    python -m gpuoffload.bench sweep --service aes128-ecb --sizes 1KiB:16MiB:x2 --check
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import threading
import time
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np

from . import services
from .device import ConfigError, load_cost_model
from .msgqueue import Response
from .runtime import (Mode, Runtime, RuntimeConfig, load_runtime_config,
                      parse_size, parse_sizes, run_on_cpu)

logger = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "service", "size_bytes", "lanes", "path", "latency_us",
              "throughput_mb_s", "repetitions")

# reference thresholds used by --check
LATENCY_TARGETS_US = {512: 16.7, 1024: 17.3, 2048: 18.3}
LATENCY_TOLERANCE = 0.05
MIN_TRADITIONAL_RATIO = 1.25
EXPECTED_CROSSOVER = 8192
PLATEAU_SPEEDUP = 6.0
PLATEAU_TOLERANCE = 0.20
PLATEAU_FROM = 4 * 1024 * 1024
DECRYPT_TOLERANCE = 0.05

SERVICE_ALIASES = {"aes128-ecb": (services.AES_ENCRYPT, services.AES_DECRYPT)}


@dataclass(frozen=True)
class BenchRecord:
    experiment: str
    service: str
    size_bytes: int
    lanes: int
    path: str
    latency_us: float
    repetitions: int = 1

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @property
    def throughput_mb_s(self) -> float:
        # bytes per microsecond == MB/s
        return self.size_bytes / self.latency_us if self.latency_us > 0 else math.inf

    def row(self) -> List[str]:
        return [self.experiment, self.service, str(self.size_bytes), str(self.lanes), self.path,
                f"{self.latency_us:.6f}", f"{self.throughput_mb_s:.6f}", str(self.repetitions)]


def write_csv(records: Iterable[BenchRecord], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.row())


def read_csv(text: str) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def _payload(size: int, seed: int) -> bytes:
    return np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()


def _mean_latency(rt: Runtime, service: str, data: bytes, lanes: Optional[int],
                  repetitions: int) -> float:
    total = 0.0
    for _ in range(repetitions):
        rt.call(service, data, lanes)
        total += rt.last_response.latency_us
    return total / repetitions


def bench_launch_latency(config: Optional[RuntimeConfig] = None,
                         lanes: Sequence[int] = (512, 1024, 2048), input_size: int = 4096,
                         repetitions: int = 1) -> List[BenchRecord]:
    """Caller-observed round trip of the empty service, NSK vs traditional.

    The resident kernel is sized to each lane count in turn, as a kernel
    launched with that many threads would be.
    """
    config = (config or RuntimeConfig()).replace(mode=Mode.DETERMINISTIC)
    data = _payload(input_size, 0)
    records = []
    for n in lanes:
        cm = config.cost_model.replace(resident_lanes=max(config.cost_model.resident_lanes, n))
        for path, forced in (("nsk", False), ("traditional", True)):
            rt = Runtime(config.replace(cost_model=cm, force_traditional=forced))
            latency = _mean_latency(rt, services.ECHO, data, n, repetitions)
            rt.shutdown()
            records.append(BenchRecord("latency", services.ECHO, input_size, n, path,
                                       latency, repetitions))
    return records


def bench_aes_sweep(config: Optional[RuntimeConfig] = None, sizes: Sequence[int] = (),
                    repetitions: int = 1,
                    service_ids: Sequence[str] = SERVICE_ALIASES["aes128-ecb"]) -> List[BenchRecord]:
    """Device and CPU latency of AES at each size, encrypt and decrypt."""
    config = (config or RuntimeConfig()).replace(mode=Mode.DETERMINISTIC)
    sizes = list(sizes or config.calibration_sizes)
    if any(s <= 0 or s % services.BLOCK_SIZE for s in sizes):
        raise ConfigError("AES sizes must be positive multiples of 16")
    if max(sizes) > config.buffer_capacity:
        raise ConfigError(f"size {max(sizes)} exceeds buffer capacity {config.buffer_capacity}")
    rt = Runtime(config)
    lanes = config.cost_model.resident_lanes
    records = []
    for size in sizes:
        data = _payload(size, size)
        for sid in service_ids:
            dev_us = _mean_latency(rt, sid, data, lanes, repetitions)
            cpu_us = 0.0
            for _ in range(repetitions):
                _, t = run_on_cpu(rt.registry.lookup(sid), data, config.cost_model)
                cpu_us += t
            records.append(BenchRecord("sweep", sid, size, lanes, "nsk", dev_us, repetitions))
            records.append(BenchRecord("sweep", sid, size, 1, "cpu", cpu_us / repetitions,
                                       repetitions))
    rt.shutdown()
    return records


def bench_calibrate(config: Optional[RuntimeConfig] = None, service_id: str = services.AES_ENCRYPT,
                    sizes: Sequence[int] = ()) -> tuple:
    config = (config or RuntimeConfig()).replace(mode=Mode.DETERMINISTIC)
    rt = Runtime(config)
    table = rt.calibrate(service_id, list(sizes) or None)
    rt.shutdown()
    lanes = config.cost_model.resident_lanes
    records = []
    for size, cpu_us, dev_us in table.samples:
        records.append(BenchRecord("calibrate", service_id, size, lanes, "nsk", dev_us))
        records.append(BenchRecord("calibrate", service_id, size, 1, "cpu", cpu_us))
    return table, records


@dataclass
class SoakResult:
    calls: int
    completions: int
    duplicates: int
    losses: int
    callback_violations: int
    errors: int
    wall_s: float

    @property
    def ok(self) -> bool:
        return (self.completions == self.calls and self.duplicates == 0 and self.losses == 0
                and self.callback_violations == 0 and self.errors == 0)


def soak(config: Optional[RuntimeConfig] = None, calls: int = 100_000, callers: int = 4,
         size: int = 64, service_id: str = services.ECHO) -> SoakResult:
    """Hammer a concurrent runtime from ``callers`` threads.

    Half of each caller's calls use busy-wait completion and half use
    callbacks.  Only conservation is checked; timing is not.
    """
    config = (config or RuntimeConfig()).replace(mode=Mode.CONCURRENT)
    rt = Runtime(config).start()
    lock = threading.Lock()
    seen: Dict[int, int] = {}
    fired: Dict[int, int] = {}
    errors = []
    per_caller = [calls // callers + (1 if i < calls % callers else 0) for i in range(callers)]

    def worker(idx: int, n: int) -> None:
        rng = np.random.default_rng(idx)
        try:
            for i in range(n):
                data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
                if i % 2:
                    done = threading.Event()
                    got: List[Response] = []

                    def on_done(resp: Response) -> None:
                        with lock:
                            fired[resp.request_id] = fired.get(resp.request_id, 0) + 1
                        got.append(resp)
                        done.set()

                    rid = rt.submit(service_id, data, callback=on_done, block=True)
                    if not done.wait(config.call_timeout_s):
                        raise TimeoutError(f"callback for request {rid} never fired")
                    resp = got[0]
                else:
                    rid = rt.submit(service_id, data, block=True)
                    resp = rt.wait(rid)
                if resp.request_id != rid or (service_id == services.ECHO and resp.output != data):
                    raise AssertionError(f"wrong response for request {rid}")
                with lock:
                    seen[rid] = seen.get(rid, 0) + 1
        except Exception as exc:  # recorded, reported as a failure
            logger.error("soak caller %d failed: %r", idx, exc)
            errors.append(exc)

    t0 = time.perf_counter()
    threads = [threading.Thread(target=worker, args=(i, n)) for i, n in enumerate(per_caller)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    rt.shutdown()
    completions = rt.completed
    duplicates = sum(c - 1 for c in seen.values() if c > 1)
    callback_violations = sum(1 for c in fired.values() if c != 1)
    expected_callbacks = sum(n // 2 for n in per_caller)
    callback_violations += abs(len(fired) - expected_callbacks)
    return SoakResult(calls, completions, duplicates, calls - len(seen), callback_violations,
                      len(errors), wall)


# -- checks ------------------------------------------------------------------

def check_latency(records: Sequence[BenchRecord]) -> List[str]:
    """Return failure messages (empty when the reference latencies are met)."""
    failures = []
    nsk = {r.lanes: r.latency_us for r in records if r.path == "nsk"}
    trad = {r.lanes: r.latency_us for r in records if r.path == "traditional"}
    for lanes, target in LATENCY_TARGETS_US.items():
        if lanes in nsk and abs(nsk[lanes] - target) > LATENCY_TOLERANCE * target:
            failures.append(f"nsk latency at {lanes} lanes {nsk[lanes]:.3f}us, want {target}us +-5%")
    if 512 in nsk and 512 in trad and trad[512] / nsk[512] < MIN_TRADITIONAL_RATIO:
        failures.append(f"traditional/nsk ratio {trad[512] / nsk[512]:.3f} < {MIN_TRADITIONAL_RATIO}")
    return failures


def sweep_summary(records: Sequence[BenchRecord], service: str = services.AES_ENCRYPT) -> dict:
    dev = {r.size_bytes: r for r in records if r.service == service and r.path != "cpu"}
    cpu = {r.size_bytes: r for r in records if r.service == service and r.path == "cpu"}
    sizes = sorted(set(dev) & set(cpu))
    first = next((s for s in sizes if dev[s].throughput_mb_s > cpu[s].throughput_mb_s), math.inf)
    speedup = {s: dev[s].throughput_mb_s / cpu[s].throughput_mb_s for s in sizes}
    return {"crossover": first, "speedup": speedup}


def check_sweep(records: Sequence[BenchRecord]) -> List[str]:
    failures = []
    summary = sweep_summary(records)
    if summary["crossover"] != EXPECTED_CROSSOVER:
        failures.append(f"device first beats CPU at {summary['crossover']} bytes, "
                        f"want {EXPECTED_CROSSOVER}")
    speedups = [summary["speedup"][s] for s in sorted(summary["speedup"])]
    if any(b < a for a, b in zip(speedups, speedups[1:])):
        failures.append("device/CPU speedup is not nondecreasing in size")
    for size, ratio in summary["speedup"].items():
        if size >= PLATEAU_FROM and abs(ratio - PLATEAU_SPEEDUP) > PLATEAU_TOLERANCE * PLATEAU_SPEEDUP:
            failures.append(f"speedup {ratio:.2f}x at {size} bytes, want 6x +-20%")
    enc = {r.size_bytes: r.latency_us for r in records
           if r.service == services.AES_ENCRYPT and r.path != "cpu"}
    dec = {r.size_bytes: r.latency_us for r in records
           if r.service == services.AES_DECRYPT and r.path != "cpu"}
    for size in sorted(set(enc) & set(dec)):
        if abs(dec[size] - enc[size]) > DECRYPT_TOLERANCE * enc[size]:
            failures.append(f"decrypt differs from encrypt by >5% at {size} bytes")
    return failures


# -- CLI -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise ConfigError(message)


def _lanes(text: str) -> List[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lane list {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("lanes must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpuoffload-bench", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=os.environ.get("NSK_CONFIG"),
                        help="runtime config file (default: $NSK_CONFIG)")
    parser.add_argument("--cost-model", help="cost model file (flat key = number pairs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, check=True):
        p.add_argument("--out", help="CSV output path (default: stdout)")
        if check:
            p.add_argument("--check", action="store_true",
                           help="exit 1 unless the reference thresholds hold")

    p = sub.add_parser("latency", help="NSK vs traditional launch round trip")
    p.add_argument("--lanes", type=_lanes, default=[512, 1024, 2048])
    p.add_argument("--input-size", default="4096")
    p.add_argument("--repetitions", type=int, default=1)
    common(p)

    p = sub.add_parser("sweep", help="AES device vs CPU size sweep")
    p.add_argument("--service", default="aes128-ecb")
    p.add_argument("--sizes", default="1KiB:16MiB:x2")
    p.add_argument("--repetitions", type=int, default=1)
    common(p)

    p = sub.add_parser("calibrate", help="boot-time crossover calibration")
    p.add_argument("--service", default=services.AES_ENCRYPT)
    p.add_argument("--sizes", default=None)
    common(p)

    p = sub.add_parser("soak", help="concurrent conservation soak")
    p.add_argument("--calls", type=int, default=100_000)
    p.add_argument("--callers", type=int, default=4)
    p.add_argument("--size", default="64")
    p.add_argument("--service", default=services.ECHO)
    common(p)
    return parser


def _load_config(args) -> RuntimeConfig:
    config = load_runtime_config(args.config) if args.config else RuntimeConfig()
    if args.cost_model:
        config = config.replace(cost_model=load_cost_model(args.cost_model))
    return config


def _emit(records: Sequence[BenchRecord], out: Optional[str]) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            write_csv(records, fh)
    else:
        write_csv(records, sys.stdout)


def _report(failures: List[str], check: bool) -> int:
    for msg in failures:
        print(f"CHECK FAILED: {msg}", file=sys.stderr)
    if check and not failures:
        print("all checks passed", file=sys.stderr)
    return 1 if (check and failures) else 0


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns 0 on success, 2 on config errors, 1 on failed checks."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        config = _load_config(args)
        if args.command == "latency":
            if args.repetitions < 1:
                raise ConfigError("--repetitions must be >= 1")
            size = parse_size(args.input_size)
            if size <= 0:
                raise ConfigError("--input-size must be positive")
            records = bench_launch_latency(config, args.lanes, size, args.repetitions)
            _emit(records, args.out)
            return _report(check_latency(records) if args.check else [], args.check)
        if args.command == "sweep":
            if args.repetitions < 1:
                raise ConfigError("--repetitions must be >= 1")
            sizes = parse_sizes(args.sizes)
            service_ids = SERVICE_ALIASES.get(args.service, (args.service,))
            for sid in service_ids:
                if sid not in (services.AES_ENCRYPT, services.AES_DECRYPT):
                    raise ConfigError(f"sweep supports AES services, not {sid!r}")
            records = bench_aes_sweep(config, sizes, args.repetitions, service_ids)
            _emit(records, args.out)
            return _report(check_sweep(records) if args.check else [], args.check)
        if args.command == "calibrate":
            sizes = parse_sizes(args.sizes) if args.sizes else list(config.calibration_sizes)
            service_id = SERVICE_ALIASES.get(args.service, (args.service,))[0]
            table, records = bench_calibrate(config, service_id, sizes)
            _emit(records, args.out)
            print(f"crossover_bytes = {table.crossover_bytes}", file=sys.stderr)
            failures = []
            if args.check and table.crossover_bytes != EXPECTED_CROSSOVER:
                failures.append(f"crossover {table.crossover_bytes}, want {EXPECTED_CROSSOVER}")
            return _report(failures, args.check)
        if args.command == "soak":
            if args.calls < 1 or args.callers < 1:
                raise ConfigError("--calls and --callers must be positive")
            result = soak(config, args.calls, args.callers, parse_size(args.size), args.service)
            summary = asdict(result)
            text = "".join(f"{k},{v}\n" for k, v in summary.items())
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write("metric,value\n" + text)
            else:
                sys.stdout.write("metric,value\n" + text)
            failures = [] if result.ok else [f"conservation violated: {summary}"]
            return _report(failures, args.check)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
