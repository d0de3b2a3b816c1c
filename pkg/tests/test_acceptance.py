"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``.  Each test writes its
verdict straight to the terminal, bypassing pytest's output capture.
"""

import math

import numpy as np
import pytest

from conftest import oracle_encrypt
from gpuoffload import bench, services
from gpuoffload.bench import read_csv, run_cli
from gpuoffload.device import DEFAULT_COST_MODEL
from gpuoffload.runtime import Path, Runtime
from gpuoffload.services import AesKey, Direction, EcbJob, cpu_reference, device_handler
from pool_walk import random_walk

ENC = services.AES_ENCRYPT
POW2 = [2 ** k for k in range(10, 25)]
# 100 x one serialized 64 KiB AES round trip under the default cost model
SERIALIZED_64K_X100 = 100 * (6.790133333333333 + 2 * 6.5536 + 2 * 12.192 + 0.865 * 8)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def sweep_csvs(tmp_path_factory):
    """Two independent `sweep --check` runs over 1 KiB..16 MiB."""
    out = []
    for name in ("a.csv", "b.csv"):
        path = tmp_path_factory.mktemp("sweep") / name
        code = run_cli(["sweep", "--service", "aes128-ecb", "--sizes", "1KiB:16MiB:x2",
                        "--out", str(path), "--check"])
        out.append((code, path.read_bytes()))
    return out


def test_criterion_1_latency(verdict, tmp_path):
    path = tmp_path / "lat.csv"
    code = run_cli(["latency", "--lanes", "512,1024,2048", "--input-size", "4096",
                    "--out", str(path)])
    rows = read_csv(path.read_text())
    nsk = {int(r["lanes"]): float(r["latency_us"]) for r in rows if r["path"] == "nsk"}
    trad = {int(r["lanes"]): float(r["latency_us"]) for r in rows if r["path"] == "traditional"}
    targets = {512: 16.7, 1024: 17.3, 2048: 18.3}
    within = all(abs(nsk[l] - t) <= 0.05 * t for l, t in targets.items())
    ratio = trad[512] / nsk[512]
    ok = code == 0 and within and ratio >= 1.25
    verdict(1, ok, "nsk " + ", ".join(f"{l}:{nsk[l]:.2f}us" for l in sorted(nsk))
            + f"; traditional/nsk at 512 = {ratio:.3f}")


def test_criterion_2_crossover_and_plateau(verdict, sweep_csvs):
    code, data = sweep_csvs[0]
    recs = [bench.BenchRecord(r["experiment"], r["service"], int(r["size_bytes"]),
                              int(r["lanes"]), r["path"], float(r["latency_us"]),
                              int(r["repetitions"]))
            for r in read_csv(data.decode())]
    summary = bench.sweep_summary(recs)
    plateau = {s: v for s, v in summary["speedup"].items() if s >= 4 * 1024 * 1024}
    plateau_ok = bool(plateau) and all(abs(v - 6.0) <= 1.2 for v in plateau.values())
    ok = code == 0 and summary["crossover"] == 8192 and plateau_ok
    verdict(2, ok, f"crossover {summary['crossover']} B; speedup "
            + ", ".join(f"{s >> 20}MiB:{v:.2f}x" for s, v in sorted(plateau.items())))


def test_criterion_3_aes_correctness(verdict, kat_path):
    vectors = services.load_test_vectors(kat_path)
    kat_ok = all(v.run() for v in vectors)
    kat_ok = kat_ok and all(oracle_encrypt(v.key, v.plaintext) == v.ciphertext for v in vectors)
    rng = np.random.default_rng(2026)
    # log-uniform block counts over 16 B .. 1 MiB
    lengths = [16 * int(2 ** rng.uniform(0, 16)) for _ in range(1000)]
    round_trip = cross_path = 0
    for i, n in enumerate(lengths):
        key = AesKey(rng.bytes(16))
        data = rng.bytes(n)
        lanes = int(rng.choice([1, 7, 512, 1024]))
        ct = device_handler(Direction.ENCRYPT, key)(data, lanes)
        cross_path += ct == cpu_reference(EcbJob(Direction.ENCRYPT, key, data))
        # decryption alternates between the device and host paths
        if i % 2:
            back = device_handler(Direction.DECRYPT, key)(ct, lanes)
        else:
            back = services.aes128_ecb_decrypt(key, ct)
        round_trip += back == data
    # the longest length is pinned at 1 MiB
    key = AesKey(rng.bytes(16))
    big = rng.bytes(1 << 20)
    big_ok = services.aes128_ecb_decrypt(key, services.aes128_ecb_encrypt(key, big)) == big
    ok = kat_ok and round_trip == 1000 and cross_path == 1000 and big_ok
    verdict(3, ok, f"{len(vectors)} KAT vectors {'ok' if kat_ok else 'FAILED'}; "
            f"round trip {round_trip}/1000 (+1 MiB {big_ok}); cross-path {cross_path}/1000")


def test_criterion_4_persistence(verdict):
    launches = {}
    for forced in (False, True):
        rt = Runtime(force_traditional=forced)
        for i in range(10_000):
            rt.call(services.ECHO, i.to_bytes(8, "little"))
        rt.shutdown()
        launches[forced] = rt.device.launches
    ok = launches[False] == 1 and launches[True] == 10_000
    verdict(4, ok, f"10^4 calls: {launches[False]} launch (nsk), "
            f"{launches[True]} launches (forced traditional)")


def test_criterion_5_conservation_soak(verdict):
    result = bench.soak(calls=100_000, callers=4)
    verdict(5, result.ok, f"{result.completions}/{result.calls} completions, "
            f"{result.duplicates} duplicates, {result.losses} losses, "
            f"{result.callback_violations} callback violations, {result.errors} errors "
            f"({result.wall_s:.1f}s wall)")


def test_criterion_6_buffer_state_machine(verdict):
    stats = random_walk(10_000, seed=6)
    ok = stats["duplicates_seen"] == 0 and stats["illegal_accepted"] == 0 and stats["all_idle"]
    verdict(6, ok, f"10^4 steps ({stats['accepted']} accepted, {stats['rejected']} rejected); "
            f"duplicate purposes {stats['duplicates_seen']}, illegal edges accepted "
            f"{stats['illegal_accepted']}, all idle after drain {stats['all_idle']}")


def test_criterion_7_pipeline_overlap(verdict):
    payloads = [np.random.default_rng(i).bytes(65536) for i in range(100)]
    piped_out, piped = Runtime().run_workload(ENC, payloads)
    serial_out, serial = Runtime(pipelined=False).run_workload(ENC, payloads)
    ok = (piped <= 0.6 * serial and math.isclose(serial, SERIALIZED_64K_X100, rel_tol=1e-9)
          and piped_out == serial_out)
    verdict(7, ok, f"pipelined {piped:.1f}us vs serialized {serial:.1f}us "
            f"(oracle {SERIALIZED_64K_X100:.1f}us), ratio {piped / serial:.3f} <= 0.6")


def test_criterion_8_dispatcher(verdict):
    rt = Runtime()
    table = rt.calibrate(ENC, POW2)
    paths = [rt.dispatch(ENC, s) for s in range(16, 1 << 22, 1024)]
    first = paths.index(Path.DEVICE)
    monotone = all(p is Path.DEVICE for p in paths[first:])
    tie = rt.dispatch(ENC, int(table.crossover_bytes)) is Path.DEVICE
    cpu_always = Runtime(cost_model=DEFAULT_COST_MODEL.replace(cpu_bytes_per_us=math.inf))
    inf = cpu_always.calibrate(ENC, POW2[:6]).crossover_bytes
    free = DEFAULT_COST_MODEL.replace(msg_rtt_us=0.0, dma_latency_us=0.0, per_block_exec_us=0.0,
                                      lane_scale_us=0.0, dma_bandwidth_bytes_per_us=1e12,
                                      host_copy_bytes_per_us=1e12)
    smallest = Runtime(cost_model=free).calibrate(ENC, POW2[:6]).crossover_bytes
    ok = (monotone and table.crossover_bytes == 8192 and tie and inf == math.inf
          and smallest == POW2[0])
    verdict(8, ok, f"crossover {table.crossover_bytes}, monotone {monotone}, tie->DEVICE {tie}, "
            f"cpu-always {inf}, device-always {smallest}")


def test_criterion_9_determinism(verdict, sweep_csvs):
    (code_a, a), (code_b, b) = sweep_csvs
    ok = code_a == code_b == 0 and a == b
    verdict(9, ok, f"two sweep --check runs: exit {code_a}/{code_b}, "
            f"{len(a)} bytes, identical {a == b}")
