"""Resident kernel vs per-call launches.

Sends 4 KB through the empty service at three lane counts, once through the
persistent kernel and once with a fresh launch per call, and prints the
caller-observed round trip from the simulated clock.
"""

from gpuoffload import bench

records = bench.bench_launch_latency(lanes=(512, 1024, 2048), input_size=4096)
by_key = {(r.lanes, r.path): r.latency_us for r in records}

print(f"{'lanes':>6} {'nsk us':>9} {'launch us':>10} {'ratio':>6}")
for lanes in (512, 1024, 2048):
    nsk, trad = by_key[lanes, "nsk"], by_key[lanes, "traditional"]
    print(f"{lanes:>6} {nsk:>9.2f} {trad:>10.2f} {trad / nsk:>6.2f}")

failures = bench.check_latency(records)
print("\nreference latencies reproduced" if not failures else "\n".join(failures))
