"""Watch requests move through the five-stage pipeline.

Eight 64 KiB encryptions are queued at once, then the simulated clock is
stepped and the occupant of each stage printed whenever it changes.
"""

import numpy as np

from gpuoffload import Runtime, Stage, services

SHORT = {Stage.PREPARING: "prep", Stage.HOST_TO_DEVICE_DMA: "h2d",
         Stage.DEVICE_EXECUTING: "exec", Stage.DEVICE_TO_HOST_DMA: "d2h",
         Stage.FINISHING: "fin"}

rt = Runtime()
ids = [rt.submit(services.AES_ENCRYPT, np.random.default_rng(i).bytes(65536), block=True)
       for i in range(8)]
first = ids[0]

print(f"{'t (us)':>8}  " + " ".join(f"{name:>5}" for name in SHORT.values()))
last, t = None, 0.0
while rt.in_flight or len(rt.requests):
    t += 0.5
    snap = rt.pipeline_tick(t)
    row = tuple(snap.stages[s] for s in SHORT)
    if row != last:
        cells = " ".join(f"{'-' if r is None else f'r{r - first}':>5}" for r in row)
        print(f"{snap.time_us:>8.1f}  {cells}")
        last = row

_, serial = Runtime(pipelined=False).run_workload(
    services.AES_ENCRYPT, [bytes(65536)] * 8)
print(f"\npipelined makespan {t:.1f} us vs {serial:.1f} us one at a time")
rt.shutdown()
