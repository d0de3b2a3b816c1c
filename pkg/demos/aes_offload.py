"""Encrypting through the offload runtime and letting the dispatcher choose.

Boot-time calibration measures both paths at power-of-two sizes; afterwards
small jobs stay on the host and large ones go to the device.
"""

import numpy as np

from gpuoffload import Runtime, services

rng = np.random.default_rng(7)

with Runtime() as rt:
    table = rt.calibrate(services.AES_ENCRYPT, [2 ** k for k in range(10, 21)])
    print(f"crossover: {table.crossover_bytes} bytes")
    print(f"{'size':>8} {'cpu us':>10} {'device us':>10}")
    for size, cpu_us, dev_us in table.samples:
        marker = "  <- device wins" if size == table.crossover_bytes else ""
        print(f"{size:>8} {cpu_us:>10.2f} {dev_us:>10.2f}{marker}")

    for size in (1024, 4096, 8192, 1 << 20):
        data = rng.bytes(size)
        ct, path = rt.run(services.AES_ENCRYPT, data)
        back = rt.call(services.AES_DECRYPT, ct)
        assert back == data
        print(f"{size:>8} bytes -> {path.value:6} (round trip ok)")
