"""Several threads sharing one runtime in concurrent mode.

Half the calls busy-wait on the response queue and half use completion
callbacks; the resident kernel is launched exactly once for all of them.
"""

import threading

import numpy as np

from gpuoffload import Mode, Runtime, services

CALLERS, CALLS = 4, 500
rt = Runtime(mode=Mode.CONCURRENT).start()
fired = []


def caller(idx: int) -> None:
    rng = np.random.default_rng(idx)
    for i in range(CALLS):
        data = rng.bytes(256)
        if i % 2:
            ct = rt.call(services.AES_ENCRYPT, data, mode="callback", callback=fired.append)
        else:
            ct = rt.call(services.AES_ENCRYPT, data)
        assert services.aes128_ecb_decrypt(services.DEFAULT_KEY, ct) == data


threads = [threading.Thread(target=caller, args=(i,)) for i in range(CALLERS)]
for t in threads:
    t.start()
for t in threads:
    t.join()
rt.shutdown()

print(f"{rt.completed} calls completed, {len(fired)} callbacks, "
      f"{rt.device.launches} kernel launch")
