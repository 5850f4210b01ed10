"""Counter-based random streams with stable, named substreams.

Every stochastic component owns its own Philox stream derived from
(seed, stream id, *indices), so plant noise, measurement noise, filter
noise and per-scenario draws are independently reproducible: re-running
any component with the same seed replays exactly the same numbers no
matter what the other components consumed.
"""

import numpy as np

# registry of stream ids; never renumber, only append
PLANT_PROCESS = 0
PLANT_MEASURE = 1
FILTER = 2
SCENARIO = 3
PRIOR = 4
TOY = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for substream `key` of master `seed` (Philox, counter-based)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
