"""Deterministic, order-independent random-number substreams.

Every stochastic component draws from a generator keyed by (root seed,
integer path). Streams with distinct paths are statistically independent
Philox counter streams, so results do not depend on scheduling or worker
count as long as each consumer derives its own key.
"""

import numpy as np

# Path domains. Keeping these in one place avoids accidental key collisions
# between the simulator, the controller and diagnostic monitors.
DOMAIN_INIT = 0
DOMAIN_PLANT = 1
DOMAIN_CONTROL = 2
DOMAIN_BELIEF = 3
DOMAIN_MONITOR = 4
DOMAIN_RUN = 5


def substream(root_seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream identified by (root_seed, *path).

    The same key always yields the same stream; different keys yield
    independent streams. Keys may be derived concurrently in any order.
    """
    seq = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
