"""Named random substreams derived from one 64-bit seed."""
import numpy as np

STREAMS = {"dataset": 0, "init": 1, "shuffle": 2, "sampling": 3, "eval": 4, "bags": 5}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name) -> same stream."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[name]])
