import numpy as np

# Stream identifiers; each consumer of randomness draws from its own branch.
STREAM_INSTANCE = 1
STREAM_RHS = 2
STREAM_LHS_PERMUTATION = 3
STREAM_SD = 4
STREAM_OOS = 5
STREAM_TEST = 6
STREAM_BATCH = 7


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the branch ``keys`` of ``seed``.

    The same (seed, keys) always yields the same stream, independent of how
    many other streams were opened before it or on which thread.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))
