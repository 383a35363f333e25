import hashlib

import numpy as np


def stream_key(part):
    """Map a substream name part to a stable 32-bit integer."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def substream(master_seed, *keys):
    """
    Derive an independent generator for a named substream.

    The same (master_seed, keys) always yields the same generator, and adding
    a new consumer under a new key never shifts the draws of existing ones.
    """
    entropy = [stream_key(master_seed)] + [stream_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
