"""A single 64-bit seed expanded into named, independent substreams."""

import zlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    ss = np.random.SeedSequence([int(seed) & ((1 << 64) - 1), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
