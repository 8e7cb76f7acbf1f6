import zlib
from typing import Any, Iterator, List, Union

import numpy as np


def split_chunk(list: List[Any], n=100) -> Iterator[List[Any]]:
    for i in range(0, len(list), n):
        yield list[i: i + n]


def derive_seed(*keys: Union[int, str]) -> int:
    """Stable 32-bit seed for a task identified by ``keys``; strings are hashed
    with crc32 so the seed does not depend on PYTHONHASHSEED."""
    entropy = [key if isinstance(key, int) else zlib.crc32(str(key).encode('utf-8')) for key in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
