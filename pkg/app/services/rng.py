"""Keyed random substreams: results never depend on the order clients are scheduled in."""

from typing import Union

import numpy as np

PURPOSES = {
    "init": 0,
    "sample": 1,
    "downlink": 2,
    "local": 3,
    "uplink": 4,
    "server": 5,
    "partition": 6,
    "data": 7,
    "bench": 8,
    "codec": 9,
}


def substream(seed: int, *key: Union[int, str]) -> np.random.Generator:
    """
    Independent generator for (seed, *key).

    The key holds exactly one purpose tag from `PURPOSES` plus any number of
    integers (round index, client id, ...). The spawn key is
    (purpose, number of integers, *integers), so two keys that differ in
    purpose, arity or any integer never share a stream.
    """
    purposes = [part for part in key if isinstance(part, str)]
    if len(purposes) != 1:
        raise ValueError(f"a stream key needs exactly one purpose, got {purposes}")
    purpose = purposes[0]
    if purpose not in PURPOSES:
        raise ValueError(f"unknown stream purpose: {purpose}")
    indices = [int(part) for part in key if not isinstance(part, str)]
    if any(i < 0 for i in indices):
        raise ValueError("stream key integers must be >= 0")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(PURPOSES[purpose], len(indices), *indices))
    return np.random.Generator(np.random.PCG64(seq))
