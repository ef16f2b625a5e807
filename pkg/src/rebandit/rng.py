"""Named, splittable random streams on counter-based Philox generators.

Every stochastic consumer (environment, policy, population synthesis, ...)
gets its own stream addressed by a path of names, so adding draws to one
consumer never perturbs another and any stream can be recreated from the
root seed alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component(value: int | str) -> int:
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(value)
    digest = hashlib.sha256(str(value).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(root_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream addressed by ``path`` under ``root_seed``.

    The same (seed, path) pair always yields an identical stream; distinct
    paths yield statistically independent streams.
    """
    key = tuple(_component(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def philox_state_after(root_seed: int, *path: int | str, draws: int) -> np.random.Generator:
    """Recreate a stream positioned just past ``draws`` single uniform draws."""
    gen = substream(root_seed, *path)
    for _ in range(draws):
        gen.random()
    return gen
