"""Named random streams derived from one global seed.

Every random draw in the package comes from ``stream(seed, *names)``. The
names identify the stage and job, so re-running or resuming one stage never
shifts the randomness seen by another.
"""

import hashlib

import numpy as np
import torch


def _name_key(names) -> list[int]:
    digest = hashlib.sha256("/".join(str(n) for n in names).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *_name_key(names)])


def stream(seed: int, *names) -> np.random.Generator:
    """Independent numpy generator for ``(seed, *names)``."""
    return np.random.default_rng(seed_sequence(seed, *names))


def derive_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for libraries that only accept integers."""
    state = seed_sequence(seed, *names).generate_state(1, np.uint64)
    return int(state[0]) & (2**63 - 1)


def torch_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *names))
    return g
