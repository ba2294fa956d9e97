"""Seeded random generators with serializable state."""

import numpy as np


def seeded_rng(seed):
    """Return a PCG64-backed generator for ``seed``.

    PCG64 has a fixed algorithm and fixed constants, so identical seeds give
    identical streams on every platform numpy supports.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_state(rng):
    """JSON-serializable snapshot of a generator's state."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_rng(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
