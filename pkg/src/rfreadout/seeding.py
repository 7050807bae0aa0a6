"""Counter-based seed fan-out.

A per-cycle seed is a keyed bijection of the packed ``(stage, cycle)``
counter, so distinct counters under one master seed never collide.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
CYCLE_BITS = 48
STAGE_BITS = 16

# stage identifiers
STAGE_SCREEN = 1
STAGE_DYNAMICS = 2
STAGE_TRACE = 3
STAGE_CONTROL = 4
STAGE_MC = 5
STAGE_SAMPLE = 6


def _mix64(z: int) -> int:
    # splitmix64 finalizer: a bijection on 64-bit words
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _pack(stage, cycle):
    if not 0 <= stage < (1 << STAGE_BITS):
        raise ValueError(f"stage id out of range: {stage}")
    return (stage << CYCLE_BITS) | cycle


def seed_fanout(master: int, stage: int, cycle: int) -> int:
    """Deterministic 64-bit seed for ``(master, stage, cycle)``."""
    if not 0 <= cycle < (1 << CYCLE_BITS):
        raise ValueError(f"cycle id out of range: {cycle}")
    key = _mix64(int(master) & MASK64)
    return _mix64(_pack(stage, cycle) ^ key)


def seed_fanout_array(master: int, stage: int, cycles) -> np.ndarray:
    """Vectorized :func:`seed_fanout` over an array of cycle ids."""
    cycles = np.asarray(cycles, dtype=np.uint64)
    if cycles.size and int(cycles.max()) >= (1 << CYCLE_BITS):
        raise ValueError("cycle id out of range")
    key = np.uint64(_mix64(int(master) & MASK64))
    packed = (np.uint64(_pack(stage, 0))) | cycles
    return _mix64_array(packed ^ key)


def rng_for(master: int, stage: int, cycle: int) -> np.random.Generator:
    return np.random.default_rng(seed_fanout(master, stage, cycle))
