"""Order-independent seed derivation.

Every random draw in an experiment gets its own 64-bit seed computed from
``(base_seed, image_index, variant_index, draw_tag)`` with splitmix64
finalisation, so results never depend on execution order or worker count.

Scheme: ``h = mix(base + G)``, then for each of image, variant, tag:
``h = mix(h ^ (value + G))`` where ``G = 0x9E3779B97F4A7C15`` and ``mix`` is
the splitmix64 finaliser (shifts 30/27/31, multipliers 0xBF58476D1CE4E5B9
and 0x94D049BB133111EB).  String tags are first mapped through CRC-32.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _as_int(value):
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    return int(value) & MASK64


def seed_for(base_seed, image_index=0, variant_index=0, draw_tag=0):
    h = _mix(_as_int(base_seed) + GOLDEN)
    for value in (image_index, variant_index, draw_tag):
        h = _mix(h ^ ((_as_int(value) + GOLDEN) & MASK64))
    return h


def rng_for(*args):
    return np.random.default_rng(seed_for(*args))
