"""Named RNG substreams: one master seed fans out to independent,
reproducible generators keyed by purpose ("rollout", "init", "shuffle", ...)."""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
