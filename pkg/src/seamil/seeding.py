"""One user seed, expanded into independent per-component generators.

``component_rng(seed, "source-init")`` builds a ``SeedSequence`` whose
entropy is the user seed and whose spawn key is ``(crc32(name), *extra)``;
the same (seed, name, extra) triple always yields the same stream.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["component_rng"]


def component_rng(seed: int, component: str, *extra: int) -> np.random.Generator:
    key = (zlib.crc32(component.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
