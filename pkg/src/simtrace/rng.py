"""Counter-based random number generation.

Every random draw the controller makes is keyed by (seed, run index, draw
index, stream), so traces are reproducible regardless of scheduling or how
many values an individual draw consumes.
"""

from __future__ import annotations

import numpy as np

# stream ids
STREAM_MODEL = 0  # values handed to the simulator
STREAM_ENGINE = 1  # engine-internal randomness (site selection, MH accept)
STREAM_PROPOSAL = 2  # draws from learned proposals

_KEY_MIX = 0x9E3779B97F4A7C15


class CounterRng:
    """Deterministic per-draw generator factory backed by Philox counters."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def generator(self, run: int, draw: int, stream: int = STREAM_MODEL) -> np.random.Generator:
        counter = [0, int(draw) & 0xFFFFFFFFFFFFFFFF, int(run) & 0xFFFFFFFFFFFFFFFF,
                   int(stream) & 0xFFFFFFFFFFFFFFFF]
        bitgen = np.random.Philox(key=[self.seed, _KEY_MIX], counter=counter)
        return np.random.Generator(bitgen)


class RunRng:
    """Per-run view handing out one generator per draw index."""

    def __init__(self, root: CounterRng, run: int, stream: int = STREAM_MODEL):
        self._root = root
        self._run = run
        self._stream = stream
        self._draw = 0

    def next_generator(self) -> np.random.Generator:
        gen = self._root.generator(self._run, self._draw, self._stream)
        self._draw += 1
        return gen
