# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements seeded Gaussian streams with exact replay.

Seeds are 64-bit integers mixed with the SplitMix64 finalizer. A stream keys
a Philox4x64 counter generator from its seed and turns pairs of 53-bit
uniforms into pairs of normals with Box-Muller, consuming both outputs in
order. Because Philox is counter based a stream can be positioned at any
draw in O(1).
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

MASK_64b = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_PHILOX_BLOCK = 4
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer, a bijection on 64-bit integers."""
    z &= MASK_64b
    z = ((z ^ (z >> 30)) * _MIX_A) & MASK_64b
    z = ((z ^ (z >> 27)) * _MIX_B) & MASK_64b
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeedSchedule:
    """Per-iteration seed derivation.

    Attributes:
      base_seed (int): The unsigned 64-bit run seed.
    """
    base_seed: int

    def __post_init__(self):
        if self.base_seed < 0 or self.base_seed > MASK_64b:
            raise ValueError(f"seed {self.base_seed} is not an unsigned 64-bit value")

    def derive(self, t: int) -> int:
        """Returns the seed ζ_t for iteration t."""
        return derive_seed(self, t)

    def substream(self, label: int) -> "SeedSchedule":
        """Returns an independent schedule for another family of seeds."""
        return SeedSchedule(mix64(self.base_seed ^ mix64(label + 1)))


def derive_seed(schedule: SeedSchedule, t: int) -> int:
    """Derive the seed of iteration t.

    ζ_t = mix64(base_seed XOR (t * golden gamma mod 2^64)). Multiplication by
    an odd constant, XOR with a constant and mix64 are all bijections, so
    distinct t never collide.

    Raises:
      ValueError: If t is negative.
    """
    if t < 0:
        raise ValueError(f"iteration index {t} is negative")
    return mix64(schedule.base_seed ^ ((t * GOLDEN_GAMMA) & MASK_64b))


def _philox_key(seed: int) -> np.ndarray:
    state = seed & MASK_64b
    words = []
    for _ in range(2):
        state = (state + GOLDEN_GAMMA) & MASK_64b
        words.append(mix64(state))
    return np.array(words, dtype=np.uint64)


def make_generator(seed: int) -> np.random.Generator:
    """A numpy Generator on the same Philox family, for non-Gaussian draws."""
    return np.random.Generator(np.random.Philox(key=_philox_key(seed)))


@dataclass(eq=False)
class GaussianStream:
    """Replayable stream of standard normals.

    Args:
      seed (int): The unsigned 64-bit seed.
    """
    seed: int
    cursor: int = 0
    _bitgen: np.random.Philox = field(init=False, repr=False)
    _spare: Optional[float] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._key = _philox_key(self.seed)
        start = self.cursor
        self.cursor = 0
        self._seek(start)

    @classmethod
    def at(cls, seed: int, cursor: int) -> "GaussianStream":
        """Returns a stream positioned before draw number cursor."""
        return cls(seed=seed, cursor=cursor)

    def _seek(self, cursor: int) -> None:
        if cursor < 0:
            raise ValueError(f"cursor {cursor} is negative")
        pair = cursor // 2
        raw = 2 * pair
        self._bitgen = np.random.Philox(
            key=self._key, counter=raw // _PHILOX_BLOCK
        )
        skip = raw % _PHILOX_BLOCK
        if skip:
            self._bitgen.random_raw(skip)
        self._spare = None
        self.cursor = 2 * pair
        if cursor % 2:
            self._spare = float(self._pairs(1)[1])
            self.cursor += 1

    def _pairs(self, count: int) -> np.ndarray:
        raw = self._bitgen.random_raw(2 * count).reshape(count, 2)
        u1 = (raw[:, 0] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        theta = _TWO_PI * u2
        out = np.empty((count, 2), dtype=np.float64)
        out[:, 0] = radius * np.cos(theta)
        out[:, 1] = radius * np.sin(theta)
        return out.reshape(-1)

    def sample(self, k: int) -> np.ndarray:
        """Draw k standard normals and advance the cursor by k."""
        return sample_normal_vec(self, k)

    def normal(self, *shape: int) -> np.ndarray:
        """Draw a C-ordered array of standard normals."""
        count = int(np.prod(shape)) if shape else 1
        return sample_normal_vec(self, count).reshape(shape)


def sample_normal_vec(stream: GaussianStream, k: int) -> np.ndarray:
    """Draw k standard normals from stream.

    Sampling k1 then k2 values yields the same numbers as sampling k1 + k2
    at once. k = 0 returns an empty vector.
    """
    if k < 0:
        raise ValueError(f"count {k} is negative")
    out = np.empty(k, dtype=np.float64)
    if k == 0:
        return out
    filled = 0
    if stream._spare is not None:
        out[0] = stream._spare
        stream._spare = None
        filled = 1
    need = k - filled
    if need:
        pairs = (need + 1) // 2
        values = stream._pairs(pairs)
        out[filled:] = values[:need]
        if need % 2:
            stream._spare = float(values[-1])
    stream.cursor += k
    return out


def spawn_seeds(schedule: SeedSchedule, count: int) -> List[int]:
    """Seeds for count independent consumers, e.g. Monte Carlo chunks."""
    return [derive_seed(schedule, i) for i in range(count)]
