"""PCG32 pseudorandom generator shared by every seeded step of the pipeline.

The generator follows the reference ``pcg32_srandom_r`` / ``pcg32_random_r``
pair (64-bit state, XSH-RR output). Scalar draws are used where the draw
count depends on the values (bounded rejection sampling, Fisher-Yates);
bulk draws use closed-form jump-ahead tables so that a block of ``n``
outputs is computed with array arithmetic while remaining identical to
``n`` successive scalar draws.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import numpy.typing as npt

MULTIPLIER = 6364136223846793005
MASK_64 = (1 << 64) - 1
MASK_32 = (1 << 32) - 1
TWO_32 = float(1 << 32)

_BLOCK = 1 << 16


def _output(old_state: int) -> int:
    xorshifted = (((old_state >> 18) ^ old_state) >> 27) & MASK_32
    rot = old_state >> 59
    return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK_32


def _output_array(old: npt.NDArray[np.uint64]) -> npt.NDArray[np.uint32]:
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(MASK_32)
    rot = old >> np.uint64(59)
    left = (np.uint64(32) - rot) & np.uint64(31)
    mixed = ((xorshifted >> rot) | (xorshifted << left)) & np.uint64(MASK_32)
    return mixed.astype(np.uint32)


@lru_cache(maxsize=16)
def _jump_table(
    increment: int,
) -> tuple[npt.NDArray[np.uint64], npt.NDArray[np.uint64], int, int]:
    """Affine maps ``s -> A[k]*s + C[k]`` advancing the state by ``k`` steps.

    Returns the tables for ``k in [0, _BLOCK)`` plus the scalar map for a
    whole block.
    """
    mult = np.array([1], dtype=np.uint64)
    add = np.array([0], dtype=np.uint64)
    while mult.size < _BLOCK:
        length = mult.size
        jump_mult = (int(mult[-1]) * MULTIPLIER) & MASK_64
        jump_add = (int(add[-1]) * MULTIPLIER + increment) & MASK_64
        mult = np.concatenate([mult, mult * np.uint64(jump_mult)])
        add = np.concatenate([add, mult[:length] * np.uint64(jump_add) + add])
    block_mult = (int(mult[-1]) * MULTIPLIER) & MASK_64
    block_add = (int(add[-1]) * MULTIPLIER + increment) & MASK_64
    return mult, add, block_mult, block_add


class Pcg32:
    """PCG32 with a selectable stream.

    Example::

        rng = Pcg32(seed=42, stream=0)
        order = rng.permutation(10)
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        if not 0 <= seed <= MASK_64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.increment = ((stream << 1) | 1) & MASK_64
        self.state = 0
        self._step()
        self.state = (self.state + seed) & MASK_64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * MULTIPLIER + self.increment) & MASK_64

    # ------------------------------------------------------------------
    # Scalar draws
    # ------------------------------------------------------------------

    def next_u32(self) -> int:
        old_state = self.state
        self._step()
        return _output(old_state)

    def bounded(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` by rejection sampling."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        threshold = ((MASK_32 + 1) - bound) % bound
        while True:
            value = self.next_u32()
            if value >= threshold:
                return value % bound

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        """Fisher-Yates shuffle of ``0..n-1``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.bounded(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.asarray(order, dtype=np.int64)

    # ------------------------------------------------------------------
    # Bulk draws
    # ------------------------------------------------------------------

    def u32_array(self, count: int) -> npt.NDArray[np.uint32]:
        """``count`` successive outputs, identical to repeated :meth:`next_u32`."""
        out = np.empty(count, dtype=np.uint32)
        mult, add, block_mult, block_add = _jump_table(self.increment)
        done = 0
        while done < count:
            take = min(_BLOCK, count - done)
            states = mult[:take] * np.uint64(self.state) + add[:take]
            out[done : done + take] = _output_array(states)
            if take == _BLOCK:
                self.state = (block_mult * self.state + block_add) & MASK_64
            else:
                self.state = (int(mult[take]) * self.state + int(add[take])) & MASK_64
            done += take
        return out

    def unit_array(self, count: int) -> npt.NDArray[np.float64]:
        """Floats in ``[0, 1)``: ``u / 2**32``."""
        return self.u32_array(count).astype(np.float64) / TWO_32

    def open_unit_array(self, count: int) -> npt.NDArray[np.float64]:
        """Floats in ``(0, 1)``: ``(u + 0.5) / 2**32``."""
        return (self.u32_array(count).astype(np.float64) + 0.5) / TWO_32

    def uniform_symmetric(
        self, count: int, bound: float, dtype: npt.DTypeLike = np.float64
    ) -> npt.NDArray[np.floating]:
        """``count`` values strictly inside ``(-bound, bound)``, one draw each."""
        out = np.empty(count, dtype=dtype)
        done = 0
        while done < count:
            take = min(_BLOCK, count - done)
            unit = self.open_unit_array(take)
            out[done : done + take] = (unit * 2.0 - 1.0) * bound
            done += take
        return out

    def normal_array(self, count: int) -> npt.NDArray[np.float64]:
        """Standard normals by Box-Muller (cosine branch), two draws per value."""
        draws = self.u32_array(2 * count).astype(np.float64).reshape(count, 2)
        radius = np.sqrt(-2.0 * np.log((draws[:, 0] + 0.5) / TWO_32))
        return radius * np.cos(2.0 * math.pi * draws[:, 1] / TWO_32)


def epoch_streams(epoch: int) -> tuple[int, int]:
    """(shuffle stream, dropout stream) for a zero-based epoch index."""
    return 2 * epoch + 1, 2 * epoch + 2


__all__ = ["Pcg32", "epoch_streams"]
