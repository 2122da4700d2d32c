"""Two-sided Brownian paths on a uniform time grid.

Increments are exact N(0, dt) draws.  Randomness is counter-based: the
standard normals feeding step ``j`` of direction ``d`` for replicate ``r``
come from a Philox block keyed by ``(seed, r)`` with counter ``(j // BLOCK, d)``.
Any prefix of a stream can therefore be regenerated independently, which is
what makes adaptive extension reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import InvalidParameterError, OutOfWindowError

BLOCK = 1 << 14
FORWARD = "forward"
BACKWARD = "backward"
_DIRECTION_CODE = {FORWARD: 0, BACKWARD: 1}


@dataclass(frozen=True)
class SeedInfo:
    """Stream bookkeeping for a simulated path.

    ``forward_drawn`` / ``backward_drawn`` count increments drawn from the root
    path's streams; ``offset`` is the root grid index sitting at this path's
    origin (non-zero after :func:`shift`).
    """

    seed: int
    replicate: int
    forward_drawn: int = 0
    backward_drawn: int = 0
    offset: int = 0


@dataclass(frozen=True, eq=False)
class GridPath:
    """Path values ``B_k`` at times ``k * dt`` for ``k in [-neg_steps, pos_steps]``."""

    dt: float
    values: np.ndarray
    neg_steps: int
    seed_info: Optional[SeedInfo] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        if not 0 <= self.neg_steps < len(self.values):
            raise InvalidParameterError("origin index outside values")
        if self.values.flags.writeable:
            vals = np.array(self.values, dtype=float)
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    @classmethod
    def from_values(cls, values, dt: float, neg_steps: int = 0) -> "GridPath":
        """Wrap a deterministic sequence (no random streams attached)."""
        return cls(dt=float(dt), values=np.asarray(values, dtype=float), neg_steps=int(neg_steps))

    @property
    def pos_steps(self) -> int:
        return len(self.values) - self.neg_steps - 1

    @property
    def origin_value(self) -> float:
        return float(self.values[self.neg_steps])

    @property
    def steps(self) -> np.ndarray:
        return np.arange(-self.neg_steps, self.pos_steps + 1)

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.dt

    def index(self, step: int) -> int:
        """Array index of signed grid step ``step``."""
        if not -self.neg_steps <= step <= self.pos_steps:
            raise OutOfWindowError(
                f"step {step} outside window [{-self.neg_steps}, {self.pos_steps}]"
            )
        return self.neg_steps + step

    def at(self, step: int) -> float:
        return float(self.values[self.index(step)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "value"])
            for t, v in zip(self.times, self.values):
                writer.writerow([repr(float(t)), repr(float(v))])


def steps_for(duration: float, dt: float) -> int:
    """Number of grid steps needed to cover ``duration`` (tolerant to float noise)."""
    if duration < 0:
        raise InvalidParameterError(f"duration must be non-negative, got {duration}")
    return int(math.ceil(duration / dt - 1e-9))


def _check_key(seed: int, replicate: int) -> None:
    for name, v in (("seed", seed), ("replicate", replicate)):
        if not 0 <= int(v) < 2**64:
            raise InvalidParameterError(f"{name} must be in [0, 2**64), got {v}")


def standard_normals(seed: int, replicate: int, direction: str, start: int, count: int) -> np.ndarray:
    """Standard normals number ``start .. start+count-1`` of one direction's stream."""
    if count <= 0:
        return np.empty(0)
    code = _DIRECTION_CODE[direction]
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    chunks = []
    for block in range(first, last + 1):
        bitgen = np.random.Philox(key=[int(seed), int(replicate)], counter=[0, 0, block, code])
        chunks.append(np.random.Generator(bitgen).standard_normal(BLOCK))
    z = np.concatenate(chunks)
    lo = start - first * BLOCK
    return z[lo:lo + count]


def _walk(start_value: float, z: np.ndarray, dt: float) -> np.ndarray:
    # sequential accumulation from the seam keeps extensions bit-identical
    return np.cumsum(np.concatenate(([start_value], z * math.sqrt(dt))))[1:]


def simulate_two_sided(dt: float, pos_horizon: float, neg_horizon: float,
                       seed: int, replicate: int = 0) -> GridPath:
    """Simulate a two-sided Brownian path with ``B_0 = 0``."""
    if not dt > 0:
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    _check_key(seed, replicate)
    n_pos, n_neg = steps_for(pos_horizon, dt), steps_for(neg_horizon, dt)
    fwd = _walk(0.0, standard_normals(seed, replicate, FORWARD, 0, n_pos), dt)
    bwd = _walk(0.0, standard_normals(seed, replicate, BACKWARD, 0, n_neg), dt)
    values = np.concatenate((bwd[::-1], [0.0], fwd))
    info = SeedInfo(int(seed), int(replicate), n_pos, n_neg, 0)
    return GridPath(dt=float(dt), values=values, neg_steps=n_neg, seed_info=info)


def extend_steps(path: GridPath, direction: str, n: int) -> GridPath:
    """Append ``n`` grid steps in ``direction`` drawn from the stream continuation."""
    if n < 0:
        raise InvalidParameterError("extension must be non-negative")
    if n == 0:
        return path
    info = path.seed_info
    if info is None:
        raise InvalidParameterError("path has no random streams to extend from")
    if direction == FORWARD:
        if info.offset + path.pos_steps != info.forward_drawn:
            raise InvalidParameterError("forward edge is not at the stream frontier")
        z = standard_normals(info.seed, info.replicate, FORWARD, info.forward_drawn, n)
        new = _walk(float(path.values[-1]), z, path.dt)
        values = np.concatenate((path.values, new))
        info = replace(info, forward_drawn=info.forward_drawn + n)
        return GridPath(path.dt, values, path.neg_steps, info)
    if direction == BACKWARD:
        if path.neg_steps - info.offset != info.backward_drawn:
            raise InvalidParameterError("backward edge is not at the stream frontier")
        z = standard_normals(info.seed, info.replicate, BACKWARD, info.backward_drawn, n)
        new = _walk(float(path.values[0]), z, path.dt)
        values = np.concatenate((new[::-1], path.values))
        info = replace(info, backward_drawn=info.backward_drawn + n)
        return GridPath(path.dt, values, path.neg_steps + n, info)
    raise InvalidParameterError(f"unknown direction {direction!r}")


def extend(path: GridPath, direction: str, extra: float) -> GridPath:
    """Extend ``path`` by ``extra`` time units in ``direction``."""
    if extra < 0:
        raise InvalidParameterError(f"extra must be non-negative, got {extra}")
    return extend_steps(path, direction, steps_for(extra, path.dt))


def cover(path: GridPath, lo_step: int, hi_step: int) -> GridPath:
    """Extend ``path`` until its window contains ``[lo_step, hi_step]``."""
    if hi_step > path.pos_steps:
        path = extend_steps(path, FORWARD, hi_step - path.pos_steps)
    if -lo_step > path.neg_steps:
        path = extend_steps(path, BACKWARD, -lo_step - path.neg_steps)
    return path


def shift(path: GridPath, k: int) -> GridPath:
    """The time shift: result at step ``j`` is the input at step ``k + j``.  No recentring."""
    path.index(k)
    info = path.seed_info
    if info is not None:
        info = replace(info, offset=info.offset + k)
    return GridPath(path.dt, path.values, path.neg_steps + k, info)


def shift_recenter(path: GridPath, k: int) -> GridPath:
    """Result at step ``j`` is ``B_{k+j} - B_k``."""
    moved = shift(path, k)
    values = moved.values - moved.values[moved.neg_steps]
    return GridPath(moved.dt, values, moved.neg_steps, moved.seed_info)


def start_at(path: GridPath, x: float) -> GridPath:
    """Translate every value by ``x`` (the path under ``P_x``)."""
    return GridPath(path.dt, path.values + x, path.neg_steps, path.seed_info)
