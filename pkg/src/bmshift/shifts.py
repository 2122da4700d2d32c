"""Unbiased-shift constructions on grid paths.

Each construction is a pure function of the path values.  A shared driver
grows the path window (doubling in the direction that ran out) until the
construction resolves or ``max_horizon`` is reached; unresolved attempts come
back as censored outcomes rather than errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import allocation as al
from .errors import ConstructionMismatchError, InvalidParameterError
from .measures import (TargetMeasure, additive_functional, local_time_at,
                       local_time_zero)
from .paths import BACKWARD, FORWARD, GridPath, extend_steps, shift_recenter, steps_for

MATCHED = al.MATCHED
CENSORED = al.CENSORED

BERTOIN_LE_JAN = "bertoin_le_jan"
INVERSE_LOCAL_TIME = "inverse_local_time"
ATOM_SPLITTING = "atom_splitting"
ATOM_PROBABILITY = "atom_probability"
NON_STOPPING = "non_stopping"
EXCURSION_REFLECTION = "excursion_reflection"

DEFAULT_BASE_HORIZON = 16.0


@dataclass
class ShiftOutcome:
    status: str
    step: int
    dt: float
    B_T: Optional[float]
    construction: str
    extensions_used: int
    path: GridPath = field(repr=False)
    L0_T: Optional[float] = None        # lower bound when censored forward
    censored_direction: Optional[str] = None
    stages: dict = field(default_factory=dict)

    @property
    def matched(self) -> bool:
        return self.status == MATCHED

    @property
    def T(self) -> Optional[float]:
        return self.step * self.dt if self.matched else None

    @property
    def horizon(self) -> Optional[float]:
        return None if self.matched else self.step * self.dt

    @property
    def shifted(self) -> Optional[GridPath]:
        """The path seen from ``T``: ``B_{T+t} - B_T``."""
        return shift_recenter(self.path, self.step) if self.matched else None

    def record(self) -> dict:
        return {
            "construction": self.construction,
            "status": self.status,
            "T": self.T,
            "B_T": self.B_T,
            "L0_T": self.L0_T,
            "extensions_used": self.extensions_used,
            "horizon": self.horizon,
        }


@dataclass
class _Attempt:
    """Result of one construction pass over a fixed window."""

    status: str
    step: int = 0
    direction: Optional[str] = None
    stages: dict = field(default_factory=dict)


def _view(path: GridPath, lo: int, hi: int) -> GridPath:
    """Sub-window ``[lo, hi]`` (containing 0) of ``path`` without stream info."""
    lo, hi = max(lo, -path.neg_steps), min(hi, path.pos_steps)
    return GridPath(path.dt, path.values[path.index(lo):path.index(hi) + 1], -lo)


def _fwd(path: GridPath) -> _Attempt:
    return _Attempt(CENSORED, path.pos_steps, FORWARD)


def _bwd(path: GridPath) -> _Attempt:
    return _Attempt(CENSORED, -path.neg_steps, BACKWARD)


def _drive(path: GridPath, attempt: Callable[[GridPath], _Attempt], construction: str,
           bandwidth: float, max_horizon: float, base_horizon: Optional[float],
           directions=(FORWARD,)) -> ShiftOutcome:
    if not max_horizon > 0:
        raise InvalidParameterError("max_horizon must be positive")
    cap = steps_for(max_horizon, path.dt)
    base = min(cap, steps_for(base_horizon if base_horizon else DEFAULT_BASE_HORIZON, path.dt))
    extendable = path.seed_info is not None
    used = 0

    def grow(p: GridPath, direction: str, target: int) -> GridPath:
        have = p.pos_steps if direction == FORWARD else p.neg_steps
        return extend_steps(p, direction, target - have) if target > have else p

    if extendable:
        for d in directions:
            path = grow(path, d, base)
    while True:
        res = attempt(path)
        if res.status == MATCHED:
            break
        d = res.direction
        have = path.pos_steps if d == FORWARD else path.neg_steps
        if not extendable or have >= cap:
            break
        path = grow(path, d, min(cap, max(2 * have, base)))
        used += 1
    if res.status != MATCHED:
        bound = None
        if res.direction == FORWARD and path.pos_steps > 0:
            # lower bound on the local time at 0 accumulated before the unresolved T
            bound = float(local_time_zero(_view(path, 0, path.pos_steps), bandwidth).mass.sum())
        return ShiftOutcome(CENSORED, res.step, path.dt, None, construction, used, path,
                            L0_T=bound, censored_direction=res.direction, stages=res.stages)
    l0_t = None
    if res.step >= 0:
        mass = local_time_zero(_view(path, 0, res.step), bandwidth).mass
        l0_t = float(mass[:-1].sum())
    return ShiftOutcome(MATCHED, res.step, path.dt, path.at(res.step), construction, used,
                        path, L0_T=l0_t, stages=res.stages)


def _balance(xi, eta, s: int, view: GridPath) -> _Attempt:
    r = al.balance_forward(xi, eta, s)
    return _Attempt(MATCHED, r.step) if r.matched else _fwd(view)


def bertoin_lejan_shift(path: GridPath, nu: TargetMeasure, bandwidth: float,
                        max_horizon: float, base_horizon: Optional[float] = None) -> ShiftOutcome:
    """First time after 0 at which the local time at 0 is balanced by ``int l^x nu(dx)``."""
    if nu.atom_weight(0.0) > 0:
        raise ConstructionMismatchError("target has an atom at 0; use atom_splitting_shift")

    def attempt(p: GridPath) -> _Attempt:
        v = _view(p, 0, p.pos_steps)
        return _balance(local_time_zero(v, bandwidth), additive_functional(v, nu, bandwidth), 0, v)

    return _drive(path, attempt, BERTOIN_LE_JAN, bandwidth, max_horizon, base_horizon)


def inverse_local_time_shift(path: GridPath, r: float, bandwidth: float, max_horizon: float,
                             base_horizon: Optional[float] = None) -> ShiftOutcome:
    """Right end of the level set ``{t : l0[0, t) = r}``; negative ``r`` looks backwards."""
    direction = FORWARD if r >= 0 else BACKWARD

    def attempt(p: GridPath) -> _Attempt:
        v = _view(p, 0, p.pos_steps) if r >= 0 else _view(p, -p.neg_steps, 0)
        res = al.inverse_local_time(local_time_zero(v, bandwidth), r, 0)
        if res.matched:
            return _Attempt(MATCHED, res.step)
        return _fwd(v) if r >= 0 else _bwd(v)

    return _drive(path, attempt, INVERSE_LOCAL_TIME, bandwidth, max_horizon, base_horizon,
                  directions=(direction,))


def atom_splitting_shift(path: GridPath, nu: TargetMeasure, y: float, bandwidth: float,
                         max_horizon: float, base_horizon: Optional[float] = None) -> ShiftOutcome:
    """Embed a target with an atom at 0 by routing that atom through level ``y``.

    Stage one balances ``l0`` against the target with its 0-atom moved to
    ``y``; paths that land at ``y`` are then sent on by balancing ``l^y``
    against ``l0``.
    """
    w0 = nu.atom_weight(0.0)
    if not w0 > 0:
        raise ConstructionMismatchError("target has no atom at 0; use bertoin_lejan_shift")
    if y == 0:
        raise ConstructionMismatchError("relay level y must differ from 0")
    if nu.atom_weight(y) > 0:
        raise ConstructionMismatchError(f"target already has an atom at relay level {y}")
    moved = TargetMeasure(atoms=tuple((y if x == 0.0 else x, w) for x, w in nu.atoms),
                          densities=nu.densities)

    def attempt(p: GridPath) -> _Attempt:
        v = _view(p, 0, p.pos_steps)
        l0 = local_time_zero(v, bandwidth)
        first = al.balance_forward(l0, additive_functional(v, moved, bandwidth), 0)
        if not first.matched:
            return _fwd(v)
        stages = {"stage1": first.step}
        if abs(v.at(first.step) - y) > bandwidth:
            return _Attempt(MATCHED, first.step, stages=stages)
        second = al.balance_forward(local_time_at(v, y, bandwidth), l0, first.step)
        stages["relayed"] = True
        if not second.matched:
            return _Attempt(CENSORED, v.pos_steps, FORWARD, stages)
        return _Attempt(MATCHED, second.step, stages=stages)

    return _drive(path, attempt, ATOM_SPLITTING, bandwidth, max_horizon, base_horizon)


def atom_probability_target(p: float) -> TargetMeasure:
    atoms = tuple((x, w) for x, w in ((1.0, p), (2.0, 1.0 - p)) if w > 0)
    return TargetMeasure(atoms=atoms)


def atom_probability_shift(path: GridPath, p: float, bandwidth: float, max_horizon: float,
                           base_horizon: Optional[float] = None) -> ShiftOutcome:
    """Nonnegative shift embedding ``delta_0`` with ``P{T = 0} = p``.

    Zero-level local time is split according to where the balancing rule
    toward ``p delta_1 + (1 - p) delta_2`` sends it.  If the origin is sent to
    1 the shift is 0; otherwise it moves forward by one unit of the local time
    that is sent to 2.
    """
    if not 0 <= p <= 1:
        raise InvalidParameterError(f"p must lie in [0, 1], got {p}")
    nu = atom_probability_target(p)

    def attempt(pth: GridPath) -> _Attempt:
        v = _view(pth, 0, pth.pos_steps)
        l0 = local_time_zero(v, bandwidth)
        if p == 1.0:
            # a single atom at 1 receives every image, the origin's included
            return _Attempt(MATCHED, 0, stages={"origin_image": None})
        if p == 0.0:
            # every image lands at 2, so the thinned measure is all of l0
            res = al.inverse_local_time(l0, 1.0, 0)
            return _Attempt(MATCHED, res.step) if res.matched else _fwd(v)
        table = al.forward_matches(l0, additive_functional(v, nu, bandwidth))
        first = table.get(0)
        if first is None:
            return _fwd(v)
        stages = {"origin_image": first}
        if abs(v.at(first) - 1.0) <= bandwidth:
            return _Attempt(MATCHED, 0, stages=stages)
        thinned = 0.0
        for s in sorted(table):
            if s < 0:
                continue
            img = table[s]
            if img is None:
                return _Attempt(CENSORED, v.pos_steps, FORWARD, stages)
            if abs(v.at(img) - 2.0) <= bandwidth:
                w = float(l0.mass[l0.index(s)])
                if thinned + w > 1.0 + 1e-12:
                    return _Attempt(MATCHED, s, stages=stages)
                thinned += w
        return _Attempt(CENSORED, v.pos_steps, FORWARD, stages)

    return _drive(path, attempt, ATOM_PROBABILITY, bandwidth, max_horizon, base_horizon)


def non_stopping_shift(path: GridPath, x: float, bandwidth: float, max_horizon: float,
                       base_horizon: Optional[float] = None) -> ShiftOutcome:
    """Unbiased shift embedding ``delta_x`` that is not a stopping time.

    Composition of five rules: balance ``l0 -> l^x``; one unit of ``l^x``
    forward; balance ``l^x -> l0``; balance ``l0 -> l^x`` again; one unit of
    ``l^x`` backward.
    """
    if x == 0:
        raise ConstructionMismatchError("target level must differ from 0")

    def attempt(p: GridPath) -> _Attempt:
        v = _view(p, -p.neg_steps, p.pos_steps)
        l0, lx = local_time_zero(v, bandwidth), local_time_at(v, x, bandwidth)
        stages = {}
        t = 0
        rules = (
            ("t1", lambda s: al.balance_forward(l0, lx, s)),
            ("t2", lambda s: al.inverse_local_time(lx, 1.0, s)),
            ("t3", lambda s: al.balance_forward(lx, l0, s)),
            ("t4", lambda s: al.balance_forward(l0, lx, s)),
            ("t5", lambda s: al.inverse_local_time(lx, -1.0, s)),
        )
        for name, rule in rules:
            res = rule(t)
            if not res.matched:
                return _Attempt(CENSORED, res.step, BACKWARD if name == "t5" else FORWARD, stages)
            t = res.step
            stages[name] = t
        return _Attempt(MATCHED, t, stages=stages)

    out = _drive(path, attempt, NON_STOPPING, bandwidth, max_horizon, base_horizon,
                 directions=(FORWARD, BACKWARD))
    out.stages["non_stopping"] = True
    return out


def excursion_reflection_shift(path: GridPath, bandwidth: float, max_horizon: float,
                               base_horizon: Optional[float] = None,
                               level: float = 1.0) -> ShiftOutcome:
    """Two-sided shift embedding ``delta_0`` by reflecting local time inside a gap.

    The gap around 0 runs from the end of the last excursion before 0 that
    reaches ``+-level`` to the start of the first such excursion after 0.  The
    zero-level local-time cells of the gap are ranked and the origin is sent
    to its mirror cell, which may lie on either side.
    """

    def attempt(p: GridPath) -> _Attempt:
        vals, o = p.values, p.neg_steps
        far = np.abs(vals) >= level
        near = np.abs(vals) <= bandwidth
        after = np.flatnonzero(far[o:])
        if not len(after):
            return _fwd(p)
        before = np.flatnonzero(far[:o])
        if not len(before):
            return _bwd(p)
        u, v = int(before[-1]), o + int(after[0])
        cells = np.flatnonzero(near[u:v]) + u   # zero cells of the gap, origin included
        rank = int(np.searchsorted(cells, o))
        mirror = int(cells[len(cells) - 1 - rank])
        return _Attempt(MATCHED, mirror - o, stages={"gap": (u - o, v - o), "cells": len(cells),
                                                     "S1": v - o, "S2": o - u})

    return _drive(path, attempt, EXCURSION_REFLECTION, bandwidth, max_horizon, base_horizon,
                  directions=(FORWARD, BACKWARD))


CONSTRUCTIONS = (BERTOIN_LE_JAN, INVERSE_LOCAL_TIME, ATOM_SPLITTING, ATOM_PROBABILITY,
                 NON_STOPPING, EXCURSION_REFLECTION)


def functional(construction: str, *, bandwidth: float, max_horizon: float,
               base_horizon: Optional[float] = None, nu: Optional[TargetMeasure] = None,
               r: float = 1.0, y: float = 1.0, p: float = 0.5, x: float = 1.0,
               level: float = 1.0) -> Callable[[GridPath], ShiftOutcome]:
    """Bind parameters of a named construction, returning ``path -> ShiftOutcome``."""
    kw = dict(bandwidth=bandwidth, max_horizon=max_horizon, base_horizon=base_horizon)
    if construction == BERTOIN_LE_JAN:
        return lambda q: bertoin_lejan_shift(q, nu, **kw)
    if construction == INVERSE_LOCAL_TIME:
        return lambda q: inverse_local_time_shift(q, r, **kw)
    if construction == ATOM_SPLITTING:
        return lambda q: atom_splitting_shift(q, nu, y, **kw)
    if construction == ATOM_PROBABILITY:
        return lambda q: atom_probability_shift(q, p, **kw)
    if construction == NON_STOPPING:
        return lambda q: non_stopping_shift(q, x, **kw)
    if construction == EXCURSION_REFLECTION:
        return lambda q: excursion_reflection_shift(q, level=level, **kw)
    raise InvalidParameterError(f"unknown construction {construction!r}; known: {CONSTRUCTIONS}")


FIXED_TIME = "fixed_time"


def fixed_time_shift(path: GridPath, t: float, bandwidth: float = 0.0) -> ShiftOutcome:
    """Shift by a deterministic time; a negative control, not an unbiased shift in general."""
    step = int(round(t / path.dt))
    if t >= 0 and path.seed_info is not None and step > path.pos_steps:
        path = extend_steps(path, FORWARD, step - path.pos_steps)
    l0 = None
    if step >= 0 and bandwidth > 0:
        l0 = float(local_time_zero(_view(path, 0, step), bandwidth).mass[:-1].sum())
    return ShiftOutcome(MATCHED, step, path.dt, path.at(step), FIXED_TIME, 0, path, L0_T=l0)
