"""Grid representations of local-time measures and additive functionals.

A :class:`CumulativeMeasure` is a family of point masses sitting on the grid
steps of a path.  The mass at step ``j`` accounts for the time cell
``[t_j, t_j + dt)`` and is evaluated from ``B_{t_j}`` (left-endpoint Riemann
sums).  The cumulative array follows the signed convention

    cum(t) =  xi[0, t)   for t >= 0
    cum(t) = -xi[t, 0)   for t <  0

so ``xi[s, t) = cum(t) - cum(s)`` for every ``s <= t`` and ``cum(0) = 0``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidParameterError, OutOfWindowError
from .paths import GridPath

_TOTAL_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CumulativeMeasure:
    dt: float
    mass: np.ndarray
    neg_steps: int

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float)
        if mass.ndim != 1 or not 0 <= self.neg_steps < len(mass):
            raise InvalidParameterError("mass must be 1-d with the origin inside")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise InvalidParameterError("masses must be finite and non-negative")
        if mass.flags.writeable:
            mass = mass.copy()
            mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def from_cumulative(cls, cum, dt: float, neg_steps: int = 0) -> "CumulativeMeasure":
        """Build from sampled cumulative values; mass beyond the last sample is zero."""
        cum = np.asarray(cum, dtype=float)
        if cum[neg_steps] != 0:
            raise InvalidParameterError("cumulative must vanish at the origin")
        mass = np.append(np.diff(cum), 0.0)
        return cls(dt=float(dt), mass=np.clip(mass, 0.0, None), neg_steps=int(neg_steps))

    @classmethod
    def from_points(cls, points: Iterable[int], lo: int, hi: int, dt: float = 1.0,
                    weight: float = 1.0) -> "CumulativeMeasure":
        """Unit atoms at integer grid steps inside ``[lo, hi]`` (``lo <= 0 <= hi``)."""
        mass = np.zeros(hi - lo + 1)
        for p in points:
            mass[p - lo] += weight
        return cls(dt=float(dt), mass=mass, neg_steps=-lo)

    @property
    def pos_steps(self) -> int:
        return len(self.mass) - self.neg_steps - 1

    @property
    def steps(self) -> np.ndarray:
        return np.arange(-self.neg_steps, self.pos_steps + 1)

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.dt

    @cached_property
    def prefix(self) -> np.ndarray:
        """``prefix[i]`` is the mass of array cells ``0 .. i-1``."""
        return np.concatenate(([0.0], np.cumsum(self.mass)))

    @cached_property
    def cum(self) -> np.ndarray:
        p = self.prefix
        return p[:-1] - p[self.neg_steps]

    def index(self, step: int) -> int:
        if not -self.neg_steps <= step <= self.pos_steps:
            raise OutOfWindowError(
                f"step {step} outside window [{-self.neg_steps}, {self.pos_steps}]"
            )
        return self.neg_steps + step

    def closed(self, s: int, t: int) -> float:
        """Mass on the closed step range ``[s, t]``."""
        if t < s:
            return 0.0
        return float(self.prefix[self.index(t) + 1] - self.prefix[self.index(s)])

    def same_grid(self, other: "CumulativeMeasure") -> bool:
        return (self.dt == other.dt and self.neg_steps == other.neg_steps
                and len(self.mass) == len(other.mass))

    def scaled(self, c: float) -> "CumulativeMeasure":
        return CumulativeMeasure(self.dt, self.mass * c, self.neg_steps)

    def __add__(self, other: "CumulativeMeasure") -> "CumulativeMeasure":
        if not self.same_grid(other):
            raise InvalidParameterError("measures live on different grids")
        return CumulativeMeasure(self.dt, self.mass + other.mass, self.neg_steps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "cum"])
            for t, c in zip(self.times, self.cum):
                writer.writerow([repr(float(t)), repr(float(c))])


_DENSITIES = {
    "uniform": lambda a, b: stats.uniform(loc=a, scale=b - a),
    "normal": lambda mu, sigma: stats.norm(loc=mu, scale=sigma),
    "exponential": lambda scale: stats.expon(scale=scale),
    "laplace": lambda mu, b: stats.laplace(loc=mu, scale=b),
}


@dataclass(frozen=True)
class DensityPart:
    """A weighted absolutely continuous component ``weight * h(x) dx``."""

    name: str
    params: tuple
    weight: float
    dist: object = field(compare=False, repr=False)

    @classmethod
    def make(cls, name: str, params: Sequence[float], weight: float) -> "DensityPart":
        if name not in _DENSITIES:
            raise InvalidParameterError(f"unknown density {name!r}; known: {sorted(_DENSITIES)}")
        if not weight > 0:
            raise InvalidParameterError("density weight must be positive")
        try:
            dist = _DENSITIES[name](*params)
        except TypeError as exc:
            raise InvalidParameterError(f"bad parameters for {name}: {params}") from exc
        return cls(name, tuple(float(p) for p in params), float(weight), dist)


@dataclass(frozen=True)
class TargetMeasure:
    """A (sub-)probability measure: atoms plus weighted density components."""

    atoms: tuple = ()
    densities: tuple = ()

    def __post_init__(self):
        atoms = tuple(sorted((float(x), float(w)) for x, w in self.atoms))
        locs = [x for x, _ in atoms]
        if len(set(locs)) != len(locs):
            raise InvalidParameterError("atom locations must be distinct")
        if any(not w > 0 for _, w in atoms):
            raise InvalidParameterError("atom weights must be positive")
        object.__setattr__(self, "atoms", atoms)
        total = self.total
        if not 0 < total <= 1 + _TOTAL_TOL:
            raise InvalidParameterError(f"total mass must lie in (0, 1], got {total}")

    @classmethod
    def dirac(cls, x: float, weight: float = 1.0) -> "TargetMeasure":
        return cls(atoms=((x, weight),))

    @classmethod
    def from_atoms(cls, atoms) -> "TargetMeasure":
        items = atoms.items() if isinstance(atoms, dict) else atoms
        return cls(atoms=tuple(items))

    @property
    def total(self) -> float:
        return sum(w for _, w in self.atoms) + sum(d.weight for d in self.densities)

    @property
    def density_weight(self) -> float:
        return sum(d.weight for d in self.densities)

    @property
    def is_sub_probability(self) -> bool:
        return self.total < 1 - _TOTAL_TOL

    def atom_weight(self, x: float) -> float:
        return sum(w for y, w in self.atoms if y == x)

    def density_cdf(self, x):
        """CDF of the normalised density part."""
        wd = self.density_weight
        return sum(d.weight * d.dist.cdf(x) for d in self.densities) / wd

    def density_pdf(self, x):
        return sum(d.weight * d.dist.pdf(x) for d in self.densities)

    def mix(self, other: "TargetMeasure", alpha: float) -> "TargetMeasure":
        """The convex combination ``alpha * self + (1 - alpha) * other``."""
        weights: dict = {}
        for x, w in self.atoms:
            weights[x] = weights.get(x, 0.0) + alpha * w
        for x, w in other.atoms:
            weights[x] = weights.get(x, 0.0) + (1 - alpha) * w
        dens = tuple(DensityPart.make(d.name, d.params, alpha * d.weight) for d in self.densities)
        dens += tuple(DensityPart.make(d.name, d.params, (1 - alpha) * d.weight)
                      for d in other.densities)
        return TargetMeasure(atoms=tuple((x, w) for x, w in weights.items() if w > 0),
                             densities=tuple(d for d in dens if d.weight > 0))

    def describe(self) -> str:
        """Inline target string accepted by :func:`parse_nu`."""
        parts = []
        if self.atoms:
            parts.append("atoms:" + ",".join(f"{x!r}={w!r}" for x, w in self.atoms))
        for d in self.densities:
            parts.append("density:" + ",".join([d.name, *map(repr, d.params), repr(d.weight)]))
        return ";".join(parts)


def parse_nu(text: str) -> TargetMeasure:
    """Parse ``"atoms:loc=w,...;density:name,p1,...,weight"`` (sections optional)."""
    atoms, dens = [], []
    for section in filter(None, (s.strip() for s in text.split(";"))):
        kind, _, body = section.partition(":")
        kind = kind.strip()
        try:
            if kind == "atoms":
                for item in filter(None, (a.strip() for a in body.split(","))):
                    loc, w = item.split("=")
                    atoms.append((float(loc), float(w)))
            elif kind == "density":
                name, *nums = [p.strip() for p in body.split(",")]
                *params, weight = map(float, nums)
                dens.append(DensityPart.make(name, params, weight))
            else:
                raise InvalidParameterError(f"unknown section {kind!r} in {text!r}")
        except ValueError as exc:
            if isinstance(exc, InvalidParameterError):
                raise
            raise InvalidParameterError(f"cannot parse target measure {text!r}") from exc
    if not atoms and not dens:
        raise InvalidParameterError(f"empty target measure {text!r}")
    return TargetMeasure(atoms=tuple(atoms), densities=tuple(dens))


def _check_bandwidth(bandwidth: float) -> None:
    if not bandwidth > 0:
        raise InvalidParameterError(f"bandwidth must be positive, got {bandwidth}")


def _box_mass(values: np.ndarray, x: float, bandwidth: float, dt: float) -> np.ndarray:
    return (np.abs(values - x) <= bandwidth) * (dt / (2.0 * bandwidth))


def local_time_zero(path: GridPath, bandwidth: float) -> CumulativeMeasure:
    """Box-kernel estimate of the local time at level 0."""
    _check_bandwidth(bandwidth)
    return CumulativeMeasure(path.dt, _box_mass(path.values, 0.0, bandwidth, path.dt),
                             path.neg_steps)


def local_time_at(path: GridPath, x: float, bandwidth: float) -> CumulativeMeasure:
    """Local time at level ``x``: the level-0 estimator applied to ``B - x``."""
    _check_bandwidth(bandwidth)
    return CumulativeMeasure(path.dt, _box_mass(path.values - x, 0.0, bandwidth, path.dt),
                             path.neg_steps)


def additive_functional(path: GridPath, nu: TargetMeasure, bandwidth: float) -> CumulativeMeasure:
    """Estimate of ``int l^x nu(dx)``.

    Atoms use the box estimator at their location; density parts accumulate
    ``weight * h(B_s) ds`` directly (occupation formula).
    """
    _check_bandwidth(bandwidth)
    if not nu.total > 0:
        raise InvalidParameterError("target measure is empty")
    mass = np.zeros(len(path.values))
    for x, w in nu.atoms:
        mass += w * _box_mass(path.values - x, 0.0, bandwidth, path.dt)
    for d in nu.densities:
        mass += d.weight * d.dist.pdf(path.values) * path.dt
    return CumulativeMeasure(path.dt, mass, path.neg_steps)


@dataclass
class OccupationReport:
    edges: np.ndarray
    occupation: np.ndarray
    local_time_integral: np.ndarray
    residuals: np.ndarray
    max_relative_residual: float


def occupation_check(path: GridPath, bins: Sequence[float], bandwidth: float,
                     floor: float = 0.05) -> OccupationReport:
    """Compare occupation times of bins with integrated local-time estimates.

    Each bin ``[a, b)`` is integrated with the midpoint rule on nodes spaced
    at most ``2 * bandwidth`` apart.  Relative residuals are taken against
    ``max(occupation, floor * max occupation)`` so nearly empty bins do not
    dominate.
    """
    _check_bandwidth(bandwidth)
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidParameterError("bins must be increasing edges")
    dt, vals = path.dt, path.values
    occ = np.histogram(vals, bins=edges)[0] * dt
    # histogram closes the last bin on the right; keep all bins half-open
    occ[-1] -= np.count_nonzero(vals == edges[-1]) * dt
    lt = np.zeros(len(edges) - 1)
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        m = max(1, math.ceil((b - a) / (2 * bandwidth) - 1e-9))
        h = (b - a) / m
        nodes = a + h * (np.arange(m) + 0.5)
        lt[i] = sum(_box_mass(vals, x, bandwidth, dt).sum() for x in nodes) * h
    resid = lt - occ
    scale = np.maximum(occ, floor * occ.max()) if occ.max() > 0 else np.ones_like(occ)
    rel = np.abs(resid) / scale
    return OccupationReport(edges, occ, lt, resid, float(rel.max()) if occ.max() > 0 else 0.0)
