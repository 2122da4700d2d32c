"""Replicate orchestration: configuration, per-replicate records, aggregation."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import allocation as al
from . import shifts as sh
from .errors import InvalidParameterError
from .measures import TargetMeasure, additive_functional, local_time_at, local_time_zero, parse_nu
from .paths import cover, shift, simulate_two_sided

DEFAULT_NU = "atoms:1=1"


@dataclass(frozen=True)
class ExperimentConfig:
    construction: str = sh.BERTOIN_LE_JAN
    nu: str = DEFAULT_NU
    dt: float = 1e-3
    bandwidth: Optional[float] = None
    n: int = 100
    seed: int = 0
    base_horizon: float = 16.0
    max_horizon: float = 1000.0
    r: float = 1.0
    y: float = 1.0
    p: float = 0.5
    x: float = 1.0
    level: float = 1.0
    probes: tuple = ()
    tests: tuple = ()

    def validate(self) -> "ExperimentConfig":
        if self.construction not in sh.CONSTRUCTIONS:
            raise InvalidParameterError(
                f"unknown construction {self.construction!r}; known: {', '.join(sh.CONSTRUCTIONS)}")
        for name in ("dt", "base_horizon", "max_horizon"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidParameterError("bandwidth must be positive")
        if not self.n >= 1:
            raise InvalidParameterError("n must be at least 1")
        if not 0 <= self.seed < 2**63:
            raise InvalidParameterError("seed must be a non-negative integer")
        if self.construction in (sh.BERTOIN_LE_JAN, sh.ATOM_SPLITTING):
            self.target()
        if self.construction == sh.ATOM_PROBABILITY and not 0 <= self.p <= 1:
            raise InvalidParameterError("p must lie in [0, 1]")
        return self

    @property
    def eps(self) -> float:
        return self.bandwidth if self.bandwidth is not None else math.sqrt(self.dt)

    def target(self) -> TargetMeasure:
        return parse_nu(self.nu)

    def embedded_law(self) -> TargetMeasure:
        """The law ``B_T`` should have under this construction."""
        if self.construction in (sh.BERTOIN_LE_JAN, sh.ATOM_SPLITTING):
            return self.target()
        if self.construction == sh.NON_STOPPING:
            return TargetMeasure.dirac(self.x)
        return TargetMeasure.dirac(0.0)

    def canonical(self) -> dict:
        d = asdict(self)
        d["bandwidth"] = self.eps
        d["probes"] = [float(t) for t in self.probes]
        d["tests"] = sorted(self.tests)
        if self.construction not in (sh.BERTOIN_LE_JAN, sh.ATOM_SPLITTING):
            d.pop("nu")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def functional(self):
        nu = self.target() if self.construction in (sh.BERTOIN_LE_JAN, sh.ATOM_SPLITTING) else None
        return sh.functional(self.construction, bandwidth=self.eps, max_horizon=self.max_horizon,
                             base_horizon=self.base_horizon, nu=nu, r=self.r, y=self.y,
                             p=self.p, x=self.x, level=self.level)


def initial_path(config: ExperimentConfig, replicate: int):
    h = min(config.base_horizon, config.max_horizon)
    return simulate_two_sided(config.dt, h, h, config.seed, replicate)


def probe_values(outcome: sh.ShiftOutcome, probes) -> Optional[list]:
    """Values of the path seen from ``T`` at ``probes`` (extending the path if needed)."""
    if not outcome.matched or not probes:
        return None
    steps = [int(round(t / outcome.dt)) for t in probes]
    p = outcome.path
    lo, hi = outcome.step + min(steps + [0]), outcome.step + max(steps + [0])
    if -lo > p.neg_steps or hi > p.pos_steps:
        if p.seed_info is None:
            return None
        p = cover(p, lo, hi)
    base = p.at(outcome.step)
    return [p.at(outcome.step + k) - base for k in steps]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def make_record(config: ExperimentConfig, replicate: int, outcome: sh.ShiftOutcome,
                config_hash: Optional[str] = None) -> dict:
    rec = outcome.record()
    rec.update({"config_hash": config_hash or config.hash(), "seed": config.seed,
                "replicate": replicate, "stages": _jsonable(outcome.stages)})
    pv = probe_values(outcome, config.probes)
    if pv is not None:
        rec["probes"] = pv
    return rec


def run_replicate(config: ExperimentConfig, replicate: int, config_hash: Optional[str] = None) -> dict:
    outcome = config.functional()(initial_path(config, replicate))
    return make_record(config, replicate, outcome, config_hash)


def _worker(args):
    config, replicate, h = args
    return run_replicate(config, replicate, h)


def run_replicates(config: ExperimentConfig, workers: int = 1, start: int = 0) -> Iterator[dict]:
    """Records for replicates ``start .. n-1`` in replicate order."""
    config.validate()
    h = config.hash()
    jobs = ((config, i, h) for i in range(start, config.n))
    if workers <= 1:
        for job in jobs:
            yield _worker(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, which is the deterministic merge
        yield from pool.map(_worker, jobs, chunksize=4)


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def matched(records) -> list:
    return [r for r in records if r["status"] == sh.MATCHED]


def zero_fraction(records) -> dict:
    """Empirical ``P{T = 0}`` with its binomial standard error.

    A replicate counts once it is known whether ``T = 0``: when matched, or
    when censored after the origin's first-stage image was found (then
    ``T > 0``).
    """
    known = [r for r in records if r["status"] == sh.MATCHED or "origin_image" in r["stages"]]
    if not known:
        return {"estimate": None, "se": None, "known": 0, "zeros": 0}
    k = sum(1 for r in known if r["T"] == 0)
    p = k / len(known)
    return {"estimate": p, "se": math.sqrt(p * (1 - p) / len(known)), "known": len(known),
            "zeros": k}


# ---- structural checks on simulated paths ---------------------------------

def balancing_window(config: ExperimentConfig, replicate: int, window: float,
                     fault: Optional[str] = None) -> al.BalancingReport:
    """Balancing of ``l0`` against ``l^nu`` by the forward rule on ``[0, window]``.

    The path is simulated well past the window so that most matches of cells
    inside it resolve; unresolved ones are reported as censored mass.
    """
    nu = config.target()
    path = simulate_two_sided(config.dt, max(config.max_horizon, window), 0.0, config.seed, replicate)
    xi, eta = local_time_zero(path, config.eps), additive_functional(path, nu, config.eps)
    tau = al.ForwardRule(xi, eta)
    if fault == "off-by-one":
        base = tau

        def tau(s):
            r = base(s)
            return al.BalanceResult(r.status, r.step + 1, r.dt) if r.matched else r
    k = int(math.floor(window))
    parts = [(float(i), float(i + 1)) for i in range(k)]
    last = int(round(window / config.dt))
    return al.check_balancing(xi, eta, tau, parts, query_range=(0, last))


def stability_window(config: ExperimentConfig, replicate: int, window: float,
                     sample_pairs: Optional[int] = None):
    nu = config.target()
    path = simulate_two_sided(config.dt, max(config.max_horizon, window), 0.0, config.seed, replicate)
    xi, eta = local_time_zero(path, config.eps), additive_functional(path, nu, config.eps)
    tau = al.ForwardRule(xi, eta)
    last = int(round(window / config.dt))
    stab = al.check_right_stable(xi, eta, tau, sample_pairs=sample_pairs, seed=replicate,
                                 query_range=(0, last))
    parts = [(float(i), float(i + 1)) for i in range(int(math.floor(window)))]
    mini = al.check_minimal(xi, eta, tau, tau, parts, query_range=(0, last))
    return stab, mini


def equivariance(config: ExperimentConfig, replicate: int, offsets) -> al.EquivarianceReport:
    """Equivariance of ``t -> T(theta_t w) + t`` on one simulated path."""
    path = initial_path(config, replicate)
    reach = max(abs(k) for k in offsets) if offsets else 0
    path = cover(path, -path.neg_steps - reach, path.pos_steps + reach)
    return al.check_equivariance(path, config.functional(), offsets)
