"""Balancing allocation rules between grid measures, and checkers for them.

Allocation evaluators are plain callables ``tau(step) -> BalanceResult``.
Balancing uses closed step ranges: ``g(t) = xi[s, t] - eta[s, t]`` with the
point masses of :class:`~bmshift.measures.CumulativeMeasure`, so a match lands
on the grid step whose eta-mass closes the balance.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidParameterError
from .measures import CumulativeMeasure

MATCHED = "matched"
CENSORED = "censored"

# relative slack for float ties between equal mass quanta
_FUZZ = 1e-7


@dataclass(frozen=True)
class BalanceResult:
    """Outcome of one allocation query.

    ``step`` is the matched grid step, or the window edge searched when
    censored.
    """

    status: str
    step: int
    dt: float = 1.0

    @property
    def matched(self) -> bool:
        return self.status == MATCHED

    @property
    def time(self) -> float:
        return self.step * self.dt

    @property
    def horizon(self) -> Optional[float]:
        return None if self.matched else self.time


Allocation = Callable[[int], BalanceResult]


def _fuzz(*measures: CumulativeMeasure) -> float:
    peak = max((float(m.mass.max()) if len(m.mass) else 0.0) for m in measures)
    return _FUZZ * peak


def _check_grids(xi: CumulativeMeasure, eta: CumulativeMeasure) -> None:
    if not xi.same_grid(eta):
        raise InvalidParameterError("xi and eta must share grid and window")


def _first_balance(dxi: np.ndarray, deta: np.ndarray, thresh: float) -> int:
    """Offset (>= 1) of the first balancing index in a scan, or -1."""
    g = np.cumsum(dxi - deta)
    h = np.cumsum(deta)
    ok = (g <= thresh) & ((np.maximum.accumulate(g) > thresh) | (h > thresh))
    ok[0] = False
    k = int(np.argmax(ok))
    return k if ok[k] else -1


def balance_forward(xi: CumulativeMeasure, eta: CumulativeMeasure, s: int,
                    tol: float = 0.0) -> BalanceResult:
    """First step ``t > s`` at which ``xi[s, t]`` is balanced by ``eta[s, t]``.

    A match needs ``g(t) <= tol`` where ``g(t) = xi[s, t] - eta[s, t]``, and
    either ``g`` exceeded ``tol`` somewhere in ``[s, t]`` or ``eta[s, t] > tol``.
    The second clause stops a start with no mass on either side from matching
    immediately.
    """
    _check_grids(xi, eta)
    i0 = xi.index(s)
    k = _first_balance(xi.mass[i0:], eta.mass[i0:], tol + _fuzz(xi, eta))
    if k < 0:
        return BalanceResult(CENSORED, xi.pos_steps, xi.dt)
    return BalanceResult(MATCHED, s + k, xi.dt)


def balance_backward(xi: CumulativeMeasure, eta: CumulativeMeasure, t: int,
                     tol: float = 0.0) -> BalanceResult:
    """Mirror image of :func:`balance_forward`: from an eta-point back to its xi-partner."""
    _check_grids(xi, eta)
    i0 = eta.index(t)
    k = _first_balance(eta.mass[i0::-1], xi.mass[i0::-1], tol + _fuzz(xi, eta))
    if k < 0:
        return BalanceResult(CENSORED, -xi.neg_steps, xi.dt)
    return BalanceResult(MATCHED, t - k, xi.dt)


def forward_matches(xi: CumulativeMeasure, eta: CumulativeMeasure) -> dict:
    """Matches of :func:`balance_forward` (``tol=0``) for every xi-carrying step.

    Runs a monotone stack over the support of ``xi + eta`` instead of one scan
    per query.  Returns ``{step: matched step or None}`` (``None`` = censored).
    """
    _check_grids(xi, eta)
    fz = _fuzz(xi, eta)
    a, b = xi.mass, eta.mass
    support = np.flatnonzero((a > 0) | (b > 0))
    prefix = np.concatenate(([0.0], np.cumsum(a - b)))
    before, after = prefix[support], prefix[support + 1]
    n = len(a)
    vals: list = []   # stack of cells right of k, values ascending from bottom to top
    poss: list = []
    out = {}
    for j in range(len(support) - 1, -1, -1):
        k = int(support[j])
        if a[k] > 0:
            step = k - xi.neg_steps
            if a[k] - b[k] <= fz and k + 1 < n and not (a[k + 1] > 0 or b[k + 1] > 0):
                # overlap of xi and eta at s: balanced again one step later
                out[step] = step + 1
            else:
                idx = bisect.bisect_right(vals, float(before[j]) + fz) - 1
                out[step] = None if idx < 0 else poss[idx] - xi.neg_steps
        v = float(after[j])
        while vals and vals[-1] >= v:
            vals.pop()
            poss.pop()
        vals.append(v)
        poss.append(k)
    return out


class ForwardRule:
    """The forward balancing rule from ``xi`` to ``eta`` as an allocation evaluator."""

    def __init__(self, xi: CumulativeMeasure, eta: CumulativeMeasure, tol: float = 0.0):
        _check_grids(xi, eta)
        self.xi, self.eta, self.tol = xi, eta, tol
        self._table = None

    def __call__(self, s: int) -> BalanceResult:
        if self.tol == 0 and self.xi.mass[self.xi.index(s)] > 0:
            if self._table is None:
                self._table = forward_matches(self.xi, self.eta)
            t = self._table[s]
            if t is None:
                return BalanceResult(CENSORED, self.xi.pos_steps, self.xi.dt)
            return BalanceResult(MATCHED, t, self.xi.dt)
        return balance_forward(self.xi, self.eta, s, self.tol)


def inverse_local_time(ell: CumulativeMeasure, r: float, s: int = 0) -> BalanceResult:
    """Right endpoint of the level set ``{t : ell[s, t) = r}`` (signed for ``t < s``).

    Returns the largest grid step ``t`` with ``cum_s(t) <= r`` where
    ``cum_s(t) = ell[s, t)`` for ``t >= s`` and ``-ell[t, s)`` for ``t < s``;
    censored when the level is not exceeded (``r >= 0``) or not reached
    (``r < 0``) inside the window.
    """
    cum = ell.cum - ell.cum[ell.index(s)]
    fz = _fuzz(ell) + 1e-12 * abs(r)
    idx = int(np.searchsorted(cum, r + fz, side="right")) - 1
    if idx >= len(cum) - 1:
        return BalanceResult(CENSORED, ell.pos_steps, ell.dt)
    if idx < 0:
        return BalanceResult(CENSORED, -ell.neg_steps, ell.dt)
    return BalanceResult(MATCHED, idx - ell.neg_steps, ell.dt)


def compose(tau1: Allocation, tau2: Allocation) -> Allocation:
    """``s -> tau2(tau1(s))``; a censored first stage is returned as is."""

    def composite(s: int) -> BalanceResult:
        first = tau1(s)
        if not first.matched:
            return first
        return tau2(first.step)

    return composite


def identity_rule(dt: float = 1.0) -> Allocation:
    return lambda s: BalanceResult(MATCHED, s, dt)


@dataclass
class ImbalanceFunction:
    """``f(t) = cum_xi(t) - cum_eta(t)`` on the common grid."""

    steps: np.ndarray
    values: np.ndarray
    dt: float = 1.0

    @classmethod
    def from_measures(cls, xi: CumulativeMeasure, eta: CumulativeMeasure) -> "ImbalanceFunction":
        _check_grids(xi, eta)
        return cls(xi.steps, xi.cum - eta.cum, xi.dt)

    def at(self, step: int) -> float:
        return float(self.values[step - self.steps[0]])


@dataclass
class Decomposition:
    steps: np.ndarray          # 0 .. a
    running_min: np.ndarray    # backwards running minimum on 0 .. a
    in_c: np.ndarray           # mask of {f = m}
    excursions: list           # inclusive step runs (first, last) where f > m

    @property
    def c_steps(self) -> np.ndarray:
        return self.steps[self.in_c]


def decompose(f: ImbalanceFunction, a: int, atol: float = 1e-12) -> Decomposition:
    """Backwards running minimum of ``f`` on ``[0, a]`` and its excursions above it."""
    if a < 0:
        raise InvalidParameterError("a must be non-negative")
    i0 = int(-f.steps[0])
    if i0 < 0 or i0 + a >= len(f.values):
        raise InvalidParameterError("[0, a] not inside the window of f")
    seg = f.values[i0:i0 + a + 1]
    m = np.minimum.accumulate(seg[::-1])[::-1]
    in_c = seg <= m + atol
    runs = []
    start = None
    for i, c in enumerate(in_c):
        if not c and start is None:
            start = i
        elif c and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:  # cannot happen: m(a) = f(a)
        runs.append((start, a))
    return Decomposition(np.arange(a + 1), m, in_c, runs)


def _steps_in(interval, dt: float):
    lo, hi = interval
    return math.ceil(lo / dt - 1e-9), math.ceil(hi / dt - 1e-9)


@dataclass
class BalancingReport:
    """Image of xi under tau against eta, per interval of a partition.

    ``external`` is eta-mass whose balancing partner lies before the first
    queried step (it cannot be reached from inside the window); it is
    attributed through the running minimum of the imbalance and reported
    separately from the image.
    """

    intervals: list
    image: np.ndarray
    eta: np.ndarray
    external: np.ndarray
    censored_mass: float
    off_support_mass: float
    queried_mass: float
    rel_tol: float = 0.05

    @property
    def discrepancy(self) -> np.ndarray:
        return np.abs(self.image + self.external - self.eta)

    @property
    def max_abs(self) -> float:
        return float(self.discrepancy.max()) if len(self.intervals) else 0.0

    @property
    def max_rel(self) -> float:
        d = self.discrepancy
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(self.eta > 0, d / np.where(self.eta > 0, self.eta, 1), np.where(d > 0, np.inf, 0))
        return float(rel.max()) if len(rel) else 0.0

    @property
    def off_support_fraction(self) -> float:
        return self.off_support_mass / self.queried_mass if self.queried_mass > 0 else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.rel_tol and self.off_support_fraction <= self.rel_tol

    def to_dict(self) -> dict:
        return {
            "check": "balancing",
            "statistic": self.max_rel,
            "threshold": self.rel_tol,
            "max_abs": self.max_abs,
            "off_support_fraction": self.off_support_fraction,
            "censored_mass": self.censored_mass,
            "external_mass": float(self.external.sum()),
            "passed": bool(self.passed),
        }


def check_balancing(xi: CumulativeMeasure, eta: CumulativeMeasure, tau: Allocation,
                    partition: Sequence, query_range=None,
                    rel_tol: float = 0.05) -> BalancingReport:
    """Compare ``int 1{tau(s) in I} xi(ds)`` with ``eta(I)`` for each ``I`` in ``partition``.

    ``partition`` holds half-open time intervals ``(a, b)``.  Only xi-steps in
    ``query_range`` (inclusive step pair, default whole window) are mapped.
    """
    _check_grids(xi, eta)
    lo, hi = query_range if query_range is not None else (-xi.neg_steps, xi.pos_steps)
    i_lo, i_hi = xi.index(lo), xi.index(hi)
    bounds = [_steps_in(iv, xi.dt) for iv in partition]
    image = np.zeros(len(bounds))
    censored = off = queried = 0.0
    for i in np.flatnonzero(xi.mass[i_lo:i_hi + 1] > 0) + i_lo:
        s = int(i) - xi.neg_steps
        w = float(xi.mass[i])
        queried += w
        res = tau(s)
        if not res.matched:
            censored += w
            continue
        t = res.step
        if not -eta.neg_steps <= t <= eta.pos_steps or eta.mass[eta.index(t)] <= 0:
            off += w
        for j, (a, b) in enumerate(bounds):
            if a <= t < b:
                image[j] += w
    # eta-mass unreachable from inside: drops of the running minimum of the imbalance
    d = xi.mass[i_lo:] - eta.mass[i_lo:]
    run_min = np.minimum.accumulate(np.concatenate(([0.0], np.cumsum(d))))
    ext_cells = np.clip(run_min[:-1] - run_min[1:], 0.0, None)
    ext_cells[ext_cells <= _fuzz(xi, eta)] = 0.0
    eta_i = np.zeros(len(bounds))
    ext = np.zeros(len(bounds))
    for j, (a, b) in enumerate(bounds):
        ia, ib = max(a + eta.neg_steps, 0), min(b + eta.neg_steps, len(eta.mass))
        eta_i[j] = eta.mass[ia:ib].sum() if ib > ia else 0.0
        ja, jb = max(ia - i_lo, 0), max(ib - i_lo, 0)
        ext[j] = ext_cells[ja:jb].sum() if jb > ja else 0.0
    return BalancingReport(list(partition), image, eta_i, ext, censored, off, queried, rel_tol)


def aggregate_balancing(reports: Sequence[BalancingReport]) -> BalancingReport:
    """Sum several reports over the same partition (replicate averaging)."""
    first = reports[0]
    return BalancingReport(
        first.intervals,
        sum(r.image for r in reports),
        sum(r.eta for r in reports),
        sum(r.external for r in reports),
        sum(r.censored_mass for r in reports),
        sum(r.off_support_mass for r in reports),
        sum(r.queried_mass for r in reports),
        first.rel_tol,
    )


@dataclass
class EquivarianceReport:
    checks: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"check": "equivariance", "statistic": len(self.violations),
                "threshold": 0, "checks": self.checks, "passed": self.passed}


def _rewindow(path, pad: int):
    """Same path values in a different window: extended when streams allow, else trimmed."""
    from .paths import GridPath, cover

    if pad <= 0:
        return path
    if path.seed_info is not None:
        return cover(path, -path.neg_steps - pad, path.pos_steps + pad)
    lo = min(pad, path.neg_steps)
    hi = min(pad, path.pos_steps)
    return GridPath(path.dt, path.values[lo:len(path.values) - hi], path.neg_steps - lo)


def check_equivariance(path, functional, offsets: Sequence[int],
                       queries: Sequence[int] = (0,), pad: Optional[int] = None) -> EquivarianceReport:
    """Check ``tau(theta_k w, s - k) = tau(w, s) - k`` for ``tau_T(t) = T(theta_t w) + t``.

    ``functional`` maps a path to an object with ``status`` and ``step``.  The
    right side evaluates ``T`` on ``theta_s w``; the left side on
    ``theta_{s-k} theta_k w`` where ``theta_k w`` is held in a different
    window (``pad`` steps wider for simulated paths, narrower for fixed
    ones), so results that depend on anything but the path values show up.
    """
    from .paths import shift

    if pad is None:
        pad = max([abs(k) for k in offsets] + [0]) + 1
    report = EquivarianceReport(0)
    base = {}
    for s in queries:
        r = functional(shift(path, s))
        base[s] = (r.status, r.step + s)
    for k in offsets:
        moved = _rewindow(shift(path, k), pad)
        for s in queries:
            r = functional(shift(moved, s - k))
            lhs = (r.status, r.step + (s - k))
            want = (base[s][0], base[s][1] - k)
            report.checks += 1
            if lhs[0] != want[0] or (lhs[0] == MATCHED and lhs[1] != want[1]):
                report.violations.append({"offset": k, "query": s, "got": lhs, "want": want})
    return report


@dataclass
class StabilityReport:
    pairs: int
    violations: int
    violating_mass: float
    precondition_failures: int
    censored: int
    exhaustive: bool

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.precondition_failures == 0

    def to_dict(self) -> dict:
        return {"check": "right_stability", "statistic": self.violating_mass, "threshold": 0.0,
                "pairs": self.pairs, "violations": self.violations,
                "precondition_failures": self.precondition_failures, "passed": self.passed}


def _matched_xi(xi: CumulativeMeasure, tau: Allocation, query_range=None):
    lo, hi = query_range if query_range is not None else (-xi.neg_steps, xi.pos_steps)
    i_lo = xi.index(lo)
    steps, images, weights, censored = [], [], [], 0
    for i in np.flatnonzero(xi.mass[i_lo:xi.index(hi) + 1] > 0) + i_lo:
        s = int(i) - xi.neg_steps
        r = tau(s)
        if not r.matched:
            censored += 1
            continue
        steps.append(s)
        images.append(r.step)
        weights.append(float(xi.mass[i]))
    return np.array(steps, dtype=np.int64), np.array(images, dtype=np.int64), np.array(weights), censored


def check_right_stable(xi: CumulativeMeasure, eta: CumulativeMeasure, tau: Allocation,
                       sample_pairs: Optional[int] = None, seed: int = 0,
                       query_range=None) -> StabilityReport:
    """Count xi-pairs ``t < s <= tau(t) < tau(s)``.

    Exhaustive when ``sample_pairs`` is None, otherwise ``sample_pairs`` pairs
    drawn from ``xi x xi`` and the violating mass extrapolated.
    """
    _check_grids(xi, eta)
    s_arr, img, w, censored = _matched_xi(xi, tau, query_range)
    pre = int(np.count_nonzero(img < s_arr))
    n = len(s_arr)
    if n < 2:
        return StabilityReport(0, 0, 0.0, pre, censored, sample_pairs is None)
    if sample_pairs is None:
        ti, si = np.triu_indices(n, k=1)       # s_arr is increasing
        t_s, s_s, t_img, s_img = s_arr[ti], s_arr[si], img[ti], img[si]
        bad = (t_s < s_s) & (s_s <= t_img) & (t_img < s_img)
        mass = float((w[ti] * w[si])[bad].sum())
        return StabilityReport(len(ti), int(bad.sum()), mass, pre, censored, True)
    rng = np.random.default_rng(seed)
    p = w / w.sum()
    a = rng.choice(n, size=sample_pairs, p=p)
    b = rng.choice(n, size=sample_pairs, p=p)
    ti, si = np.minimum(a, b), np.maximum(a, b)
    keep = ti < si
    t_s, s_s, t_img, s_img = s_arr[ti], s_arr[si], img[ti], img[si]
    bad = keep & (t_s < s_s) & (s_s <= t_img) & (t_img < s_img)
    mass = float(bad.mean()) * float(w.sum()) ** 2
    return StabilityReport(int(sample_pairs), int(bad.sum()), mass, pre, censored, False)


@dataclass
class MinimalityReport:
    smaller_mass: float
    precondition_failures: int
    other_balances: bool
    balancing: BalancingReport

    @property
    def passed(self) -> bool:
        # the minimality statement only constrains dominated balancing rules
        applies = self.precondition_failures == 0 and self.other_balances
        return not (applies and self.smaller_mass > 0)

    def to_dict(self) -> dict:
        return {"check": "minimality", "statistic": self.smaller_mass, "threshold": 0.0,
                "precondition_failures": self.precondition_failures,
                "other_balances": self.other_balances, "passed": self.passed}


def check_minimal(xi: CumulativeMeasure, eta: CumulativeMeasure, tau_ref: Allocation,
                  tau_other: Allocation, partition: Sequence, tol_steps: int = 0,
                  query_range=None) -> MinimalityReport:
    """xi-mass where a dominated rule ``s <= tau_other <= tau_ref`` strictly undercuts ``tau_ref``."""
    _check_grids(xi, eta)
    s_arr, ref, w, _ = _matched_xi(xi, tau_ref, query_range)
    other = np.array([tau_other(int(s)).step if tau_other(int(s)).matched else np.iinfo(np.int64).max
                      for s in s_arr], dtype=np.int64)
    pre = int(np.count_nonzero((other < s_arr) | (other > ref)))
    smaller = float(w[other < ref - tol_steps].sum())
    bal = check_balancing(xi, eta, tau_other, partition, query_range=query_range)
    return MinimalityReport(smaller, pre, bal.passed, bal)
