"""Exact matching of two finite point sets on a line.

A xi-point ``s`` is matched with the first ``t >= s`` at which the closed
interval ``[s, t]`` holds equally many xi- and eta-points.  Everything is
integer counting, so this serves as a brute-force oracle for the grid engine
in :mod:`bmshift.allocation`.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .allocation import CENSORED, MATCHED, BalanceResult, balance_forward, forward_matches
from .errors import InvalidParameterError
from .measures import CumulativeMeasure


@dataclass(frozen=True)
class PointConfig:
    xi_points: tuple
    eta_points: tuple
    window: tuple

    def __post_init__(self):
        xi, eta = tuple(self.xi_points), tuple(self.eta_points)
        lo, hi = self.window
        for name, pts in (("xi", xi), ("eta", eta)):
            if any(b <= a for a, b in zip(pts, pts[1:])):
                raise InvalidParameterError(f"{name} points must be strictly increasing")
            if pts and not (lo <= pts[0] and pts[-1] <= hi):
                raise InvalidParameterError(f"{name} points outside window {self.window}")
        if set(xi) & set(eta):
            raise InvalidParameterError("xi and eta points must be disjoint")
        object.__setattr__(self, "xi_points", xi)
        object.__setattr__(self, "eta_points", eta)
        object.__setattr__(self, "window", (lo, hi))

    @classmethod
    def make(cls, xi, eta, window=None) -> "PointConfig":
        xi, eta = sorted(xi), sorted(eta)
        if window is None:
            allp = xi + eta
            window = (min(allp, default=0), max(allp, default=0))
        return cls(tuple(xi), tuple(eta), tuple(window))

    def count(self, which: str, a, b) -> int:
        """Number of points of ``which`` in the closed interval ``[a, b]``."""
        pts = self.xi_points if which == "xi" else self.eta_points
        return bisect.bisect_right(pts, b) - bisect.bisect_left(pts, a)

    def to_dict(self) -> dict:
        return {"xi": list(self.xi_points), "eta": list(self.eta_points), "window": list(self.window)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PointConfig":
        return cls.make(d["xi"], d["eta"], tuple(d["window"]))


def _positions(config: PointConfig) -> list:
    return sorted(config.xi_points + config.eta_points)


def match_forward(config: PointConfig, s) -> Optional[float]:
    """Smallest ``t >= s`` with equal closed-interval counts; ``None`` if censored.

    At a xi-point the common count is necessarily positive; any other query
    with no point at ``s`` is balanced at ``s`` itself.
    """
    lo, hi = config.window
    if not lo <= s <= hi:
        raise InvalidParameterError(f"query {s} outside window {config.window}")
    pos = _positions(config)
    candidates = pos[bisect.bisect_left(pos, s):]
    if not candidates or candidates[0] != s:
        return s
    for t in candidates:
        if config.count("xi", s, t) == config.count("eta", s, t):
            return t
    return None


def match_backward(config: PointConfig, t) -> Optional[float]:
    """Largest ``u <= t`` with equal closed-interval counts; ``None`` if censored."""
    lo, hi = config.window
    if not lo <= t <= hi:
        raise InvalidParameterError(f"query {t} outside window {config.window}")
    pos = _positions(config)
    candidates = pos[:bisect.bisect_right(pos, t)]
    if not candidates or candidates[-1] != t:
        return t
    for u in reversed(candidates):
        if config.count("xi", u, t) == config.count("eta", u, t):
            return u
    return None


def matching(config: PointConfig) -> dict:
    """Forward match of every xi-point by a last-in-first-out stack sweep."""
    events = sorted([(p, 0) for p in config.xi_points] + [(p, 1) for p in config.eta_points])
    stack, out = [], {}
    for p, kind in events:
        if kind == 0:
            stack.append(p)
        elif stack:
            out[stack.pop()] = p
    for p in stack:
        out[p] = None
    return dict(sorted(out.items()))


def _result(t, edge) -> BalanceResult:
    if t is None:
        return BalanceResult(CENSORED, edge)
    return BalanceResult(MATCHED, t)


def forward_rule(config: PointConfig):
    """:func:`match_forward` as an allocation evaluator."""
    return lambda s: _result(match_forward(config, s), config.window[1])


def backward_rule(config: PointConfig):
    return lambda t: _result(match_backward(config, t), config.window[0])


def _stability_violations(pairs: dict) -> list:
    items = sorted((s, t) for s, t in pairs.items() if t is not None)
    bad = []
    for i, (t0, img_t) in enumerate(items):
        for s0, img_s in items[i + 1:]:
            if t0 < s0 <= img_t < img_s:
                bad.append((t0, s0))
    return bad


@dataclass
class ExactReport:
    matched: int
    censored_xi: int
    unmatched_eta: int
    bijective: bool
    inverse_consistent: bool
    stability_violations: list
    alternative: Optional[dict] = field(default=None)

    @property
    def passed(self) -> bool:
        ok = self.bijective and self.inverse_consistent and not self.stability_violations
        if self.alternative is not None:
            ok = ok and self.alternative["passed"]
        return ok

    def to_dict(self) -> dict:
        return {"check": "point_matching", "matched": self.matched,
                "censored_xi": self.censored_xi, "unmatched_eta": self.unmatched_eta,
                "bijective": self.bijective, "inverse_consistent": self.inverse_consistent,
                "stability_violations": [list(p) for p in self.stability_violations],
                "alternative": self.alternative, "passed": self.passed}


def verify_exact(config: PointConfig, alternative: Optional[dict] = None) -> ExactReport:
    """Exact checks of balancing, right-stability and (optionally) minimality.

    ``alternative`` maps xi-points to eta-points (or ``None``).  It is compared
    against the forward matching: it must be dominated by it
    (``s <= alt(s) <= tau(s)``), balance, and be right-stable; a balancing
    dominated alternative that undercuts the forward matching anywhere is
    reported as a minimality failure.
    """
    tau = {s: match_forward(config, s) for s in config.xi_points}
    images = [t for t in tau.values() if t is not None]
    eta_set = set(config.eta_points)
    bijective = len(set(images)) == len(images) and all(t in eta_set for t in images)
    back = {t: match_backward(config, t) for t in config.eta_points}
    inverse_ok = all(back[t] == s for s, t in tau.items() if t is not None)
    # eta-points missed by the forward map are exactly those with no backward partner
    inverse_ok = inverse_ok and all((back[t] is None) == (t not in set(images)) for t in config.eta_points)
    report = ExactReport(
        matched=len(images),
        censored_xi=len(tau) - len(images),
        unmatched_eta=len(config.eta_points) - len(set(images)),
        bijective=bijective,
        inverse_consistent=inverse_ok,
        stability_violations=_stability_violations(tau),
    )
    if alternative is not None:
        alt = {s: alternative.get(s) for s in config.xi_points}
        pre = [s for s, t in alt.items()
               if t is not None and (t < s or tau[s] is None or t > tau[s])]
        alt_images = [t for t in alt.values() if t is not None]
        balances = (len(set(alt_images)) == len(alt_images) and set(alt_images) == set(images))
        smaller = [s for s, t in alt.items()
                   if t is not None and tau[s] is not None and t < tau[s]]
        unstable = _stability_violations(alt)
        minimal_ok = not (not pre and balances and smaller)
        report.alternative = {
            "precondition_failures": pre,
            "balances": balances,
            "undercut_points": smaller,
            "stability_violations": [list(p) for p in unstable],
            "minimal": minimal_ok,
            "passed": minimal_ok and not pre and balances and not unstable,
        }
    return report


def random_config(seed: int, n_xi: int, n_eta: int, span: int = 100) -> PointConfig:
    """Random disjoint integer point sets in ``[0, span)``."""
    if n_xi + n_eta > span:
        raise InvalidParameterError("span too small for the requested points")
    rng = np.random.default_rng(seed)
    pos = rng.choice(span, size=n_xi + n_eta, replace=False)
    xi = sorted(int(p) for p in pos[:n_xi])
    eta = sorted(int(p) for p in pos[n_xi:])
    return PointConfig(tuple(xi), tuple(eta), (0, span - 1))


def embed(config: PointConfig, weight: float = 1.0):
    """Atomic grid measures (``dt = 1``) carrying the two point sets."""
    lo, hi = config.window
    lo, hi = min(lo, 0), max(hi, 0)
    for p in config.xi_points + config.eta_points:
        if p != int(p):
            raise InvalidParameterError("embedding needs integer positions")
    xi = CumulativeMeasure.from_points([int(p) for p in config.xi_points], int(lo), int(hi), 1.0, weight)
    eta = CumulativeMeasure.from_points([int(p) for p in config.eta_points], int(lo), int(hi), 1.0, weight)
    return xi, eta


def continuum_agrees(config: PointConfig) -> bool:
    """The grid engine reproduces the exact matching on the embedded point sets.

    Both the direct scan and the stack table are compared at every xi-point.
    """
    if not config.xi_points:
        return True
    xi, eta = embed(config)
    exact = matching(config)
    table = forward_matches(xi, eta)
    for s in config.xi_points:
        scan = balance_forward(xi, eta, int(s))
        want = exact[s]
        got_scan = scan.step if scan.matched else None
        if got_scan != want or table[int(s)] != want or match_forward(config, s) != want:
            return False
    return True
