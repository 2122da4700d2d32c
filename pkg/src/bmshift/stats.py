"""Statistical checks on simulated shifts.

Every routine is deterministic given its inputs; resampling uses a seeded
generator.  Reports carry the statistic, the threshold it was compared with,
and a verdict derived from those two alone.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidParameterError
from .measures import TargetMeasure
from .paths import cover

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    name: str
    statistic: float
    threshold: object
    verdict: str
    n: int
    estimate: Optional[float] = None
    ci: Optional[tuple] = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def ks_critical(alpha: float) -> float:
    """Asymptotic one-sample KS constant ``c(alpha)``; ``c(0.01) = 1.628``."""
    return math.sqrt(-math.log(alpha / 2) / 2)


def ks_test(sample, reference_cdf: Callable, alpha: float = 0.01, name: str = "ks") -> TestReport:
    """One-sample Kolmogorov-Smirnov: pass iff ``D_n < c(alpha) / sqrt(n)``."""
    x = np.asarray(sample, dtype=float)
    if x.size == 0:
        raise InvalidParameterError("empty sample")
    n = x.size
    d = float(stats.kstest(x, reference_cdf).statistic)
    thr = ks_critical(alpha) / math.sqrt(n)
    verdict = INCONCLUSIVE if n < 20 else (PASS if d < thr else FAIL)
    return TestReport(name, d, thr, verdict, n, details={"alpha": alpha})


def _chi2_verdict(p: float, alpha: float) -> str:
    return PASS if p >= alpha else FAIL


def embedding_test(bt_samples, nu: TargetMeasure, bandwidth: float, censored: int = 0,
                   alpha: float = 0.01, max_unassigned: float = 0.05) -> TestReport:
    """Compare landed values with the target law (normalised when sub-probability).

    Samples within ``2 * bandwidth`` of an atom are assigned to it.  Atom
    counts (plus a residual class when the target has a density part) get a
    chi-square goodness-of-fit test; the residual sample is KS-tested against
    the normalised density part, or must be at most ``max_unassigned`` of the
    sample when the target is purely atomic.
    """
    x = np.asarray(bt_samples, dtype=float)
    n = x.size
    total = nu.total
    locs = np.array([a for a, _ in nu.atoms])
    probs = [w / total for _, w in nu.atoms]
    assigned = np.full(n, -1)
    if len(locs):
        dist = np.abs(x[:, None] - locs[None, :])
        nearest = dist.argmin(axis=1)
        assigned = np.where(dist[np.arange(n), nearest] <= 2 * bandwidth, nearest, -1)
    counts = [int(np.count_nonzero(assigned == i)) for i in range(len(locs))]
    rest = x[assigned < 0]
    details = {"censored": int(censored), "matched": n,
               "censored_fraction": censored / (n + censored) if n + censored else 0.0,
               "atoms": [float(a) for a in locs],
               "frequencies": [c / n if n else 0.0 for c in counts],
               "expected": probs, "unassigned_fraction": rest.size / n if n else 0.0}
    if n == 0:
        return TestReport("embedding", float("nan"), alpha, INCONCLUSIVE, 0, details=details)
    parts = {}
    has_density = nu.density_weight > 0
    observed = list(counts) + ([rest.size] if has_density else [])
    expected_p = probs + ([nu.density_weight / total] if has_density else [])
    n_parts = (len(observed) > 1) + (1 if has_density or len(locs) else 0)
    a_each = alpha / max(n_parts, 1)
    if len(observed) > 1:
        chi = stats.chisquare(observed, f_exp=np.array(expected_p) * sum(observed))
        parts["chi_square"] = {"statistic": float(chi.statistic), "p_value": float(chi.pvalue),
                               "threshold": a_each, "verdict": _chi2_verdict(chi.pvalue, a_each)}
    if has_density:
        ks = ks_test(rest, nu.density_cdf, alpha=a_each, name="embedding_density") if rest.size else None
        parts["density_ks"] = ks.to_dict() if ks else {"verdict": FAIL}
    elif len(locs):
        frac = rest.size / n
        parts["unassigned"] = {"statistic": frac, "threshold": max_unassigned,
                               "verdict": PASS if frac <= max_unassigned else FAIL}
    verdicts = [p["verdict"] for p in parts.values()]
    verdict = FAIL if FAIL in verdicts else (INCONCLUSIVE if INCONCLUSIVE in verdicts else PASS)
    details["parts"] = parts
    stat = max((p.get("statistic", 0.0) for p in parts.values()), default=0.0)
    return TestReport("embedding", float(stat), alpha, verdict, n, details=details)


def _probe_values(outcomes, probe_times):
    """Shifted-path values at probe times, extending stored paths when needed."""
    bt, rows, missing = [], [], 0
    for o in outcomes:
        if not o.matched:
            continue
        dt = o.dt
        steps = [int(round(t / dt)) for t in probe_times]
        lo, hi = o.step + min(steps + [0]), o.step + max(steps + [0])
        p = o.path
        if -lo > p.neg_steps or hi > p.pos_steps:
            if p.seed_info is None:
                missing += 1
                continue
            p = cover(p, lo, hi)
        base = p.at(o.step)
        bt.append(o.B_T)
        rows.append([p.at(o.step + k) - base for k in steps])
    return np.array(bt, dtype=float), np.array(rows, dtype=float).reshape(-1, len(probe_times)), missing


def _quantile_bins(v: np.ndarray, bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(v, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, v, side="right")


def independence_parts(bt: np.ndarray, values: np.ndarray, alpha: float, bins: int = 4) -> dict:
    """Correlation band and binned chi-square between ``bt`` and one probe column."""
    n = bt.size
    band = 3 / math.sqrt(n)
    out = {}
    if np.ptp(bt) == 0 or np.ptp(values) == 0:
        out["correlation"] = {"statistic": 0.0, "threshold": band, "verdict": PASS,
                              "note": "constant input"}
        return out
    r = float(np.corrcoef(bt, values)[0, 1])
    out["correlation"] = {"statistic": r, "threshold": band,
                          "verdict": PASS if abs(r) < band else FAIL}
    a, b = _quantile_bins(bt, bins), _quantile_bins(values, bins)
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if min(table.shape) > 1:
        res = stats.chi2_contingency(table)
        out["chi_square"] = {"statistic": float(res.statistic), "p_value": float(res.pvalue),
                             "threshold": alpha,
                             "verdict": PASS if res.pvalue >= alpha else FAIL}
    return out


def unbiasedness_test(shift_outcomes: Sequence, probe_times: Sequence[float],
                      alpha: float = 0.01, bins: int = 4) -> TestReport:
    """Is the path seen from ``T`` a Brownian motion independent of ``B_T``?

    (a) KS of each probe value against ``N(0, |t|)``; (b) KS of pooled
    standardised increments between consecutive probe times (0 included)
    against ``N(0, 1)``; (c) ``|corr(B_T, probe)| < 3 / sqrt(n)`` and a binned
    chi-square independence test per probe.  Bonferroni across the KS and
    chi-square tests.
    """
    probes = [float(t) for t in probe_times]
    if any(t == 0 for t in probes):
        raise InvalidParameterError("probe times must be non-zero")
    bt, vals, missing = _probe_values(shift_outcomes, probes)
    dt = next((o.dt for o in shift_outcomes if o.matched), 1.0)
    rep = unbiasedness_from_values(bt, vals, [round(t / dt) * dt for t in probes], alpha, bins)
    rep.details["missing_coverage"] = missing
    return rep


def unbiasedness_from_values(bt, values, probe_times: Sequence[float], alpha: float = 0.01,
                             bins: int = 4) -> TestReport:
    """:func:`unbiasedness_test` on precomputed ``B_T`` and probe values (one row per shift)."""
    bt = np.asarray(bt, dtype=float)
    times = [float(t) for t in probe_times]
    vals = np.asarray(values, dtype=float).reshape(-1, len(times))
    n = bt.size
    if n < 20:
        return TestReport("unbiasedness", float("nan"), alpha, INCONCLUSIVE, n)
    m = 2 * len(times) + 1
    a_each = alpha / m
    parts = {"marginals": {}, "independence": {}}
    for t, col in zip(times, vals.T):
        rep = ks_test(col, stats.norm(scale=math.sqrt(abs(t))).cdf, alpha=a_each, name=f"probe {t:g}")
        parts["marginals"][f"{t:g}"] = rep.to_dict()
    order = np.argsort(times + [0.0])
    grid = np.array(times + [0.0])[order]
    full = np.column_stack([vals, np.zeros(n)])[:, order]
    incr = np.diff(full, axis=1) / np.sqrt(np.diff(grid))
    parts["increments"] = ks_test(incr.ravel(), stats.norm.cdf, alpha=a_each,
                                  name="increments").to_dict()
    for t, col in zip(times, vals.T):
        parts["independence"][f"{t:g}"] = independence_parts(bt, col, a_each, bins)
    verdicts = [r["verdict"] for r in parts["marginals"].values()] + [parts["increments"]["verdict"]]
    verdicts += [v["verdict"] for d in parts["independence"].values() for v in d.values()]
    verdict = FAIL if FAIL in verdicts else (INCONCLUSIVE if INCONCLUSIVE in verdicts else PASS)
    worst = max(abs(v["correlation"]["statistic"]) for v in parts["independence"].values())
    return TestReport("unbiasedness", worst, 3 / math.sqrt(n), verdict, n,
                      details={"parts": parts, "bonferroni_alpha": a_each})


def kaplan_meier(x, observed=None):
    """Product-limit survival estimate.

    Returns distinct event times and ``S(t)`` just after each of them.
    ``observed`` flags exact values; False marks right-censored lower bounds.
    """
    x = np.asarray(x, dtype=float)
    obs = np.ones(x.size, bool) if observed is None else np.asarray(observed, bool)
    order = np.lexsort((~obs, x))   # events before censorings at ties
    x, obs = x[order], obs[order]
    times, counts = np.unique(x[obs], return_counts=True)
    at_risk = x.size - np.searchsorted(x, times, side="left")
    surv = np.cumprod(1.0 - counts / at_risk)
    return times, surv


def _window_points(x, obs, q_lo, q_hi):
    t, s = kaplan_meier(x, obs)
    keep = (s >= 1 - q_hi - 1e-12) & (s <= 1 - q_lo + 1e-12) & (s > 0) & (t > 0)
    return np.log(t[keep]), np.log(s[keep])


def _fit(lx, ly):
    if lx.size < 3 or np.ptp(lx) == 0:
        return float("nan"), float("nan")
    slope = np.polyfit(lx, ly, 1)[0]
    mid = 0.5 * (lx.min() + lx.max())
    lo, hi = lx <= mid, lx > mid
    if lo.sum() < 2 or hi.sum() < 2 or np.ptp(lx[lo]) == 0 or np.ptp(lx[hi]) == 0:
        return float(slope), float("nan")
    bend = np.polyfit(lx[hi], ly[hi], 1)[0] - np.polyfit(lx[lo], ly[lo], 1)[0]
    return float(slope), float(bend)


def tail_slope(samples, quantile_range=(0.8, 0.99), observed=None, expected=None,
               n_boot: int = 200, seed: int = 0, min_points: int = 10) -> TestReport:
    """Log-log slope of the empirical survival function over a quantile window.

    Censored samples (``observed`` False) enter the Kaplan-Meier estimate as
    lower bounds.  When more than 1% are censored the window is moved down so
    its top stays one percent below the censored mass.  ``expected`` is an
    optional ``(lo, hi)`` band for the verdict.  The ``curved`` flag is raised
    when the bootstrap interval for the change of slope between the two halves
    of the window excludes 0.
    """
    x = np.asarray(samples, dtype=float)
    q_lo, q_hi = quantile_range
    if not 0.5 <= q_lo < q_hi <= 0.999:
        raise InvalidParameterError(f"bad quantile window {quantile_range}")
    if np.any(x <= 0):
        raise InvalidParameterError("samples must be positive")
    obs = np.ones(x.size, bool) if observed is None else np.asarray(observed, bool)
    cens = 1.0 - obs.mean() if x.size else 0.0
    if cens > 0.01:
        new_hi = min(q_hi, 1.0 - cens - 0.01)
        q_lo, q_hi = max(0.5, q_lo - (q_hi - new_hi)), new_hi
    details = {"censored_fraction": float(cens), "window": [q_lo, q_hi], "n_boot": n_boot,
               "seed": seed}
    if q_hi <= q_lo:
        return TestReport("tail_slope", float("nan"), expected, INCONCLUSIVE, x.size, details=details)
    lx, ly = _window_points(x, obs, q_lo, q_hi)
    slope, bend = _fit(lx, ly)
    details["points"] = int(lx.size)
    if lx.size < min_points or not math.isfinite(slope):
        return TestReport("tail_slope", slope, expected, INCONCLUSIVE, x.size, estimate=slope,
                          details=details)
    rng = np.random.default_rng(seed)
    boots, bends = [], []
    for _ in range(n_boot):
        idx = rng.integers(0, x.size, x.size)
        b, c = _fit(*_window_points(x[idx], obs[idx], q_lo, q_hi))
        if math.isfinite(b):
            boots.append(b)
        if math.isfinite(c):
            bends.append(c)
    ci = tuple(float(v) for v in np.percentile(boots, [2.5, 97.5])) if boots else None
    bend_ci = tuple(float(v) for v in np.percentile(bends, [2.5, 97.5])) if bends else None
    curved = bool(bend_ci and (bend_ci[0] > 0 or bend_ci[1] < 0))
    details.update({"slope_change": bend, "slope_change_ci": bend_ci, "curved": curved})
    if expected is None:
        verdict = PASS
    else:
        verdict = PASS if expected[0] <= slope <= expected[1] else FAIL
    if x.size < 1000:
        verdict = INCONCLUSIVE
    return TestReport("tail_slope", slope, expected, verdict, x.size, estimate=slope, ci=ci,
                      details=details)


def survival_csv(samples, path, observed=None) -> None:
    t, s = kaplan_meier(samples, observed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "survival"])
        for a, b in zip(t, s):
            w.writerow([repr(float(a)), repr(float(b))])


GROWING, FLATTENING = "growing", "flattening"


def moment_growth(samples, beta: float, grid_points: int = 24, tail: float = 0.5,
                  growth_threshold: float = 0.05, expect: Optional[str] = None) -> TestReport:
    """Running mean of ``X**beta`` against sample size on a log grid.

    For each grid size ``n`` the curve value is the average of
    ``log(mean of X**beta)`` over the disjoint length-``n`` blocks of the
    sample, which keeps the replicate order and reduces noise.  The statistic
    is the log-log slope over the last ``tail`` fraction of the grid; above
    ``growth_threshold`` the curve is labelled growing, otherwise flattening.
    A diagnostic, not a test: the verdict only compares the label with
    ``expect`` when one is given.
    """
    if not beta > 0:
        raise InvalidParameterError("beta must be positive")
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 10:
        raise InvalidParameterError("need at least 10 samples")
    grid = np.unique(np.geomspace(10, n, grid_points).astype(int))
    xb = x ** beta
    curve = np.array([np.log(xb[:(n // k) * k].reshape(-1, k).mean(axis=1)).mean() for k in grid])
    start = int(len(grid) * (1 - tail))
    slope = float(np.polyfit(np.log(grid[start:]), curve[start:], 1)[0])
    label = GROWING if slope > growth_threshold else FLATTENING
    verdict = PASS if expect is None or label == expect else FAIL
    return TestReport("moment_growth", slope, growth_threshold, verdict, n, estimate=slope,
                      details={"beta": beta, "n_grid": grid.tolist(),
                               "log_running_mean": curve.tolist(), "label": label})
