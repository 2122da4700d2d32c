import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bmshift import allocation as al
from bmshift import points as pm
from bmshift.errors import InvalidParameterError
from bmshift.measures import (CumulativeMeasure, TargetMeasure, additive_functional,
                              local_time_zero)
from bmshift.paths import GridPath, simulate_two_sided
from bmshift.shifts import bertoin_lejan_shift

DT = 0.01


def _ramp_measures():
    t = np.arange(301) * DT
    xi = CumulativeMeasure.from_cumulative(np.minimum(2 * t, 2.0), DT)
    eta = CumulativeMeasure.from_cumulative(np.clip(2 * (t - 1), 0.0, 2.0), DT)
    return xi, eta


def test_balance_ramp_crossing():
    # closed-form crossing at t = 2; cell masses put the balancing cell one step earlier
    xi, eta = _ramp_measures()
    r = al.balance_forward(xi, eta, 0)
    assert r.matched
    assert r.time == pytest.approx(2.0 - DT)


def test_balance_empty_target_is_censored_at_edge():
    t = np.arange(101) * DT
    xi = CumulativeMeasure.from_cumulative(t, DT)
    eta = CumulativeMeasure(DT, np.zeros(101), 0)
    r = al.balance_forward(xi, eta, 0)
    assert not r.matched and r.horizon == pytest.approx(1.0)


def test_identical_measures_match_at_next_grid_point():
    m = CumulativeMeasure(1.0, np.array([0.0, 0.0, 0.5, 0.5, 0.0, 0.5]), 0)
    assert al.balance_forward(m, m, 0).step == 2   # first point with common mass, after 0
    assert al.balance_forward(m, m, 2).step == 3
    assert al.balance_forward(m, m, 3).step == 4
    assert not al.balance_forward(m, m, 5).matched


def test_mismatched_grids_rejected():
    a = CumulativeMeasure(1.0, np.ones(5), 0)
    b = CumulativeMeasure(1.0, np.ones(6), 0)
    with pytest.raises(InvalidParameterError):
        al.balance_forward(a, b, 0)


def test_tolerance_absorbs_small_residuals():
    xi = CumulativeMeasure(1.0, np.array([1.0, 0.0, 0.0, 0.0]), 0)
    eta = CumulativeMeasure(1.0, np.array([0.0, 0.5, 0.499, 0.0]), 0)
    assert not al.balance_forward(xi, eta, 0).matched
    assert al.balance_forward(xi, eta, 0, tol=0.01).step == 2


def test_backward_mirror():
    xi = CumulativeMeasure.from_points([0, 1], 0, 4)
    eta = CumulativeMeasure.from_points([2, 3], 0, 4)
    assert al.balance_backward(xi, eta, 2).step == 1
    assert al.balance_backward(xi, eta, 3).step == 0
    assert not al.balance_backward(eta, xi, 1).matched


def test_inverse_local_time_examples():
    t = np.arange(11) * 0.1
    ell = CumulativeMeasure.from_cumulative(t, 0.1)
    assert al.inverse_local_time(ell, 0.7).time == pytest.approx(0.7)
    t = np.arange(31) * 0.1
    plateau = np.where(t <= 1, t, np.where(t <= 2, 1.0, t - 1))
    ell = CumulativeMeasure.from_cumulative(plateau, 0.1)
    assert al.inverse_local_time(ell, 1.0).time == pytest.approx(2.0)
    flat = np.where(t <= 0.5, 0.0, t - 0.5)
    ell = CumulativeMeasure.from_cumulative(flat, 0.1)
    assert al.inverse_local_time(ell, 0.0).time == pytest.approx(0.5)


def test_inverse_local_time_backward_and_censoring():
    ell = CumulativeMeasure(1.0, np.ones(11), neg_steps=5)    # steps -5..5
    assert al.inverse_local_time(ell, -2.0).step == -2
    assert al.inverse_local_time(ell, 2.0).step == 2
    assert not al.inverse_local_time(ell, 7.0).matched
    assert not al.inverse_local_time(ell, -7.0).matched
    assert al.inverse_local_time(ell, 1.0, s=2).step == 3


def test_compose_rules():
    cfg = pm.PointConfig.make([0, 1, 5], [2, 3])
    fwd, bwd = pm.forward_rule(cfg), pm.backward_rule(cfg)
    ident = al.identity_rule()
    for s in cfg.xi_points:
        assert al.compose(ident, fwd)(s) == fwd(s)
    back_again = al.compose(fwd, bwd)
    assert back_again(0).step == 0 and back_again(1).step == 1
    assert not back_again(5).matched


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.0, 0.5, 1.0, 1.5]), min_size=2, max_size=60),
       st.lists(st.sampled_from([0.0, 0.0, 0.5, 1.0]), min_size=60, max_size=60))
def test_stack_route_agrees_with_scan(xm, em):
    n = len(xm)
    xi = CumulativeMeasure(1.0, np.array(xm), 0)
    eta = CumulativeMeasure(1.0, np.array(em[:n]), 0)
    table = al.forward_matches(xi, eta)
    for s, t in table.items():
        r = al.balance_forward(xi, eta, s)
        assert (r.step if r.matched else None) == t


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 3.0), min_size=2, max_size=50), st.data())
def test_matches_strictly_after_query_and_on_eta_support(xm, data):
    em = data.draw(st.lists(st.floats(0.0, 3.0), min_size=len(xm), max_size=len(xm)))
    xi, eta = CumulativeMeasure(1.0, np.array(xm), 0), CumulativeMeasure(1.0, np.array(em), 0)
    for s, t in al.forward_matches(xi, eta).items():
        if t is not None:
            assert t > s


def test_engine_reproduces_point_matching():
    for seed in range(200):
        cfg = pm.random_config(seed, seed % 9, (seed * 7) % 11, 30)
        xi, eta = pm.embed(cfg)
        exact = pm.matching(cfg)
        table = al.forward_matches(xi, eta)
        for s in cfg.xi_points:
            assert table[s] == exact[s]


def test_imbalance_invariants():
    xi = CumulativeMeasure.from_points([-3, 0, 2], -4, 6)
    eta = CumulativeMeasure.from_points([-1, 4, 5], -4, 6)
    f = al.ImbalanceFunction.from_measures(xi, eta)
    assert f.at(0) == 0
    for s in range(-4, 7):
        for t in range(s, 7):
            assert abs(f.at(t) - f.at(s)) <= xi.closed(s, t) + eta.closed(s, t)


def test_decompose_nondecreasing():
    f = al.ImbalanceFunction(np.arange(6), np.array([0, 0, 1, 2, 2, 3.0]))
    d = al.decompose(f, 5)
    assert np.array_equal(d.running_min, f.values)
    assert d.in_c.all() and d.excursions == []


def test_decompose_single_bump():
    a = 20
    f = al.ImbalanceFunction(np.arange(a + 1), np.sin(np.pi * np.arange(a + 1) / a).round(12))
    d = al.decompose(f, a)
    assert d.c_steps.tolist() == [0, a]
    assert d.excursions == [(1, a - 1)]


def test_decompose_hand_shape():
    values = np.array([0, 2, 1, 3, 0, -1, 1, 0.5, 2, 1.5])
    d = al.decompose(al.ImbalanceFunction(np.arange(10), values), 9)
    assert d.running_min.tolist() == [-1, -1, -1, -1, -1, -1, 0.5, 0.5, 1.5, 1.5]
    assert d.c_steps.tolist() == [5, 7, 9]
    assert d.excursions == [(0, 4), (6, 6), (8, 8)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=40))
def test_decompose_tiles_the_window(vals):
    f = al.ImbalanceFunction(np.arange(len(vals)), np.array(vals, float))
    a = len(vals) - 1
    d = al.decompose(f, a)
    covered = np.zeros(a + 1, int)
    covered[d.in_c] += 1
    for lo, hi in d.excursions:
        covered[lo:hi + 1] += 1
        assert not d.in_c[lo:hi + 1].any()
    assert (covered == 1).all()
    assert d.in_c[a]


def test_balancing_exact_on_point_oracle():
    cfg = pm.PointConfig.make([0, 1, 4, 6], [2, 3, 5, 7])
    xi, eta = pm.embed(cfg)
    rep = al.check_balancing(xi, eta, pm.forward_rule(cfg), [(0, 3), (3, 6), (6, 8)])
    assert rep.max_abs == 0 and rep.censored_mass == 0 and rep.passed


def test_balancing_exact_where_imbalance_stays_nonnegative():
    # f >= 0 on (0, a): nothing enters [0, a] from outside, mass balances exactly
    checked = 0
    for seed in range(80):
        cfg = pm.random_config(seed, 8, 8, 40)
        xi, eta = pm.embed(cfg)
        f = al.ImbalanceFunction.from_measures(xi, eta)
        cum = f.values[xi.neg_steps:]           # cum(t) covers cells 0 .. t-1
        first_neg = int(np.argmax(np.append(cum < 0, True)))
        a = min(first_neg, len(cum)) - 2       # cells 0 .. a keep f >= 0
        if a < 0:
            continue
        checked += 1
        rep = al.check_balancing(xi, eta, pm.forward_rule(cfg), [(0, a + 1)], query_range=(0, a))
        assert rep.external.sum() == 0
        assert rep.image[0] <= rep.eta[0]
    assert checked > 20


def test_balancing_identical_measures_within_one_cell_per_boundary():
    path = simulate_two_sided(DT, 5.0, 0.0, seed=1)
    m = local_time_zero(path, 0.1)
    parts = [(float(i), float(i + 1)) for i in range(4)]
    rep = al.check_balancing(m, m, al.ForwardRule(m, m), parts, query_range=(0, 400))
    assert rep.max_abs <= m.mass.max() * 2 + 1e-12


def test_balancing_brownian_unit_intervals():
    reps = []
    for r in range(20):
        path = simulate_two_sided(1e-3, 200.0, 0.0, seed=2, replicate=r)
        xi = local_time_zero(path, math.sqrt(1e-3))
        eta = additive_functional(path, TargetMeasure.dirac(1.0), math.sqrt(1e-3))
        reps.append(al.check_balancing(xi, eta, al.ForwardRule(xi, eta),
                                       [(float(i), float(i + 1)) for i in range(5)],
                                       query_range=(0, 5000)))
    agg = al.aggregate_balancing(reps)
    assert agg.max_rel < 0.05 and agg.off_support_fraction == 0


def test_off_by_one_fault_is_detected():
    path = simulate_two_sided(1e-3, 100.0, 0.0, seed=3)
    eps = math.sqrt(1e-3)
    xi, eta = local_time_zero(path, eps), additive_functional(path, TargetMeasure.dirac(1.0), eps)
    good = al.ForwardRule(xi, eta)

    def bad(s):
        r = good(s)
        return al.BalanceResult(r.status, r.step + 1, r.dt)
    parts = [(float(i), float(i + 1)) for i in range(5)]
    assert al.check_balancing(xi, eta, good, parts, query_range=(0, 5000)).passed
    assert not al.check_balancing(xi, eta, bad, parts, query_range=(0, 5000)).passed


def test_equivariance_offset_zero():
    path = simulate_two_sided(0.01, 20.0, 20.0, seed=4)
    fn = lambda p: bertoin_lejan_shift(p, TargetMeasure.dirac(1.0), 0.1, 20.0)
    assert al.check_equivariance(path, fn, [0]).passed


def test_equivariance_sawtooth_hand_computed():
    # values cycle 0, 0.5, 1, 0.5; bandwidth 0.25 separates the levels
    vals = np.tile([0.0, 0.5, 1.0, 0.5], 20)
    path = GridPath.from_values(vals, dt=0.25, neg_steps=40)
    fn = lambda p: bertoin_lejan_shift(p, TargetMeasure.dirac(1.0), 0.25, 100.0)
    assert fn(path).step == 2
    rep = al.check_equivariance(path, fn, range(-3, 4), queries=range(-3, 4))
    assert rep.passed and rep.checks == 49


def test_equivariance_detects_a_non_equivariant_functional():
    path = simulate_two_sided(0.01, 5.0, 5.0, seed=5)
    # a functional reading the window size instead of the path values
    fn = lambda p: type("R", (), {"status": al.MATCHED, "step": p.neg_steps})()
    assert not al.check_equivariance(path, fn, [-2, 3]).passed


def _crossed(cfg, mapping):
    return lambda s: al.BalanceResult(al.MATCHED, mapping[s])


def test_right_stable_lifo_and_crossed():
    cfg = pm.PointConfig.make([0, 1], [2, 3])
    xi, eta = pm.embed(cfg)
    ok = al.check_right_stable(xi, eta, pm.forward_rule(cfg))
    assert ok.violations == 0 and ok.passed
    bad = al.check_right_stable(xi, eta, _crossed(cfg, {0: 2, 1: 3}))
    assert bad.violations == 1 and bad.violating_mass == 1.0


def test_right_stable_brownian_sampled_and_exhaustive():
    path = simulate_two_sided(1e-3, 100.0, 0.0, seed=6)
    eps = math.sqrt(1e-3)
    xi, eta = local_time_zero(path, eps), additive_functional(path, TargetMeasure.dirac(1.0), eps)
    tau = al.ForwardRule(xi, eta)
    assert al.check_right_stable(xi, eta, tau, query_range=(0, 10000)).violations == 0
    rep = al.check_right_stable(xi, eta, tau, sample_pairs=5000, seed=1, query_range=(0, 10000))
    assert rep.violations == 0 and not rep.exhaustive


def test_right_stable_precondition_reported():
    xi = CumulativeMeasure.from_points([2], 0, 4)
    eta = CumulativeMeasure.from_points([1], 0, 4)
    rep = al.check_right_stable(xi, eta, lambda s: al.BalanceResult(al.MATCHED, 1))
    assert rep.precondition_failures == 1 and not rep.passed


def test_minimal_reflexive_and_swapped():
    cfg = pm.PointConfig.make([0, 1], [2, 3])
    xi, eta = pm.embed(cfg)
    tau = pm.forward_rule(cfg)
    parts = [(0, 2), (2, 4)]
    assert al.check_minimal(xi, eta, tau, tau, parts).smaller_mass == 0
    swapped = al.check_minimal(xi, eta, tau, _crossed(cfg, {0: 2, 1: 3}), parts)
    assert swapped.precondition_failures == 1


def test_minimal_flags_a_dominated_balancing_rule():
    # no balancing rule undercuts the forward rule, so use a late reference instead
    cfg = pm.PointConfig.make([0, 1], [2, 3])
    xi, eta = pm.embed(cfg)
    late_ref = _crossed(cfg, {0: 3, 1: 3})
    rep = al.check_minimal(xi, eta, late_ref, pm.forward_rule(cfg), [(0, 2), (2, 4)])
    assert rep.other_balances and rep.precondition_failures == 0 and rep.smaller_mass == 1
    assert not rep.passed


def test_minimal_brownian_reflexive():
    path = simulate_two_sided(1e-3, 50.0, 0.0, seed=7)
    eps = math.sqrt(1e-3)
    xi, eta = local_time_zero(path, eps), additive_functional(path, TargetMeasure.dirac(1.0), eps)
    tau = al.ForwardRule(xi, eta)
    rep = al.check_minimal(xi, eta, tau, tau, [(0.0, 1.0), (1.0, 2.0)], query_range=(0, 2000))
    assert rep.smaller_mass == 0 and rep.passed


def test_reports_serialise():
    cfg = pm.PointConfig.make([0], [1])
    xi, eta = pm.embed(cfg)
    for rep in (al.check_balancing(xi, eta, pm.forward_rule(cfg), [(0, 2)]),
                al.check_right_stable(xi, eta, pm.forward_rule(cfg))):
        d = rep.to_dict()
        assert {"check", "statistic", "threshold", "passed"} <= set(d)
