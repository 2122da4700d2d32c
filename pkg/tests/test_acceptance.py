"""Acceptance criteria 1-9.

Each test computes its named sub-checks, prints one line
``CRITERION k: PASS|FAIL | ...`` and asserts every sub-check as stated.
Heavy simulations shared by two criteria are cached in module fixtures.
Expect tens of minutes on one CPU.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats as sps

from bmshift import allocation as al
from bmshift import cli
from bmshift import experiments as ex
from bmshift import points as pm
from bmshift import shifts as sh
from bmshift import stats as st
from bmshift.measures import local_time_at, local_time_zero, parse_nu
from bmshift.paths import simulate_two_sided

DT = 1e-3
EPS = math.sqrt(DT)
PROBES = (-1.0, -0.5, 0.5, 1.0)
ALPHA = 0.01


def report(capsys, k, checks, info=""):
    ok = all(checks.values())
    parts = ", ".join(f"{name}={'ok' if v else 'FAIL'}" for name, v in checks.items())
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} | {parts}{' | ' + info if info else ''}")
    failed = [name for name, v in checks.items() if not v]
    assert not failed, f"criterion {k} failed sub-checks: {failed}"


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def run_cli(out, *argv):
    code = cli.main([*argv, "--out", str(out)])
    return code, json.loads((out / "summary.json").read_text()), read_jsonl(out / "records.jsonl")


def unbiasedness_parts(bt, values):
    """Stated parts of the unbiasedness criterion: KS parts and correlation bands."""
    rep = st.unbiasedness_from_values(bt, values, PROBES, alpha=ALPHA)
    parts = rep.details["parts"]
    ks_ok = all(p["verdict"] == st.PASS for p in parts["marginals"].values())
    ks_ok = ks_ok and parts["increments"]["verdict"] == st.PASS
    corr = {t: d["correlation"]["statistic"] for t, d in parts["independence"].items()}
    corr_ok = all(abs(r) < 3 / math.sqrt(len(bt)) for r in corr.values())
    chi = {t: d["chi_square"]["p_value"] for t, d in parts["independence"].items() if "chi_square" in d}
    return rep, ks_ok, corr_ok, corr, chi


# ---- 1 ----------------------------------------------------------------------

def test_criterion_1_point_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    exact_ok = stab_ok = cont_ok = True
    for _ in range(1000):
        n_xi, n_eta = (int(v) for v in rng.integers(0, 21, 2))
        cfg = pm.random_config(int(rng.integers(2**32)), n_xi, n_eta, 60)
        rep = pm.verify_exact(cfg)
        exact_ok &= rep.bijective and rep.inverse_consistent
        stab_ok &= not rep.stability_violations
        cont_ok &= pm.continuum_agrees(cfg)
    elapsed = time.perf_counter() - start
    report(capsys, 1, {"balancing_exact": exact_ok, "zero_stability_violations": stab_ok,
                       "continuum_engine_agrees": cont_ok, "runtime_under_10s": elapsed < 10},
           f"1000 configs in {elapsed:.1f}s")


# ---- 2 and 3 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def two_atom_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("c2")
    code, summary, records = run_cli(
        out, "embed", "--nu", "atoms:-1=0.5,2=0.5", "--dt", str(DT), "--n", "5000", "--seed", "2",
        "--max-horizon", "1000", "--tests", "embedding,unbiasedness",
        "--probes=" + ",".join(str(t) for t in PROBES))
    return summary, records


def test_criterion_2_embedding(capsys, two_atom_run):
    summary, records = two_atom_run
    m = ex.matched(records)
    matched_frac = len(m) / len(records)
    emb = st.embedding_test([r["B_T"] for r in m], parse_nu("atoms:-1=0.5,2=0.5"), EPS,
                            censored=len(records) - len(m))
    freqs = emb.details["frequencies"]
    within = 1 - emb.details["unassigned_fraction"]
    report(capsys, 2, {
        "matched_at_least_99pct": matched_frac >= 0.99,
        "atom_frequencies_0.5_pm_0.02": all(abs(f - 0.5) <= 0.02 for f in freqs),
        "within_2eps_at_least_95pct": within >= 0.95,
    }, f"N=5000 matched={matched_frac:.4f} censored={1 - matched_frac:.4f} "
       f"freqs={[round(f, 4) for f in freqs]} within2eps={within:.4f} "
       f"embedding_test={emb.verdict}")


def test_criterion_3_unbiasedness(capsys, two_atom_run):
    _, records = two_atom_run
    rows = [r for r in ex.matched(records) if "probes" in r]
    rep, ks_ok, corr_ok, corr, chi = unbiasedness_parts([r["B_T"] for r in rows],
                                                        [r["probes"] for r in rows])
    # negative control: the same number of shifts at the fixed time 1
    ctrl = [sh.fixed_time_shift(simulate_two_sided(DT, 2.0, 2.0, 3, i), 1.0) for i in range(5000)]
    crep = st.unbiasedness_test(ctrl, PROBES, alpha=ALPHA)
    cind = crep.details["parts"]["independence"]
    ctrl_fails = any(v["verdict"] == st.FAIL for d in cind.values() for v in d.values())
    report(capsys, 3, {"ks_parts_pass": ks_ok, "correlations_within_3_over_sqrt_n": corr_ok,
                       "fixed_time_control_fails_independence": ctrl_fails},
           f"n={len(rows)} corr={ {k: round(v, 4) for k, v in corr.items()} } "
           f"band={3 / math.sqrt(len(rows)):.4f} chi2_p={ {k: round(v, 4) for k, v in chi.items()} } "
           f"control_corr(-0.5)={cind['-0.5']['correlation']['statistic']:.3f}")


# ---- 4 and 5 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def local_time_clock_run():
    """Inverse local time at level 1: landed values, probes and l^1 up to the shift."""
    fn = sh.functional(sh.INVERSE_LOCAL_TIME, bandwidth=EPS, max_horizon=1e4, r=1.0)
    bt, probes, l1, censored = [], [], [], 0
    for i in range(10_000):
        out = fn(simulate_two_sided(DT, 16.0, 16.0, 4, i))
        if not out.matched:
            censored += 1
            continue
        if i < 5000:
            bt.append(out.B_T)
            probes.append(ex.probe_values(out, PROBES))
        v = sh._view(out.path, 0, out.step)
        l1.append(float(local_time_at(v, 1.0, EPS).mass[:-1].sum()))
    return {"bt": np.array(bt), "probes": np.array(probes), "l1": np.array(l1), "censored": censored}


def test_criterion_4_local_time_clock(capsys, local_time_clock_run):
    run = local_time_clock_run
    bt = run["bt"]
    rep, ks_ok, corr_ok, corr, chi = unbiasedness_parts(bt, run["probes"])
    report(capsys, 4, {"abs_B_T_within_eps": bool(np.all(np.abs(bt) <= EPS)),
                       "ks_parts_pass": ks_ok, "correlations_within_3_over_sqrt_n": corr_ok},
           f"matched={bt.size}/5000 max|B_T|={np.abs(bt).max():.4f} eps={EPS:.4f} "
           f"corr={ {k: round(v, 4) for k, v in corr.items()} }")


def test_criterion_5_estimator_calibration(capsys, local_time_clock_run):
    vals = np.array([local_time_zero(simulate_two_sided(DT, 1.0, 0.0, 5, i), EPS).mass[:-1].sum()
                     for i in range(10_000)])
    mean, se = vals.mean(), vals.std(ddof=1) / math.sqrt(vals.size)
    target = math.sqrt(2 / math.pi)     # integral of (2 pi s)^(-1/2) over [0, 1]
    l1 = local_time_clock_run["l1"]
    report(capsys, 5, {"mean_l0_within_3se": abs(mean - target) <= 3 * se,
                       "mean_l1_at_T1_is_1_pm_0.05": abs(l1.mean() - 1) <= 0.05},
           f"E l0[0,1]={mean:.4f} target={target:.4f} se={se:.4f} "
           f"E l1[0,T1]={l1.mean():.4f} n={l1.size} censored={local_time_clock_run['censored']}")


# ---- 6 ----------------------------------------------------------------------

def test_criterion_6_tail_exponents(capsys, tmp_path):
    code, summary, _ = run_cli(tmp_path, "tails", "--nu", "atoms:1=1", "--n", "20000", "--seed", "6",
                               "--dt", "0.01", "--max-horizon", "10000")
    reps = summary["reports"]
    slope = {r["sample"]: r for r in reps if r["name"] == "tail_slope"}
    growth = {r["details"]["beta"]: r for r in reps if r["name"] == "moment_growth"}
    l0, t = slope["L0_T"], slope["T"]
    report(capsys, 6, {
        "slope_l0_in_[-0.62,-0.38]": l0["estimate"] is not None and -0.62 <= l0["estimate"] <= -0.38,
        "slope_T_in_[-0.35,-0.15]": t["estimate"] is not None and -0.35 <= t["estimate"] <= -0.15,
        "beta_0.125_flattening": growth[0.125]["details"]["label"] == st.FLATTENING,
        "beta_0.3_growing": growth[0.3]["details"]["label"] == st.GROWING,
    }, f"censored={summary['censored_fraction']:.4f} slope_l0={l0['estimate']:.3f} ci={l0['ci']} "
       f"slope_T={t['estimate']:.3f} ci={t['ci']} growth_slope(0.125)={growth[0.125]['statistic']:.3f} "
       f"growth_slope(0.3)={growth[0.3]['statistic']:.3f}")


# ---- 7 ----------------------------------------------------------------------

def test_criterion_7_atom_constructions(capsys, tmp_path):
    nu = "atoms:0=0.5,2=0.5"
    _, _, recs = run_cli(tmp_path / "split", "embed", "--construction", "atom_splitting", "--nu", nu,
                         "--y", "1", "--dt", str(DT), "--n", "5000", "--seed", "7",
                         "--max-horizon", "1000")
    m = ex.matched(recs)
    matched_frac = len(m) / len(recs)
    emb = st.embedding_test([r["B_T"] for r in m], parse_nu(nu), EPS, censored=len(recs) - len(m))
    freqs = emb.details["frequencies"]
    within = 1 - emb.details["unassigned_fraction"]
    _, prob, _ = run_cli(tmp_path / "prob", "embed", "--construction", "atom_probability", "--p", "0.3",
                         "--dt", "0.01", "--n", "10000", "--seed", "7", "--max-horizon", "1000")
    pz = prob["p_T_zero"]
    _, none, _ = run_cli(tmp_path / "none", "embed", "--nu", "atoms:2=1", "--dt", "0.01",
                         "--n", "2000", "--seed", "7", "--max-horizon", "1000")
    z = none["zero_fraction"]
    report(capsys, 7, {
        "split_matched_at_least_99pct": matched_frac >= 0.99,
        "split_atom_frequencies_0.5_pm_0.02": all(abs(f - 0.5) <= 0.02 for f in freqs),
        "split_within_2eps_at_least_95pct": within >= 0.95,
        "p_T_zero_0.3_pm_0.03": abs(pz["estimate"] - 0.3) <= 0.03,
        "no_atom_at_0_gives_no_zero_shift": z["zeros"] == 0 and z["known"] > 0,
    }, f"split matched={matched_frac:.4f} freqs={[round(f, 4) for f in freqs]} within2eps={within:.4f}; "
       f"P(T=0)={pz['estimate']:.4f} se={pz['se']:.4f} known={pz['known']}; "
       f"delta_2 zeros={z['zeros']}/{z['known']}")


# ---- 8 ----------------------------------------------------------------------

def test_criterion_8_structural_invariants(capsys):
    # equivariance of every construction on simulated paths
    eq_cfgs = {
        sh.BERTOIN_LE_JAN: dict(nu="atoms:-1=0.5,2=0.5"),
        sh.INVERSE_LOCAL_TIME: dict(r=1.0),
        sh.ATOM_SPLITTING: dict(nu="atoms:0=0.5,2=0.5", y=1.0),
        sh.ATOM_PROBABILITY: dict(p=0.3),
        sh.NON_STOPPING: dict(x=1.0),
        sh.EXCURSION_REFLECTION: dict(level=1.0),
    }
    offsets = [-100, -10, -3, -1, 1, 3, 10, 100]
    eq_violations, eq_checks = 0, 0
    for name, kw in eq_cfgs.items():
        cfg = ex.ExperimentConfig(construction=name, dt=0.01, max_horizon=1000.0, seed=8, **kw)
        for i in range(3):
            rep = ex.equivariance(cfg, i, offsets)
            eq_checks += rep.checks
            eq_violations += len(rep.violations)
    # balancing on unit intervals, summed over 1000 replicates
    bcfg = ex.ExperimentConfig(nu="atoms:-1=0.5,2=0.5", dt=DT, max_horizon=1000.0, seed=8)
    bal = al.aggregate_balancing([ex.balancing_window(bcfg, i, 10.0) for i in range(1000)])
    # right-stability on sampled xi-weighted pairs
    stab = [ex.stability_window(bcfg, i, 10.0, sample_pairs=2000)[0] for i in range(100)]
    stab_mass = sum(s.violating_mass for s in stab)
    # excursion reflection bounds
    ecfg = ex.ExperimentConfig(construction=sh.EXCURSION_REFLECTION, dt=0.01, max_horizon=1000.0,
                               n=1000, seed=8)
    recs = ex.matched(list(ex.run_replicates(ecfg)))
    bound = all(abs(r["T"]) <= (r["stages"]["S1"] + r["stages"]["S2"]) * ecfg.dt + 1e-9 for r in recs)
    signs = {int(np.sign(r["T"])) for r in recs}
    neg = sum(r["T"] < 0 for r in recs) / len(recs)
    pos = sum(r["T"] > 0 for r in recs) / len(recs)
    report(capsys, 8, {
        "equivariance_zero_violations": eq_violations == 0,
        "balancing_discrepancy_at_most_5pct": bal.max_rel <= 0.05,
        "right_stability_violating_mass_zero": stab_mass == 0,
        "excursion_abs_T_at_most_S1_plus_S2": bound,
        "excursion_both_signs": {-1, 1} <= signs,
    }, f"equivariance checks={eq_checks} violations={eq_violations}; balancing max_rel={bal.max_rel:.4f} "
       f"off_support={bal.off_support_fraction:.4f}; stability pairs={sum(s.pairs for s in stab)} "
       f"violating_mass={stab_mass}; excursion matched={len(recs)} P(T<0)={neg:.3f} P(T>0)={pos:.3f}")


# ---- 9 ----------------------------------------------------------------------

def test_criterion_9_reproducibility(capsys, tmp_path):
    fast = ["--dt", "0.01", "--max-horizon", "200", "--base-horizon", "4"]
    commands = {
        "embed": ["embed", "--nu", "atoms:-1=0.5,2=0.5", "--n", "40", "--tests", "embedding,unbiasedness",
                  "--probes=-1,1", *fast],
        "embed_parallel": ["embed", "--construction", "non_stopping", "--n", "16", *fast],
        "verify": ["verify", "--n", "4", "--window", "5", "--offsets", "2", *fast],
        "tails": ["tails", "--n", "60", *fast],
        "match-oracle": ["match-oracle", "--n", "100"],
    }
    same = {}
    for name, argv in commands.items():
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        cli.main([*argv, "--out", str(a)])
        extra = ["--workers", "2"] if name == "embed_parallel" else []
        cli.main([*argv, *extra, "--out", str(b)])
        files = sorted(p.name for p in a.iterdir())
        same[name] = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    report(capsys, 9, {f"{k}_byte_identical": v for k, v in same.items()})
