"""The ten acceptance criteria, each printed as one PASS/FAIL line.

Thresholds and runtimes are the stated ones; a failing criterion fails its test.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np

from multigroup.core import BoundedLoss, Dataset, GroupFamily, HypothesisClass, conditional_loss
from multigroup.dp import LaplaceSampler, audit_prefix_events, query_sensitivity_oracle
from multigroup.experiments import audit_setup, pooled_se, preset, run_scenario
from multigroup.learners import (Problem, fractional_group_prepend, fractional_prepend,
                                 fractional_shaky_prepend, group_prepend, prepend, shaky_prepend)
from multigroup.theory import dp_envelope, lemma_update_bound, recipe_shaky

from conftest import random_instance

LOSS = BoundedLoss("squared")
RESULTS = []


def report(number, name, ok, detail, elapsed=None, limit=None):
    timing_ok = limit is None or elapsed < limit
    passed = bool(ok) and timing_ok
    t = "" if elapsed is None else f" [{elapsed:.1f}s" + ("" if limit is None else f" < {limit}s") + "]"
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {name}: {detail}{t}"
    RESULTS.append(line)
    print(line)
    assert passed, line


def max_statistic(data, family, hclass, chain, weighted, eta=None):
    """Largest acceptance statistic over non-empty (g, h), recomputed from the chain."""
    best = -math.inf
    n = data.n
    for g in family:
        m = g.mask(data)
        if not m.any():
            continue
        lf = conditional_loss(data, chain, LOSS, m)
        for h in hclass:
            other = h if eta is None else chain.append(eta, g, h)
            v = lf - conditional_loss(data, other, LOSS, m)
            best = max(best, v * m.sum() / n if weighted else v)
    return best


def test_c01_stopping_certificate():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_margin = math.inf
    for _ in range(50):
        d, fam, hc = random_instance(rng, 50, 8, 8)
        lam = float(rng.choice([0.002, 0.01, 0.05]))
        runs = [
            (prepend(d, fam, hc, LOSS, lam)[0], False, None),
            (group_prepend(d, fam, hc, LOSS, lam)[0], True, None),
            (shaky_prepend(d, fam, hc, LOSS, lam, 0.0)[0], True, None),
            (fractional_prepend(d, fam, hc, LOSS, lam, 0.5)[0], False, 0.5),
            (fractional_group_prepend(d, fam, hc, LOSS, lam, 0.5)[0], True, 0.5),
        ]
        for chain, weighted, eta in runs:
            worst_margin = min(worst_margin, lam - max_statistic(d, fam, hc, chain, weighted, eta))
    report(1, "stopping certificate", worst_margin > 0,
           f"min (lambda - final statistic) = {worst_margin:.3g} over 50 instances x 5 learners",
           time.perf_counter() - t0, 10)


def test_c02_update_counts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    gp_ok = True
    for _ in range(50):
        d, fam, hc = random_instance(rng, 50, 8, 8)
        for lam in (0.002, 0.01, 0.05, 0.2):
            gp_ok &= group_prepend(d, fam, hc, LOSS, lam)[1].num_updates <= math.ceil(1 / lam)
    # n = 500 two-group instance with recipe parameters
    x = np.random.default_rng(3).random(500)
    y = np.where(x < 0.5, 0.2, 0.8) + 0.1 * np.random.default_rng(4).standard_normal(500)
    d = Dataset(x, y)
    fam = GroupFamily.from_intervals([(0.0, 1.0), (0.0, 0.5), (0.5, 1.0)])
    hc = HypothesisClass.constant_grid(0.0, 1.0, 0.1)
    P = Problem(d, fam, hc, LOSS)
    p = recipe_shaky(d.n, len(fam), len(hc), 0.05)
    over, cap_ok, small = 0, True, 0
    for seed in range(100):
        _, tr = shaky_prepend(d, fam, hc, LOSS, p.lam, p.sigma, seed, problem=P)
        B = tr.num_updates
        over += B > 2 * tr.alpha / p.lam
        if np.all(np.abs(tr.all_noise()) < p.lam / 4):
            small += 1
            cap_ok &= B <= math.ceil(2 * tr.alpha / p.lam)
    rate_bound = lemma_update_bound(P.alpha, p.lam, p.sigma) + 0.05
    ok = gp_ok and cap_ok and over / 100 <= rate_bound
    report(2, "update-count bounds", ok,
           f"group_prepend within ceil(1/lambda): {gp_ok}; cap held on {small} small-noise seeds: "
           f"{cap_ok}; Pr[B > 2a/lambda] = {over / 100:.2f} <= {rate_bound:.3g} (lambda={p.lam:.3g})",
           time.perf_counter() - t0, 120)


def test_c03_sensitivity_oracle():
    t0 = time.perf_counter()
    universe = [(x, y) for x in (0.0, 1.0) for y in (0.0, 0.5, 1.0)]
    groups = GroupFamily.from_intervals([(0.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    classes = [HypothesisClass.constants(v) for v in ((0.0, 1.0), (0.0, 0.5), (0.5, 1.0))]
    worst = 0
    count = 0
    # The query depends on the sample only as a multiset, so multisets cover every instance.
    for recs in itertools.combinations_with_replacement(universe, 6):
        d = Dataset([r[0] for r in recs], [r[1] for r in recs])
        for hc in classes:
            for g in groups:
                for f, h in itertools.permutations(hc, 2):
                    worst = max(worst, query_sensitivity_oracle(d, f, h, LOSS, g, universe))
                    count += 1
    report(3, "sensitivity oracle", worst <= Fraction(4, 6),
           f"max change {worst} (= {float(worst):.4f}) <= 4/6 over {count} (instance, g, f, h) cases",
           time.perf_counter() - t0, 30)


def test_c04_laplace():
    t0 = time.perf_counter()
    x = LaplaceSampler(2024, 1.0).sample(size=10**6)
    tails = {t: float(np.mean(np.abs(x) >= t)) for t in (0.5, 1.0, 2.0)}
    tail_ok = all(abs(v - math.exp(-t)) <= 0.005 for t, v in tails.items())
    s = LaplaceSampler(2025, 1.0)
    draws = np.abs(s.sample(size=20 * 10**5)).reshape(10**5, 20).max(axis=1)
    maxes = {b: float(np.mean(draws >= math.log(20 / b))) for b in (0.1, 0.3)}
    max_ok = all(v <= b + 0.01 for b, v in maxes.items())
    report(4, "Laplace correctness", tail_ok and max_ok,
           "tails " + ", ".join(f"t={t}: {v:.4f} vs {math.exp(-t):.4f}" for t, v in tails.items())
           + "; max-of-20 " + ", ".join(f"beta={b}: {v:.4f}" for b, v in maxes.items()),
           time.perf_counter() - t0, 30)


def _trace_key(tr):
    return [(it.pair, it.statistic, it.threshold_noise, it.crossing_noise, it.queries,
             it.loss_before, it.loss_after,
             None if it.query_noise is None else it.query_noise.tobytes()) for it in tr.iterations]


def test_c05_eta_one_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for seed in range(20):
        d, fam, hc = random_instance(rng, 50, 8, 8)
        xs = np.linspace(-0.1, 1.1, 97)
        pairs = [
            (prepend(d, fam, hc, LOSS, 0.01), fractional_prepend(d, fam, hc, LOSS, 0.01, 1.0)),
            (group_prepend(d, fam, hc, LOSS, 0.002),
             fractional_group_prepend(d, fam, hc, LOSS, 0.002, 1.0)),
            (shaky_prepend(d, fam, hc, LOSS, 0.02, 0.002, seed),
             fractional_shaky_prepend(d, fam, hc, LOSS, 0.02, 1.0, sigma=0.002, seed=seed)),
        ]
        for (ca, ta), (cb, tb) in pairs:
            same = (ca.pairs() == cb.pairs() and _trace_key(ta) == _trace_key(tb)
                    and np.array_equal(ca.predict(xs), cb.predict(xs)))
            mismatches += not same
    report(5, "eta=1 equivalence", mismatches == 0,
           f"{mismatches} mismatches over 20 seeds x 3 learner pairs (bit-exact chains, traces, predictions)",
           time.perf_counter() - t0)


def test_c06_recipe_identities():
    ns = np.unique(np.logspace(1, 8, 10).astype(int))
    grid = list(itertools.product(ns, (1, 3, 10, 50, 200), (1, 5, 20, 100), (1e-4, 0.01, 0.05, 0.2, 0.5)))
    assert len(grid) == 1000
    bad = 0
    for n, G, H, beta in grid:
        p = recipe_shaky(int(n), G, H, beta)
        bad += not (p.epsilon >= 1 / n and p.lam * p.epsilon >= 1 / n)
    report(6, "recipe identities", bad == 0, f"{bad} violations of eps >= 1/n, lambda*eps >= 1/n on 1000 points")


def test_c07_unbalanced_ordering():
    t0 = time.perf_counter()
    res = run_scenario(preset("unbalanced", runs=20, n_train=120))
    a = {m: res.aggregates[(m, "total_loss")] for m in res.config.methods}
    wg = {m: a[m]["worst_group_loss"] for m in a}
    se = pooled_se(a["group_prepend"], a["shaky_prepend"], "worst_group_loss")
    ok = (wg["group_prepend"] <= wg["prepend"]
          and wg["group_prepend"] <= wg["shaky_prepend"] + se
          and min(wg, key=wg.get) != "prepend")
    report(7, "unbalanced ordering", ok,
           "worst-group " + ", ".join(f"{m}={v:.4f}+-{a[m]['worst_group_loss_se']:.4f}" for m, v in wg.items()),
           time.perf_counter() - t0, 300)


def test_c08_fractional_ablation():
    t0 = time.perf_counter()
    res = run_scenario(preset("fractional_ablation", runs=20))
    fr = res.aggregates[("fractional_shaky_prepend", "total_loss")]
    base = res.aggregates[("shaky_prepend", "total_loss")]
    se = pooled_se(fr, base, "total_loss")
    ok = (fr["total_loss"] <= base["total_loss"] + se
          and fr["worst_group_loss"] <= base["worst_group_loss"])
    report(8, "fractional ablation", ok,
           f"total {fr['total_loss']:.5f} vs {base['total_loss']:.5f} (+se {se:.5f}); worst-group "
           f"{fr['worst_group_loss']:.5f} vs {base['worst_group_loss']:.5f}",
           time.perf_counter() - t0, 300)


def test_c09_rate_decay():
    t0 = time.perf_counter()
    ns = (200, 800, 3200)
    means = []
    for n in ns:
        cfg = preset("spatial", n_train=n, n_val=n, runs=20, methods=("shaky_prepend",), recipe_beta=0.05)
        rows = run_scenario(cfg).rows
        means.append(float(np.mean([r["worst_group_excess"] for r in rows])))
    slope = float(np.polyfit(np.log(ns), np.log(means), 1)[0])
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    lam = [recipe_shaky(n, 420, 11, 0.05).lam for n in ns]
    report(9, "rate decay", decreasing and slope <= -0.2,
           "mean worst-group excess " + ", ".join(f"n={n}: {m:.5f}" for n, m in zip(ns, means))
           + f"; slope {slope:.3f}; recipe lambda " + ", ".join(f"{v:.3g}" for v in lam),
           time.perf_counter() - t0, 600)


def test_c10_dp_audit():
    t0 = time.perf_counter()
    same = audit_setup(8, 0.05, seed=0, identical=True)
    contains = all(r.ln_ratio_ci[0] <= 0.0 <= r.ln_ratio_ci[1]
                   for r in audit_prefix_events(same.runner, same.pair, 50_000, seed=1))
    s = audit_setup(8, 0.05, seed=0)
    env = dp_envelope(s.params.epsilon, s.alpha, s.lam)
    results = audit_prefix_events(s.runner, s.pair, 100_000, seed=2)
    within = [r.ln_ratio - r.slack <= env for r in results]
    frac = float(np.mean(within))
    report(10, "DP audit sanity", contains and frac >= 0.95,
           f"identical-data intervals contain 0: {contains}; {sum(within)}/{len(results)} prefix events "
           f"within envelope {env:.3g} (lambda={s.lam:.3g}, sigma={s.params.sigma:.3g})",
           time.perf_counter() - t0, 300)
