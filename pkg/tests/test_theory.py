import math
from decimal import Decimal as D, localcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st

from multigroup.core import IterationRecord, RunTrace
from multigroup.learners import group_prepend, shaky_prepend
from multigroup.theory import (bound_width, certify_trace, dp_envelope, lemma_update_bound,
                               recipe_group_prepend, recipe_shaky, update_cap)

from conftest import random_instance
from multigroup.core import BoundedLoss


def shaky_oracle(n, G, H, beta):
    """50-digit decimal evaluation of the printed recipe."""
    with localcontext() as ctx:
        ctx.prec = 50
        n, beta = D(n), D(str(beta))
        delta = beta / (2 * n * G * H)
        L = (1 / delta).ln()
        core = (4 * G * H / beta).ln() * L.sqrt()
        eps = (D("-0.6") * n.ln()).exp() * (D("0.6") * core.ln()).exp()
        lam = (16 * D(32).sqrt() * (D("-0.4") * n.ln()).exp() * (D("0.4") * core.ln()).exp()
               * (D("0.4") * n.ln().ln()).exp())
        sigma = 4 * (32 * L).sqrt() / (n * eps)
        return delta, eps, lam, sigma


class TestBoundWidth:
    def test_frozen_example(self):
        # 9 sqrt((2 ln 100 + ln 160) / 100), evaluated to 50 digits
        bw = bound_width(1000, 100, 10, 10, 0.05)
        assert bw.width == pytest.approx(3.4016564335100198, rel=1e-14)
        assert bw.vacuous

    def test_quadruple_halves(self):
        a = bound_width(10_000, 100, 5, 7, 0.1).width
        b = bound_width(10_000, 400, 5, 7, 0.1).width
        assert b == pytest.approx(a / 2, rel=1e-14)

    def test_domain(self):
        for args in [(10, 0, 2, 2, 0.1), (10, 11, 2, 2, 0.1), (10, 5, 2, 2, 1.0), (10, 5, 2, 2, 8.0)]:
            with pytest.raises(ValueError):
                bound_width(*args)

    def test_nonvacuous_for_large_groups(self):
        assert not bound_width(10**6, 10**5, 10, 10, 0.05).vacuous


class TestRecipeShaky:
    def test_frozen_reference(self):
        p = recipe_shaky(1000, 10, 10, 0.05)
        assert p.delta == pytest.approx(2.5e-7, rel=1e-14)
        assert p.epsilon == pytest.approx(0.13388844519094041, rel=1e-12)
        assert p.lam == pytest.approx(51.316671727510703, rel=1e-12)
        assert p.sigma == pytest.approx(0.65893027165860806, rel=1e-12)
        assert p.envelope == pytest.approx(1.9442256066120536, rel=1e-12)

    def test_simple_lambda(self):
        p = recipe_shaky(1000, 10, 10, 0.05, simple_lambda=True)
        assert p.lam == pytest.approx(23.687744169952693, rel=1e-12)

    @given(st.integers(2, 10**7), st.integers(1, 200), st.integers(1, 200), st.floats(1e-6, 0.99))
    def test_matches_oracle(self, n, G, H, beta):
        p = recipe_shaky(n, G, H, beta)
        delta, eps, lam, sigma = shaky_oracle(n, G, H, beta)
        assert p.delta == pytest.approx(float(delta), rel=1e-12)
        assert p.epsilon == pytest.approx(float(eps), rel=1e-10)
        assert p.lam == pytest.approx(float(lam), rel=1e-10)
        assert p.sigma == pytest.approx(float(sigma), rel=1e-10)

    @given(st.integers(2, 10**7), st.integers(1, 200), st.integers(1, 200), st.floats(1e-6, 0.99))
    def test_sanity_inequalities(self, n, G, H, beta):
        p = recipe_shaky(n, G, H, beta)
        assert p.epsilon >= 1 / n and p.lam * p.epsilon >= 1 / n

    def test_decreasing_in_n(self):
        ns = np.unique(np.logspace(2, 6, 41).astype(int))
        ps = [recipe_shaky(int(n), 10, 10, 0.05) for n in ns]
        eps = np.array([p.epsilon for p in ps])
        lam = np.array([p.lam for p in ps])
        assert np.all(np.diff(eps) < 0) and np.all(np.diff(lam) < 0)

    def test_domain(self):
        for args in [(1, 2, 2, 0.1), (10, 0, 2, 0.1), (10, 2, 2, 0.0), (10, 2, 2, 1.0)]:
            with pytest.raises(ValueError):
                recipe_shaky(*args)


class TestRecipeGroupPrepend:
    def test_reference(self):
        lam, env = recipe_group_prepend(1000, 10, 10, 0.05)
        assert lam == pytest.approx(0.21312297189966736, rel=1e-14)
        assert env == lam

    def test_cube_root_scaling(self):
        a, _ = recipe_group_prepend(500, 3, 4, 0.1)
        b, _ = recipe_group_prepend(4000, 3, 4, 0.1)
        assert b / a == pytest.approx(0.5, rel=1e-14)

    @given(st.integers(2, 10**8), st.integers(1, 100), st.integers(1, 100), st.floats(1e-9, 0.99))
    def test_positive(self, n, G, H, delta):
        assert recipe_group_prepend(n, G, H, delta)[0] > 0


def record(i, pair, xi=0.0, mu=(), crossing=0.0, gaps=None):
    return IterationRecord(i, pair, 0.0, xi, crossing, np.asarray(mu, dtype=float), len(mu),
                           group_gaps=None if gaps is None else np.asarray(gaps))


class TestCertificate:
    def test_noise_free_trace(self):
        d, fam, hc = random_instance(np.random.default_rng(0))
        _, trace = shaky_prepend(d, fam, hc, BoundedLoss(), 0.02, 0.0)
        rep = certify_trace(trace)
        assert rep.ok and rep.noise_small and rep.deterministic_cap_ok
        assert rep.num_updates <= math.ceil(1 / 0.02)

    def test_group_prepend_trace(self):
        d, fam, hc = random_instance(np.random.default_rng(1))
        assert certify_trace(group_prepend(d, fam, hc, BoundedLoss(), 0.01)[1]).ok

    def test_noisy_runs_keep_slack(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            d, fam, hc = random_instance(rng)
            _, trace = shaky_prepend(d, fam, hc, BoundedLoss(), 0.05, 0.002, seed=seed)
            rep = certify_trace(trace)
            assert rep.slack_ok
            assert rep.ok

    def test_injected_cap_violation(self):
        trace = RunTrace("shaky_prepend", lam=0.1, sigma=0.001, alpha=0.1, completed=True)
        trace.iterations = [record(i, (0, 0), 0.001, [0.001], 0.001) for i in range(3)]
        trace.iterations.append(record(3, None, 0.001, [0.001, -0.001], gaps=[0.0]))
        rep = certify_trace(trace)
        assert rep.update_cap == 2 and not rep.cap_ok
        assert not rep.ok and any("exceeds cap" in v for v in rep.violations)

    def test_injected_slack_violation(self):
        trace = RunTrace("shaky_prepend", lam=0.1, sigma=0.001, alpha=0.1, completed=True)
        trace.iterations = [record(0, None, 0.0, [0.0], gaps=[0.5])]
        rep = certify_trace(trace)
        assert not rep.slack_ok and "VIOLATION" in rep.lines()[-1]

    def test_incomplete(self):
        with pytest.raises(ValueError, match="incomplete"):
            certify_trace(RunTrace("shaky_prepend", lam=0.1))


def test_update_cap_and_envelopes():
    assert update_cap(0.3, 0.1) == 6
    assert lemma_update_bound(0.5, 0.2, 0.0) == 0.0
    assert lemma_update_bound(0.5, 0.2, 0.05) == pytest.approx(math.exp(-1) * 10)
    assert dp_envelope(0.5, 0.2, 0.1) == pytest.approx(1.0)
