"""Closed-form bounds, hyperparameter recipes and post-run certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RunTrace

SQRT32 = math.sqrt(32.0)


@dataclass(frozen=True)
class BoundWidth:
    width: float
    vacuous: bool


def bound_width(n: int, group_count: int, num_groups: int, num_hyps: int, delta: float) -> BoundWidth:
    """Finite-class uniform-convergence half-width for a group with ``group_count`` members.

    ``9 * sqrt((2 ln(|G||H|) + ln(8/delta)) / (n P_n(g)))``, unclamped; the
    width is flagged vacuous when it exceeds 1.
    """
    if group_count < 1:
        raise ValueError("group count must be at least 1")
    if n < group_count or num_groups < 1 or num_hyps < 1:
        raise ValueError("counts must be >= 1 and group count <= n")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    w = 9 * math.sqrt((2 * math.log(num_groups * num_hyps) + math.log(8 / delta)) / group_count)
    return BoundWidth(w, w > 1)


@dataclass(frozen=True)
class TheoryParams:
    epsilon: float
    delta: float
    lam: float
    sigma: float
    provenance: str
    envelope: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epsilon", "delta", "lam", "sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")


def _check(n, num_groups, num_hyps, beta):
    if n < 2:
        raise ValueError("n must be at least 2")
    if num_groups < 1 or num_hyps < 1:
        raise ValueError("class sizes must be at least 1")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")


def recipe_shaky(n: int, num_groups: int, num_hyps: int, beta: float,
                 simple_lambda: bool = False) -> TheoryParams:
    """Noise, threshold and privacy settings that give the n^(-2/5) rate.

    ``delta = beta / (2 n |G||H|)`` and
    ``epsilon = n^(-3/5) (ln(4|G||H|/beta) sqrt(ln(1/delta)))^(3/5)``.
    The threshold is the expanded form
    ``16 sqrt(32) n^(-2/5) (ln(4|G||H|/beta) sqrt(ln(1/delta)))^(2/5) (ln n)^(2/5)``;
    ``simple_lambda`` switches to ``16 sqrt(32) epsilon^(2/3)``. The noise scale
    is ``4 sqrt(32 ln(1/delta)) / (n epsilon)``, i.e. the sparse-vector scale at
    sensitivity 4/n.
    """
    _check(n, num_groups, num_hyps, beta)
    gh = num_groups * num_hyps
    delta = beta / (2 * n * gh)
    log_inv_delta = math.log(2 * n * gh / beta)
    core = math.log(4 * gh / beta) * math.sqrt(log_inv_delta)
    eps = n ** (-0.6) * core ** 0.6
    if simple_lambda:
        lam = 16 * SQRT32 * eps ** (2 / 3)
    else:
        lam = 16 * SQRT32 * n ** (-0.4) * core ** 0.4 * math.log(n) ** 0.4
    sigma = 4 * math.sqrt(32 * log_inv_delta) / (n * eps)
    envelope = (n ** (-0.4) * math.log(n) * math.log(24 * gh / beta) ** 0.4
                * log_inv_delta ** 0.2)
    return TheoryParams(eps, delta, lam, sigma,
                        "recipe_shaky(simple)" if simple_lambda else "recipe_shaky",
                        envelope, {"n": n, "groups": num_groups, "hyps": num_hyps, "beta": beta})


def recipe_group_prepend(n: int, num_groups: int, num_hyps: int, delta: float) -> tuple:
    """``lambda = n^(-1/3) ln(8|G||H|/delta)^(1/3)`` and its envelope.

    The envelope is the multiplier of ``1/sqrt(P_n(g))`` in the excess-risk
    rate, reported without the hidden constant.
    """
    if n < 2 or num_groups < 1 or num_hyps < 1:
        raise ValueError("need n >= 2 and non-empty classes")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    lam = n ** (-1 / 3) * math.log(8 * num_groups * num_hyps / delta) ** (1 / 3)
    return lam, lam


def update_cap(alpha: float, lam: float) -> int:
    return math.ceil(2 * alpha / lam)


@dataclass
class CertificateReport:
    num_updates: int
    lam: float
    alpha: float
    noise_max: float
    noise_small: bool
    lemma_noise_small: bool
    update_cap: int
    cap_ok: bool
    deterministic_cap: int
    deterministic_cap_ok: bool
    final_a: float
    final_xi: float
    stopping_slack: float
    slack_bound: float
    slack_ok: bool

    @property
    def violations(self) -> list:
        out = []
        if self.noise_small and not self.cap_ok:
            out.append(f"update count {self.num_updates} exceeds cap {self.update_cap} "
                       "although every noise draw was below lambda/4")
        if not self.slack_ok:
            out.append(f"stopping slack {self.stopping_slack:.6g} exceeds {self.slack_bound:.6g}")
        if self.noise_max == 0 and not self.deterministic_cap_ok:
            out.append(f"noise-free run made {self.num_updates} > ceil(1/lambda) updates")
        return out

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list:
        return [
            f"num_updates       {self.num_updates}",
            f"alpha             {self.alpha:.6g}",
            f"lambda            {self.lam:.6g}",
            f"max |noise|       {self.noise_max:.6g}  (< lambda/4: {self.noise_small})",
            f"update cap        {self.update_cap}  (held: {self.cap_ok})",
            f"final a           {self.final_a:.6g}",
            f"final xi          {self.final_xi:.6g}",
            f"stopping slack    {self.stopping_slack:.6g} <= {self.slack_bound:.6g}: {self.slack_ok}",
            f"status            {'ok' if self.ok else 'VIOLATION: ' + '; '.join(self.violations)}",
        ]


def certify_trace(trace: RunTrace, tol: float = 0.0) -> CertificateReport:
    """Check a completed trace against the update-count and stopping-slack facts.

    (i) if every realized noise is below lambda/4 the run must stop within
    ceil(2 alpha / lambda) updates; (ii) from the final sweep, ``a`` is the
    largest negated query noise and ``xi`` the threshold noise in force; (iii)
    the largest mass-weighted gap ``P_n(g)(L_n(f|g) - min_h L_n(h|g))`` must not
    exceed ``lambda + a + xi``, which the final unsuccessful sweep forces.
    """
    if not trace.completed or not trace.iterations or trace.final.pair is not None:
        raise ValueError("trace is incomplete")
    lam = trace.lam
    B = trace.num_updates
    noise = np.abs(trace.all_noise())
    noise_max = float(noise.max()) if noise.size else 0.0
    lemma = [abs(it.threshold_noise) for it in trace.iterations]
    lemma += [abs(it.crossing_noise) for it in trace.iterations if it.pair is not None]
    cap = update_cap(trace.alpha, lam)
    fin = trace.final
    mu = fin.query_noise
    a = float(np.max(-mu)) if mu is not None and mu.size else 0.0
    xi = float(fin.threshold_noise)
    gaps = fin.group_gaps
    slack = float(np.nanmax(gaps)) if gaps is not None and np.any(~np.isnan(gaps)) else 0.0
    bound = lam + a + xi
    return CertificateReport(
        num_updates=B, lam=lam, alpha=trace.alpha,
        noise_max=noise_max, noise_small=noise_max < lam / 4,
        lemma_noise_small=max(lemma) < lam / 4,
        update_cap=cap, cap_ok=B <= cap,
        deterministic_cap=math.ceil(1 / lam), deterministic_cap_ok=B <= math.ceil(1 / lam),
        final_a=a, final_xi=xi,
        stopping_slack=slack, slack_bound=bound, slack_ok=slack <= bound + tol,
    )


def lemma_update_bound(alpha: float, lam: float, sigma: float) -> float:
    """Upper bound on ``Pr[B > 2 alpha / lambda]``: ``exp(-lambda/(4 sigma)) * 4 alpha / lambda``."""
    if sigma == 0:
        return 0.0
    return math.exp(-lam / (4 * sigma)) * 4 * alpha / lam


def dp_envelope(epsilon: float, alpha: float, lam: float) -> float:
    """Privacy level ``epsilon * sqrt(2 alpha / lambda)`` of a shaky prepend run."""
    return epsilon * math.sqrt(2 * alpha / lam)
