"""Prepend-style multi-group learners and the sleeping-experts baseline.

Every learner works on a :class:`Problem`, which caches group masks,
hypothesis predictions and per-group hypothesis losses on the training sample.
The current predictor is tracked as its vector of training predictions and
mirrored by an :class:`~multigroup.core.UpdateChain` that reproduces those
values exactly at any x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (BoundedLoss, Dataset, GroupFamily, HypothesisClass, IterationRecord,
                   RunTrace, UpdateChain, step_towards)
from .dp import LaplaceSampler, SparseConfig, SparseMechanism


class MaxItersExceeded(RuntimeError):
    def __init__(self, message: str, trace: RunTrace, chain: UpdateChain):
        super().__init__(message)
        self.trace = trace
        self.chain = chain


@dataclass
class LearnerConfig:
    """Hyperparameters for :func:`fit`; each learner validates what it uses."""

    lam: float = float("nan")
    sigma: Optional[float] = None
    eta: float = 1.0
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    max_iters: Optional[int] = None
    seed: Optional[int] = None
    learning_rate: float = 1.0
    num_samples: int = 64

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def resolve_sigma(self, n: int) -> float:
        """Explicit sigma, else ``4 sqrt(32 ln(1/delta)) / (n epsilon)``."""
        if self.sigma is not None:
            return float(self.sigma)
        if self.epsilon is None or self.delta is None:
            return 0.0
        return fractional_shaky_sigma(n, self.epsilon, self.delta)


def fractional_shaky_sigma(n: int, epsilon: float, delta: float) -> float:
    return 4 * math.sqrt(32 * math.log(1 / delta)) / (n * epsilon)


class Problem:
    """Cached training-sample quantities shared by all learners."""

    def __init__(self, data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss):
        self.data, self.family, self.hclass, self.loss = data, family, hclass, loss
        self.M = data.masks(family)
        self.Mf = self.M.astype(float)
        self.counts = self.M.sum(axis=1)
        self.nonempty = self.counts > 0
        self.mass = self.counts / data.n
        self.Hpred = hclass.predictions(data.X)
        self.Hloss = loss(self.Hpred, data.y)
        self.LH = self.cond_means(self.Hloss.T)
        risks = self.Hloss.mean(axis=1)
        self.h0 = int(np.argmin(risks))
        self.alpha = float(risks[self.h0])

    @property
    def n(self) -> int:
        return self.data.n

    def cond_means(self, L: np.ndarray) -> np.ndarray:
        """Group-conditional means of per-record values ``L`` (shape ``(n,)`` or ``(n, k)``).

        Empty groups get NaN.
        """
        sums = self.Mf @ L
        denom = np.maximum(self.counts, 1)
        out = sums / (denom[:, None] if sums.ndim == 2 else denom)
        out[~self.nonempty] = np.nan
        return out

    def base_chain(self) -> UpdateChain:
        return UpdateChain(self.hclass[self.h0])

    def statistic(self, f: np.ndarray, eta: float, fractional: bool, weighted: bool) -> tuple:
        """Acceptance statistic for every (g, h) and the current group losses.

        Non-fractional learners compare ``L_n(f|g)`` with ``L_n(h|g)``; fractional
        ones compare with the loss of ``f + eta * g * (h - f)`` on ``g``.
        """
        lf = self.loss(f, self.data.y)
        Lf = self.cond_means(lf)
        if fractional:
            Lp = self.cond_means(self.loss(step_towards(f[None, :], self.Hpred, eta), self.data.y).T)
        else:
            Lp = self.LH
        S = Lf[:, None] - Lp
        if weighted:
            S = self.mass[:, None] * S
        return S, float(lf.mean())

    def apply(self, f: np.ndarray, g: int, h: int, eta: float) -> np.ndarray:
        return np.where(self.M[g], step_towards(f, self.Hpred[h], eta), f)


def _problem(data, family, hclass, loss, problem):
    if problem is not None:
        return problem
    return Problem(data, family, hclass, loss)


def _group_gaps(S: np.ndarray) -> np.ndarray:
    out = np.full(S.shape[0], np.nan)
    ok = ~np.all(np.isnan(S), axis=1)
    out[ok] = np.nanmax(S[ok], axis=1)
    return out


def _argmax_learner(P: Problem, method: str, lam: float, eta: float, fractional: bool,
                    weighted: bool, max_iters: Optional[int]) -> tuple:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    if max_iters is None:
        # Each accepted update lowers the training loss by at least lam (weighted)
        # or lam / n (unweighted).
        max_iters = math.ceil(1 / lam) if weighted else math.ceil(P.n / lam)
    chain = P.base_chain()
    f = P.Hpred[P.h0].copy()
    trace = RunTrace(method, lam, 0.0, eta, alpha=P.alpha, group_mass=P.mass.copy())
    G, H = P.LH.shape
    for t in range(max_iters + 1):
        S, loss_before = P.statistic(f, eta, fractional, weighted)
        masked = np.where(P.nonempty[:, None], S, -np.inf)
        k = int(np.argmax(masked))
        best = float(masked.flat[k])
        gaps = _group_gaps(S)
        if not best >= lam:
            trace.iterations.append(IterationRecord(t, None, best, queries=int(P.nonempty.sum()) * H,
                                                    loss_before=loss_before, loss_after=loss_before,
                                                    group_gaps=gaps))
            trace.completed = True
            return chain, trace
        if t == max_iters:
            break
        g, h = divmod(k, H)
        f = P.apply(f, g, h, eta)
        chain = chain.append(eta, P.family[g], P.hclass[h])
        trace.iterations.append(IterationRecord(t, (g, h), best, queries=k + 1,
                                                loss_before=loss_before,
                                                loss_after=float(P.loss(f, P.data.y).mean()),
                                                group_gaps=gaps))
    raise MaxItersExceeded(f"{method}: exceeded max_iters={max_iters}", trace, chain)


def prepend(data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss,
            lam: float, max_iters: Optional[int] = None, problem: Optional[Problem] = None):
    """Greedy prepend on the unweighted gap ``L_n(f|g) - L_n(h|g)``."""
    P = _problem(data, family, hclass, loss, problem)
    return _argmax_learner(P, "prepend", lam, 1.0, False, False, max_iters)


def group_prepend(data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss,
                  lam: float, max_iters: Optional[int] = None, problem: Optional[Problem] = None):
    """Greedy prepend on the mass-weighted gap ``P_n(g)(L_n(f|g) - L_n(h|g))``."""
    P = _problem(data, family, hclass, loss, problem)
    return _argmax_learner(P, "group_prepend", lam, 1.0, False, True, max_iters)


def fractional_prepend(data, family, hclass, loss, lam: float, eta: float,
                       max_iters: Optional[int] = None, problem: Optional[Problem] = None):
    P = _problem(data, family, hclass, loss, problem)
    return _argmax_learner(P, "fractional_prepend", lam, eta, True, False, max_iters)


def fractional_group_prepend(data, family, hclass, loss, lam: float, eta: float,
                             max_iters: Optional[int] = None, problem: Optional[Problem] = None):
    P = _problem(data, family, hclass, loss, problem)
    return _argmax_learner(P, "fractional_group_prepend", lam, eta, True, True, max_iters)


def _shaky(P: Problem, method: str, lam: float, sigma: float, eta: float, fractional: bool,
           seed, max_iters: Optional[int], sampler: Optional[LaplaceSampler],
           max_updates: Optional[int] = None) -> tuple:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if max_iters is None:
        max_iters = 10 * math.ceil(1 / lam)
    sampler = sampler if sampler is not None else LaplaceSampler(seed, noise_off=(sigma == 0))
    mech = SparseMechanism(SparseConfig.with_sigma(lam, sigma), sampler)
    chain = P.base_chain()
    f = P.Hpred[P.h0].copy()
    trace = RunTrace(method, lam, sigma, eta, alpha=P.alpha, group_mass=P.mass.copy())
    H = P.LH.shape[1]
    # Every pair is queried, empty groups included with their zero weighted gap,
    # so the transcript length never depends on which groups are populated.
    rows = np.arange(P.LH.shape[0])
    for t in range(max_iters + 1):
        S, loss_before = P.statistic(f, eta, fractional, True)
        S = np.where(P.nonempty[:, None], S, 0.0)
        xi = mech.threshold_noise
        k, mu = mech.scan(S.ravel())
        gaps = _group_gaps(S)
        if k is None:
            trace.iterations.append(IterationRecord(
                t, None, float(np.max(S[rows])) if rows.size else 0.0, xi, 0.0, mu, mu.shape[0],
                loss_before, loss_before, gaps))
            trace.completed = True
            trace.info["threshold_noises"] = list(mech.state.threshold_noises)
            return chain, trace
        if t == max_iters:
            break
        r, h = divmod(k, H)
        g = int(rows[r])
        f = P.apply(f, g, h, eta)
        chain = chain.append(eta, P.family[g], P.hclass[h])
        trace.iterations.append(IterationRecord(
            t, (g, h), float(S[g, h]), xi, float(mu[-1]), mu, mu.shape[0],
            loss_before, float(P.loss(f, P.data.y).mean()), gaps))
        if max_updates is not None and trace.num_updates >= max_updates:
            # Sparse-vector halting: the transcript ends at this crossing.
            trace.info["halted"] = True
            trace.info["threshold_noises"] = list(mech.state.threshold_noises)
            return chain, trace
    trace.info["threshold_noises"] = list(mech.state.threshold_noises)
    bound = math.ceil(2 * P.alpha / lam)
    raise MaxItersExceeded(f"{method}: exceeded max_iters={max_iters} "
                           f"(update-count bound 2*alpha/lambda = {bound} holds w.h.p.)", trace, chain)


def shaky_prepend(data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss,
                  lam: float, sigma: float = 0.0, seed=None, max_iters: Optional[int] = None,
                  sampler: Optional[LaplaceSampler] = None, problem: Optional[Problem] = None,
                  max_updates: Optional[int] = None):
    """Noisy first-crossing prepend.

    Pairs are scanned group-major, hypothesis-minor. Each examined pair draws
    Lap(2 sigma) query noise; the threshold carries Lap(sigma) noise that is
    redrawn after every accepted update. A sweep with no crossing ends the run.
    ``sigma == 0`` gives the deterministic first-crossing skeleton. With
    ``max_updates`` the run halts right after that many crossings, leaving an
    incomplete trace.
    """
    P = _problem(data, family, hclass, loss, problem)
    return _shaky(P, "shaky_prepend", lam, sigma, 1.0, False, seed, max_iters, sampler, max_updates)


def fractional_shaky_prepend(data, family, hclass, loss, lam: float, eta: float,
                             sigma: Optional[float] = None, epsilon: Optional[float] = None,
                             delta: Optional[float] = None, seed=None,
                             max_iters: Optional[int] = None,
                             sampler: Optional[LaplaceSampler] = None,
                             problem: Optional[Problem] = None):
    """Shaky prepend with step size ``eta``.

    Without an explicit ``sigma`` the noise scale comes from the privacy
    parameters as ``4 sqrt(32 ln(1/delta)) / (n epsilon)``.
    """
    P = _problem(data, family, hclass, loss, problem)
    if sigma is None:
        if epsilon is None or delta is None:
            raise ValueError("give sigma or both epsilon and delta")
        sigma = fractional_shaky_sigma(P.n, epsilon, delta)
    return _shaky(P, "fractional_shaky_prepend", lam, sigma, eta, True, seed, max_iters, sampler)


FRACTIONAL = {
    "prepend": fractional_prepend,
    "group_prepend": fractional_group_prepend,
    "shaky_prepend": fractional_shaky_prepend,
}


def fractional_variant(base: str, data, family, hclass, loss, lam: float, eta: float, **kwargs):
    try:
        fn = FRACTIONAL[base]
    except KeyError:
        raise ValueError(f"no fractional variant of {base!r}") from None
    return fn(data, family, hclass, loss, lam, eta, **kwargs)


# ---------------------------------------------------------------------------
# sleeping experts


@dataclass
class SleepingExpertPredictor:
    """Uniform mixture over the per-step aggregate rules of a sleeping-experts pass.

    ``rule_weights`` holds the expert weights of the sampled rules, shape
    ``(num_samples, |G|, |H|)``. A rule predicts at x with the weighted
    average (or weighted vote) of the experts awake at x.
    """

    family: GroupFamily
    hclass: HypothesisClass
    rule_weights: np.ndarray
    fallback: int
    task: str = "regression"

    def _expert_dist(self, X) -> tuple:
        A = np.vstack([g(X) for g in self.family]).astype(float)   # (G, m)
        Hp = self.hclass.predictions(X)                               # (H, m)
        W = np.einsum("gm,rgh->rmh", A, self.rule_weights)           # (R, m, H)
        tot = W.sum(axis=2, keepdims=True)
        awake = tot[..., 0] > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            D = np.where(tot > 0, W / np.where(tot > 0, tot, 1.0), 0.0)
        D[~awake, self.fallback] = 1.0
        return D, Hp

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        D, Hp = self._expert_dist(X)
        if self.task == "regression":
            return np.einsum("mh,hm->m", D.mean(axis=0), Hp)
        classes = np.unique(np.floor(Hp + 0.5))
        votes = np.zeros((D.shape[0], X.shape[0], classes.shape[0]))
        for c_i, c in enumerate(classes):
            votes[..., c_i] = np.einsum("rmh,hm->rm", D, (np.floor(Hp + 0.5) == c).astype(float))
        rule_class = np.argmax(votes, axis=2)                          # (R, m)
        counts = np.stack([(rule_class == c_i).sum(axis=0) for c_i in range(classes.shape[0])], axis=1)
        return classes[np.argmax(counts, axis=1)]

    __call__ = predict


def sleeping_expert(data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss,
                    learning_rate: float, seed=None, num_samples: int = 64, task: str = "regression",
                    problem: Optional[Problem] = None):
    """One shuffled pass of multiplicative weights over experts ``G x H``.

    At each step experts whose group excludes the current point sleep. Awake
    experts are scaled by ``exp(-lr * loss)`` and then rescaled so their total
    weight is unchanged. ``num_samples`` step indices are drawn up front and the
    weights in force at those steps form the returned mixture.
    """
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    P = _problem(data, family, hclass, loss, problem)
    rng = np.random.default_rng(seed)
    order = rng.permutation(P.n)
    picks = np.sort(rng.integers(0, P.n, size=num_samples))
    G, H = P.LH.shape
    W = np.ones((G, H))
    snaps = np.empty((num_samples, G, H))
    j = 0
    awake_steps = 0
    for step, i in enumerate(order):
        while j < num_samples and picks[j] == step:
            snaps[j] = W
            j += 1
        awake = P.M[:, i]
        if not awake.any():
            continue
        awake_steps += 1
        Wa = W[awake]
        total = Wa.sum()
        Wn = Wa * np.exp(-learning_rate * P.Hloss[:, i])[None, :]
        s = Wn.sum()
        W[awake] = Wn * (total / s) if s > 0 else Wa
    predictor = SleepingExpertPredictor(family, hclass, snaps, P.h0, task)
    trace = RunTrace("sleeping_expert", float("nan"), alpha=P.alpha, completed=True,
                     group_mass=P.mass.copy())
    trace.info.update(learning_rate=learning_rate, order=order, sampled_steps=picks,
                      num_samples=num_samples, awake_steps=awake_steps, final_weights=W.copy(),
                      aggregation="average" if task == "regression" else "majority")
    return predictor, trace


METHODS = ("prepend", "group_prepend", "shaky_prepend", "fractional_prepend",
           "fractional_group_prepend", "fractional_shaky_prepend", "sleeping_expert")


def fit(method: str, data: Dataset, family: GroupFamily, hclass: HypothesisClass, loss: BoundedLoss,
        config: LearnerConfig, problem: Optional[Problem] = None):
    """Dispatch by method name; returns ``(predictor, trace)``."""
    P = _problem(data, family, hclass, loss, problem)
    c = config
    if method == "prepend":
        return prepend(data, family, hclass, loss, c.lam, c.max_iters, problem=P)
    if method == "group_prepend":
        return group_prepend(data, family, hclass, loss, c.lam, c.max_iters, problem=P)
    if method == "shaky_prepend":
        return shaky_prepend(data, family, hclass, loss, c.lam, c.resolve_sigma(P.n), c.seed,
                             c.max_iters, problem=P)
    if method == "fractional_prepend":
        return fractional_prepend(data, family, hclass, loss, c.lam, c.eta, c.max_iters, problem=P)
    if method == "fractional_group_prepend":
        return fractional_group_prepend(data, family, hclass, loss, c.lam, c.eta, c.max_iters, problem=P)
    if method == "fractional_shaky_prepend":
        return fractional_shaky_prepend(data, family, hclass, loss, c.lam, c.eta,
                                        sigma=c.resolve_sigma(P.n), seed=c.seed,
                                        max_iters=c.max_iters, problem=P)
    if method == "sleeping_expert":
        return sleeping_expert(data, family, hclass, loss, c.learning_rate, c.seed,
                               c.num_samples, problem=P)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
