"""Laplace noise, the generalized sparse-vector mechanism, and privacy checks."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .core import BoundedLoss, Dataset, _predict, _resolve_mask, weighted_gap


class HaltedError(RuntimeError):
    def __init__(self, message: str = "halted"):
        super().__init__(message)


def laplace_from_uniform(u, scale: float):
    """Inverse-CDF transform of ``u`` in (-1/2, 1/2] to a Lap(scale) draw."""
    u = np.asarray(u, dtype=float)
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return -scale * np.sign(u) * np.log(tail)


class LaplaceSampler:
    """Seedable Laplace source that hands out draws strictly in stream order.

    Uniforms are pulled from the generator in blocks, but consumers can
    ``peek`` ahead and ``advance`` by exactly the number of draws they used, so
    a vectorized scan consumes the same stream as a one-draw-at-a-time loop.
    With ``noise_off`` every draw is 0 and no randomness is consumed.
    """

    def __init__(self, seed=None, scale: float = 1.0, noise_off: bool = False, block: int = 4096):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.scale = float(scale)
        self.noise_off = noise_off
        self._block = block
        self._buf = np.empty(0)
        self._pos = 0
        self.consumed = 0

    def _fill(self, k: int) -> None:
        have = self._buf.shape[0] - self._pos
        if have >= k:
            return
        fresh = self.rng.random(max(k - have, self._block))
        self._buf = np.concatenate([self._buf[self._pos:], fresh])
        self._pos = 0

    def peek_uniform(self, k: int) -> np.ndarray:
        self._fill(k)
        return 0.5 - self._buf[self._pos:self._pos + k]

    def advance(self, k: int) -> None:
        if self.noise_off:
            return
        self._fill(k)
        self._pos += k
        self.consumed += k

    def peek(self, k: int, scale: Optional[float] = None) -> np.ndarray:
        scale = self.scale if scale is None else scale
        if self.noise_off:
            return np.zeros(k)
        if not scale > 0:
            raise ValueError(f"Laplace scale must be positive, got {scale}")
        return laplace_from_uniform(self.peek_uniform(k), scale)

    def sample(self, scale: Optional[float] = None, size: Optional[int] = None):
        k = 1 if size is None else int(size)
        out = self.peek(k, scale)
        self.advance(k)
        return float(out[0]) if size is None else out


def laplace_sample(sampler: LaplaceSampler, scale: Optional[float] = None) -> float:
    return sampler.sample(scale)


StoppingRule = Callable[[int, int, int], bool]


def stop_after_count(c: int) -> StoppingRule:
    """Halt once ``count`` reaches ``c`` (the classical sparse cutoff)."""
    return lambda count, since_update, total: count >= c


@dataclass(frozen=True)
class SparseConfig:
    """Parameters of the generalized sparse mechanism.

    The noise scale is ``delta_sensitivity * sqrt(32 ln(1/delta)) / epsilon``
    unless ``sigma`` is given explicitly.
    """

    delta_sensitivity: float = 1.0
    threshold: float = 0.0
    epsilon: float = 1.0
    delta: float = 1e-6
    stopping_rule: Optional[StoppingRule] = None
    sigma_override: Optional[float] = None

    def __post_init__(self):
        if self.sigma_override is None:
            for name in ("delta_sensitivity", "epsilon"):
                if not getattr(self, name) > 0:
                    raise ValueError(f"{name} must be positive")
            if not 0 < self.delta < 1:
                raise ValueError("delta must lie in (0, 1)")
        elif self.sigma_override < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def sigma(self) -> float:
        if self.sigma_override is not None:
            return float(self.sigma_override)
        return self.delta_sensitivity * math.sqrt(32 * math.log(1 / self.delta)) / self.epsilon

    @classmethod
    def with_sigma(cls, threshold: float, sigma: float, stopping_rule=None) -> "SparseConfig":
        return cls(threshold=threshold, stopping_rule=stopping_rule, sigma_override=sigma)


@dataclass
class SparseState:
    """Mutable mechanism state; answers and noises are kept as array chunks."""

    count: int = 0
    noisy_threshold: float = float("nan")
    threshold_noises: list = field(default_factory=list)
    answer_chunks: list = field(default_factory=list)
    noise_chunks: list = field(default_factory=list)
    total: int = 0
    since_update: int = 0
    halted: bool = False

    @property
    def answers(self) -> np.ndarray:
        return np.concatenate(self.answer_chunks) if self.answer_chunks else np.zeros(0, dtype=bool)

    @property
    def query_noises(self) -> np.ndarray:
        return np.concatenate(self.noise_chunks) if self.noise_chunks else np.zeros(0)

    @property
    def transcript(self) -> list:
        return list(zip(self.answers.tolist(), self.query_noises.tolist()))


class SparseMechanism:
    """Answers a stream of threshold queries, paying noise per crossing.

    The threshold perturbation is drawn at construction and after every
    crossing; each query gets fresh noise at twice the threshold scale.
    """

    def __init__(self, config: SparseConfig, sampler: LaplaceSampler):
        self.config = config
        self.sampler = sampler
        self.sigma = config.sigma
        if self.sigma == 0:
            sampler.noise_off = True
        self.state = SparseState()
        self._resample_threshold()

    def _resample_threshold(self) -> None:
        xi = self.sampler.sample(self.sigma) if not self.sampler.noise_off else 0.0
        self.state.threshold_noises.append(xi)
        self.state.noisy_threshold = self.config.threshold + xi

    @property
    def threshold_noise(self) -> float:
        return self.state.threshold_noises[-1]

    def _record(self, answers, noises) -> None:
        answers = np.asarray(answers, dtype=bool)
        self.state.answer_chunks.append(answers)
        self.state.noise_chunks.append(np.asarray(noises, dtype=float))
        self.state.total += answers.shape[0]

    def _after(self, crossed: bool) -> None:
        st = self.state
        if crossed:
            st.count += 1
            st.since_update = 0
            self._resample_threshold()
        else:
            st.since_update += 1
        rule = self.config.stopping_rule
        if rule is not None and rule(st.count, st.since_update, st.total):
            st.halted = True

    def step(self, query_value: float) -> bool:
        if self.state.halted:
            raise HaltedError()
        mu = self.sampler.sample(2 * self.sigma) if not self.sampler.noise_off else 0.0
        crossed = bool(query_value + mu >= self.state.noisy_threshold)
        self._record([crossed], [mu])
        self._after(crossed)
        return crossed

    def scan(self, values: np.ndarray):
        """Feed ``values`` in order until the first crossing.

        Returns ``(index, noises)`` where ``index`` is the position of the
        crossing or ``None`` and ``noises`` are the query draws consumed. Draw
        consumption and state updates match calling :meth:`step` on each value
        and stopping after the first ``True``.
        """
        if self.state.halted:
            raise HaltedError()
        values = np.asarray(values, dtype=float)
        if self.config.stopping_rule is not None:
            used = []
            for k, v in enumerate(values):
                if self.state.halted:
                    break
                crossed = self.step(v)
                used.append(float(self.state.noise_chunks[-1][0]))
                if crossed:
                    return k, np.array(used)
            return None, np.array(used)
        m = values.shape[0]
        mu = self.sampler.peek(m, 2 * self.sigma)
        hits = np.flatnonzero(values + mu >= self.state.noisy_threshold)
        if hits.size:
            k = int(hits[0])
            used = mu[:k + 1]
        else:
            k = None
            used = mu
        self.sampler.advance(used.shape[0])
        answers = np.zeros(used.shape[0], dtype=bool)
        if k is not None:
            answers[k] = True
        self._record(answers, used)
        if k is None:
            self.state.since_update += used.shape[0]
        else:
            self.state.since_update += k
            self._after(True)
        return k, used


def sparse_step(state_or_mech: SparseMechanism, query_value: float) -> bool:
    return state_or_mech.step(query_value)


# ---------------------------------------------------------------------------
# sensitivity


def _exact_weighted_gap(data: Dataset, f, h, loss: BoundedLoss, group) -> Fraction:
    mask = _resolve_mask(data, group)
    count = int(mask.sum())
    if count == 0:
        return Fraction(0)
    # P_n(g) times the conditional-mean difference is the masked sum over n.
    diff = sum(map(Fraction, loss(_predict(f, data.X), data.y)[mask].tolist()))
    diff -= sum(map(Fraction, loss(_predict(h, data.X), data.y)[mask].tolist()))
    return diff / data.n


def query_sensitivity_oracle(data: Dataset, f, h, loss: BoundedLoss, group,
                             value_universe: Sequence[tuple], exact: bool = True,
                             refit: Optional[Callable[[Dataset], object]] = None):
    """Largest change of ``P_n(g)(L_n(f|g) - L_n(h|g))`` under one-record replacement.

    Every record is swapped in turn for every ``(x, y)`` in ``value_universe``
    and the query is recomputed from scratch. With ``exact`` the arithmetic is
    done in rationals so the result is free of rounding. ``refit`` rebuilds
    ``f`` from each dataset, for a current model that depends on the sample.
    """
    def q(d):
        fd = refit(d) if refit is not None else f
        if exact:
            return _exact_weighted_gap(d, fd, h, loss, group)
        return weighted_gap(d, fd, h, loss, group)

    base = q(data)
    worst = Fraction(0) if exact else 0.0
    # Swapping out either of two identical records yields the same neighbor.
    rows = np.column_stack([data.X, data.y])
    _, first = np.unique(rows, axis=0, return_index=True)
    for i in sorted(first.tolist()):
        for x, y in value_universe:
            d = abs(q(data.replace(i, x, y)) - base)
            if d > worst:
                worst = d
    return worst


# ---------------------------------------------------------------------------
# empirical auditing


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def check_neighbors(a: Dataset, b: Dataset) -> int:
    """Number of differing records; raises unless it is 0 or 1."""
    if a.n != b.n or a.dim != b.dim:
        raise ValueError("datasets are not neighbors: sizes differ")
    diff = np.any(a.X != b.X, axis=1) | (a.y != b.y)
    k = int(diff.sum())
    if k > 1:
        raise ValueError(f"datasets are not neighbors: {k} records differ")
    return k


@dataclass(frozen=True)
class PrefixEvent:
    """Transcript event: starts with ``prefix`` (or equals it when ``exact``)."""

    prefix: tuple
    exact: bool = False

    def __call__(self, transcript) -> bool:
        t = tuple(transcript)
        if self.exact:
            return t == self.prefix
        return t[:len(self.prefix)] == self.prefix

    def label(self) -> str:
        s = "".join("T" if a else "F" for a in self.prefix)
        return f"={s}" if self.exact else f"{s}*"


@dataclass
class AuditResult:
    event: str
    trials: int
    count_a: int
    count_b: int
    p_a: float
    p_b: float
    ci_a: tuple
    ci_b: tuple
    ln_ratio: float
    ln_ratio_ci: tuple
    slack: float

    def row(self) -> dict:
        return {
            "event": self.event, "trials": self.trials,
            "count_a": self.count_a, "count_b": self.count_b,
            "p_a": self.p_a, "p_b": self.p_b,
            "p_a_lo": self.ci_a[0], "p_a_hi": self.ci_a[1],
            "p_b_lo": self.ci_b[0], "p_b_hi": self.ci_b[1],
            "ln_ratio": self.ln_ratio,
            "ln_ratio_lo": self.ln_ratio_ci[0], "ln_ratio_hi": self.ln_ratio_ci[1],
            "slack": self.slack,
        }


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def _audit_counts(label: str, ka: int, kb: int, trials: int, confidence: float) -> AuditResult:
    pa, pb = ka / trials, kb / trials
    ca, cb = wilson_interval(ka, trials, confidence), wilson_interval(kb, trials, confidence)
    if ka == kb:
        ln_ratio = 0.0
    else:
        ln_ratio = abs(_log(pa) - _log(pb))
    lo = _log(ca[0]) - _log(cb[1])
    hi = _log(ca[1]) - _log(cb[0])
    if lo <= 0 <= hi:
        ci = (0.0, max(abs(lo), abs(hi)))
    else:
        ci = (min(abs(lo), abs(hi)), max(abs(lo), abs(hi)))
    slack = ln_ratio - ci[0] if math.isfinite(ln_ratio) else math.inf
    return AuditResult(label, trials, ka, kb, pa, pb, ca, cb, ln_ratio, ci, slack)


def collect_transcripts(runner: Callable, data: Dataset, trials: int, seed: int = 0) -> list:
    return [tuple(runner(data, seed + t)) for t in range(trials)]


def empirical_privacy_audit(runner: Callable, pair: tuple, event: Callable, trials: int,
                            seed: int = 0, confidence: float = 0.95,
                            min_trials: int = 10_000) -> AuditResult:
    """Monte-Carlo estimate of an event's probability under two neighboring datasets.

    ``runner(dataset, seed)`` must return a transcript. Trial ``t`` on both
    datasets uses seed ``seed + t``. The reported ``slack`` is the distance from
    the point log-ratio down to the lower end of its interval; the check is
    advisory and proves nothing.
    """
    a, b = pair
    check_neighbors(a, b)
    if trials < min_trials:
        raise ValueError(f"at least {min_trials} trials required, got {trials}")
    ka = sum(bool(event(t)) for t in collect_transcripts(runner, a, trials, seed))
    kb = sum(bool(event(t)) for t in collect_transcripts(runner, b, trials, seed))
    label = event.label() if hasattr(event, "label") else getattr(event, "__name__", "event")
    return _audit_counts(label, ka, kb, trials, confidence)


def _prefix_events(transcripts) -> tuple:
    starts, exact = Counter(), Counter()
    for t in transcripts:
        exact[t] += 1
        for i, a in enumerate(t):
            if a:
                starts[t[:i + 1]] += 1
    return starts, exact


def audit_prefix_events(runner: Callable, pair: tuple, trials: int, seed: int = 0,
                        confidence: float = 0.95, min_count: int = 1,
                        min_trials: int = 10_000) -> list:
    """Audit every prefix event observed in either sample of transcripts.

    Events are "transcript starts with p" for each observed prefix ending at a
    crossing, plus "transcript equals t" for each complete transcript. Events
    seen fewer than ``min_count`` times in both samples are dropped.
    """
    a, b = pair
    check_neighbors(a, b)
    if trials < min_trials:
        raise ValueError(f"at least {min_trials} trials required, got {trials}")
    sa, ea = _prefix_events(collect_transcripts(runner, a, trials, seed))
    sb, eb = _prefix_events(collect_transcripts(runner, b, trials, seed))
    out = []
    for kind, ca, cb in ((False, sa, sb), (True, ea, eb)):
        for p in sorted(set(ca) | set(cb), key=lambda p: (len(p), p)):
            ka, kb = ca.get(p, 0), cb.get(p, 0)
            if max(ka, kb) < min_count:
                continue
            out.append(_audit_counts(PrefixEvent(p, kind).label(), ka, kb, trials, confidence))
    return out
