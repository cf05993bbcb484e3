"""Domain types, bounded losses, update-chain predictors and empirical risks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class EmptyGroupError(ValueError):
    """Raised when a conditional quantity is requested on a group with no members."""

    def __init__(self, message: str = "empty group"):
        super().__init__(message)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered sample of (x, y) records.

    ``X`` is stored as an ``(n, d)`` float array and ``y`` as ``(n,)``. Record
    order is fixed and decides every index-based tie-break downstream.
    """

    X: np.ndarray
    y: np.ndarray
    _mask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        X = _as_2d(self.X)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one record")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def masks(self, family: "GroupFamily") -> np.ndarray:
        """Boolean ``(|G|, n)`` membership matrix, computed once per family."""
        key = id(family)
        hit = self._mask_cache.get(key)
        if hit is not None and hit[0] is family:
            return hit[1]
        M = np.vstack([g.mask(self) for g in family.groups])
        M.setflags(write=False)
        self._mask_cache[key] = (family, M)
        return M

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx])

    def replace(self, i: int, x, y: float) -> "Dataset":
        """Copy with record ``i`` swapped for ``(x, y)``."""
        X = self.X.copy()
        Y = self.y.copy()
        X[i] = np.asarray(x, dtype=float).reshape(-1)
        Y[i] = y
        return Dataset(X, Y)


@dataclass(frozen=True)
class Group:
    """A {0,1}-valued indicator over feature space.

    ``indicator`` receives an ``(m, d)`` array and returns ``m`` booleans.
    """

    id: int
    indicator: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __call__(self, X) -> np.ndarray:
        return np.asarray(self.indicator(_as_2d(X)), dtype=bool).reshape(-1)

    def mask(self, data: Dataset) -> np.ndarray:
        return self(data.X)


@dataclass(frozen=True)
class IntervalIndicator:
    """Closed-interval membership ``lo <= x[dim] <= hi``."""

    lo: float
    hi: float
    dim: int = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        v = X[:, self.dim]
        return (v >= self.lo) & (v <= self.hi)


def all_ones(X: np.ndarray) -> np.ndarray:
    return np.ones(X.shape[0], dtype=bool)


def interval_group(gid: int, lo: float, hi: float, dim: int = 0) -> Group:
    return Group(gid, IntervalIndicator(lo, hi, dim), name=f"[{lo:g},{hi:g}]")


@dataclass(frozen=True)
class GroupFamily:
    groups: tuple

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise ValueError("group family must be non-empty")
        for i, g in enumerate(groups):
            if g.id != i:
                raise ValueError(f"group ids must be 0..|G|-1 in order; position {i} has id {g.id}")
        object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, i) -> Group:
        return self.groups[i]

    @classmethod
    def from_indicators(cls, indicators: Sequence[Callable], names: Optional[Sequence[str]] = None):
        names = names or [""] * len(indicators)
        return cls(tuple(Group(i, f, names[i]) for i, f in enumerate(indicators)))

    @classmethod
    def from_intervals(cls, intervals: Sequence[tuple]) -> "GroupFamily":
        """Build from ``(lo, hi)`` or ``(lo, hi, dim)`` tuples."""
        return cls(tuple(interval_group(i, *iv) for i, iv in enumerate(intervals)))


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.full(X.shape[0], self.value, dtype=float)


@dataclass(frozen=True)
class Hypothesis:
    id: int
    predict_fn: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        return np.asarray(self.predict_fn(X), dtype=float).reshape(-1)


@dataclass(frozen=True)
class HypothesisClass:
    hypotheses: tuple

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        if not hyps:
            raise ValueError("hypothesis class must be non-empty")
        for i, h in enumerate(hyps):
            if h.id != i:
                raise ValueError(f"hypothesis ids must be 0..|H|-1 in order; position {i} has id {h.id}")
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i) -> Hypothesis:
        return self.hypotheses[i]

    def predictions(self, X) -> np.ndarray:
        """``(|H|, m)`` matrix of predictions."""
        X = _as_2d(X)
        return np.vstack([h.predict(X) for h in self.hypotheses])

    @classmethod
    def constants(cls, values: Sequence[float]) -> "HypothesisClass":
        return cls(tuple(Hypothesis(i, ConstantPredictor(float(v)), name=f"{float(v):g}")
                         for i, v in enumerate(values)))

    @classmethod
    def constant_grid(cls, lo: float, hi: float, step: float = 0.1) -> "HypothesisClass":
        k = int(np.floor((hi - lo) / step + 1e-9))
        values = np.round(lo + step * np.arange(k + 1), 12)
        if values[-1] < hi - 1e-12:
            values = np.append(values, np.round(values[-1] + step, 12))
        return cls.constants(values)


LOSS_KINDS = ("squared", "absolute", "zero_one")


@dataclass(frozen=True)
class BoundedLoss:
    """A loss with values in [0, 1].

    ``squared`` is ``min(1, (z - y)^2 / scale^2)``, ``absolute`` is
    ``min(1, |z - y| / scale)`` and ``zero_one`` compares the prediction
    rounded to the nearest class index against ``y``.
    """

    kind: str = "squared"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.scale > 0:
            raise ValueError("loss scale must be positive")

    def __call__(self, z, y) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "squared":
            return np.minimum(1.0, (z - y) ** 2 / self.scale ** 2)
        if self.kind == "absolute":
            return np.minimum(1.0, np.abs(z - y) / self.scale)
        return (np.floor(z + 0.5) != y).astype(float)

    @property
    def convex(self) -> bool:
        # Clamping breaks convexity outside the unclamped region; callers only
        # use this flag to decide whether Jensen-based checks are meaningful.
        return self.kind != "zero_one"


def step_towards(f: np.ndarray, h: np.ndarray, eta: float) -> np.ndarray:
    """``f + eta * (h - f)`` written as a convex combination.

    With ``eta == 1`` the result is ``h`` exactly, so full-replacement updates
    reproduce decision-list evaluation bit for bit.
    """
    return (1.0 - eta) * f + eta * h


@dataclass(frozen=True)
class Update:
    eta: float
    group: Group
    hypothesis: Hypothesis


@dataclass(frozen=True)
class UpdateChain:
    """Base hypothesis followed by ordered corrective updates.

    Evaluation applies ``f <- f + eta * g(x) * (h(x) - f)`` in chronological
    order, so later updates win on covered points when ``eta == 1``.
    """

    base: Hypothesis
    updates: tuple = ()

    def __post_init__(self):
        ups = tuple(self.updates)
        for u in ups:
            if not 0 < u.eta <= 1:
                raise ValueError(f"step size must lie in (0, 1], got {u.eta}")
        object.__setattr__(self, "updates", ups)

    def __len__(self) -> int:
        return len(self.updates)

    def append(self, eta: float, group: Group, hypothesis: Hypothesis) -> "UpdateChain":
        return UpdateChain(self.base, self.updates + (Update(eta, group, hypothesis),))

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        f = self.base.predict(X)
        for u in self.updates:
            g = u.group(X)
            if g.any():
                f = np.where(g, step_towards(f, u.hypothesis.predict(X), u.eta), f)
        return f

    __call__ = predict

    def pairs(self) -> list:
        return [(u.group.id, u.hypothesis.id, u.eta) for u in self.updates]


def evaluate_chain(chain: UpdateChain, x) -> np.ndarray:
    return chain.predict(x)


def decision_list_eval(pairs: Sequence[tuple], base: Hypothesis, X) -> np.ndarray:
    """Recursive ``[g_T, h_T, ..., g_1, h_1, 1, h_0](x)`` evaluation.

    ``pairs`` is listed most recent first, as in the prepend notation.
    """
    X = _as_2d(X)
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        xi = X[i:i + 1]
        for g, h in pairs:
            if g(xi)[0]:
                out[i] = h.predict(xi)[0]
                break
        else:
            out[i] = base.predict(xi)[0]
    return out


def _predict(predictor, X) -> np.ndarray:
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(X), dtype=float).reshape(-1)
    return np.asarray(predictor(X), dtype=float).reshape(-1)


def pointwise_loss(data: Dataset, predictor, loss: BoundedLoss) -> np.ndarray:
    return loss(_predict(predictor, data.X), data.y)


def conditional_loss(data: Dataset, predictor, loss: BoundedLoss, group=None) -> float:
    """Average loss over the records that ``group`` selects.

    ``group`` may be a :class:`Group`, a boolean mask, or ``None`` for the
    whole sample.
    """
    mask = _resolve_mask(data, group)
    count = int(mask.sum())
    if count == 0:
        raise EmptyGroupError()
    return float(pointwise_loss(data, predictor, loss)[mask].sum() / count)


def empirical_loss(data: Dataset, predictor, loss: BoundedLoss) -> float:
    return conditional_loss(data, predictor, loss, None)


def weighted_gap(data: Dataset, f, h, loss: BoundedLoss, group) -> float:
    """``P_n(g) * (L_n(f|g) - L_n(h|g))``; zero on an empty group."""
    mask = _resolve_mask(data, group)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    lf = pointwise_loss(data, f, loss)[mask].sum() / count
    lh = pointwise_loss(data, h, loss)[mask].sum() / count
    return float(count / data.n * (lf - lh))


def _resolve_mask(data: Dataset, group) -> np.ndarray:
    if group is None:
        return np.ones(data.n, dtype=bool)
    if isinstance(group, Group):
        return group.mask(data)
    mask = np.asarray(group, dtype=bool).reshape(-1)
    if mask.shape[0] != data.n:
        raise ValueError("mask length does not match dataset")
    return mask


def erm(data: Dataset, hclass: HypothesisClass, loss: BoundedLoss, mask=None) -> Hypothesis:
    """Empirical risk minimizer over ``hclass``; ties go to the lowest id."""
    m = _resolve_mask(data, mask)
    if not m.any():
        raise EmptyGroupError()
    losses = loss(hclass.predictions(data.X[m]), data.y[m]).mean(axis=1)
    return hclass[int(np.argmin(losses))]


def group_losses(data: Dataset, family: GroupFamily, predictor, loss: BoundedLoss) -> np.ndarray:
    """Conditional loss per group; NaN where the group has no members."""
    M = data.masks(family)
    counts = M.sum(axis=1)
    lf = pointwise_loss(data, predictor, loss)
    sums = M.astype(float) @ lf
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass
class IterationRecord:
    """One pass of a learner's outer loop.

    ``pair`` is ``(group_id, hypothesis_id)`` for an accepted update or
    ``None`` on the terminating pass. For noisy runs ``threshold_noise`` is the
    threshold perturbation in force during the pass, ``query_noise`` holds every
    per-pair draw in scan order, and ``queries`` counts examined pairs.
    """

    index: int
    pair: Optional[tuple]
    statistic: float
    threshold_noise: float = 0.0
    crossing_noise: float = 0.0
    query_noise: Optional[np.ndarray] = None
    queries: int = 0
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    group_gaps: Optional[np.ndarray] = None


@dataclass
class RunTrace:
    method: str
    lam: float
    sigma: float = 0.0
    eta: float = 1.0
    alpha: float = float("nan")
    iterations: list = field(default_factory=list)
    completed: bool = False
    group_mass: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def num_updates(self) -> int:
        return sum(1 for it in self.iterations if it.pair is not None)

    @property
    def final(self) -> IterationRecord:
        return self.iterations[-1]

    def transcript(self) -> tuple:
        """Answer sequence of the sparse mechanism, ``True`` for a crossing."""
        out = []
        for it in self.iterations:
            if it.pair is None:
                out.extend([False] * it.queries)
            else:
                out.extend([False] * (it.queries - 1))
                out.append(True)
        return tuple(out)

    def all_noise(self) -> np.ndarray:
        parts = []
        for it in self.iterations:
            parts.append(np.array([it.threshold_noise]))
            if it.query_noise is not None:
                parts.append(np.asarray(it.query_noise))
        return np.concatenate(parts) if parts else np.zeros(0)
