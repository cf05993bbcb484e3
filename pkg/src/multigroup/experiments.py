"""Synthetic scenarios, validation tuning and seeded multi-run orchestration."""

from __future__ import annotations

import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BoundedLoss, Dataset, Group, GroupFamily, HypothesisClass, IntervalIndicator
from .learners import LearnerConfig, Problem, fit
from .theory import recipe_shaky

SCENARIOS = ("criterion_selection", "unbalanced", "spatial", "fractional_ablation")
CRITERIA = ("total_loss", "worst_group_loss")


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# targets and generators


@dataclass(frozen=True)
class StepTarget:
    """Piecewise-constant function with ``values[i]`` on ``[breaks[i-1], breaks[i])``."""

    breaks: tuple
    values: tuple

    def __post_init__(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ValueError("need exactly one more value than breakpoints")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.asarray(self.values, dtype=float)[np.searchsorted(self.breaks, x, side="right")]


SPATIAL_TARGET = StepTarget((0.15, 0.5, 0.65), (0.72, 0.18, 0.93, 0.46))
UNBALANCED_TARGET = StepTarget((0.5, 0.625, 0.75, 0.875), (0.3, 0.8, 0.6, 0.7, 0.5))
# Mass of [0, .5) and of the four refined cells; the refined cells shrink so the
# fine groups are unbalanced in size as well as in level.
UNBALANCED_MASS = (0.4, 0.3, 0.2, 0.06, 0.04)
CRITERION_TARGET = StepTarget((2.0, 2.5, 3.0, 4.0), (3.6, 4.1, 4.5, 4.1, 3.7))
# Probability mass of each criterion-selection segment; the 4.1 plateau holds half
# of the sample and the [2.5, 3] cell (group 4) is the rarest.
CRITERION_SEGMENTS = ((0.0, 2.0, 0.25), (2.0, 2.5, 0.15), (2.5, 3.0, 0.05),
                      (3.0, 4.0, 0.35), (4.0, 5.0, 0.20))


def gen_spatial(n: int, noise_sd: float = 0.1, seed=None, target: StepTarget = SPATIAL_TARGET) -> Dataset:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.random(n)
    y = target(x) + noise_sd * rng.standard_normal(n)
    return Dataset(x, y)


def interval_grid_groups(center_step: float = 0.05, length_step: float = 0.05) -> GroupFamily:
    """Closed intervals ``[c - l/2, c + l/2]`` for grid centers in [0, 1] and lengths in (0, 1]."""
    nc, nl = 1 / center_step, 1 / length_step
    if abs(nc - round(nc)) > 1e-9 or abs(nl - round(nl)) > 1e-9:
        raise ValueError("steps must divide 1 evenly")
    centers = np.round(np.arange(round(nc) + 1) * center_step, 10)
    lengths = np.round(np.arange(1, round(nl) + 1) * length_step, 10)
    groups = []
    for c, l in itertools.product(centers, lengths):
        lo, hi = round(c - l / 2, 10), round(c + l / 2, 10)
        groups.append(Group(len(groups), IntervalIndicator(lo, hi), name=f"c={c:g},l={l:g}"))
    return GroupFamily(tuple(groups))


def unbalanced_groups() -> GroupFamily:
    """Whole domain, two halves, and four quarters of the right half only."""
    specs = [(0.0, 1.0, True), (0.0, 0.5, False), (0.5, 1.0, True),
             (0.5, 0.625, False), (0.625, 0.75, False), (0.75, 0.875, False), (0.875, 1.0, True)]
    groups = []
    for i, (lo, hi, closed) in enumerate(specs):
        ind = IntervalIndicator(lo, hi) if closed else HalfOpenInterval(lo, hi)
        groups.append(Group(i, ind, name=f"[{lo:g},{hi:g}{']' if closed else ')'}"))
    return GroupFamily(tuple(groups))


@dataclass(frozen=True)
class HalfOpenInterval:
    lo: float
    hi: float
    dim: int = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        v = X[:, self.dim]
        return (v >= self.lo) & (v < self.hi)


def gen_unbalanced(n: int = 120, seed=None, noise_sd: float = 0.3,
                   target: StepTarget = UNBALANCED_TARGET, mass=UNBALANCED_MASS) -> tuple:
    if n < 8:
        raise ValueError("n must be at least 8")
    rng = np.random.default_rng(seed)
    edges = np.array([0.0, *target.breaks, 1.0])
    if len(mass) != len(edges) - 1:
        raise ValueError("need one mass per target cell")
    p = np.asarray(mass, dtype=float)
    cell = rng.choice(p.size, size=n, p=p / p.sum())
    x = edges[cell] + (edges[cell + 1] - edges[cell]) * rng.random(n)
    y = target(x) + noise_sd * rng.standard_normal(n)
    return Dataset(x, y), unbalanced_groups()


def criterion_groups() -> GroupFamily:
    return GroupFamily.from_intervals([(0.0, 5.0), (0.0, 2.0), (2.0, 5.0), (2.5, 3.0)])


def gen_criterion(n: int = 26_000, seed=None, noise_sd: float = 0.2,
                  target: StepTarget = CRITERION_TARGET) -> tuple:
    if n < 10:
        raise ValueError("n must be at least 10")
    rng = np.random.default_rng(seed)
    lo, hi, p = (np.array(c) for c in zip(*CRITERION_SEGMENTS))
    seg = rng.choice(len(p), size=n, p=p / p.sum())
    x = lo[seg] + (hi[seg] - lo[seg]) * rng.random(n)
    y = target(x) + noise_sd * rng.standard_normal(n)
    return Dataset(x, y), criterion_groups()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    total_loss: float
    group_losses: np.ndarray
    worst_group_loss: float
    worst_group_id: int
    undefined_groups: list


def _sorted_sums(M: np.ndarray, values: np.ndarray) -> np.ndarray:
    # Summing in value order makes results independent of record order.
    order = np.argsort(values, kind="stable")
    return M[:, order].astype(float) @ values[order]


def evaluate(predictor, data: Dataset, family: GroupFamily, loss: BoundedLoss,
             baseline: Optional[np.ndarray] = None) -> Evaluation:
    """Total loss and per-group losses; groups without members are reported separately.

    With ``baseline`` (per-group reference losses) the worst group is taken
    over excess losses instead.
    """
    pred = predictor.predict(data.X) if hasattr(predictor, "predict") else predictor(data.X)
    lf = loss(pred, data.y)
    M = data.masks(family)
    counts = M.sum(axis=1)
    ok = counts > 0
    gl = np.full(len(family), np.nan)
    gl[ok] = _sorted_sums(M[ok], lf) / counts[ok]
    if not ok.any():
        raise ExperimentError("every group is empty on this sample")
    score = gl if baseline is None else gl - baseline
    masked = np.where(ok, score, -np.inf)
    wid = int(np.argmax(masked))
    total = float(np.sort(lf).sum() / data.n)
    return Evaluation(total, gl, float(masked[wid]), wid, np.flatnonzero(~ok).tolist())


def best_in_class(data: Dataset, family: GroupFamily, hclass: HypothesisClass,
                  loss: BoundedLoss) -> np.ndarray:
    """``min_h L(h|g)`` per group on ``data`` (NaN for empty groups)."""
    P = Problem(data, family, hclass, loss)
    out = np.full(len(family), np.nan)
    out[P.nonempty] = P.LH[P.nonempty].min(axis=1)
    return out


# ---------------------------------------------------------------------------
# tuning


def expand_grid(grid: dict) -> list:
    """Cartesian product of ``{name: [values]}`` in key order, last key fastest."""
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def learner_config(hypers: dict, seed) -> LearnerConfig:
    h = dict(hypers)
    if "sigma_ratio" in h:
        h["sigma"] = h.pop("sigma_ratio") * h["lam"]
    return LearnerConfig(seed=seed, **h)


@dataclass
class TuneResult:
    best: dict
    predictor: object
    trace: object
    table: list
    best_index: int


def tune(train: Dataset, val: Dataset, method: str, hyper_grid: dict, criterion: str,
         loss: BoundedLoss, family: GroupFamily, hclass: HypothesisClass, seed=None,
         problem: Optional[Problem] = None) -> TuneResult:
    """Fit every grid point on ``train`` and keep the best on ``val``.

    Ties go to the earliest grid point. The worst-group criterion only looks at
    groups with validation members.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    points = expand_grid(hyper_grid)
    P = problem or Problem(train, family, hclass, loss)
    table, fitted = [], []
    for i, hp in enumerate(points):
        predictor, trace = fit(method, train, family, hclass, loss, learner_config(hp, seed), problem=P)
        ev = evaluate(predictor, val, family, loss)
        score = ev.total_loss if criterion == "total_loss" else ev.worst_group_loss
        table.append({"index": i, **hp, "total_loss": ev.total_loss,
                      "worst_group_loss": ev.worst_group_loss, "score": score,
                      "num_updates": trace.num_updates})
        fitted.append((predictor, trace))
    scores = np.array([r["score"] for r in table])
    k = int(np.argmin(scores))
    return TuneResult(points[k], fitted[k][0], fitted[k][1], table, k)


# ---------------------------------------------------------------------------
# scenarios

LAMBDA_GRID = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2]
DEFAULT_GRIDS = {
    "prepend": {"lam": LAMBDA_GRID},
    "group_prepend": {"lam": LAMBDA_GRID},
    "shaky_prepend": {"lam": LAMBDA_GRID, "sigma_ratio": [0.02, 0.05]},
    "fractional_prepend": {"lam": LAMBDA_GRID, "eta": [0.5, 1.0]},
    "fractional_group_prepend": {"lam": LAMBDA_GRID, "eta": [0.5, 1.0]},
    "fractional_shaky_prepend": {"lam": LAMBDA_GRID, "sigma_ratio": [0.02, 0.05], "eta": [0.5, 1.0]},
    "sleeping_expert": {"learning_rate": [0.5, 1.0, 2.0, 5.0, 10.0, 20.0]},
}
BASE_METHODS = ("prepend", "group_prepend", "shaky_prepend", "sleeping_expert")


@dataclass
class ScenarioConfig:
    scenario: str
    n_train: int
    n_val: int
    n_test: int
    noise_sd: float
    seed: int = 0
    methods: tuple = BASE_METHODS
    hyper_grid: dict = field(default_factory=dict)
    criterion: str = "total_loss"
    runs: int = 20
    loss_kind: str = "squared"
    loss_scale: float = 1.0
    hyp_step: float = 0.1
    noiseless_test: bool = False
    recipe_beta: Optional[float] = None
    target_breaks: Optional[tuple] = None
    target_values: Optional[tuple] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if min(self.n_train, self.n_val, self.n_test, self.runs) < 1:
            raise ValueError("counts must be at least 1")
        for m in self.methods:
            grid = self.grid_for(m)
            if any(len(v) == 0 for v in grid.values()):
                raise ValueError(f"empty hyperparameter grid for {m}")
        for c in self.criteria:
            if c not in CRITERIA:
                raise ValueError(f"unknown criterion {c!r}")

    @property
    def criteria(self) -> tuple:
        return CRITERIA if self.criterion == "both" else (self.criterion,)

    def grid_for(self, method: str) -> dict:
        if method in self.hyper_grid:
            return self.hyper_grid[method]
        if method not in DEFAULT_GRIDS:
            raise ValueError(f"unknown method {method!r}")
        return DEFAULT_GRIDS[method]

    @property
    def loss(self) -> BoundedLoss:
        return BoundedLoss(self.loss_kind, self.loss_scale)


def preset(scenario: str, **overrides) -> ScenarioConfig:
    base = {
        "criterion_selection": dict(n_train=26_000, n_val=26_000, n_test=20_000, noise_sd=0.2,
                                    criterion="both"),
        "unbalanced": dict(n_train=120, n_val=120, n_test=20_000, noise_sd=0.3),
        "spatial": dict(n_train=200, n_val=200, n_test=2_000, noise_sd=0.1, noiseless_test=True),
        "fractional_ablation": dict(n_train=200, n_val=200, n_test=2_000, noise_sd=0.1,
                                    noiseless_test=True,
                                    methods=("shaky_prepend", "fractional_shaky_prepend")),
    }
    if scenario not in base:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return ScenarioConfig(scenario=scenario, **{**base[scenario], **overrides})


def scenario_family(cfg: ScenarioConfig) -> GroupFamily:
    if cfg.scenario == "unbalanced":
        return unbalanced_groups()
    if cfg.scenario == "criterion_selection":
        return criterion_groups()
    return interval_grid_groups()


def scenario_target(cfg: ScenarioConfig) -> StepTarget:
    default = {"unbalanced": UNBALANCED_TARGET, "criterion_selection": CRITERION_TARGET}.get(
        cfg.scenario, SPATIAL_TARGET)
    if cfg.target_breaks is None and cfg.target_values is None:
        return default
    return StepTarget(tuple(cfg.target_breaks if cfg.target_breaks is not None else default.breaks),
                      tuple(cfg.target_values if cfg.target_values is not None else default.values))


def scenario_hypotheses(cfg: ScenarioConfig) -> HypothesisClass:
    vals = scenario_target(cfg).values
    lo = math.floor(min(vals) / cfg.hyp_step) * cfg.hyp_step
    hi = math.ceil(max(vals) / cfg.hyp_step) * cfg.hyp_step
    return HypothesisClass.constant_grid(lo, hi, cfg.hyp_step)


def generate(cfg: ScenarioConfig, n: int, seed, noise_sd: Optional[float] = None) -> Dataset:
    sd = cfg.noise_sd if noise_sd is None else noise_sd
    target = scenario_target(cfg)
    if cfg.scenario == "unbalanced":
        return gen_unbalanced(n, seed, sd, target)[0]
    if cfg.scenario == "criterion_selection":
        return gen_criterion(n, seed, sd, target)[0]
    return gen_spatial(n, sd, seed, target)


def run_seeds(base_seed: int, run: int) -> dict:
    """Per-run seeds; the test set seed lives in a separate stream."""
    ss = np.random.SeedSequence([base_seed, run])
    train, val, learner = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    return {"train": train, "val": val, "learner": learner}


def holdout_seed(base_seed: int) -> int:
    return int(np.random.SeedSequence([base_seed, 2**31 - 1, 7]).generate_state(1)[0])


def holdout_set(cfg: ScenarioConfig) -> Dataset:
    return generate(cfg, cfg.n_test, holdout_seed(cfg.seed), 0.0 if cfg.noiseless_test else None)


@dataclass
class ExperimentResult:
    config: ScenarioConfig
    rows: list
    aggregates: dict

    def method_rows(self, method: str, criterion: Optional[str] = None) -> list:
        return [r for r in self.rows if r["method"] == method
                and (criterion is None or r["criterion"] == criterion)]


CSV_FIELDS = ("run_id", "method", "seed", "n", "lambda", "sigma", "eta", "criterion",
              "total_loss", "worst_group_loss", "worst_group_id", "num_updates", "wall_ms")


def aggregate(rows: Sequence[dict], metrics=("total_loss", "worst_group_loss", "worst_group_excess")) -> dict:
    """Mean and standard error per (method, criterion), rows sorted by run id first."""
    out = {}
    keys = sorted({(r["method"], r["criterion"]) for r in rows})
    for key in keys:
        sel = sorted((r for r in rows if (r["method"], r["criterion"]) == key), key=lambda r: r["run_id"])
        entry = {"runs": len(sel)}
        for m in metrics:
            v = np.array([r[m] for r in sel if m in r], dtype=float)
            if v.size == 0:
                continue
            entry[m] = float(v.mean())
            entry[m + "_se"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out[key] = entry
    return out


def _recipe_hypers(cfg: ScenarioConfig, n: int, family, hclass) -> dict:
    params = recipe_shaky(n, len(family), len(hclass), cfg.recipe_beta)
    return {"lam": [params.lam], "sigma": [params.sigma]}


def run_cell(cfg: ScenarioConfig, method: str, run: int, criterion: str) -> dict:
    family, hclass, loss = scenario_family(cfg), scenario_hypotheses(cfg), cfg.loss
    seeds = run_seeds(cfg.seed, run)
    train = generate(cfg, cfg.n_train, seeds["train"])
    val = generate(cfg, cfg.n_val, seeds["val"])
    test = holdout_set(cfg)
    grid = cfg.grid_for(method)
    if cfg.recipe_beta is not None and method in ("shaky_prepend", "fractional_shaky_prepend"):
        grid = {**_recipe_hypers(cfg, cfg.n_train, family, hclass),
                **({"eta": grid["eta"]} if "eta" in grid else {})}
    t0 = time.perf_counter()
    try:
        tr = tune(train, val, method, grid, criterion, loss, family, hclass, seed=seeds["learner"])
    except Exception as exc:
        raise ExperimentError(f"{method} run {run}: {exc}") from exc
    wall_ms = (time.perf_counter() - t0) * 1000
    ev = evaluate(tr.predictor, test, family, loss)
    exc_ev = evaluate(tr.predictor, test, family, loss, baseline=best_in_class(test, family, hclass, loss))
    cfg_used = learner_config(tr.best, seeds["learner"])
    return {
        "run_id": run, "method": method, "seed": seeds["learner"], "n": cfg.n_train,
        "lambda": cfg_used.lam if method != "sleeping_expert" else None,
        "sigma": cfg_used.resolve_sigma(cfg.n_train) if "shaky" in method else 0.0,
        "eta": cfg_used.eta, "criterion": criterion,
        "total_loss": ev.total_loss, "worst_group_loss": ev.worst_group_loss,
        "worst_group_id": ev.worst_group_id, "num_updates": tr.trace.num_updates,
        "wall_ms": wall_ms, "worst_group_excess": exc_ev.worst_group_loss,
        "hypers": dict(tr.best), "undefined_groups": ev.undefined_groups,
        "learning_rate": tr.best.get("learning_rate"),
    }


def _run_cell_args(args):
    return run_cell(*args)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MULTIGROUP_THREADS", "1")))
    except ValueError:
        return 1


def run_scenario(cfg: ScenarioConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Run every (method, run, criterion) cell and aggregate mean +- standard error.

    Cells are independent and may run in worker processes; rows are sorted by
    (criterion, method, run) before aggregation so the result does not depend
    on scheduling.
    """
    workers = default_workers() if workers is None else workers
    cells = [(cfg, m, r, c) for c in cfg.criteria for m in cfg.methods for r in range(cfg.runs)]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_cell_args, cells))
    else:
        rows = [run_cell(*c) for c in cells]
    rows.sort(key=lambda r: (r["criterion"], cfg.methods.index(r["method"]), r["run_id"]))
    return ExperimentResult(cfg, rows, aggregate(rows))


# ---------------------------------------------------------------------------
# privacy audit setup


@dataclass
class AuditSetup:
    pair: tuple
    family: GroupFamily
    hclass: HypothesisClass
    loss: BoundedLoss
    params: object
    lam: float
    max_updates: Optional[int] = None

    def __post_init__(self):
        self._problems = {}

    def problem(self, data: Dataset) -> Problem:
        P = self._problems.get(id(data))
        if P is None:
            P = self._problems[id(data)] = Problem(data, self.family, self.hclass, self.loss)
        return P

    @property
    def alpha(self) -> float:
        return max(self.problem(d).alpha for d in self.pair)

    def runner(self, data: Dataset, seed) -> tuple:
        from .learners import shaky_prepend
        _, trace = shaky_prepend(data, self.family, self.hclass, self.loss, self.lam,
                                 self.params.sigma, seed, problem=self.problem(data),
                                 max_updates=self.max_updates)
        return trace.transcript()


def audit_setup(n: int = 8, beta: float = 0.05, seed: int = 0, identical: bool = False,
                lam: Optional[float] = None) -> AuditSetup:
    """Unbalanced-scenario sample and a neighbor that moves one record to the far cell.

    The learner is shaky prepend with the recipe noise scale for ``n``. The
    threshold is the recipe value unless ``lam`` overrides it; an override also
    halts each run after ``ceil(2 alpha / lam)`` crossings, the update budget
    the privacy accounting assumes.
    """
    data, family = gen_unbalanced(n, seed)
    other = data if identical else data.replace(0, [0.95], 0.0)
    hclass = HypothesisClass.constant_grid(0.3, 0.8, 0.1)
    params = recipe_shaky(n, len(family), len(hclass), beta)
    setup = AuditSetup((data, other), family, hclass, BoundedLoss("squared"), params,
                       params.lam if lam is None else lam)
    if lam is not None:
        setup.max_updates = math.ceil(2 * setup.alpha / lam)
    return setup


def config_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def pooled_se(a: dict, b: dict, metric: str) -> float:
    return math.sqrt(a[metric + "_se"] ** 2 + b[metric + "_se"] ** 2)


__all__ = [name for name in dir() if not name.startswith("_")]
