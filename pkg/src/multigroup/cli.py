"""Command-line front end: ``multigroup {fit,tune,experiment,dp-audit,bounds}``.

Every command writes a ``manifest.txt`` next to its outputs. The manifest is a
flat ``key=value`` file holding the command and every resolved option, so
``multigroup <command> --config manifest.txt`` repeats the run.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import BoundedLoss, Dataset, Group, GroupFamily, HypothesisClass, all_ones
from .dp import audit_prefix_events
from .experiments import (CRITERIA, CSV_FIELDS, SCENARIOS, DEFAULT_GRIDS, audit_setup, generate, preset, run_scenario, run_seeds, scenario_family,
                          scenario_hypotheses, scenario_target, tune)
from .learners import METHODS, LearnerConfig, MaxItersExceeded, fit
from .theory import bound_width, certify_trace, dp_envelope, recipe_group_prepend, recipe_shaky, update_cap

ALIASES = {"shaky": "shaky_prepend", "fractional_shaky": "fractional_shaky_prepend",
           "sleeping": "sleeping_expert"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files and manifests


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, outputs: Sequence) -> Path:
    path = out_dir / "manifest.txt"
    lines = [f"command={command}", f"version={__version__}"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "config", "command"):
            continue
        lines.append(f"{k}={_fmt(v)}")
    lines.append("outputs=" + ",".join(sorted(str(Path(p).name) for p in outputs)))
    path.write_text("\n".join(lines) + "\n")
    return path


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(sub: argparse.ArgumentParser, path) -> None:
    """Turn config values into subparser defaults so explicit flags still win."""
    values = read_config(path)
    for k in ("command", "version", "outputs"):
        values.pop(k, None)
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    actions = {a.dest: a for a in sub._actions}
    unknown = set(values) - set(actions)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    defaults = {}
    for dest, raw in values.items():
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes")
        elif raw == "":
            defaults[dest] = None
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"config key {dest}: {exc}") from None
        action.required = False
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# file formats


def read_dataset(path) -> Dataset:
    """Header CSV with one or more ``x*`` columns and a ``y`` column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise ValueError(f"{path}: missing y column")
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not xcols:
        raise ValueError(f"{path}: no x columns")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return Dataset(body[:, xcols], body[:, header.index("y")])


def write_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" if data.dim > 1 else "x" for j in range(data.dim)] + ["y"])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def read_groups(path) -> GroupFamily:
    """Lines ``id,lo,hi[,dim]``; ids must run 0..G-1 in order."""
    specs = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.lower().startswith("id"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}: bad group line {line!r}")
        gid, lo, hi = int(parts[0]), float(parts[1]), float(parts[2])
        dim = int(parts[3]) if len(parts) == 4 else 0
        if gid != len(specs):
            raise ValueError(f"{path}: group ids must be 0..G-1 in order")
        specs.append((lo, hi, dim))
    if not specs:
        raise ValueError(f"{path}: no groups")
    return GroupFamily.from_intervals(specs)


def write_csv(path, rows: list, fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _hclass_for(data: Dataset, step: float, lo: Optional[float], hi: Optional[float]) -> HypothesisClass:
    lo = math.floor(float(data.y.min()) / step) * step if lo is None else lo
    hi = math.ceil(float(data.y.max()) / step) * step if hi is None else hi
    return HypothesisClass.constant_grid(lo, hi, step)


def _method(name: str) -> str:
    m = ALIASES.get(name, name)
    if m not in METHODS:
        raise UsageError(f"unknown method {name!r}")
    return m


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


TRACE_FIELDS = ("index", "group", "hypothesis", "statistic", "threshold_noise", "crossing_noise",
                "queries", "loss_before", "loss_after")


def _trace_rows(trace) -> list:
    rows = []
    for it in trace.iterations:
        g, h = it.pair if it.pair is not None else ("", "")
        rows.append({"index": it.index, "group": g, "hypothesis": h, "statistic": float(it.statistic),
                     "threshold_noise": float(it.threshold_noise),
                     "crossing_noise": float(it.crossing_noise), "queries": it.queries,
                     "loss_before": float(it.loss_before), "loss_after": float(it.loss_after)})
    return rows


def _dump_predictor(predictor, method: str, path: Path) -> None:
    lines = [f"method={method}"]
    if hasattr(predictor, "updates"):
        lines.append(f"base hypothesis={predictor.base.id} value={predictor.base.name}")
        lines.append("step,eta,group,hypothesis")
        for i, (g, h, eta) in enumerate(predictor.pairs()):
            lines.append(f"{i},{eta!r},{g},{h}")
    else:
        W = predictor.rule_weights.mean(axis=0)
        lines.append(f"fallback hypothesis={predictor.fallback}")
        lines.append("group,hypothesis,mean_weight")
        for (g, h), w in np.ndenumerate(W):
            lines.append(f"{g},{h},{w!r}")
    path.write_text("\n".join(lines) + "\n")


def cmd_fit(args) -> int:
    method = _method(args.method)
    if method != "sleeping_expert" and args.lam is None:
        raise UsageError("--lambda is required for prepend-style methods")
    data = read_dataset(args.data)
    family = read_groups(args.groups) if args.groups else GroupFamily((Group(0, all_ones, "all"),))
    hclass = _hclass_for(data, args.hyp_step, args.hyp_lo, args.hyp_hi)
    loss = BoundedLoss(args.loss, args.loss_scale)
    cfg = LearnerConfig(lam=args.lam if args.lam is not None else float("nan"), sigma=args.sigma,
                        eta=args.eta, epsilon=args.epsilon, delta=args.delta, max_iters=args.max_iters,
                        seed=args.seed, learning_rate=args.learning_rate)
    out = _out(args)
    status = 0
    try:
        predictor, trace = fit(method, data, family, hclass, loss, cfg)
    except MaxItersExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        predictor, trace, status = exc.chain, exc.trace, 1
    outputs = [out / "predictor.txt", out / "trace.csv"]
    _dump_predictor(predictor, method, outputs[0])
    write_csv(outputs[1], _trace_rows(trace), TRACE_FIELDS)
    report = [f"method {method}", f"updates {trace.num_updates}",
              f"training loss {float(loss(predictor.predict(data.X), data.y).mean())!r}"]
    if trace.completed and method in ("group_prepend", "shaky_prepend"):
        report += certify_trace(trace).lines()
    elif trace.completed and method != "sleeping_expert":
        report.append(f"final statistic {trace.final.statistic!r} < lambda {trace.lam!r}")
    outputs.append(out / "certificate.txt")
    outputs[-1].write_text("\n".join(report) + "\n")
    print("\n".join(report))
    outputs.append(write_manifest(out, "fit", args, outputs))
    return status


def _grid_from_args(args, method: str) -> dict:
    grid = {k: list(v) for k, v in DEFAULT_GRIDS[method].items()}
    if args.lambdas and "lam" in grid:
        grid["lam"] = args.lambdas
    if args.etas and "eta" in grid:
        grid["eta"] = args.etas
    if args.learning_rates and "learning_rate" in grid:
        grid["learning_rate"] = args.learning_rates
    return grid


def cmd_tune(args) -> int:
    method = _method(args.method)
    grid = _grid_from_args(args, method)
    if args.data:
        if not args.val_data:
            raise UsageError("--val-data is required with --data")
        train, val = read_dataset(args.data), read_dataset(args.val_data)
        family = read_groups(args.groups) if args.groups else GroupFamily((Group(0, all_ones, "all"),))
        hclass = _hclass_for(train, args.hyp_step, None, None)
        loss = BoundedLoss(args.loss, args.loss_scale)
        seed = args.seed
    else:
        cfg = preset(args.scenario, seed=args.seed, **({"n_train": args.n, "n_val": args.n} if args.n else {}))
        family, hclass, loss = scenario_family(cfg), scenario_hypotheses(cfg), cfg.loss
        seeds = run_seeds(cfg.seed, args.run)
        train, val = generate(cfg, cfg.n_train, seeds["train"]), generate(cfg, cfg.n_val, seeds["val"])
        seed = seeds["learner"]
    res = tune(train, val, method, grid, args.criterion, loss, family, hclass, seed=seed)
    out = _out(args)
    fields = ["index", *grid.keys(), "total_loss", "worst_group_loss", "score", "num_updates"]
    write_csv(out / "tune.csv", res.table, fields)
    print("\t".join(fields))
    for r in res.table:
        mark = " *" if r["index"] == res.best_index else ""
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in fields) + mark)
    print(f"selected {res.best} by {args.criterion}")
    write_manifest(out, "tune", args, [out / "tune.csv"])
    return 0


def cmd_experiment(args) -> int:
    from .plotting import errorbar_svg, fit_svg
    if args.scenario is None:
        raise UsageError(f"a scenario is required: {', '.join(SCENARIOS)}")
    over = {"seed": args.seed, "runs": args.runs}
    if args.n is not None:
        over.update(n_train=args.n, n_val=args.n)
    if args.n_test is not None:
        over["n_test"] = args.n_test
    if args.noise is not None:
        over["noise_sd"] = args.noise
    if args.methods:
        over["methods"] = tuple(_method(m) for m in args.methods)
    if args.criterion:
        over["criterion"] = args.criterion
    if args.recipe_beta is not None:
        over["recipe_beta"] = args.recipe_beta
    cfg = preset(args.scenario, **over)
    result = run_scenario(cfg, workers=args.workers)
    out = _out(args)
    outputs = [out / "results.csv", out / "aggregates.csv"]
    write_csv(outputs[0], result.rows, CSV_FIELDS)
    agg_rows = [{"method": m, "criterion": c, **a} for (m, c), a in result.aggregates.items()]
    agg_fields = ["method", "criterion", "runs", "total_loss", "total_loss_se", "worst_group_loss",
                  "worst_group_loss_se", "worst_group_excess", "worst_group_excess_se"]
    write_csv(outputs[1], agg_rows, agg_fields)
    for metric in ("total_loss", "worst_group_loss"):
        outputs.append(errorbar_svg(result.aggregates, metric, out / f"{metric}.svg",
                                    title=f"{args.scenario}, {cfg.runs} runs"))
    if args.plot_fit:
        family, hclass, loss = scenario_family(cfg), scenario_hypotheses(cfg), cfg.loss
        seeds = run_seeds(cfg.seed, 0)
        train, val = generate(cfg, cfg.n_train, seeds["train"]), generate(cfg, cfg.n_val, seeds["val"])
        curves = {m: tune(train, val, m, cfg.grid_for(m), cfg.criteria[0], loss, family, hclass,
                          seed=seeds["learner"]).predictor for m in cfg.methods}
        outputs.append(fit_svg(curves, scenario_target(cfg), out / "fit.svg", data=train,
                               title=f"{args.scenario}, run 0"))
    print("method\tcriterion\ttotal_loss\tse\tworst_group_loss\tse")
    for r in agg_rows:
        print(f"{r['method']}\t{r['criterion']}\t{r['total_loss']:.6g}\t{r['total_loss_se']:.3g}"
              f"\t{r['worst_group_loss']:.6g}\t{r['worst_group_loss_se']:.3g}")
    write_manifest(out, "experiment", args, outputs)
    return 0


def cmd_dp_audit(args) -> int:
    setup = audit_setup(args.n, args.beta, args.seed, identical=args.identical, lam=args.lam)
    results = audit_prefix_events(setup.runner, setup.pair, args.trials, seed=args.seed,
                                  confidence=args.confidence, min_count=args.min_count,
                                  min_trials=min(args.trials, 10_000))
    p = setup.params
    env = dp_envelope(p.epsilon, setup.alpha, setup.lam)
    out = _out(args)
    rows = [r.row() for r in results]
    fields = list(rows[0]) if rows else ["event"]
    write_csv(out / "audit.csv", rows, fields)
    print(f"epsilon={p.epsilon:.6g} delta={p.delta:.3g} lambda={setup.lam:.6g} sigma={p.sigma:.6g} "
          f"envelope={env:.6g}")
    print("event\tcount_a\tcount_b\tln_ratio\tci_lo\tci_hi\twithin")
    for r in results:
        ok = (r.ln_ratio - r.slack) <= env
        print(f"{r.event}\t{r.count_a}\t{r.count_b}\t{r.ln_ratio:.4g}\t{r.ln_ratio_ci[0]:.4g}"
              f"\t{r.ln_ratio_ci[1]:.4g}\t{ok}")
    write_manifest(out, "dp-audit", args, [out / "audit.csv"])
    return 0


def cmd_bounds(args) -> int:
    p = recipe_shaky(args.n, args.groups, args.hyps, args.beta, simple_lambda=args.simple_lambda)
    lam_gp, env_gp = recipe_group_prepend(args.n, args.groups, args.hyps, args.delta)
    rows = [("shaky epsilon", p.epsilon), ("shaky delta", p.delta), ("shaky lambda", p.lam),
            ("shaky sigma", p.sigma), ("shaky envelope", p.envelope),
            ("shaky update cap (alpha=1)", update_cap(1.0, p.lam)),
            ("group_prepend lambda", lam_gp), ("group_prepend envelope", env_gp)]
    for count in args.counts or [args.n]:
        bw = bound_width(args.n, count, args.groups, args.hyps, args.delta)
        rows.append((f"bound width (count={count})", bw.width))
        rows.append((f"vacuous (count={count})", bw.vacuous))
    out = _out(args)
    write_csv(out / "bounds.csv", [{"quantity": k, "value": v} for k, v in rows], ["quantity", "value"])
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    write_manifest(out, "bounds", args, [out / "bounds.csv"])
    return 0


# ---------------------------------------------------------------------------
# parser


def _floats(s: str) -> list:
    return [float(v) for v in s.split(",") if v.strip()]


def _names(s: str) -> list:
    return [v.strip() for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multigroup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(p, out):
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--out", default=out, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    def data_opts(p):
        p.add_argument("--groups", help="interval groups file (id,lo,hi[,dim])")
        p.add_argument("--loss", choices=("squared", "absolute", "zero_one"), default="squared")
        p.add_argument("--loss-scale", type=float, default=1.0)
        p.add_argument("--hyp-step", type=float, default=0.1)

    p = subs.add_parser("fit", help="fit one learner on a dataset file")
    common(p, "out/fit")
    data_opts(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--learning-rate", type=float, default=1.0)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--hyp-lo", type=float)
    p.add_argument("--hyp-hi", type=float)
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("tune", help="grid-search one learner on a validation set")
    common(p, "out/tune")
    data_opts(p)
    p.add_argument("--method", required=True)
    p.add_argument("--criterion", choices=CRITERIA, default="total_loss")
    p.add_argument("--scenario", choices=SCENARIOS, default="spatial")
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--n", type=int)
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--etas", type=_floats)
    p.add_argument("--learning-rates", type=_floats)
    p.set_defaults(func=cmd_tune)

    p = subs.add_parser("experiment", help="run a scenario preset")
    common(p, "out/experiment")
    p.add_argument("scenario", nargs="?", choices=SCENARIOS)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--n", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--methods", type=_names)
    p.add_argument("--criterion", choices=(*CRITERIA, "both"))
    p.add_argument("--recipe-beta", type=float, help="use the shaky recipe instead of the grid")
    p.add_argument("--workers", type=int, help="worker processes (default MULTIGROUP_THREADS or 1)")
    p.add_argument("--plot-fit", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = subs.add_parser("dp-audit", help="Monte-Carlo privacy audit on neighboring datasets")
    common(p, "out/dp-audit")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--identical", action="store_true", help="audit a dataset against itself")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="threshold override; runs then halt at the 2 alpha / lambda update budget")
    p.set_defaults(func=cmd_dp_audit)

    p = subs.add_parser("bounds", help="theory recipes and bound widths")
    common(p, "out/bounds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--hyps", type=int, required=True)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--counts", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--simple-lambda", action="store_true")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        cfg = _config_path(argv)
        if cfg is not None:
            subs = parser._subparsers._group_actions[0].choices
            names = [t for t in argv if t in subs]
            if not names:
                raise UsageError("--config needs a command")
            _apply_config(subs[names[0]], cfg)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not traced
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
