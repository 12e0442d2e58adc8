"""Command-line entry point: ``popadjust <subcommand> ...``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage error.
Settings for ``run`` may come from a TOML file (``--config``); explicit flags
win over the file, and ``POPADJUST_SEED`` wins over the file's seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, datagen, itc, maic, metrics, nestedloop, simengine, stc
from .errors import PopAdjustError

DEFAULT_SEED = 20210621
DEFAULT_REPS = 1000
DEMO_SEED = 1234
DEMO_SCENARIO = 1
SEED_ENV = "POPADJUST_SEED"
CENSORING_TARGET = 0.35


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed_root: int = DEFAULT_SEED
    n_replicates: int = DEFAULT_REPS
    scenarios: str = "desk"
    filters: dict = field(default_factory=dict)
    workers: int = 1
    out_dir: str = "results"
    variance_method: str = "sandwich"
    n_bootstrap: int = 1000
    recalibrate_censoring: bool = False
    resume: bool = True

    def validate(self):
        if self.n_replicates < 1:
            raise UsageError("--reps must be at least 1")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")
        if self.variance_method not in ("sandwich", "bootstrap"):
            raise UsageError(f"unknown variance method {self.variance_method!r}")
        if self.variance_method == "bootstrap" and self.n_bootstrap < 2:
            raise UsageError("--bootstrap-reps must be at least 2")
        out = Path(self.out_dir)
        probe = out if out.exists() else out.parent if str(out.parent) else Path(".")
        while not probe.exists():
            probe = probe.parent
        if not os.access(probe, os.W_OK) or (out.exists() and not out.is_dir()):
            raise UsageError(f"output directory {self.out_dir} is not writable")


# -- scenario selection ------------------------------------------------------------

FILTER_KEYS = {
    "n_ac": lambda s: str(s.n_ac),
    "prognostic": lambda s: s.labels()["prognostic"],
    "interaction": lambda s: s.labels()["interaction"],
    "correlation": lambda s: s.labels()["correlation"],
    "overlap": lambda s: s.labels()["overlap"],
}


def _parse_ids(text: str) -> set[int]:
    ids = set()
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                ids.update(range(int(a), int(b) + 1))
            else:
                ids.add(int(part))
        except ValueError:
            raise UsageError(f"bad scenario selection {part!r}") from None
    return ids


def select_scenarios(scenarios: str, filters: dict) -> list[simengine.Scenario]:
    """Scenarios named by ``all``, ``desk`` or an id list such as ``1-6,40``,
    narrowed by per-factor level filters."""
    if scenarios == "all":
        grid = simengine.build_grid()
    elif scenarios == "desk":
        grid = simengine.desk_grid()
    else:
        ids = _parse_ids(scenarios)
        grid = simengine.build_grid(lambda s: s.id in ids)
        unknown = ids - {s.id for s in grid}
        if unknown:
            raise UsageError(f"no such scenario id(s): {sorted(unknown)}")
    for key, wanted in filters.items():
        if key not in FILTER_KEYS:
            raise UsageError(f"unknown scenario filter {key!r}")
        values = {str(v).strip() for v in (wanted.split(",") if isinstance(wanted, str)
                                           else wanted)}
        if key == "correlation":
            values = {f"{float(v):g}" for v in values}
        grid = [s for s in grid if FILTER_KEYS[key](s) in values]
    if not grid:
        raise UsageError("scenario selection is empty")
    return grid


def _load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def build_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        raw = _load_config(args.config)
        known = {"seed": "seed_root", "reps": "n_replicates", "scenarios": "scenarios",
                 "workers": "workers", "out": "out_dir", "variance": "variance_method",
                 "bootstrap_reps": "n_bootstrap", "recalibrate_censoring": "recalibrate_censoring",
                 "resume": "resume"}
        for key, value in raw.items():
            if key in known:
                setattr(cfg, known[key], value)
            elif key == "filters" and isinstance(value, dict):
                cfg.filters.update(value)
            else:
                raise UsageError(f"unknown config key {key!r}")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed_root = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    for attr, flag in (("seed_root", "seed"), ("n_replicates", "reps"),
                       ("scenarios", "scenarios"), ("workers", "workers"), ("out_dir", "out"),
                       ("variance_method", "variance"), ("n_bootstrap", "bootstrap_reps")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, attr, value)
    if args.recalibrate_censoring:
        cfg.recalibrate_censoring = True
    if args.no_resume:
        cfg.resume = False
    for key in FILTER_KEYS:
        value = getattr(args, key)
        if value is not None:
            cfg.filters[key] = value
    if isinstance(cfg.seed_root, bool) or not isinstance(cfg.seed_root, int) or cfg.seed_root < 0:
        raise UsageError("seed must be a non-negative integer")
    cfg.validate()
    return cfg


# -- output helpers ----------------------------------------------------------------

def _print_summary(summaries, out=None):
    out = out or sys.stdout
    out.write(f"{'scenario':>8} {'method':<7} {'n':>5} {'bias':>9} {'(mcse)':>8} "
              f"{'stdbias%':>9} {'ese':>7} {'vr':>6} {'cover':>6} {'mse':>8}\n")
    for s in summaries:
        flag = " *" if s.problematic_bias else ""
        out.write(f"{s.scenario_id:>8} {s.method:<7} {s.n_used:>5} {s.bias:>9.4f} "
                  f"{s.bias_mcse:>8.4f} {s.standardized_bias_pct:>9.1f} {s.ese:>7.4f} "
                  f"{s.variability_ratio:>6.3f} {s.coverage:>6.3f} {s.mse:>8.5f}{flag}\n")


def _ci_line(label, est, level=0.95):
    ci = itc.confidence_interval(est, level)
    return (f"{label:<42} {est.value:>9.4f} {est.se:>8.4f}   "
            f"[{ci.lower:.4f}, {ci.upper:.4f}]")


def _aligned_targets(ald, ald_names, ipd):
    """Reorder the summary's covariate means to the IPD column order."""
    if not ald_names:
        return ald
    lookup = dict(zip(ald_names, ald.covariate_means))
    missing = [nm for nm in ipd.names if nm not in lookup]
    if missing:
        raise PopAdjustError(f"summary has no mean for IPD column(s) {missing}")
    return datagen.AldSummary(tuple(lookup[nm] for nm in ipd.names), ald.effect)


def _em_indices(text, ipd):
    cols = []
    for nm in text.split(","):
        nm = nm.strip()
        if nm not in ipd.names:
            raise UsageError(f"effect modifier {nm!r} is not an IPD column {ipd.names}")
        cols.append(ipd.names.index(nm))
    return tuple(cols)


# -- subcommands -------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = build_run_config(args)
    grid = select_scenarios(cfg.scenarios, cfg.filters)
    rate = datagen.DEFAULT_CENSORING_RATE
    if cfg.recalibrate_censoring:
        rate = datagen.calibrate_censoring_rate(
            CENSORING_TARGET, grid[0].outcome_params(), rng=simengine.stream(cfg.seed_root, 0, 0, 3))
        print(f"calibrated censoring rate: {rate:.6f}")
    out = Path(cfg.out_dir)
    print(f"running {len(grid)} scenario(s) x {cfg.n_replicates} replicates, "
          f"seed {cfg.seed_root}, {cfg.workers} worker(s) -> {out}")
    results = simengine.run_study(
        grid, cfg.n_replicates, cfg.seed_root, workers=cfg.workers, out_dir=out,
        resume=cfg.resume, censoring_rate=rate, variance_method=cfg.variance_method,
        n_bootstrap=cfg.n_bootstrap)
    summaries = metrics.summarize(results)
    metrics.write_summary(summaries, out / "summary.csv")
    _print_summary(summaries)
    report = simengine.failure_report(results)
    failures = {m: {k: v for k, v in c.items() if k != "ok" and v} for m, c in report.items()}
    failures = {m: c for m, c in failures.items() if c}
    print("failures: " + (json.dumps(failures) if failures else "none"))
    return 0


def cmd_summarize(args) -> int:
    results = simengine.read_results(args.results)
    summaries = metrics.summarize(results)
    out = args.out or str(Path(args.results).with_name("summary.csv"))
    metrics.write_summary(summaries, out)
    _print_summary(summaries)
    return 0


def cmd_plot(args) -> int:
    summaries = metrics.read_summary(args.summary)
    header, rows = nestedloop.nested_loop_data(summaries, args.metric)
    prefix = args.out_prefix or str(Path(args.summary).with_name(f"nested_loop_{args.metric}"))
    nestedloop.write_plot_csv(header, rows, prefix + ".csv")
    Path(prefix + ".svg").write_text(nestedloop.render_svg(header, rows, args.metric))
    print(f"wrote {prefix}.csv and {prefix}.svg ({len(rows)} scenarios)")
    return 0


def _analyze(method, ipd, ald, ems, *, level=0.95, variance="sandwich", n_bootstrap=1000,
             seed=DEMO_SEED, out=None):
    """Run one method and print its report; returns the A-vs-B estimate and,
    for MAIC, the weight solution."""
    out = out or sys.stdout
    sol = None
    if method == "maic":
        res = maic.maic_estimate(ipd, ald, ems, variance, n_bootstrap,
                                 rng=simengine.stream(seed, 0, 0, simengine.ROLE_BOOTSTRAP))
        ac, sol = res.estimate, res.weights
        label = f"MAIC marginal log HR (A vs C, {variance})"
    elif method == "stc":
        spec = stc.StcModelSpec(tuple(range(ipd.covariates.shape[1])), ems)
        ac = stc.stc_estimate(ipd, ald, spec).estimate
        label = stc.ESTIMATE_LABEL
    else:
        ac = itc.unadjusted_estimate(ipd)
        label = "unadjusted log HR (A vs C)"
    ab = itc.indirect_comparison(ac, ald.effect)
    out.write(f"[{method}]\n{'':<42} {'estimate':>9} {'se':>8}   {int(level * 100)}% CI\n")
    out.write(_ci_line(label, ac, level) + "\n")
    out.write(_ci_line("comparator log HR (B vs C)", ald.effect, level) + "\n")
    out.write(_ci_line("indirect log HR (A vs B)", ab, level) + "\n")
    if sol is not None:
        out.write(f"ESS {sol.ess:.2f} of {len(ipd)}; alpha1 = "
                  + ", ".join(f"{a:.6f}" for a in sol.alpha1) + "\n")
        out.write(f"{'covariate':<10} {'unweighted':>12} {'weighted':>14} {'target':>14}\n")
        for j, raw, wtd, tgt in maic.balance_table(ipd, ald, sol.weights, ems):
            out.write(f"{ipd.names[j]:<10} {raw:>12.6f} {wtd:>14.10f} {tgt:>14.10f}\n")
    return ab, sol


def cmd_analyze(args) -> int:
    ipd = datagen.read_ipd_csv(args.ipd)
    ald_raw, names = datagen.read_ald(args.ald)
    ald = _aligned_targets(ald_raw, names, ipd)
    ems = _em_indices(args.effect_modifiers, ipd)
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    _analyze(args.method, ipd, ald, ems, level=args.level, variance=args.variance,
             n_bootstrap=args.bootstrap_reps, seed=args.seed)
    return 0


def cmd_demo(args) -> int:
    scenario = simengine.build_grid(lambda s: s.id == DEMO_SCENARIO)[0]
    ac, bc_ipd = simengine.simulate_replicate_data(scenario, 1, DEMO_SEED)
    bc = datagen.aggregate_trial(bc_ipd)
    print(f"demo: scenario {scenario.id} ({', '.join(f'{k}={v}' for k, v in scenario.labels().items())}), "
          f"seed {DEMO_SEED}")
    print(f"AC trial: {len(ac)} subjects, {int(ac.event.sum())} events; "
          f"BC trial summary from {len(bc_ipd)} subjects")
    if args.write_data:
        d = Path(args.write_data)
        d.mkdir(parents=True, exist_ok=True)
        datagen.write_ipd_csv(ac, d / "ac_ipd.csv")
        datagen.write_ald(bc, d / "bc_ald.txt")
        print(f"wrote {d / 'ac_ipd.csv'} and {d / 'bc_ald.txt'}")
    ems = simengine.EFFECT_MODIFIERS
    table = []
    for method in simengine.METHODS:
        print()
        ab, sol = _analyze(method, ac, bc, ems)
        table.append((method, ab))
    print(f"\nA vs B (true value {simengine.TRUE_EFFECT:g})")
    print(f"{'method':<8} {'estimate':>9} {'se':>8}   95% CI")
    for method, ab in table:
        ci = itc.confidence_interval(ab)
        print(f"{method:<8} {ab.value:>9.4f} {ab.se:>8.4f}   [{ci.lower:.4f}, {ci.upper:.4f}]")
    return 0


def cmd_calibrate(args) -> int:
    scenario = simengine.build_grid(lambda s: s.id == DEMO_SCENARIO)[0]
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, DEFAULT_SEED))
    rate = datagen.calibrate_censoring_rate(args.target, scenario.outcome_params(),
                                            n_probe=args.n_probe,
                                            rng=simengine.stream(seed, 0, 0, 3))
    print(f"censoring rate for {args.target:g} baseline active-arm censoring: {rate:.6f}")
    return 0


# -- parser ------------------------------------------------------------------------

def _int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popadjust",
                                description="Population-adjusted indirect comparisons "
                                            "for survival outcomes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the simulation study")
    r.add_argument("--config", help="TOML file with run settings")
    r.add_argument("--scenarios", help="'desk' (default), 'all' or ids such as 1-6,40")
    r.add_argument("--reps", type=_int, help=f"replicates per scenario "
                                                      f"(default {DEFAULT_REPS})")
    r.add_argument("--seed", type=_int, help=f"seed root (default {DEFAULT_SEED})")
    r.add_argument("--workers", type=_int, help="worker processes (default 1)")
    r.add_argument("--out", help="output directory (default ./results)")
    r.add_argument("--variance", choices=("sandwich", "bootstrap"), help="MAIC variance")
    r.add_argument("--bootstrap-reps", type=_int, help="MAIC bootstrap resamples")
    r.add_argument("--recalibrate-censoring", action="store_true",
                   help=f"calibrate the censoring rate to {CENSORING_TARGET:g} instead of "
                        f"using {datagen.DEFAULT_CENSORING_RATE}")
    r.add_argument("--no-resume", action="store_true", help="ignore existing partial results")
    r.add_argument("--n-ac", dest="n_ac", help="filter: AC sample sizes, e.g. 150,600")
    r.add_argument("--prognostic", help="filter: moderate,strong,very_strong")
    r.add_argument("--interaction", help="filter: moderate,strong,very_strong")
    r.add_argument("--correlation", help="filter: 0,0.35")
    r.add_argument("--overlap", help="filter: strong,moderate,poor")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", help="performance measures from a replicates CSV")
    s.add_argument("results")
    s.add_argument("--out", help="summary CSV (default: summary.csv next to the input)")
    s.set_defaults(func=cmd_summarize)

    pl = sub.add_parser("plot", help="nested-loop plot data and SVG")
    pl.add_argument("summary")
    pl.add_argument("--metric", required=True, choices=sorted(nestedloop.METRICS))
    pl.add_argument("--out-prefix", help="path prefix for the .csv and .svg outputs")
    pl.set_defaults(func=cmd_plot)

    a = sub.add_parser("analyze", help="analyze user-supplied IPD and comparator summary")
    a.add_argument("method", choices=simengine.METHODS)
    a.add_argument("--ipd", required=True, help="IPD CSV (x1..xK,trt,time,event)")
    a.add_argument("--ald", required=True, help="comparator summary (key=value)")
    a.add_argument("--effect-modifiers", default="x1,x2", help="comma-separated columns")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--variance", choices=("sandwich", "bootstrap"), default="sandwich")
    a.add_argument("--bootstrap-reps", type=_int, default=1000)
    a.add_argument("--seed", type=_int, default=DEMO_SEED)
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("demo", help="worked analysis of one simulated dataset")
    d.add_argument("--write-data", metavar="DIR", help="also save the demo IPD and summary")
    d.set_defaults(func=cmd_demo)

    c = sub.add_parser("calibrate-censoring", help="solve for the censoring rate")
    c.add_argument("--target", type=float, default=CENSORING_TARGET)
    c.add_argument("--n-probe", type=_int, default=1_000_000)
    c.add_argument("--seed", type=_int)
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (PopAdjustError, OSError, ValueError) as exc:
        print(f"popadjust: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is still a runtime failure
        print(f"popadjust: unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
