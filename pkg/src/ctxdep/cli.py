"""Command-line entry point: ``ctxdep <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``, a key-value text file whose keys
are long flag names (``bins = time=20,gps=10``); flags given on the command
line override values from the file. Exit status is 0 on success, 1 on a usage
error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .discretize import DISCRETIZERS, SOURCES, BinningError
from .estimate import DEFAULT_MIN_SAMPLES, DEFAULT_SOURCES, RULES, EstimationError, EstimatorSpec, SourceSpec
from .harness import (APPS, ProtocolError, bins_sweep, default_jobs, evaluate_trace, map_users, prepare,
                      sample_apps_eval, two_fold_eval, write_csv)
from .smartcontext import (COSTLY_SOURCES, SWEEP_HEADER, CostModel, SmartContextError, SweepRow, build_policy,
                           check_submodularity, sweep_targets, temporal_halves, write_sweep_csv)
from .synth import SynthConfig, write_synthetic
from .trace import DEFAULT_VOCAB_CAP, KINDS, TraceError, UsageKind, parse_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DEFAULT_TARGETS = tuple(round(0.05 * i, 2) for i in range(21))


class UsageError(Exception):
    """Bad flags or flag values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    trace: Path | None = None
    kind: UsageKind = UsageKind.APP
    cap: int = DEFAULT_VOCAB_CAP
    sources: dict[str, SourceSpec] = field(default_factory=lambda: dict(DEFAULT_SOURCES))
    rule: str = "bayes"
    responses: int = 1
    min_samples: float = DEFAULT_MIN_SAMPLES
    supervised: bool = False
    auto_depth: int = 0
    costs: dict[str, float] = field(default_factory=dict)
    targets: tuple[float, ...] = DEFAULT_TARGETS
    seed: int = 0
    jobs: int = 1
    out: Path | None = None
    out_dir: Path = Path(".")

    def __post_init__(self) -> None:
        if self.responses < 1:
            raise UsageError("--responses must be >= 1")
        for s, spec in self.sources.items():
            if s not in SOURCES:
                raise UsageError(f"unknown source {s!r}")
            if spec.discretizer not in DISCRETIZERS:
                raise UsageError(f"unknown discretizer {spec.discretizer!r} for {s}")
            if spec.n_bins < 1:
                raise UsageError(f"bin count for {s} must be >= 1")

    def spec(self) -> EstimatorSpec:
        return EstimatorSpec(sources=self.sources, rule=self.rule, supervised=self.supervised,
                             auto_depth=self.auto_depth, min_samples=self.min_samples, seed=self.seed)

    def cost_model(self) -> CostModel:
        return CostModel.default(**self.costs)

    def output(self, default_name: str) -> Path:
        return self.out if self.out is not None else self.out_dir / default_name


def _per_source(items: Sequence[str] | None, cast, flag: str) -> tuple[object | None, dict[str, object]]:
    """Split ``VALUE`` / ``SOURCE=VALUE`` items into a global value and per-source overrides."""
    everywhere, per = None, {}
    for item in items or ():
        for part in str(item).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                if "=" in part:
                    src, val = part.split("=", 1)
                    per[src.strip()] = cast(val.strip())
                else:
                    everywhere = cast(part)
            except ValueError:
                raise UsageError(f"bad {flag} value {part!r}") from None
    return everywhere, per


def _sources(args: argparse.Namespace) -> dict[str, SourceSpec]:
    n_all, n_per = _per_source(args.bins, int, "--bins")
    d_all, d_per = _per_source(args.discretizer, str, "--discretizer")
    chosen = list(DEFAULT_SOURCES)
    if args.sources:
        chosen = [s.strip() for s in args.sources.split(",") if s.strip()]
    for s in (*n_per, *d_per):
        if s not in chosen:
            raise UsageError(f"--bins/--discretizer name source {s!r} which is not in use")
    out = {}
    for s in chosen:
        base = DEFAULT_SOURCES.get(s, SourceSpec("categorical_topn", 10))
        out[s] = SourceSpec(d_per.get(s, d_all or base.discretizer), n_per.get(s, n_all or base.n_bins))
    return out


def _floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad {flag} list {text!r}") from None


def run_config(args: argparse.Namespace) -> RunConfig:
    costs = {}
    if args.gps_cost is not None:
        costs["gps_cost"] = args.gps_cost
    _, cost_per = _per_source(args.cost, float, "--cost")
    for s, c in cost_per.items():
        if s not in COSTLY_SOURCES:
            raise UsageError(f"--cost names {s!r}, not one of {', '.join(COSTLY_SOURCES)}")
        costs[s] = c
    try:
        kind = UsageKind(args.kind)
    except ValueError:
        raise UsageError(f"unknown usage kind {args.kind!r}") from None
    return RunConfig(
        trace=Path(args.trace) if args.trace else None,
        kind=kind,
        cap=args.cap,
        sources=_sources(args),
        rule=args.rule,
        responses=args.responses,
        min_samples=args.min_samples,
        supervised=args.supervised,
        auto_depth=args.auto_depth,
        costs=costs,
        targets=_floats(args.targets, "--targets") if args.targets else DEFAULT_TARGETS,
        seed=args.seed,
        jobs=args.jobs if args.jobs is not None else default_jobs(),
        out=Path(args.out) if args.out else None,
        out_dir=Path(args.out_dir),
    )


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = line.split("=", 1)
        values[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return values


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, estimator: bool = True) -> None:
    p.add_argument("--config", help="key-value file of flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out", help="output file")
    p.add_argument("--out-dir", default=".", help="directory for default-named outputs")
    if not estimator:
        return
    p.add_argument("--trace", required=False, help="JSONL trace file")
    p.add_argument("--kind", default="app", choices=[k.value for k in KINDS])
    p.add_argument("--cap", type=int, default=DEFAULT_VOCAB_CAP, help="vocabulary cap")
    p.add_argument("--sources", help="comma-separated context sources to use")
    p.add_argument("--bins", action="append", help="N or SOURCE=N; repeatable or comma-separated")
    p.add_argument("--discretizer", action="append", help="NAME or SOURCE=NAME; repeatable")
    p.add_argument("--rule", default="bayes", choices=RULES)
    p.add_argument("--responses", type=int, default=1, help="response-set size r")
    p.add_argument("--min-samples", type=float, default=DEFAULT_MIN_SAMPLES)
    p.add_argument("--supervised", action="store_true", help="use supervised binning")
    p.add_argument("--auto-depth", type=int, default=0, help="max prior-usage depth for auto-depth")
    p.add_argument("--gps-cost", type=float, default=None, help="gps energy per read in joules")
    p.add_argument("--cost", action="append", help="SOURCE=JOULES override for a costly source")
    p.add_argument("--targets", help="comma-separated accuracy targets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxdep", description="Context-dependent usage estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic trace and its ground-truth model")
    _common(p, estimator=False)
    p.add_argument("--users", type=int, default=24)
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--lambda", dest="dependency", type=float, default=0.7, help="context dependency strength")
    p.add_argument("--zipf", type=float, default=SynthConfig.zipf_exponent)
    p.add_argument("--situations", type=int, default=SynthConfig.n_situations)
    p.set_defaults(func=cmd_synth)

    commands = {
        "train": (cmd_train, "fit one estimator per user and save the bundles as JSON"),
        "eval": (cmd_eval, "per-user accuracy under LOOCV or two-fold CV"),
        "bins-sweep": (cmd_bins_sweep, "LOOCV accuracy of one source against its bin count"),
        "supervised": (cmd_supervised, "two-fold accuracy of simple against supervised binning"),
        "smartcontext": (cmd_smartcontext, "accuracy/energy sweep of the cost-aware policy"),
        "apps": (cmd_apps, "miss rates of the sample applications against their baselines"),
    }
    for name, (func, help_) in commands.items():
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--protocol", default="loocv", choices=("loocv", "twofold"))
        if name == "bins-sweep":
            p.add_argument("--source", default="time", choices=SOURCES)
            p.add_argument("--bin-counts", default="1,2,3,4,6,8,12,16,24,32,48,64")
        if name == "apps":
            p.add_argument("--apps", default=",".join(APPS), help="comma-separated application names")
    return parser


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, val in values.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = val.lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                defaults[key] = [val]
            else:
                defaults[key] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _load(cfg: RunConfig):
    if cfg.trace is None:
        raise UsageError("--trace is required")
    return parse_trace(cfg.trace)


def _user_events(trace, cfg: RunConfig) -> list[tuple[str, list]]:
    return [(u, trace.events(u, cfg.kind)) for u in trace.user_ids() if len(trace.events(u, cfg.kind)) >= 2]


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(n_users=args.users, scale=args.scale, dependency=args.dependency,
                         zipf_exponent=args.zipf, n_situations=args.situations,
                         n_windows=max(SynthConfig.n_windows, args.situations), seed=args.seed)
    out = Path(args.out) if args.out else Path(args.out_dir) / "trace.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    trace, _ = write_synthetic(config, out)
    n = sum(len(evs) for evs in trace.users.values())
    print(f"wrote {n} events for {len(trace.users)} users to {out}")
    return EXIT_OK


def _train_one(events, cfg: RunConfig) -> dict:
    vocab, kept, _ = prepare(events, cfg.kind, cfg.cap)
    return cfg.spec().fit(kept, vocab).to_dict()


def cmd_train(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    trace = _load(cfg)
    users = _user_events(trace, cfg)
    bundles = map_users(partial(_train_one, cfg=cfg), [evs for _, evs in users], cfg.jobs)
    out = cfg.output("estimators.json")
    out.write_text(json.dumps({"kind": cfg.kind.value, "users": dict(zip([u for u, _ in users], bundles))}))
    print(f"wrote {len(users)} estimators to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    trace = _load(cfg)
    rep = evaluate_trace(trace, cfg.kind, cfg.spec(), cfg.responses, args.protocol, cfg.cap, cfg.jobs)
    rep.to_csv(cfg.output("eval.csv"))
    print(f"mean accuracy {rep.mean!r} over {len(rep.per_user)} users")
    return EXIT_OK


def _sweep_one(events, cfg: RunConfig, source: str, counts: tuple[int, ...]):
    vocab, kept, _ = prepare(events, cfg.kind, cfg.cap)
    disc = cfg.sources.get(source, DEFAULT_SOURCES.get(source, SourceSpec("categorical_topn", 10))).discretizer
    return bins_sweep(kept, vocab, source, counts, min(cfg.responses, vocab.k), disc, cfg.rule, cfg.seed)


def cmd_bins_sweep(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    counts = tuple(int(c) for c in _floats(args.bin_counts, "--bin-counts"))
    if not counts or min(counts) < 1:
        raise UsageError("--bin-counts must list positive integers")
    trace = _load(cfg)
    users = _user_events(trace, cfg)
    sweeps = map_users(partial(_sweep_one, cfg=cfg, source=args.source, counts=counts),
                       [evs for _, evs in users], cfg.jobs)
    rows = []
    for n in counts:
        pts = [p for s in sweeps for p in s if p.bins == n]
        if pts:
            rows.append([n, float(np.mean([p.accuracy for p in pts])),
                         float(np.mean([p.samples_per_bin for p in pts])),
                         float(np.mean([p.flagged for p in pts]))])
    write_csv(cfg.output("bins_sweep.csv"), ["bins", "accuracy", "samples_per_bin", "flagged_frac"], rows)
    for n, acc, spb, flagged in rows:
        print(f"bins={n} accuracy={acc:.4f} samples/bin={spb:.1f}{' (flagged)' if flagged > 0.5 else ''}")
    return EXIT_OK


def _supervised_one(events, cfg: RunConfig) -> tuple[float, float]:
    vocab, kept, _ = prepare(events, cfg.kind, cfg.cap)
    r = min(cfg.responses, vocab.k)
    spec = cfg.spec()
    return two_fold_eval(kept, vocab, spec, r, supervised=False), two_fold_eval(kept, vocab, spec, r, supervised=True)


def cmd_supervised(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    trace = _load(cfg)
    users = _user_events(trace, cfg)
    res = map_users(partial(_supervised_one, cfg=cfg), [evs for _, evs in users], cfg.jobs)
    rows = [[u, s, v] for (u, _), (s, v) in zip(users, res)]
    write_csv(cfg.output("supervised.csv"), ["user", "simple", "supervised"], rows)
    simple, sup = (float(np.mean([r[i] for r in rows])) for i in (1, 2))
    print(f"simple {simple:.4f} supervised {sup:.4f} over {len(rows)} users")
    return EXIT_OK


def _smartcontext_one(events, cfg: RunConfig):
    vocab, kept, _ = prepare(events, cfg.kind, cfg.cap)
    train, test = temporal_halves(kept)
    policy = build_policy(train, vocab, cfg.spec(), cfg.cost_model(), min(cfg.responses, vocab.k))
    try:
        passed = check_submodularity(policy.estimator, temporal_halves(train)[0], policy.r,
                                     cfg.cost_model()).passed
    except SmartContextError:
        passed = False
    return sweep_targets(policy, test, cfg.targets), policy.ranking.order, passed


def cmd_smartcontext(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    if not cfg.targets or any(b < a for a, b in zip(cfg.targets, cfg.targets[1:])):
        raise UsageError("--targets must be a non-empty ascending list")
    trace = _load(cfg)
    users = _user_events(trace, cfg)
    res = map_users(partial(_smartcontext_one, cfg=cfg), [evs for _, evs in users], cfg.jobs)
    rows = []
    for i, t in enumerate(cfg.targets):
        per = [r[0][i] for r in res]
        rows.append(SweepRow(t, float(np.mean([p.acc_hit_rate for p in per])),
                             float(np.mean([p.target_met_frac for p in per])),
                             {s: float(np.mean([p.access_freq.get(s, 0.0) for p in per])) for s in COSTLY_SOURCES},
                             float(np.mean([p.mean_energy_j for p in per]))))
    write_sweep_csv(rows, cfg.output("sweep.csv"))
    print(",".join(SWEEP_HEADER))
    for row in rows:
        print(",".join(f"{v:.4f}" for v in row.as_csv()))
    orders = {}
    for _, order, _ in res:
        orders[" > ".join(order)] = orders.get(" > ".join(order), 0) + 1
    for order, n in sorted(orders.items(), key=lambda kv: -kv[1]):
        print(f"ranking {order}: {n} users")
    print(f"submodularity held for {sum(r[2] for r in res)}/{len(res)} users")
    return EXIT_OK


def _apps_one(trace_events, cfg: RunConfig, apps: tuple[str, ...]) -> dict[str, dict[str, float]]:
    out = {}
    for kind in KINDS:
        sizes = {a: APPS[a][1] for a in apps if APPS[a][0] == kind}
        events = trace_events[kind]
        if not sizes or len(events) < 2:
            continue
        vocab, _, _ = prepare(events, kind, cfg.cap)
        out.update(sample_apps_eval(events, vocab, sizes, cfg.spec()))
    return out


def cmd_apps(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    apps = tuple(a.strip() for a in args.apps.split(",") if a.strip())
    unknown = [a for a in apps if a not in APPS]
    if unknown:
        raise UsageError(f"unknown application(s) {', '.join(unknown)}; choose from {', '.join(APPS)}")
    trace = _load(cfg)
    users = trace.user_ids()
    per_user = map_users(partial(_apps_one, cfg=cfg, apps=apps),
                         [{k: trace.events(u, k) for k in KINDS} for u in users], cfg.jobs)
    header = ["app", "context_aware", "static_topN", "recency", "mru"]
    rows = []
    for app in apps:
        res = [p[app] for p in per_user if app in p]
        if res:
            rows.append([app, *(float(np.mean([x[k] for x in res])) for k in header[1:])])
    write_csv(cfg.output("apps.csv"), header, rows)
    print(",".join(header))
    for row in rows:
        print(",".join([row[0], *(f"{v:.4f}" for v in row[1:])]))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help, --version and argparse errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"ctxdep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, TraceError, BinningError, EstimationError, ProtocolError,
            SmartContextError, ValueError) as exc:
        print(f"ctxdep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
