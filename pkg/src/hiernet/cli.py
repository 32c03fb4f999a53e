"""Command line entry point.

Subcommands::

    hiernet run CONFIG [--out DIR] [--<key> VALUE ...]
    hiernet rate AGGREGATE.csv [...]
    hiernet diag WEIGHTS.json DATA.csv
    hiernet dataset TARGET OUT.csv

The run configuration is a flat ``key = value`` text file; ``#`` starts a
comment and lists are comma separated.  Every key can also be given as a
flag (``star_arch`` becomes ``--star-arch``), flags win over the file.

Exit codes: 0 success, 1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .diagnostics import c_opt, layer_constants, stability_constant
from .errors import AlreadyOptimalError, ConfigError, HiernetError, NumericDivergence
from .experiments import (
    ExperimentSpec,
    build_dataset,
    fit_rate,
    read_rows,
    run_experiment,
)
from .growth import GrowthConfig
from .loss import LossSpec, Objective, read_csv, write_csv
from .net import Architecture, load, param_count, split_final_layer
from .optim import OptimConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("hiernet")


# config values ------------------------------------------------------------------------


def _opt(conv):
    def f(text):
        return None if text.strip().lower() in ("", "none", "null") else conv(text)

    return f


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


# key -> (converter, owner); owner is the dataclass the key configures
KEYS = {
    "target": (str, "spec"),
    "n": (_opt(int), "spec"),
    "sampling": (_opt(str), "spec"),
    "data_seed": (int, "spec"),
    "seeds": (_ints, "spec"),
    "modes": (_strs, "spec"),
    "delta_relu": (float, "spec"),
    "start_arch": (_opt(_ints), "spec"),
    "rounds": (int, "spec"),
    "round_epochs": (int, "spec"),
    "max_params": (_opt(int), "spec"),
    "partial_depth": (_opt(int), "spec"),
    "direct_widths": (_ints, "spec"),
    "direct_epochs": (int, "spec"),
    "gen_samples": (int, "spec"),
    "csv_path": (_opt(str), "spec"),
    "planted_arch": (_ints, "spec"),
    "star_arch": (_ints, "growth"),
    "kappa": (float, "growth"),
    "l_max": (int, "growth"),
    "search_restarts": (int, "growth"),
    "search_ascent_steps": (int, "growth"),
    "search_lr": (float, "growth"),
    "step_rule": (str, "growth"),
    "c_opt_exit": (float, "growth"),
    "assumed_L": (float, "growth"),
    "assumed_size_ratio": (float, "growth"),
    "learning_rate": (float, "optim"),
    "adam_beta1": (float, "optim"),
    "adam_beta2": (float, "optim"),
    "epsilon": (float, "optim"),
    "stall_window": (int, "optim"),
    "stall_rel_tol": (float, "optim"),
    "grad_tol": (float, "optim"),
    "method": (str, "optim"),
    "batch_size": (_opt(int), "optim"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> string`` pairs of a flat config file."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def spec_from_settings(settings: dict) -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from ``key -> string`` settings."""
    parts = {"spec": {}, "growth": {}, "optim": {}}
    for key, text in settings.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        conv, owner = KEYS[key]
        try:
            parts[owner][key] = conv(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    try:
        optim = OptimConfig(**parts["optim"])
        spec = ExperimentSpec(optim=optim, **parts["spec"])
        if parts["growth"]:
            # fill in target-dependent defaults, then apply the overrides
            spec = spec.with_(growth=spec.resolved_growth().with_(**parts["growth"]))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def load_spec(path, overrides: dict | None = None) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    settings = parse_config_text(text, str(path))
    settings.update(overrides or {})
    return spec_from_settings(settings)


# subcommands ------------------------------------------------------------------------------


def _cmd_run(args) -> int:
    overrides = {k: v for k, v in vars(args).items() if k in KEYS and v is not None}
    spec = load_spec(args.config, overrides)
    result = run_experiment(spec, args.out, workers=args.workers)
    for mode, rows in result.aggregates.items():
        key = "round" if mode == "hierarchical" else "width"
        print(f"{mode}: {len(rows)} aggregate rows")
        for r in rows:
            print(f"  {key}={r[key]:>4}  params={r['params']:>7.0f}  error={r['error']:.4e}")
        if mode == "hierarchical":
            try:
                slope, _, r2 = fit_rate(rows)
                print(f"  rate slope {slope:.3f} (r^2 {r2:.3f})")
            except HiernetError:
                pass
    print(f"wrote {args.out}")
    return EXIT_NUMERIC if result.failed else EXIT_OK


def _cmd_rate(args) -> int:
    for path in args.aggregates:
        rows = read_rows(path)[args.skip:]
        slope, intercept, r2 = fit_rate(rows)
        print(f"{path}: slope {slope:.4f} intercept {intercept:.4f} r^2 {r2:.4f} ({len(rows)} points)")
    return EXIT_OK


def _cmd_diag(args) -> int:
    weights, act = load(args.weights)
    ts = read_csv(args.data)
    spec = LossSpec(activation=act)
    obj = Objective(ts, spec)
    r = ts.responses - obj.responses(weights)
    L = float((ts.point_weights * r * r).sum())
    print(f"architecture {weights.arch.widths}  params {param_count(weights.arch)}")
    print(f"loss {L:.6e}  error {math.sqrt(L):.6e}")
    star = tuple(args.star_arch) if args.star_arch else (
        (weights.arch.input_width,) + (3,) * (weights.depth) + (1,)
    )
    cfg = GrowthConfig(star_arch=Architecture(star), search_restarts=args.restarts)
    try:
        rep = c_opt(weights, ts, spec, cfg, seed=args.seed, objective=obj)
        print(f"c_opt {rep.c_opt:.6f}  (objective {rep.objective_value:.6e}, restart "
              f"{rep.restart_index}, ascent step {rep.ascent_iterations})")
        for a, bound in rep.size_ratio_bounds.items():
            print(f"  assumed L={a:g}: size ratio bound {bound:.4g}")
    except AlreadyOptimalError:
        print("c_opt undefined: loss is zero")
    st = stability_constant(split_final_layer(weights, 1), ts, spec, whole=weights)
    print(f"stability L {st.l_constant:.6f} over {st.part_count} parts "
          f"(size condition {'holds' if st.size_condition else 'violated'})")
    c_stab, c_w = layer_constants(weights, ts, act)
    print(f"C_stab {c_stab:.6e}  C_W {c_w:.6e}")
    return EXIT_OK


def _cmd_dataset(args) -> int:
    spec = ExperimentSpec(target=args.target, n=args.n, sampling=args.sampling,
                          data_seed=args.data_seed, csv_path=None)
    ts = build_dataset(spec)
    write_csv(ts, args.out, include_gamma=not args.no_gamma)
    print(f"wrote {ts.n} samples of {args.target} to {args.out}")
    return EXIT_OK


def _defaults() -> dict:
    spec, growth, optim = ExperimentSpec(), GrowthConfig(), OptimConfig()
    out = {}
    for key, (_, owner) in KEYS.items():
        obj = {"spec": spec, "growth": growth, "optim": optim}[owner]
        v = getattr(obj, key)
        if isinstance(v, Architecture):
            v = v.widths
        if key in ("n", "sampling", "start_arch", "partial_depth", "star_arch"):
            v = "by target"
        out[key] = ",".join(map(str, v)) if isinstance(v, tuple) else v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiernet", description="Hierarchical network growth experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config", help="flat key = value config file")
    run.add_argument("--out", default="hiernet-out", help="output directory (default %(default)s)")
    run.add_argument("--workers", type=int, default=1, help="parallel cells (default 1)")
    defaults = _defaults()
    for key in KEYS:
        run.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                         help=f"overrides the config file (default {defaults[key]})")
    run.set_defaults(func=_cmd_run)

    rate = sub.add_parser("rate", help="fit log-log error rates from aggregate CSVs")
    rate.add_argument("aggregates", nargs="+")
    rate.add_argument("--skip", type=int, default=0, help="drop the first SKIP rows before fitting")
    rate.set_defaults(func=_cmd_rate)

    diag = sub.add_parser("diag", help="diagnostics of a saved network on a dataset")
    diag.add_argument("weights", help="weights file written by hiernet.net.save")
    diag.add_argument("data", help="dataset CSV")
    diag.add_argument("--star-arch", type=_ints, default=None, help="extension architecture, e.g. 2,3,1")
    diag.add_argument("--restarts", type=int, default=64)
    diag.add_argument("--seed", type=int, default=0)
    diag.set_defaults(func=_cmd_diag)

    ds = sub.add_parser("dataset", help="write a benchmark dataset as CSV")
    ds.add_argument("target", choices=("sq2d", "sq3d", "pow23_2d", "sq10d", "planted"))
    ds.add_argument("out")
    ds.add_argument("--n", type=int, default=None)
    ds.add_argument("--sampling", choices=("grid", "uniform"), default=None)
    ds.add_argument("--data-seed", type=int, default=0)
    ds.add_argument("--no-gamma", action="store_true", help="omit the point-weight column")
    ds.set_defaults(func=_cmd_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericDivergence as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
