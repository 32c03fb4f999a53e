"""Experiment harness: benchmark datasets, hierarchical vs direct runs, CSV traces.

Layout of an output directory::

    runs/<config-hash>.csv      one trace per (mode, seed[, width]) cell
    index.csv                   one line per run with its metadata
    aggregate_hierarchical.csv  per-round medians over seeds
    aggregate_direct.csv        per-width medians over seeds

Trace columns are fixed (see ``TRACE_COLUMNS``).  Every column except
``wall_ms`` is a deterministic function of the spec and the seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import generalization_estimate, stability_constant
from .errors import (
    ConfigError,
    DegenerateInputError,
    HiernetError,
    InstabilityError,
    NumericDivergence,
)
from .growth import GrowthConfig, adaptive_train, wstar_search
from .loss import LossSpec, Objective, TrainingSet, inner, read_csv
from .net import Activation, Architecture, WeightSet, param_count, realize_batch, split_final_layer
from .optim import OptimConfig, train

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "round",
    "wall_ms",
    "params",
    "loss",
    "error",
    "c_opt",
    "stability_L",
    "gen_estimate",
    "extensions",
    "epochs",
)
MODES = ("hierarchical", "direct")


# targets -----------------------------------------------------------------------


def _sq(k):
    def f(X):
        s = np.asarray(X, dtype=np.float64).sum(axis=1)
        return s * s / k

    return f


def _pow23(X):
    s = np.asarray(X, dtype=np.float64).sum(axis=1)
    return np.cbrt(s * s)


# id -> (input width, closed form)
TARGETS = {
    "sq2d": (2, _sq(2)),
    "sq3d": (3, _sq(3)),
    "pow23_2d": (2, _pow23),
    "sq10d": (10, _sq(10)),
}
TARGET_IDS = tuple(TARGETS) + ("planted", "csv")


def planted_network(arch, seed: int, delta_relu: float = 0.01) -> WeightSet:
    """Random network whose realization serves as an exactly representable target."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x91A7]))
    return WeightSet.random(arch, rng, scale=1.0)


# experiment spec ------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    target: str = "sq2d"
    # sample count; None picks 1024 on a grid in 2-D, 1000 in 3-D, 2048 uniform otherwise
    n: int | None = None
    sampling: str | None = None
    data_seed: int = 0
    seeds: tuple = (0,)
    modes: tuple = ("hierarchical",)
    growth: GrowthConfig | None = None
    optim: OptimConfig = OptimConfig()
    delta_relu: float = 0.01
    # hierarchical: starting architecture, outer rounds, epochs per round
    start_arch: tuple | None = None
    rounds: int = 100
    round_epochs: int = 2000
    max_params: int | None = None
    # grow only the final partial_depth + 1 layers (None grows the whole network)
    partial_depth: int | None = None
    # direct: last hidden width replaced by each entry, trained for direct_epochs
    direct_widths: tuple = (10, 20, 40)
    direct_epochs: int = 400_000
    gen_samples: int = 4096
    csv_path: str | None = None
    planted_arch: tuple = (2, 3, 1)

    def __post_init__(self):
        if self.target not in TARGET_IDS:
            raise ConfigError(f"unknown target {self.target!r}; choose from {TARGET_IDS}")
        if self.target == "csv" and not self.csv_path:
            raise ConfigError("target 'csv' needs csv_path")
        if self.sampling not in (None, "grid", "uniform"):
            raise ConfigError(f"sampling must be 'grid' or 'uniform', got {self.sampling!r}")
        if self.n is not None and self.n < 1:
            raise ConfigError("n must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.rounds < 0 or self.round_epochs < 0 or self.direct_epochs < 0:
            raise ConfigError("rounds and epoch budgets must be non-negative")
        if any(w < 1 for w in self.direct_widths):
            raise ConfigError("direct widths must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "direct_widths", tuple(int(w) for w in self.direct_widths))
        object.__setattr__(self, "planted_arch", tuple(int(w) for w in self.planted_arch))
        try:
            start = self.resolved_start_arch()
            if self.partial_depth is not None and not 1 <= self.partial_depth < start.depth:
                raise ConfigError(
                    f"partial_depth must lie in [1, {start.depth - 1}] for {start.widths}"
                )
            self.resolved_growth()
        except (ValueError, HiernetError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    # defaults that depend on the target ------------------------------------------

    def input_width(self) -> int:
        if self.target in TARGETS:
            return TARGETS[self.target][0]
        if self.target == "planted":
            return self.planted_arch[0]
        with open(self.csv_path) as fh:
            header = fh.readline().strip().split(",")
        return sum(1 for h in header if h.strip().startswith("x_"))

    def resolved_sampling(self) -> str:
        if self.sampling is not None:
            return self.sampling
        k = self.input_width()
        if k > 3:
            return "uniform"
        # an explicit sample count that is not a k-th power cannot form a grid
        if self.n is not None and round(self.n ** (1.0 / k)) ** k != self.n:
            return "uniform"
        return "grid"

    def resolved_n(self) -> int:
        if self.n is not None:
            return self.n
        k = self.input_width()
        return {2: 1024, 3: 1000}.get(k, 2048) if self.resolved_sampling() == "grid" else 2048

    def resolved_start_arch(self) -> Architecture:
        if self.start_arch is not None:
            return Architecture(tuple(self.start_arch))
        k = self.input_width()
        return Architecture((k, 2, 2, 1) if k >= 10 else (k, 2, 1))

    def resolved_partial_depth(self) -> int | None:
        if self.partial_depth is not None:
            return self.partial_depth
        if self.input_width() >= 10 and self.resolved_start_arch().depth >= 2:
            return 1
        return None

    def resolved_growth(self) -> GrowthConfig:
        if self.growth is not None:
            return self.growth
        start = self.resolved_start_arch()
        pd = self.resolved_partial_depth()
        host = start.widths if pd is None else start.widths[start.depth - pd :]
        star = (host[0],) + (3,) * (len(host) - 2) + (1,)
        return GrowthConfig(star_arch=Architecture(star))

    def hash_payload(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: (list(x.widths) if isinstance(x, Architecture) else x)
                     for k, x in dataclasses.asdict(v).items()}
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        d["growth"] = {
            k: (list(v.widths) if isinstance(v, Architecture) else v)
            for k, v in vars(self.resolved_growth()).items()
        }
        return d

    def with_(self, **kw) -> "ExperimentSpec":
        return dataclasses.replace(self, **kw)


def _config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# datasets --------------------------------------------------------------------------


def sample_inputs(k: int, n: int, scheme: str, rng=None) -> np.ndarray:
    """``n`` points in the unit cube ``[0, 1]^k``; a grid needs ``n`` to be a ``k``-th power."""
    if scheme == "grid":
        side = round(n ** (1.0 / k))
        if side**k != n:
            raise ConfigError(f"grid sampling needs n to be a perfect {k}-th power, got {n}")
        axes = [np.linspace(0.0, 1.0, side)] * k
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(n, k)
    if scheme == "uniform":
        rng = rng if rng is not None else np.random.default_rng(0)
        return rng.random((n, k))
    raise ConfigError(f"unknown sampling scheme {scheme!r}")


def target_function(spec: ExperimentSpec):
    """Closed-form target ``X -> y`` or ``None`` when only data is available."""
    if spec.target in TARGETS:
        return TARGETS[spec.target][1]
    if spec.target == "planted":
        net = planted_network(spec.planted_arch, spec.data_seed)
        act = Activation(spec.delta_relu)
        return lambda X: realize_batch(net, X, act)
    return None


def build_dataset(spec: ExperimentSpec) -> TrainingSet:
    if spec.target == "csv":
        return read_csv(spec.csv_path)
    rng = np.random.default_rng(spec.data_seed)
    X = sample_inputs(spec.input_width(), spec.resolved_n(), spec.resolved_sampling(), rng)
    return TrainingSet(X, target_function(spec)(X))


# traces -------------------------------------------------------------------------------


@dataclass
class RunTrace:
    """Per-round records of one run plus its metadata."""

    mode: str
    seed: int
    dataset: str
    config_hash: str
    width: int | None = None
    rows: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    @property
    def params(self):
        return [r["params"] for r in self.rows]

    @property
    def errors(self):
        return [r["error"] for r in self.rows]

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in TRACE_COLUMNS])

    @classmethod
    def read_csv(cls, path, **meta) -> "RunTrace":
        tr = cls(meta.pop("mode", "?"), meta.pop("seed", -1), meta.pop("dataset", "?"),
                 meta.pop("config_hash", Path(path).stem), **meta)
        tr.rows = read_rows(path)
        return tr


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_rows(path) -> list:
    """Rows of a trace or aggregate CSV, integer-looking columns kept as int."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                try:
                    rec[k] = int(v)
                except ValueError:
                    try:
                        rec[k] = float(v)
                    except ValueError:
                        rec[k] = v
            out.append(rec)
    return out


# per-round diagnostics ------------------------------------------------------------------


class _Probe:
    """Diagnostics attached to each recorded state."""

    def __init__(self, spec: ExperimentSpec, ts: TrainingSet, loss_spec: LossSpec, seed: int):
        self.ts = ts
        self.loss_spec = loss_spec
        self.target = target_function(spec)
        self.k = ts.input_width
        self.m = spec.gen_samples
        self.seed = seed

    def stability(self, W: WeightSet) -> float:
        try:
            return stability_constant(split_final_layer(W, 1), self.ts, self.loss_spec).l_constant
        except (InstabilityError, DegenerateInputError):
            return math.inf

    def generalization(self, W: WeightSet) -> float:
        if self.target is None or self.m <= 0:
            return math.nan
        return generalization_estimate(
            W, self.target, lambda rng, n: rng.random((n, self.k)), self.m,
            seed=[self.seed, 0x6E5], act=self.loss_spec.activation,
        )

    def row(self, rnd, wall_ms, W, loss, c_opt, extensions, epochs) -> dict:
        return {
            "round": rnd,
            "wall_ms": wall_ms,
            "params": param_count(W.arch),
            "loss": loss,
            "error": math.sqrt(loss),
            "c_opt": c_opt,
            "stability_L": self.stability(W),
            "gen_estimate": self.generalization(W),
            "extensions": extensions,
            "epochs": epochs,
        }


def init_weights(arch: Architecture, seed: int) -> WeightSet:
    """Normal weights and biases with variance ``w^(-1/2)``, ``w`` the last hidden width."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1717]))
    return WeightSet.random(arch, rng, scale=arch.widths[-2] ** -0.25)


def _flush(trace: RunTrace, path: Path):
    if path is not None:
        trace.write_csv(path)


def run_hierarchical(spec: ExperimentSpec, seed: int, ts: TrainingSet | None = None,
                     path: Path | None = None) -> RunTrace:
    ts = ts if ts is not None else build_dataset(spec)
    lspec = LossSpec(activation=Activation(spec.delta_relu))
    payload = dict(spec.hash_payload(), mode="hierarchical", seed=seed)
    trace = RunTrace("hierarchical", seed, spec.target, _config_hash(payload))
    probe = _Probe(spec, ts, lspec, seed)
    w0 = init_weights(spec.resolved_start_arch(), seed)

    def on_round(rec, W):
        trace.rows.append(probe.row(rec.round, rec.wall_ms, W, rec.loss, rec.c_opt,
                                    rec.extensions, rec.epochs))
        _flush(trace, path)
        log.info("%s seed=%d round=%d params=%d error=%.3e", spec.target, seed, rec.round,
                 trace.rows[-1]["params"], trace.rows[-1]["error"])

    opt = spec.optim.with_(max_epochs=spec.round_epochs, seed=seed)
    try:
        adaptive_train(w0, ts, lspec, spec.resolved_growth(), opt, rounds=spec.rounds,
                       seed=seed, partial_depth=spec.resolved_partial_depth(),
                       max_params=spec.max_params, on_round=on_round)
    except NumericDivergence as exc:
        trace.status, trace.message = "numeric failure", str(exc)
        _flush(trace, path)
    return trace


def direct_arch(spec: ExperimentSpec, width: int) -> Architecture:
    start = spec.resolved_start_arch().widths
    return Architecture(start[:-2] + (width, 1))


def run_direct(spec: ExperimentSpec, seed: int, width: int, ts: TrainingSet | None = None,
               path: Path | None = None, epochs: int | None = None) -> RunTrace:
    """Train a fixed architecture from random initialization; one trace row."""
    ts = ts if ts is not None else build_dataset(spec)
    lspec = LossSpec(activation=Activation(spec.delta_relu))
    epochs = spec.direct_epochs if epochs is None else epochs
    payload = dict(spec.hash_payload(), mode="direct", seed=seed, width=width, epochs=epochs)
    trace = RunTrace("direct", seed, spec.target, _config_hash(payload), width=width)
    probe = _Probe(spec, ts, lspec, seed)
    arch = direct_arch(spec, width)
    w0 = init_weights(arch, seed)
    # the whole budget is spent; stall detection is switched off
    opt = spec.optim.with_(max_epochs=epochs, stall_window=epochs + 1, seed=seed)
    t0 = time.perf_counter()
    try:
        W, tr = train(w0, ts, lspec, None, opt)
    except NumericDivergence as exc:
        trace.status, trace.message = "numeric failure", str(exc)
        W, tr = exc.state, None
    loss = Objective(ts, lspec)
    L, _, _ = loss.loss_grad(W.to_vector(), W.arch)
    growth = spec.resolved_growth()
    c = math.nan
    if growth.star_arch.depth == arch.depth and growth.star_arch.input_width == arch.input_width:
        r = ts.responses - loss.responses(W)
        if L > 0:
            res = wstar_search(r, ts, lspec, growth, seed=seed, objective=loss)
            c = 2.0 * res.objective_value / math.sqrt(L)
    wall = (time.perf_counter() - t0) * 1e3
    trace.rows.append(probe.row(0, wall, W, L, c, 0, tr.epochs if tr else 0))
    _flush(trace, path)
    return trace


# aggregation and rate fits ---------------------------------------------------------------


AGG_COLUMNS = ("params", "loss", "error", "c_opt", "stability_L", "gen_estimate",
               "extensions", "epochs")


def _median(vals):
    v = [x for x in vals if not (isinstance(x, float) and math.isnan(x))]
    return float(np.median(v)) if v else math.nan


def aggregate(traces, key: str = "round") -> list:
    """Median of every column over seeds, per distinct ``key`` value (never across keys)."""
    groups: dict = {}
    for tr in traces:
        for row in tr.rows:
            k = tr.width if key == "width" else row[key]
            groups.setdefault(k, []).append(row)
    out = []
    for k in sorted(groups):
        rows = groups[k]
        rec = {key: k, "n_seeds": len(rows)}
        for c in AGG_COLUMNS:
            rec[c] = _median([r[c] for r in rows])
        out.append(rec)
    return out


def write_aggregate(rows, path, key: str = "round"):
    cols = (key, "n_seeds") + AGG_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if c not in (key, "n_seeds") else str(r[c]) for c in cols])


def fit_rate(rows=None, params=None, errors=None):
    """Least-squares line through ``(log params, log error)``.

    Accepts aggregate rows (dicts with ``params`` and ``error``) or two
    sequences.  Returns ``(slope, intercept, r_squared)``.
    """
    if rows is not None:
        params = [r["params"] for r in rows]
        errors = [r["error"] for r in rows]
    p = np.asarray(params, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    ok = np.isfinite(p) & np.isfinite(e) & (p > 0) & (e > 0)
    p, e = p[ok], e[ok]
    if p.size < 4 or np.unique(p).size < 4:
        raise DegenerateInputError("rate fit needs at least 4 points with distinct parameter counts")
    x, y = np.log(p), np.log(e)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# driver ------------------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    traces: list
    out_dir: Path | None
    aggregates: dict = field(default_factory=dict)

    def by_mode(self, mode: str) -> list:
        return [t for t in self.traces if t.mode == mode]

    @property
    def failed(self) -> bool:
        return any(t.status != "ok" for t in self.traces)


def _cells(spec: ExperimentSpec):
    cells = []
    for mode in spec.modes:
        for seed in spec.seeds:
            if mode == "hierarchical":
                cells.append((mode, seed, None))
            else:
                cells.extend((mode, seed, w) for w in spec.direct_widths)
    return cells


def _run_cell(args):
    spec, mode, seed, width, run_dir = args
    ts = build_dataset(spec)
    if mode == "hierarchical":
        payload = dict(spec.hash_payload(), mode=mode, seed=seed)
        path = run_dir / f"{_config_hash(payload)}.csv" if run_dir else None
        return run_hierarchical(spec, seed, ts, path)
    payload = dict(spec.hash_payload(), mode=mode, seed=seed, width=width, epochs=spec.direct_epochs)
    path = run_dir / f"{_config_hash(payload)}.csv" if run_dir else None
    return run_direct(spec, seed, width, ts, path)


def run_experiment(spec: ExperimentSpec, out_dir=None, workers: int = 1) -> ExperimentResult:
    """Run every (mode, seed[, width]) cell and write traces, index and aggregates."""
    out = Path(out_dir) if out_dir is not None else None
    run_dir = None
    if out is not None:
        run_dir = out / "runs"
        run_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, m, s, w, run_dir) for m, s, w in _cells(spec)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            traces = list(ex.map(_run_cell, jobs))
    else:
        traces = [_run_cell(j) for j in jobs]
    result = ExperimentResult(traces, out)
    hier = result.by_mode("hierarchical")
    direct = result.by_mode("direct")
    if hier:
        result.aggregates["hierarchical"] = aggregate(hier, "round")
    if direct:
        result.aggregates["direct"] = aggregate(direct, "width")
    if out is not None:
        if hier:
            write_aggregate(result.aggregates["hierarchical"], out / "aggregate_hierarchical.csv")
        if direct:
            write_aggregate(result.aggregates["direct"], out / "aggregate_direct.csv", key="width")
        with open(out / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "mode", "seed", "width", "dataset", "file", "status",
                        "rounds", "final_params", "final_error"])
            for t in traces:
                fin = t.rows[-1] if t.rows else {"params": 0, "error": math.nan}
                w.writerow([t.config_hash, t.mode, t.seed, "" if t.width is None else t.width,
                            t.dataset, f"runs/{t.config_hash}.csv", t.status, len(t.rows),
                            fin["params"], _fmt(fin["error"])])
    return result


def interpolate_error(params, errors, at: float) -> float:
    """Error of a growing run at parameter count ``at``, linear in log-log coordinates.

    Returns ``nan`` outside the range covered by the run.
    """
    p = np.log(np.asarray(params, dtype=np.float64))
    e = np.log(np.asarray(errors, dtype=np.float64))
    x = math.log(at)
    if x < p[0] - 1e-12 or x > p[-1] + 1e-12:
        return math.nan
    # duplicate counts (rounds without growth) keep their last, lowest error
    keep = np.append(p[1:] != p[:-1], True)
    return float(math.exp(np.interp(x, p[keep], e[keep])))
