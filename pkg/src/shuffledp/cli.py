"""Command-line experiment runner.

Subcommands: run, audit, sweep, test-uniformity, solve-params. Each reads a
single JSON config (``--config``) whose fields can be overridden by flags,
and writes JSON Lines records (or a CSV of summaries) to ``--out`` or
stdout.

Exit codes: 0 success, 1 audit failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .accounting import PrivacyBudget, solve_rr_p
from .audit import Brittle1, Brittle2, audit_robustness
from .errors import ShuffleDPError
from .histograms import CountMin, OptInHistogram, ParallelHistogram, compressed_size, solve_optin_p, true_counts
from .model import ShuffleProtocol, derive_seed, execute
from .sums import BoundedSum, RandomizedResponse, SplitMix, Zsum, solve_bounded_sum_params, solve_zsum_r
from .testing import (
    DEFAULT_TEST_DELTA,
    FileSource,
    PCInstance,
    ProbabilitySource,
    TesterConfig,
    Verdict,
    calibrate_threshold,
    pc_sample_count,
    pc_solve,
    sample_size,
    uniformity_core_test,
    uniformity_full_test,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    params: dict = field(default_factory=dict)
    n: int = 1000
    trials: int = 1
    seed: int = 0
    out: str | None = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise UsageError(f"trials must be >= 1, got {self.trials}")
        if self.n < 1:
            raise UsageError(f"n must be >= 1, got {self.n}")
        if self.protocol not in CATALOG:
            raise UsageError(f"unknown protocol {self.protocol!r}; known: {', '.join(sorted(CATALOG))}")

    def echo(self) -> dict:
        return {"protocol": self.protocol, "params": dict(self.params), "n": self.n, "trials": self.trials, "seed": self.seed}


@dataclass(frozen=True)
class ResultRecord:
    """One output line: a trial result, a summary, or a one-off report."""

    kind: str
    config: dict
    index: int | None = None
    seed: int | None = None
    value: Any = None
    summary: dict | None = None
    wall_time: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ResultRecord":
        return cls(**json.loads(line))


def summarize(values: list[float]) -> dict:
    arr = np.abs(np.asarray(values, dtype=float))
    signed = np.asarray(values, dtype=float)
    return {
        "count": int(arr.size),
        "mean": float(signed.mean()),
        "std_error": float(signed.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0,
        "p50": float(np.quantile(arr, 0.5)),
        "p95": float(np.quantile(arr, 0.95)),
        "max": float(arr.max()),
    }


# ---------------------------------------------------------------------------
# catalog


def _budget(params: dict) -> PrivacyBudget:
    return PrivacyBudget(float(params.get("epsilon", 1.0)), float(params.get("delta", 1e-6)))


def _bits(n: int, params: dict) -> np.ndarray:
    ones = int(round(float(params.get("ones_fraction", 0.5)) * n))
    return np.array([1] * ones + [0] * (n - ones))


def _hist_data(n: int, d: int, params: dict, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "data"))
    kind = params.get("data", "zipf")
    if kind == "zeros":
        return np.zeros(n, dtype=np.int64)
    if kind == "uniform":
        return rng.integers(0, d, size=n)
    return (rng.zipf(float(params.get("zipf_a", 1.5)), size=n) - 1) % d


@dataclass(frozen=True)
class Experiment:
    build: Callable[[int, dict], ShuffleProtocol]
    data: Callable[[int, dict, int], Any]
    error: Callable[[Any, Any, ShuffleProtocol], float]


def _build_rr(n, params):
    if "p" in params:
        return RandomizedResponse(n, float(params["p"]))
    return RandomizedResponse.for_budget(n, _budget(params))


def _build_zsum(n, params):
    if "r" in params:
        return Zsum(n, float(params["r"]), bool(params.get("small_n_fallback", False)))
    return Zsum.for_budget(n, _budget(params))


def _build_countmin(n, params):
    d, T = int(params.get("d", 1000)), int(params.get("T", 3))
    d_hat = compressed_size(n, d, T)
    # T repetitions compose, so each inner histogram gets 1/T of the budget
    return CountMin(n, d, T, ParallelHistogram.for_budget(n, d_hat, _budget(params).split(T)), d_hat)


def _scalar_error(est, data, protocol):
    return float(est - np.sum(data))


def _hist_error(est, data, protocol):
    return est.linf_error(true_counts(data, protocol.d))


CATALOG: dict[str, Experiment] = {
    "rr": Experiment(_build_rr, lambda n, p, s: _bits(n, p), _scalar_error),
    "zsum": Experiment(_build_zsum, lambda n, p, s: _bits(n, p), _scalar_error),
    "bounded_sum": Experiment(
        lambda n, p: BoundedSum(n, solve_bounded_sum_params(n, _budget(p), p.get("m"), p.get("scale"))),
        lambda n, p, s: np.random.default_rng(derive_seed(s, "data")).random(n),
        _scalar_error,
    ),
    "splitmix": Experiment(
        lambda n, p: SplitMix(n, int(p.get("q", 16)), int(p.get("m", 3))),
        lambda n, p, s: np.random.default_rng(derive_seed(s, "data")).integers(0, int(p.get("q", 16)), n),
        lambda est, data, proto: float((est - int(np.sum(data))) % proto.split.q),
    ),
    "parallel_hist": Experiment(
        lambda n, p: ParallelHistogram.for_budget(n, int(p.get("d", 50)), _budget(p)),
        lambda n, p, s: _hist_data(n, int(p.get("d", 50)), p, s),
        _hist_error,
    ),
    "optin_hist": Experiment(
        lambda n, p: OptInHistogram.for_budget(n, int(p.get("d", 50)), _budget(p)),
        lambda n, p, s: _hist_data(n, int(p.get("d", 50)), p, s),
        _hist_error,
    ),
    "countmin": Experiment(
        _build_countmin,
        lambda n, p, s: _hist_data(n, int(p.get("d", 1000)), p, s),
        _hist_error,
    ),
    "pointer_chasing": Experiment(lambda n, p: None, lambda n, p, s: None, lambda e, d, p: 0.0),
    "brittle1": Experiment(lambda n, p: Brittle1(n), lambda n, p, s: _bits(n, p), lambda e, d, p: 0.0),
    "brittle2": Experiment(lambda n, p: Brittle2(n), lambda n, p, s: _bits(n, p), lambda e, d, p: 0.0),
}


def _pc_trial(config: ExperimentConfig, seed: int) -> float:
    """1.0 when the chase is wrong or indeterminate, else 0.0."""
    p = config.params
    ell = int(p.get("ell", 3))
    budget = PrivacyBudget(float(p.get("epsilon", 1.0)), float(p.get("delta", 1e-3)))
    rng = np.random.default_rng(derive_seed(seed, "instance"))
    inst = PCInstance.random(ell, rng)
    count = int(p.get("samples", pc_sample_count(budget)))
    try:
        return float(pc_solve(inst.sample(count, rng), ell, budget, seed) != inst.answer())
    except ShuffleDPError:
        return 1.0


def trial_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "trial", index)


def run(config: ExperimentConfig, timing: bool = False) -> list[ResultRecord]:
    """Per-trial records followed by one summary record."""
    start = time.perf_counter()
    exp = CATALOG[config.protocol]
    echo = config.echo()
    records, values = [], []
    if config.protocol == "pointer_chasing":
        for i in range(config.trials):
            s = trial_seed(config.seed, i)
            v = _pc_trial(config, s)
            values.append(v)
            records.append(ResultRecord("trial", echo, i, s, v))
    else:
        protocol = exp.build(config.n, config.params)
        data = exp.data(config.n, config.params, config.seed)
        for i in range(config.trials):
            s = trial_seed(config.seed, i)
            v = exp.error(execute(protocol, data, s), data, protocol)
            values.append(v)
            records.append(ResultRecord("trial", echo, i, s, v))
        echo = {**echo, "solved": _plain(protocol.params())}
    wall = time.perf_counter() - start if timing else None
    records.append(ResultRecord("summary", echo, summary=summarize(values), wall_time=wall))
    return records


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def sweep(base: ExperimentConfig, grid: dict[str, list], timing: bool = False) -> list[ResultRecord]:
    """One summary per cell of the Cartesian product, in listed order.

    Grid keys ``n`` and ``trials`` set those fields; anything else is a
    protocol parameter.
    """
    keys = list(grid)
    out = []
    for cell in itertools.product(*(grid[k] for k in keys)):
        values = dict(zip(keys, cell))
        n = int(values.pop("n", base.n))
        trials = int(values.pop("trials", base.trials))
        cfg = ExperimentConfig(base.protocol, {**base.params, **values}, n, trials, base.seed)
        out.append(run(cfg, timing)[-1])
    return out


def _audit_protocol(name: str, n: int, params: dict) -> ShuffleProtocol:
    if name in ("rr", "zsum", "brittle1", "brittle2"):
        return CATALOG[name].build(n, params)
    raise UsageError(f"protocol {name!r} cannot be audited from the CLI")


def audit(config: dict) -> tuple[ResultRecord, bool]:
    """Exact audit; passes when the report meets the requested target."""
    name = config.get("protocol")
    n = int(config.get("n", 4))
    params = dict(config.get("params", {}))
    # audit settings may also arrive as --param flags
    for key in ("mode", "gamma", "epsilon", "delta"):
        if key in params and key not in config:
            config = {**config, key: params[key]}
    params = {k: v for k, v in params.items() if k not in ("mode", "gamma")}
    mode = config.get("mode", "approx")
    if mode not in ("pure", "approx"):
        raise UsageError(f"mode must be 'pure' or 'approx', got {mode!r}")
    gamma = float(config.get("gamma", 1.0))
    epsilon = float(config.get("epsilon", 1.0))
    delta = float(config.get("delta", 1e-6))
    protocol = _audit_protocol(name, n, params)
    report = audit_robustness(protocol, gamma, epsilon)
    if mode == "pure":
        limit = config.get("epsilon")
        passed = math.isfinite(report.epsilon_star) and (limit is None or report.epsilon_star <= float(limit))
    else:
        passed = report.delta_at_target <= delta
    echo = {"protocol": name, "n": n, "params": params, "mode": mode, "gamma": gamma, "epsilon": epsilon, "delta": delta}
    return ResultRecord("audit", echo, value={**report.to_record(), "passed": passed}), passed


def _source(spec: dict, d: int):
    kind = spec.get("type", "uniform")
    if kind == "uniform":
        return ProbabilitySource.uniform(d)
    if kind == "point":
        return ProbabilitySource.point_mass(d, int(spec.get("at", 0)))
    if kind == "perturbed":
        return ProbabilitySource.perturbed(d, float(spec.get("distance", 0.3)))
    if kind == "probs":
        return ProbabilitySource(spec["probs"])
    if kind == "file":
        return FileSource.from_path(spec["path"], d)
    raise UsageError(f"unknown sample source {kind!r}")


def uniformity_trials(config: dict, trials: int, seed: int, timing: bool = False) -> list[ResultRecord]:
    start = time.perf_counter()
    d = int(config.get("d", 100))
    alpha = float(config.get("alpha", 0.3))
    budget = PrivacyBudget(float(config.get("epsilon", 1.0)), float(config.get("delta", DEFAULT_TEST_DELTA)))
    m = float(config.get("m", sample_size(d, alpha, budget.epsilon)))
    source = _source(config.get("source", {}), d)
    echo = {"d": d, "alpha": alpha, "epsilon": budget.epsilon, "delta": budget.delta, "m": m,
            "source": config.get("source", {}), "compress": bool(config.get("compress", False))}
    records = []
    if config.get("compress", False):
        verdicts = [
            uniformity_full_test(source, d, alpha, budget, trial_seed(seed, i), config.get("d_hat"), m)
            for i in range(trials)
        ]
    else:
        cfg = TesterConfig(d, alpha, m, budget)
        cfg = cfg.with_threshold(calibrate_threshold(cfg, int(config.get("calibration_trials", 200)), seed))
        echo["threshold"] = cfg.threshold
        verdicts = [uniformity_core_test(source, cfg, trial_seed(seed, i)) for i in range(trials)]
    for i, v in enumerate(verdicts):
        records.append(ResultRecord("trial", echo, i, trial_seed(seed, i), v.value))
    frac = sum(v == Verdict.NOT_UNIFORM for v in verdicts) / len(verdicts)
    wall = time.perf_counter() - start if timing else None
    records.append(ResultRecord("summary", echo, summary={"count": len(verdicts), "not_uniform_fraction": frac}, wall_time=wall))
    return records


def solve_params(config: dict) -> ResultRecord:
    name = config.get("protocol")
    n = int(config.get("n", 1000))
    params = dict(config.get("params", {}))
    budget = _budget({**params, **{k: config[k] for k in ("epsilon", "delta") if k in config}})
    if name == "rr":
        solved = {"p": solve_rr_p(n, budget)}
    elif name == "zsum":
        solved = asdict(solve_zsum_r(n, budget))
    elif name == "parallel_hist":
        solved = ParallelHistogram.for_budget(n, int(params.get("d", 50)), budget).params()
    elif name == "optin_hist":
        solved = asdict(solve_optin_p(n, int(params.get("d", 50)), budget))
    elif name == "bounded_sum":
        solved = asdict(solve_bounded_sum_params(n, budget, params.get("m"), params.get("scale")))
    elif name == "countmin":
        solved = _build_countmin(n, {**params, "epsilon": budget.epsilon, "delta": budget.delta}).params()
    else:
        raise UsageError(f"no parameter solver for {name!r}")
    echo = {"protocol": name, "n": n, "epsilon": budget.epsilon, "delta": budget.delta, "params": params}
    return ResultRecord("params", echo, value=_plain(solved))


# ---------------------------------------------------------------------------
# output


def _flatten(prefix: str, obj, out: dict) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}", v, out)
    else:
        out[prefix] = json.dumps(obj) if isinstance(obj, (list, tuple)) else obj


def to_csv(records: list[ResultRecord]) -> str:
    rows = []
    for r in records:
        if r.kind == "trial":
            continue
        flat: dict = {"kind": r.kind}
        _flatten("config", r.config, flat)
        if r.summary is not None:
            _flatten("summary", r.summary, flat)
        if r.value is not None:
            _flatten("value", r.value, flat)
        flat["wall_time"] = r.wall_time
        rows.append(flat)
    columns = list(dict.fromkeys(k for row in rows for k in row))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def emit(records: list[ResultRecord], fmt: str, path: str | None) -> None:
    text = to_csv(records) if fmt == "csv" else "".join(r.to_json() + "\n" for r in records)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shuffledp", description="Shuffle-model DP experiments and audits")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "audit", "sweep", "test-uniformity", "solve-params"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (u64)")
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
        p.add_argument("--trials", type=int)
        p.add_argument("--protocol")
        p.add_argument("--n", type=int)
        p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                       help="protocol parameter; VALUE is parsed as JSON when possible")
        p.add_argument("--timing", action="store_true", help="record wall time (output is then not reproducible)")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> dict:
    config: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
    for key in ("seed", "trials", "protocol", "n"):
        value = getattr(args, key)
        if value is not None:
            config[key] = value
    params = dict(config.get("params", {}))
    for item in args.param:
        if "=" not in item:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    config["params"] = params
    return config


def _experiment(config: dict) -> ExperimentConfig:
    if "protocol" not in config:
        raise UsageError("config needs a protocol")
    return ExperimentConfig(
        str(config["protocol"]),
        dict(config.get("params", {})),
        int(config.get("n", 1000)),
        int(config.get("trials", 1)),
        int(config.get("seed", 0)),
    )


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        config = _load_config(args)
        code = EXIT_OK
        if args.command == "run":
            records = run(_experiment(config), args.timing)
        elif args.command == "sweep":
            grid = config.get("grid")
            if not isinstance(grid, dict) or not grid:
                raise UsageError("sweep config needs a non-empty 'grid' object")
            records = sweep(_experiment(config), grid, args.timing)
        elif args.command == "audit":
            record, passed = audit(config)
            records = [record]
            code = EXIT_OK if passed else EXIT_FAIL
        elif args.command == "test-uniformity":
            records = uniformity_trials(config, int(config.get("trials", 1)), int(config.get("seed", 0)), args.timing)
        else:
            records = [solve_params(config)]
        emit(records, args.format, args.out)
        return code
    except (UsageError, ShuffleDPError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
