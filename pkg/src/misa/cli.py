"""Command-line entry point: ``misa train | plan | verify | sweep``.

Exit codes: 0 success, 1 a verification suite failed, 2 usage or
configuration error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import inspect
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, cost_model as cm, report, verify
from .engine import RNG_ALGORITHM, RUNNERS, EngineConfig, NumericalError
from .model_zoo import TASKS, make_task
from .partition import BudgetError
from .sampler import SamplerConfig

log = logging.getLogger("misa")

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

TRACE_FIXED_COLUMNS = ("epoch", "loss", "full_loss", "grad_sq_norm", "sampled")
TOP_LEVEL_KEYS = {"seed", "task", "method", "engine", "precision", "output_dir",
                  "trace_every", "record_wall_time", "figures", "grid"}
ENGINE_KEYS = {"alpha", "beta1", "beta2", "eps", "T", "N", "variant", "strategy", "delta",
               "eta", "ema_beta", "gain_clamp", "comparison_mode", "gain_init", "diagnostics"}
SAMPLER_KEYS = ("eta", "ema_beta", "gain_clamp")
GRID_KEYS = ("eta", "delta", "strategy", "seed")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


class ConfigError(ValueError):
    """The run configuration is malformed or references unknown names."""


# -- configuration -------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def _task_defaults(name: str) -> dict:
    sig = inspect.signature(TASKS[name].__init__)
    return {k: p.default for k, p in sig.parameters.items()
            if k not in ("self", "dtype", "seed") and p.default is not inspect.Parameter.empty}


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and fill every default; the result is JSON-ready."""
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in raw:
        raise ConfigError("config must set 'seed'")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")

    task = raw.get("task", "quadratic")
    if isinstance(task, str):
        task = {"name": task}
    if not isinstance(task, dict) or "name" not in task:
        raise ConfigError("task must be a name or an object with a 'name' key")
    name = task["name"]
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    defaults = _task_defaults(name)
    extra = set(task) - set(defaults) - {"name"}
    if extra:
        raise ConfigError(f"unknown parameters for task {name!r}: {sorted(extra)}")
    task_params = {**defaults, **{k: v for k, v in task.items() if k != "name"}}
    task_params = {k: list(v) if isinstance(v, tuple) else v for k, v in task_params.items()}

    method = raw.get("method", "misa")
    if method not in RUNNERS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(RUNNERS)}")

    engine = raw.get("engine", {})
    if not isinstance(engine, dict):
        raise ConfigError("engine must be an object")
    bad = set(engine) - ENGINE_KEYS
    if bad:
        raise ConfigError(f"unknown engine keys: {sorted(bad)}")
    try:
        cfg = build_engine_config(engine, seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid engine settings: {exc}") from None

    precision = raw.get("precision", "float64")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
    trace_every = raw.get("trace_every", 1)
    if not isinstance(trace_every, int) or trace_every < 1:
        raise ConfigError("trace_every must be a positive integer")
    for flag in ("record_wall_time", "figures"):
        if not isinstance(raw.get(flag, False), bool):
            raise ConfigError(f"{flag} must be true or false")

    return {
        "seed": seed,
        "task": {"name": name, **task_params},
        "method": method,
        "engine": engine_config_dict(cfg),
        "precision": precision,
        "output_dir": raw.get("output_dir"),
        "trace_every": trace_every,
        "record_wall_time": raw.get("record_wall_time", False),
        "figures": raw.get("figures", True),
    }


def build_engine_config(engine: dict, seed: int) -> EngineConfig:
    sampler = SamplerConfig(**{k: engine[k] for k in SAMPLER_KEYS if k in engine})
    rest = {k: v for k, v in engine.items() if k not in SAMPLER_KEYS}
    return EngineConfig(**rest, sampler_cfg=sampler, seed=seed)


def engine_config_dict(cfg: EngineConfig) -> dict:
    d = asdict(cfg)
    d.pop("sampler_cfg")
    d.pop("seed")
    d.pop("record_params")
    d.update(asdict(cfg.sampler_cfg))
    d["variant"] = cfg.variant.value
    d["strategy"] = cfg.strategy.value
    d["gain_init_resolved"] = cfg.resolved_gain_init
    return d


def engine_config_from_resolved(resolved: dict) -> EngineConfig:
    engine = {k: v for k, v in resolved["engine"].items() if k != "gain_init_resolved"}
    return build_engine_config(engine, resolved["seed"])


# -- training ------------------------------------------------------------------

def trace_header(B: int) -> list[str]:
    return [*TRACE_FIXED_COLUMNS, *(f"p_{b}" for b in range(B)), *(f"G_{b}" for b in range(B)), "wall_time"]


def _f(x) -> str:
    return repr(float(x))


def write_trace(path: Path, trace, B: int, every: int = 1, wall_time: bool = False):
    last = len(trace.records) - 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(B))
        for r in trace.records:
            if r.epoch % every and r.epoch != last:
                continue
            w.writerow([r.epoch, _f(r.loss), _f(r.full_loss), _f(r.grad_sq_norm),
                        ";".join(str(i) for i in r.sampled),
                        *(_f(p) for p in r.probs), *(_f(g) for g in r.gains),
                        _f(r.wall_time if wall_time else 0.0)])


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def execute_run(resolved: dict, out_dir: Path) -> dict:
    """Train per ``resolved`` and write every artifact into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task_cfg = dict(resolved["task"])
    name = task_cfg.pop("name")
    task = make_task(name, seed=resolved["seed"], dtype=PRECISIONS[resolved["precision"]], **task_cfg)
    cfg = engine_config_from_resolved(resolved)
    trace = RUNNERS[resolved["method"]](task, cfg)
    final_loss, final_grads = task.full_loss_grad(trace.final_params)
    final_grad_sq = float(sum(np.vdot(g, g) for g in final_grads))
    if not np.isfinite(final_loss):
        raise NumericalError(f"non-finite final loss {final_loss!r}")

    B = len(task.specs)
    write_trace(out_dir / "trace.csv", trace, B, resolved["trace_every"], resolved["record_wall_time"])
    summary = {
        "final_loss": float(final_loss),
        "final_grad_sq_norm": final_grad_sq,
        "epochs": len(trace.records),
    }
    _write_json(out_dir / "final_state.json", {
        "version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "config": resolved,
        "method": trace.method,
        "modules": [{"id": s.id, "layer": s.layer_index, "role": s.role.value,
                     "rows": s.rows, "cols": s.cols} for s in task.specs],
        **summary,
        "final_gains": [float(g) for g in trace.final_gains],
        "final_probs": [float(p) for p in trace.final_probs],
        "final_params": [np.asarray(p, dtype=np.float64).tolist() for p in trace.final_params],
    })
    if resolved["figures"]:
        report.plot_trace(trace, out_dir / "figures")
    return summary


def cmd_train(args) -> int:
    resolved = resolve_config(load_config(args.config))
    out = Path(args.out or resolved["output_dir"] or "misa_run")
    print(json.dumps(resolved, indent=2, sort_keys=True))
    summary = execute_run(resolved, out)
    print(f"final loss {summary['final_loss']!r}, final grad_sq_norm "
          f"{summary['final_grad_sq_norm']!r}; artifacts in {out}")
    return EXIT_OK


# -- planner -------------------------------------------------------------------

def _human_bytes(n: float) -> str:
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if abs(n) < 1024 or unit == "TiB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{n:.0f} B"
        n /= 1024


def _parse_fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def cmd_plan(args) -> int:
    try:
        shape = cm.ArchShape(L=args.L, h=args.h, a=args.a, b=args.b, s=args.s, r=args.r,
                             delta=args.delta, v=args.v)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = cm.plan(shape)
    result["bytes_per_elem"] = args.bytes_per_elem
    thr = result["thresholds"]
    layerwise_cheaper = not thr["misa_cheaper_than_layerwise"]

    print(f"{'method':<14}{'target':<8}{'peak elements':>18}{'peak memory':>14}")
    for row in result["memory"]:
        mark = "  <- layer-wise cheaper" if row["method"] == "MISA" and layerwise_cheaper else ""
        peak = row["peak_elements"]
        print(f"{row['method']:<14}{row['target'] or '-':<8}{peak:>18}"
              f"{_human_bytes(peak * args.bytes_per_elem):>14}{mark}")
    print()
    for k, v in result["flops"].items():
        print(f"flops {k:<24}{v}")
    for k, v in thr.items():
        print(f"threshold {k:<40}{v}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "plan.json", result)
    with open(out / "plan.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "target", "peak_elements", "peak_bytes", "parameters",
                    "activations", "optimizer_and_grads"])
        for row in result["memory"]:
            bd = row["breakdown"]
            w.writerow([row["method"], row["target"] or "", row["peak_elements"],
                        row["peak_elements"] * args.bytes_per_elem, bd["parameters"],
                        bd["activations"], bd["optimizer_and_grads"]])
    if not args.no_figures:
        report.plot_plan(shape, result, out / "figures", args.bytes_per_elem)
    return EXIT_OK


# -- verification --------------------------------------------------------------

def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite)
    for res in results:
        print(res.line())
        for failure in res.failures[:10]:
            print(f"    {failure}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY_FAILED


# -- sweeps --------------------------------------------------------------------

def expand_grid(raw: dict) -> list[dict]:
    """Cartesian product of the ``grid`` axes, duplicates removed in first-seen order."""
    grid = raw.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep config needs a nonempty 'grid' object")
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ConfigError(f"grid axes must be among {list(GRID_KEYS)}, got {sorted(bad)}")
    axes = [k for k in GRID_KEYS if k in grid]
    for k in axes:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid axis {k!r} must be a nonempty list")
    points, seen = [], set()
    for values in itertools.product(*(grid[k] for k in axes)):
        point = dict(zip(axes, values))
        key = json.dumps(point, sort_keys=True)
        if key in seen:
            log.warning("duplicate grid point %s skipped", key)
            continue
        seen.add(key)
        points.append(point)
    return points


def point_config(raw: dict, point: dict) -> dict:
    cfg = {k: v for k, v in raw.items() if k != "grid"}
    cfg["engine"] = dict(cfg.get("engine", {}))
    if "seed" in point:
        cfg["seed"] = point["seed"]
    for k in ("eta", "delta", "strategy"):
        if k in point:
            cfg["engine"][k] = point[k]
    return resolve_config(cfg)


SUMMARY_COLUMNS = ("run", "method", "strategy", "eta", "delta", "seed", "final_loss",
                   "final_grad_sq_norm", "status")


def cmd_sweep(args) -> int:
    raw = load_config(args.config)
    if "seed" not in raw and "seed" in raw.get("grid", {}):
        raw = {**raw, "seed": raw["grid"]["seed"][0]}
    points = expand_grid(raw)
    runs = [(f"run_{k:03d}", point_config(raw, p)) for k, p in enumerate(points)]
    out = Path(args.out or raw.get("output_dir") or "misa_sweep")
    out.mkdir(parents=True, exist_ok=True)
    workers = max(1, int(os.environ.get("MISA_THREADS", os.cpu_count() or 1)))

    def one(item):
        name, resolved = item
        try:
            summary = execute_run(resolved, out / name)
            status = "ok"
        except (NumericalError, FloatingPointError) as exc:
            log.error("%s failed: %s", name, exc)
            summary, status = {"final_loss": float("nan"), "final_grad_sq_norm": float("nan")}, "numerical_error"
        eng = resolved["engine"]
        return {"run": name, "method": resolved["method"], "strategy": eng["strategy"],
                "eta": eng["eta"], "delta": eng["delta"], "seed": resolved["seed"],
                "final_loss": summary["final_loss"],
                "final_grad_sq_norm": summary["final_grad_sq_norm"], "status": status}

    with concurrent.futures.ThreadPoolExecutor(max_workers=min(workers, len(runs))) as pool:
        rows = list(pool.map(one, runs))

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_f(r[c]) if c.startswith("final") else r[c] for c in SUMMARY_COLUMNS])

    ok_rows = [r for r in rows if r["status"] == "ok"]
    medians = {}
    for strategy in sorted({r["strategy"] for r in ok_rows}):
        medians[strategy] = float(np.median([r["final_loss"] for r in ok_rows if r["strategy"] == strategy]))
    for strategy, m in sorted(medians.items(), key=lambda kv: kv[1]):
        print(f"median final loss {strategy:<10}{m!r}")
    if len(medians) > 1 and "bottomk" in medians:
        worst = max(medians, key=medians.get)
        print(f"bottomk worst: {'yes' if worst == 'bottomk' else 'no'}")
    if ok_rows and raw.get("figures", True):
        report.plot_sweep(ok_rows, out / "figures")
    print(f"{len(rows)} runs; summary in {out / 'summary.csv'}")
    return EXIT_OK if len(ok_rows) == len(rows) else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="misa", description="Module-wise importance-sampled block-coordinate Adam.",
                allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"misa {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one configured training job")
    t.add_argument("config", help="JSON run configuration")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="peak memory and FLOPs for a transformer shape")
    for flag, what in (("L", "layers"), ("h", "hidden size"), ("a", "attention heads"),
                       ("b", "batch size"), ("s", "sequence length")):
        pl.add_argument(f"--{flag}", type=int, required=True, help=what)
    pl.add_argument("--r", type=int, default=0, help="low rank for LoRA/GaLore rows (default 0)")
    pl.add_argument("--delta", type=_parse_fraction, required=True,
                    help="trainable fraction, decimal or ratio such as 1/8")
    pl.add_argument("--v", type=int, default=None, help="vocabulary size (recorded only)")
    pl.add_argument("--bytes-per-elem", type=int, default=4)
    pl.add_argument("--out", default=".", help="directory for plan.json, plan.csv and figures")
    pl.add_argument("--no-figures", action="store_true")
    pl.set_defaults(func=cmd_plan)

    v = sub.add_parser("verify", help="run oracle verification suites")
    v.add_argument("suite", choices=[*verify.SUITES, "all"])
    v.set_defaults(func=cmd_verify)

    sw = sub.add_parser("sweep", help="run a grid of configurations")
    sw.add_argument("config", help="JSON run configuration with a 'grid' object")
    sw.add_argument("--out", help="sweep output directory (overrides output_dir)")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, BudgetError) as exc:
        print(f"misa: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"misa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
