"""Command-line entry point: ``nas-tracksearch <command> ...``.

All randomness flows from ``--seed``. Results go to stdout as JSON (or to
``--out-dir``); failures print one JSON line to stderr and exit with:

  0  success
  1  internal error
  2  usage error (unknown flag, bad arguments)
  3  malformed input file (genome, config, space, lookup table)
  4  infeasible budget (no feasible genome found)
  5  enumeration cap exceeded
  6  weight store error (corrupt file, version or fingerprint mismatch)
  7  evaluator failure
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import cost as cost_mod
from .engine import EngineError, MissingStatsError, forward_tracker, instrumented_macs, recalibrate_bn
from .evaluators import (
    LookupEvaluator,
    ProxyEvaluator,
    SyntheticEvaluator,
    calibration_pairs,
    load_evalset,
    make_evalset,
)
from .evolution import (
    BudgetExhaustedError,
    EnumerationCapError,
    EvaluationError,
    SearchConfig,
    brute_force,
    load_config,
    run_search,
    write_history_csv,
)
from .report import report
from .space import (
    EXEMPLAR_SIZE,
    FULL_SPACE,
    SEARCH_SIZE,
    SCHEMA_VERSION,
    GenomeError,
    Space,
    decode,
    describe_space,
    encode,
    path_space,
    random_genome,
    space_from_dict,
    to_dict,
    validate,
)
from .supernet import StoreError, init_weights, load, save

log = logging.getLogger("nas_tracksearch")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_BUDGET, EXIT_CAP, EXIT_STORE, EXIT_EVAL = range(8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj, out: Path | None = None, name: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out is not None and name is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")
    print(text)


def _read_genome(path: str, space: Space = FULL_SPACE):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise GenomeError(f"cannot read {path}: {exc.strerror}") from None
    return decode(text, space)


def _read_space(path: str | None) -> Space:
    if path is None:
        return FULL_SPACE
    try:
        return space_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise GenomeError(f"bad space file {path}: {exc}") from None


def _budget(args) -> cost_mod.Budget:
    if getattr(args, "budget_preset", None):
        return cost_mod.BUDGET_PRESETS[args.budget_preset]
    flops = getattr(args, "flops_max", None)
    params = getattr(args, "params_max", None)
    return cost_mod.Budget(math.inf if flops is None else flops, math.inf if params is None else params)


def _evaluator(args, space: Space = FULL_SPACE):
    kind = args.evaluator
    if kind == "synthetic":
        return SyntheticEvaluator(args.seed)
    if kind == "lookup":
        if not args.table:
            raise UsageError("--evaluator lookup requires --table")
        try:
            return LookupEvaluator.from_csv(args.table)
        except (OSError, ValueError) as exc:
            raise GenomeError(f"bad lookup table {args.table}: {exc}") from None
    store = load(args.weights, space) if args.weights else init_weights(space, args.seed)
    calib = calibration_pairs(make_evalset(args.seed + 1, args.calib_count, args.snr, interior=False))
    if args.evalset_dir:
        evalset = load_evalset(args.evalset_dir)
    else:
        evalset = make_evalset(args.seed + 2, args.eval_count, args.snr, interior=False)
    return ProxyEvaluator(store, calib, evalset)


def _add_evaluator_flags(p):
    p.add_argument("--evaluator", choices=("synthetic", "lookup", "proxy"), default="synthetic")
    p.add_argument("--table", help="CSV of (genome, score) for the lookup evaluator")
    p.add_argument("--weights", help="weight store file for the proxy evaluator")
    p.add_argument("--calib-count", type=int, default=4)
    p.add_argument("--eval-count", type=int, default=16)
    p.add_argument("--snr", type=float, default=4.0)
    p.add_argument("--evalset-dir", help="directory with index.json and .npy triples (proxy evaluator)")


def _add_budget_flags(p):
    p.add_argument("--budget-preset", choices=sorted(cost_mod.BUDGET_PRESETS))
    p.add_argument("--flops-max", type=float)
    p.add_argument("--params-max", type=float)


# --------------------------------------------------------------------------
# Commands


def cmd_space_info(args):
    t0 = time.perf_counter()
    space = _read_space(args.space)
    desc = describe_space(space)
    lo, hi = cost_mod.space_extrema(space)
    info = desc.as_dict()
    info["head_cardinality_note"] = (
        "computed from the layer table as (6 * 3^7)^2; the quoted figure is (3 * 3^8)^2")
    info["extrema"] = {"min": {"macs": lo.macs, "params": lo.params},
                       "max": {"macs": hi.macs, "params": hi.params}}
    info["flops_convention"] = "1 Flop = 1 MAC"
    info["elapsed_s"] = round(time.perf_counter() - t0, 4)
    _emit(info, args.out_dir, "space_info.json")


def cmd_sample(args):
    g = random_genome(args.seed, _read_space(args.space))
    _emit(to_dict(g), args.out_dir, "genome.json")


def cmd_cost(args):
    _emit(cost_mod.cost_report(_read_genome(args.genome)), args.out_dir, "cost.json")


def cmd_validate(args):
    try:
        g = _read_genome(args.genome)
    except GenomeError as exc:
        _emit({"schema_version": SCHEMA_VERSION, "ok": False, "violations": str(exc).split("; ")})
        return EXIT_INPUT
    store = init_weights(path_space(g), args.seed)
    rng = np.random.default_rng(args.seed)
    ex = rng.standard_normal((2, EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3))
    se = rng.standard_normal((2, SEARCH_SIZE, SEARCH_SIZE, 3))
    stats = recalibrate_bn(g, store, list(zip(ex, se)))
    cls_map, reg_map = forward_tracker(g, store, stats, ex[0], se[0])
    analytic = cost_mod.genome_cost(g).macs
    counted = instrumented_macs(g, store, stats)
    ok = cls_map.shape == (16, 16, 1) and reg_map.shape == (16, 16, 4) and analytic == counted
    _emit({"schema_version": SCHEMA_VERSION, "ok": ok, "violations": validate(g),
           "cls_shape": list(cls_map.shape), "reg_shape": list(reg_map.shape),
           "analytic_macs": analytic, "instrumented_macs": counted}, args.out_dir, "validate.json")
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_init_weights(args):
    space = _read_space(args.space)
    store = init_weights(space, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(store, out)
    _emit({"schema_version": SCHEMA_VERSION, "path": str(out), "entries": len(store),
           "scalars": store.num_scalars(), "seed": store.seed, "fingerprint": store.fingerprint})


def cmd_load_weights(args):
    store = load(args.path, _read_space(args.space))
    _emit({"schema_version": SCHEMA_VERSION, "path": args.path, "entries": len(store),
           "scalars": store.num_scalars(), "seed": store.seed, "fingerprint": store.fingerprint})


def cmd_search(args):
    try:
        cfg = load_config(args.config) if args.config else SearchConfig()
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise GenomeError(f"bad search config {args.config}: {exc}") from None
    overrides = {"rng_seed": args.seed}
    if args.budget_preset or args.flops_max is not None or args.params_max is not None:
        overrides["budget"] = _budget(args)
    for name in ("population_size", "generations", "parent_k"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    cfg = SearchConfig.from_dict({**_cfg_fields(cfg), **overrides})
    space = _read_space(args.space)
    result = run_search(cfg, _evaluator(args, space), space, jobs=args.jobs)
    c = cost_mod.genome_cost(result.best)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "best": to_dict(result.best),
        "best_fitness": result.best_fitness,
        "macs": c.macs,
        "params": c.params,
        "flops_convention": "1 Flop = 1 MAC",
        "budget": {"flops_max": _num(cfg.budget.flops_max), "params_max": _num(cfg.budget.params_max)},
        "feasible": cfg.budget.admits(c),
        "generations": len(result.history),
        "total_evaluations": result.total_evaluations,
    }
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "best_genome.json").write_text(encode(result.best) + "\n")
        write_history_csv(result, args.out_dir / "history.csv")
        (args.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _emit(summary, args.out_dir, "result.json")


def _cfg_fields(cfg: SearchConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _num(x):
    return x if math.isfinite(x) else None


def cmd_brute_force(args):
    space = _read_space(args.space)
    best = brute_force(space, _evaluator(args, space), _budget(args), cap=args.cap)
    c = cost_mod.genome_cost(best)
    _emit({"schema_version": SCHEMA_VERSION, "best": to_dict(best), "macs": c.macs, "params": c.params,
           "cardinality": space.cardinality}, args.out_dir, "brute_force.json")


def cmd_report(args):
    _emit(report(_read_genome(args.genome)).as_dict(), args.out_dir, "report.json")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--space", help="JSON file describing a reduced space")

    p = _Parser(prog="nas-tracksearch", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    space = sub.add_parser("space", help="search-space queries")
    space_sub = space.add_subparsers(dest="space_command", required=True, parser_class=_Parser)
    info = space_sub.add_parser("info", parents=[common], help="cardinalities and cost extrema")
    info.set_defaults(func=cmd_space_info)

    s = sub.add_parser("sample", parents=[common], help="draw a uniform random genome")
    s.set_defaults(func=cmd_sample)

    for name, func, helptext in (("cost", cmd_cost, "analytic MACs/params report"),
                                 ("validate", cmd_validate, "check genome, shapes and MAC agreement"),
                                 ("report", cmd_report, "architecture statistics")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("genome")
        c.set_defaults(func=func)

    iw = sub.add_parser("init-weights", parents=[common], help="initialize and save a weight store")
    iw.add_argument("--out", required=True)
    iw.set_defaults(func=cmd_init_weights)

    lw = sub.add_parser("load-weights", parents=[common], help="load a weight store and summarize it")
    lw.add_argument("path")
    lw.set_defaults(func=cmd_load_weights)

    se = sub.add_parser("search", parents=[common], help="evolutionary search under a budget")
    se.add_argument("--config")
    se.add_argument("--population-size", type=int)
    se.add_argument("--generations", type=int)
    se.add_argument("--parent-k", type=int)
    _add_budget_flags(se)
    _add_evaluator_flags(se)
    se.set_defaults(func=cmd_search)

    bf = sub.add_parser("brute-force", parents=[common], help="exact optimum over a reduced space")
    bf.add_argument("--cap", type=int, default=10**6)
    _add_budget_flags(bf)
    _add_evaluator_flags(bf)
    bf.set_defaults(func=cmd_brute_force)
    return p


def _setup_logging() -> None:
    level = os.environ.get("NAS_TRACKSEARCH_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (GenomeError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INPUT, "input", str(exc))
    except ValueError as exc:
        if isinstance(exc, (EngineError, MissingStatsError)):
            return _fail(EXIT_INTERNAL, "engine", str(exc))
        return _fail(EXIT_INPUT, "input", str(exc))
    except BudgetExhaustedError as exc:
        return _fail(EXIT_BUDGET, "infeasible_budget", str(exc))
    except EnumerationCapError as exc:
        return _fail(EXIT_CAP, "enumeration_cap", str(exc))
    except (StoreError, OSError) as exc:
        return _fail(EXIT_STORE, "weight_store", str(exc))
    except EvaluationError as exc:
        return _fail(EXIT_EVAL, "evaluator", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
