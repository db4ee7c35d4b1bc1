"""Command-line interface: evaluate, optimize, design, simulate, heatmap.

Exit codes: 0 success, 2 bad input, 3 optimizer failure, 4 unsatisfiable design.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .design import DesignConfig, Unsatisfiable, design_system
from .geometry import GeometryError, NoFeasibleStart, Placement, grid_points
from .io import (
    InputError,
    fixture_path,
    list_fixtures,
    load_placement,
    load_scene,
    placement_to_dict,
    score_to_dict,
    sig,
    sim_report_to_dict,
    write_json,
)
from .metric import Evaluator, SingularGeometry
from .optimizer import LOCAL_SEARCHES, BcmConfig, bcm_optimize, random_placement
from .simulator import GridSearch, SimConfig, TruthPerturbed, simulate

log = logging.getLogger("tdoa_placer")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_OPTIMIZER = 3
EXIT_UNSATISFIABLE = 4

THREADS_ENV = "TDOA_PLACER_THREADS"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _scene(arg: str):
    """Load a scene from a path, or a bundled fixture by name."""
    path = Path(arg)
    if not path.exists() and arg.removesuffix(".json") in list_fixtures():
        path = fixture_path(arg)
    if not path.exists():
        raise InputError("no such file or bundled fixture", arg)
    return load_scene(path)


def _resolve_threads(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise UsageError("--threads must be >= 1")
    return value


def _float_or_inf(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _bcm_config(args) -> BcmConfig:
    return BcmConfig(
        max_iter=args.max_iter,
        n_starts=args.n_starts,
        local_search=args.local_search,
        local_budget=args.local_budget,
        seed=args.seed,
        include_incumbent=not args.no_incumbent,
        early_stop=args.early_stop,
    )


def _add_bcm_flags(p: argparse.ArgumentParser, seed_help: str = "optimizer seed") -> None:
    d = BcmConfig()
    g = p.add_argument_group("optimizer")
    g.add_argument("--max-iter", type=int, default=d.max_iter, help="BCM sweeps")
    g.add_argument("--n-starts", type=int, default=d.n_starts, help="local searches per block")
    g.add_argument("--local-search", choices=LOCAL_SEARCHES, default=d.local_search)
    g.add_argument("--local-budget", type=int, default=d.local_budget, help="objective evaluations per local search")
    g.add_argument("--seed", type=int, default=d.seed, help=seed_help)
    g.add_argument("--no-incumbent", action="store_true", help="do not seed block searches with the current pair")
    g.add_argument("--early-stop", type=float, default=None, help="stop when a sweep improves less than this")


def _print_score(score, scene, out) -> None:
    print(f"average RMSE: {sig(score.avg_rmse)} m", file=out)
    print(f"{'#':>4} {'point':>28} {'rmse':>14} {'pairs':>6}", file=out)
    for i, p in enumerate(scene.sample_points):
        m = score.mse[i]
        r = math.sqrt(m) if math.isfinite(m) else math.inf
        pt = ", ".join(f"{v:g}" for v in p)
        print(f"{i:>4} {('(' + pt + ')'):>28} {sig(r)!s:>14} {int(score.active_pairs[i]):>6}", file=out)


# --------------------------------------------------------------------------
# subcommands


def cmd_evaluate(args) -> int:
    scene, params = _scene(args.scene)
    placement = load_placement(args.placement, scene)
    score = Evaluator(scene, params).score(placement)
    doc = score_to_dict(score, scene)
    if args.output:
        write_json(args.output, doc)
    _print_score(score, scene, sys.stdout)
    return EXIT_OK


def cmd_optimize(args) -> int:
    scene, params = _scene(args.scene)
    cfg = _bcm_config(args)
    if args.init:
        initial = load_placement(args.init, scene)
    else:
        if args.pairs is None or args.pairs < 1:
            raise UsageError("--random-init needs --pairs >= 1")
        initial = random_placement(scene, args.pairs, np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    ev = Evaluator(scene, params)
    before = ev.score(initial).avg_rmse
    placement, score, trace = bcm_optimize(initial, scene, params, cfg, evaluator=ev)
    write_json(args.output, placement_to_dict(placement))
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl())
    if args.score:
        write_json(args.score, score_to_dict(score, scene))
    print(f"initial average RMSE: {sig(before)} m")
    print(f"optimized average RMSE: {sig(score.avg_rmse)} m")
    print(f"evaluations: {sum(s.evaluations for s in trace.steps)}")
    print(f"placement written to {args.output}")
    return EXIT_OK


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pairs", "anchors", "avg_rmse"])
        for q, m in history:
            w.writerow([q, 2 * q, sig(m)])


def _design_doc(result, scene, target) -> dict:
    return {
        "status": result.status,
        "target_rmse": sig(target),
        "q_star": result.q_star,
        "anchors_required": 2 * result.q_star,
        "history": [{"pairs": q, "avg_rmse": sig(m)} for q, m in result.history],
        "placement": placement_to_dict(result.placement),
        "score": score_to_dict(result.score, scene),
    }


def cmd_design(args) -> int:
    scene, params = _scene(args.scene)
    cfg = DesignConfig(
        q_init=args.q_init, q_max=args.q_max, target_rmse=args.target_rmse, bcm=_bcm_config(args), seed=args.seed
    )
    code = EXIT_OK
    try:
        result = design_system(scene, params, cfg)
    except Unsatisfiable as e:
        result = e.result
        code = EXIT_UNSATISFIABLE
        print(f"unsatisfiable: {e}", file=sys.stderr)
    write_json(args.output, _design_doc(result, scene, cfg.target_rmse))
    if args.history:
        _write_history(args.history, result.history)
    for q, m in result.history:
        print(f"Q={q} pairs ({2 * q} anchors): average RMSE {sig(m)} m")
    if code == EXIT_OK:
        print(f"target met with {result.q_star} pairs ({2 * result.q_star} anchors)")
    return code


def _parse_init(text: str):
    kind, _, value = text.partition(":")
    try:
        if kind == "truth":
            return TruthPerturbed(float(value) if value else TruthPerturbed().std)
        if kind == "grid":
            return GridSearch(float(value) if value else GridSearch().spacing)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError("estimator init must be truth[:std] or grid[:spacing]")


def cmd_simulate(args) -> int:
    scene, params = _scene(args.scene)
    placement = load_placement(args.placement, scene)
    cfg = SimConfig(
        trials=args.trials,
        seed=args.seed,
        outlier_rate=args.outlier_rate,
        outlier_reject_threshold=args.reject_threshold,
        estimator_init=args.init,
    )
    report = simulate(placement, scene, params, cfg, keep_trials=bool(args.trials_csv))
    doc = sim_report_to_dict(report)
    score = Evaluator(scene, params).score(placement)
    doc["predicted_avg_rmse"] = sig(score.avg_rmse)
    for d, m in zip(doc["points"], score.mse):
        d["predicted_rmse"] = sig(math.sqrt(m) if math.isfinite(m) else math.inf)
    if args.output:
        write_json(args.output, doc)
    if args.trials_csv:
        n = scene.dim
        with open(args.trials_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point", "trial"] + ["x", "y", "z"][:n])
            for i, s in enumerate(report.points):
                for t, est in enumerate(s.estimates):
                    w.writerow([i, t] + [sig(v) if np.isfinite(v) else "nan" for v in est])
    print(f"empirical average RMSE: {sig(report.avg_rmse)} m (predicted bound {sig(score.avg_rmse)} m)")
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    return EXIT_OK


def heatmap_cells(scene, lo, hi, spacing: float, z: Optional[float] = None) -> np.ndarray:
    """Grid cells for a heatmap, lexicographic, obstacle cells removed."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or lo.size not in (2, 3):
        raise UsageError("grid min/max need 2 or 3 matching coordinates")
    if not (spacing > 0 and np.all(lo <= hi)):
        raise UsageError("grid needs spacing > 0 and min <= max")
    if scene.dim == 3 and lo.size == 2:
        if z is None:
            raise UsageError("a 2-axis grid in a 3D scene needs --z")
        lo, hi = np.append(lo, z), np.append(hi, z)
    elif lo.size != scene.dim:
        raise UsageError(f"grid has {lo.size} axes but the scene is {scene.dim}D")
    cells = grid_points(lo, hi, spacing)
    if not all(scene.bounds.contains(c) for c in cells):
        raise UsageError("grid extends outside the scene bounds")
    keep = np.array([not scene.touches_obstacle(c) for c in cells], dtype=bool)
    return cells[keep]


def heatmap_values(scene, params, placement: Placement, cells: np.ndarray) -> np.ndarray:
    if cells.shape[0] == 0:
        return np.zeros(0)
    score = Evaluator(scene.with_sample_points(cells), params).score(placement)
    return np.where(np.isfinite(score.mse), np.sqrt(np.where(np.isfinite(score.mse), score.mse, 0.0)), np.inf)


def cmd_heatmap(args) -> int:
    scene, params = _scene(args.scene)
    placement = load_placement(args.placement, scene)
    cells = heatmap_cells(scene, args.min, args.max, args.spacing, args.z)
    values = heatmap_values(scene, params, placement, cells)
    header = ["x", "y", "z"][: scene.dim] + ["rmse"]
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c, v in zip(cells, values):
            w.writerow([sig(x) for x in c] + [sig(v)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_fixtures(args) -> int:
    for name in list_fixtures():
        print(name)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdoa-placer", description="UWB TDOA anchor placement and fleet sizing.")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="score a placement")
    p.add_argument("scene", help="scene JSON file or bundled fixture name")
    p.add_argument("placement")
    p.add_argument("-o", "--output", help="write the score as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize", help="run BCM anchor placement")
    p.add_argument("scene")
    init = p.add_mutually_exclusive_group(required=True)
    init.add_argument("--init", help="initial placement JSON")
    init.add_argument("--random-init", action="store_true", help="draw the initial placement from the feasible set")
    p.add_argument("--pairs", type=int, help="number of pairs for --random-init")
    p.add_argument("-o", "--output", default="placement.json")
    p.add_argument("--trace", help="write per-block objective values as JSON lines")
    p.add_argument("--score", help="write the optimized score as JSON")
    _add_bcm_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("design", help="find the smallest fleet meeting a target RMSE")
    p.add_argument("scene")
    p.add_argument("--target-rmse", type=_float_or_inf, required=True)
    p.add_argument("--q-init", type=int, default=1)
    p.add_argument("--q-max", type=int, default=8)
    p.add_argument("-o", "--output", default="design.json")
    p.add_argument("--history", default="design_history.csv")
    _add_bcm_flags(p, seed_help="design seed")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="Monte-Carlo multilateration")
    p.add_argument("scene")
    p.add_argument("placement")
    p.add_argument("--trials", type=int, default=SimConfig.trials)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--reject-threshold", type=_float_or_inf, default=1.0, help="drop measurements with |error| above this (inf disables)")
    p.add_argument("--init", type=_parse_init, default=TruthPerturbed(), help="truth[:std] or grid[:spacing]")
    p.add_argument("-o", "--output", help="write the report as JSON")
    p.add_argument("--trials-csv", help="dump every trial estimate as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("heatmap", help="per-cell RMSE bound as CSV")
    p.add_argument("scene")
    p.add_argument("placement")
    p.add_argument("--min", type=float, nargs="+", required=True)
    p.add_argument("--max", type=float, nargs="+", required=True)
    p.add_argument("--spacing", type=float, required=True)
    p.add_argument("--z", type=float, help="slice height for a 2-axis grid in a 3D scene")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("fixtures", help="list bundled scenes")
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        # every kernel runs sequentially, so the value never changes results
        log.debug("threads: %d", _resolve_threads(args.threads))
        return args.func(args)
    except (InputError, GeometryError, UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NoFeasibleStart, SingularGeometry) as e:
        print(f"optimizer failure: {e}", file=sys.stderr)
        return EXIT_OPTIMIZER
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
