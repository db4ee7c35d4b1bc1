"""
Block coordinate-wise minimization of the average RMSE over anchor pairs.

Each sweep visits the pairs in order and replaces one pair at a time by the
best result of a seeded multistart derivative-free local search, all other
pairs held fixed.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .geometry import (
    Boundary,
    ExplicitSet,
    FreeSpace,
    NoFeasibleStart,
    Placement,
    Scene,
    face_coordinates,
    face_point,
    perimeter_coordinate,
    perimeter_length,
    perimeter_point,
    validate_placement,
)
from ._kernel import block_mse
from .metric import Evaluator, PairTerms, PlacementScore, combine, partial_sums, reduce_rmse
from .noise import NoiseParams

log = logging.getLogger(__name__)

LOCAL_SEARCHES = ("nelder-mead", "pattern-search")


@dataclass
class BcmConfig:
    max_iter: int = 5
    n_starts: int = 50
    local_search: str = "nelder-mead"
    local_budget: int = 400
    seed: int = 0
    include_incumbent: bool = True
    early_stop: Optional[float] = None

    def __post_init__(self):
        if self.max_iter < 1 or self.n_starts < 1 or self.local_budget < 1:
            raise ValueError("max_iter, n_starts and local_budget must be >= 1")
        if self.local_search not in LOCAL_SEARCHES:
            raise ValueError(f"local_search must be one of {LOCAL_SEARCHES}")


@dataclass
class BcmStep:
    sweep: int
    block: int
    before: float
    after: float
    anchors: list
    evaluations: int


@dataclass
class BcmTrace:
    steps: list = field(default_factory=list)

    def objectives(self) -> list[float]:
        return [s.after for s in self.steps]

    def to_jsonl(self) -> str:
        lines = []
        for s in self.steps:
            d = asdict(s)
            for key in ("before", "after"):
                d[key] = d[key] if math.isfinite(d[key]) else "inf"
            lines.append(json.dumps(d))
        return "\n".join(lines) + ("\n" if lines else "")


# --------------------------------------------------------------------------
# search-space parameterizations of one block (two anchors)


class _BlockSpace:
    def encode(self, a_i, a_j):
        raise NotImplementedError

    def decode(self, x, ctx):
        raise NotImplementedError

    def steps(self) -> np.ndarray:
        raise NotImplementedError


class _FreeSpaceBlock(_BlockSpace):
    def __init__(self, scene: Scene):
        self.scene = scene
        self.n = scene.dim

    def encode(self, a_i, a_j):
        return np.concatenate([a_i, a_j]), None

    def decode(self, x, ctx):
        a_i, a_j = x[: self.n], x[self.n:]
        feas = self.scene.feasible
        if not (feas.contains(self.scene, a_i) and feas.contains(self.scene, a_j)):
            return None
        return a_i, a_j

    def steps(self):
        ext = self.scene.bounds.hi - self.scene.bounds.lo
        return np.tile(0.1 * ext, 2)


class _PerimeterBlock(_BlockSpace):
    def __init__(self, scene: Scene):
        self.scene = scene

    def encode(self, a_i, a_j):
        b = self.scene.bounds
        return np.array([perimeter_coordinate(b, a_i), perimeter_coordinate(b, a_j)]), None

    def decode(self, x, ctx):
        b = self.scene.bounds
        a_i, a_j = perimeter_point(b, x[0]), perimeter_point(b, x[1])
        if self.scene.inside_obstacle(a_i) or self.scene.inside_obstacle(a_j):
            return None
        return a_i, a_j

    def steps(self):
        return np.full(2, 0.05 * perimeter_length(self.scene.bounds))


class _FaceBlock(_BlockSpace):
    """3D boundary: faces are fixed per local search, in-face coordinates move."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def encode(self, a_i, a_j):
        b = self.scene.bounds
        f_i, uv_i = face_coordinates(b, a_i)
        f_j, uv_j = face_coordinates(b, a_j)
        return np.concatenate([uv_i, uv_j]), (f_i, f_j)

    def decode(self, x, ctx):
        if np.any(x < 0.0) or np.any(x > 1.0):
            return None
        b = self.scene.bounds
        a_i, a_j = face_point(b, ctx[0], x[:2]), face_point(b, ctx[1], x[2:])
        if self.scene.inside_obstacle(a_i) or self.scene.inside_obstacle(a_j):
            return None
        return a_i, a_j

    def steps(self):
        return np.full(4, 0.1)


def block_space(scene: Scene) -> _BlockSpace:
    if isinstance(scene.feasible, FreeSpace):
        return _FreeSpaceBlock(scene)
    if isinstance(scene.feasible, Boundary):
        return _PerimeterBlock(scene) if scene.dim == 2 else _FaceBlock(scene)
    raise TypeError(f"no continuous parameterization for {scene.feasible.kind}")


# --------------------------------------------------------------------------
# local searches with a hard evaluation budget


class _BudgetExhausted(Exception):
    pass


class _Tracked:
    """Objective wrapper that enforces the budget and remembers the best point."""

    def __init__(self, fun: Callable[[np.ndarray], float], budget: int):
        self.fun = fun
        self.budget = budget
        self.count = 0
        self.best_f = math.inf
        self.best_x = None

    def __call__(self, x):
        if self.count >= self.budget:
            raise _BudgetExhausted
        self.count += 1
        f = self.fun(np.asarray(x, dtype=float))
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


def _nelder_mead(tracked: _Tracked, x0, steps):
    simplex = np.vstack([x0, x0 + np.diag(steps)])
    # inf - inf in scipy's simplex spread test is harmless
    with np.errstate(invalid="ignore"):
        minimize(
            tracked,
            x0,
            method="Nelder-Mead",
            options={"initial_simplex": simplex, "maxfev": tracked.budget, "xatol": 1e-5, "fatol": 1e-9},
        )


def _pattern_search(tracked: _Tracked, x0, steps, min_step=1e-5):
    x = np.array(x0, dtype=float)
    fx = tracked(x)
    h = np.array(steps, dtype=float)
    while np.max(h) > min_step:
        improved = False
        for k in range(x.size):
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[k] += sgn * h[k]
                fy = tracked(y)
                if fy < fx:
                    x, fx, improved = y, fy, True
                    break
        if not improved:
            h *= 0.5


def local_search(fun, x0, steps, budget: int, method: str = "nelder-mead"):
    """Run one budgeted local search; returns (best_x, best_f, evaluations)."""
    tracked = _Tracked(fun, budget)
    try:
        if method == "nelder-mead":
            _nelder_mead(tracked, x0, steps)
        else:
            _pattern_search(tracked, x0, steps)
    except _BudgetExhausted:
        pass
    return tracked.best_x, tracked.best_f, tracked.count


# --------------------------------------------------------------------------
# block and full BCM


# dominates any realistic average RMSE in meters
INFEASIBLE_PENALTY = 1e6


def search_value(mse: np.ndarray, active: np.ndarray, n: int) -> float:
    """Search objective: the average RMSE when every point is localizable.

    Otherwise ``INFEASIBLE_PENALTY`` per unlocalizable point and per missing
    measurement (points with fewer than ``n`` usable pairs), plus the mean RMSE
    of the localizable points. The penalty terms give the search a direction
    out of the region where the average RMSE is infinite.
    """
    ok = np.isfinite(mse)
    if ok.all():
        return reduce_rmse(mse)
    deficit = int(np.maximum(n - np.asarray(active), 0).sum())
    mean_ok = float(np.mean(np.sqrt(mse[ok]))) if ok.any() else 0.0
    return INFEASIBLE_PENALTY * (int((~ok).sum()) + deficit) + mean_ok


class BlockObjective:
    """Search value as a function of one pair, with the other pairs cached.

    The compiled kernel adds the trial pair to precomputed partial sums of
    the fixed pairs; the numpy reference path is used when the kernel flags
    an ill-conditioned point or ``fast`` is off.
    """

    def __init__(self, evaluator: Evaluator, terms: list[PairTerms], q: int, fast: bool = True):
        self.ev = evaluator
        self.terms = list(terms)
        self.q = q
        self.fast = fast
        others = [t for k, t in enumerate(self.terms) if k != q]
        shape = evaluator.stencil.shape
        if others:
            self._sums = partial_sums(others, shape)
        else:
            S, N, n = shape
            self._sums = (np.zeros((S, N, n, n)), np.zeros((S, N, n)), np.zeros((N, n, n)),
                          np.zeros(N, dtype=np.int64), np.zeros(N, dtype=bool))
        scene = evaluator.scene
        tb = evaluator.tables
        self._geom = (scene._lo, scene._hi, scene._codes, tb.tag_mean, tb.tag_var, tb.aa_var,
                      tb.sigma2, float(scene.operating_range))

    def reference(self, a_i, a_j) -> float:
        trial = list(self.terms)
        trial[self.q] = self.ev.terms(a_i, a_j)
        res = combine(trial, self.ev.step)
        return search_value(res.mse, res.active, self.ev.scene.dim)

    def at(self, a_i, a_j) -> float:
        if not self.fast:
            return self.reference(a_i, a_j)
        A0, c0, F0, act0, co0 = self._sums
        mse, active, needs_ref = block_mse(self.ev.stencil, np.asarray(a_i, float), np.asarray(a_j, float),
                                   *self._geom, A0, c0, F0, act0, co0, self.ev.step)
        if needs_ref:
            return self.reference(a_i, a_j)
        return search_value(mse, active, self.ev.scene.dim)


def optimize_block(
    q: int,
    current: Placement,
    scene: Scene,
    params: NoiseParams,
    cfg: BcmConfig,
    rng: np.random.Generator,
    evaluator: Optional[Evaluator] = None,
    terms: Optional[list] = None,
):
    """Multistart search over pair q.

    Returns ((a_i, a_j), search value, evaluations); the search value is the
    average RMSE whenever that is finite (see :func:`search_value`).
    """
    ev = evaluator or Evaluator(scene, params)
    if terms is None:
        terms = ev.placement_terms(current)
    obj = BlockObjective(ev, terms, q)
    inc_i, inc_j = current.pair(q)

    best = (np.array(inc_i), np.array(inc_j))
    best_f = math.inf
    evals = 0
    if cfg.include_incumbent:
        best_f = obj.at(inc_i, inc_j)
        evals += 1

    if isinstance(scene.feasible, ExplicitSet):
        return _enumerate_block(obj, scene.feasible, cfg, rng, best, best_f, evals)

    space = block_space(scene)
    steps = space.steps()
    starts = [space.encode(scene.feasible.sample(scene, rng), scene.feasible.sample(scene, rng))
              for _ in range(cfg.n_starts)]
    if cfg.include_incumbent:
        starts.insert(0, space.encode(inc_i, inc_j))

    for x0, ctx in starts:
        def fun(x, ctx=ctx):
            pair = space.decode(x, ctx)
            return math.inf if pair is None else obj.at(*pair)

        # the incumbent's own evaluation is exact; its local search may start
        # from a re-encoded copy, so only strict improvements replace it
        budget = cfg.local_budget - (1 if cfg.include_incumbent and evals == 1 else 0)
        x, f, n = local_search(fun, x0, steps, budget, cfg.local_search)
        evals += n
        if x is not None and f < best_f:
            pair = space.decode(x, ctx)
            best, best_f = (np.array(pair[0]), np.array(pair[1])), f
    return best, best_f, evals


def _enumerate_block(obj: BlockObjective, feas: ExplicitSet, cfg, rng, best, best_f, evals):
    combos = list(itertools.combinations(range(len(feas.candidates)), 2))
    cap = cfg.n_starts * cfg.local_budget
    if len(combos) > cap:
        pick = np.sort(rng.choice(len(combos), size=cap, replace=False))
        combos = [combos[k] for k in pick]
    for i, j in combos:
        a_i, a_j = feas.candidates[i], feas.candidates[j]
        f = obj.at(a_i, a_j)
        evals += 1
        if f < best_f:
            best, best_f = (a_i.copy(), a_j.copy()), f
    return best, best_f, evals


def random_placement(scene: Scene, n_pairs: int, rng: np.random.Generator) -> Placement:
    return Placement(np.array([scene.feasible.sample(scene, rng) for _ in range(2 * n_pairs)]))


def bcm_optimize(
    initial: Placement,
    scene: Scene,
    params: NoiseParams,
    cfg: BcmConfig,
    evaluator: Optional[Evaluator] = None,
) -> tuple[Placement, PlacementScore, BcmTrace]:
    """Block coordinate-wise minimization starting from ``initial``."""
    validate_placement(initial, scene)
    ev = evaluator or Evaluator(scene, params)
    rng = np.random.default_rng(cfg.seed)
    placement = initial
    terms = ev.placement_terms(placement)
    res = combine(terms, ev.step)
    current, current_key = reduce_rmse(res.mse), search_value(res.mse, res.active, scene.dim)
    trace = BcmTrace()

    for k in range(cfg.max_iter):
        sweep_start = current
        for q in range(placement.n_pairs):
            (a_i, a_j), key, n = optimize_block(q, placement, scene, params, cfg, rng, ev, terms)
            f = current
            if key < current_key or not cfg.include_incumbent:
                # re-score on the reference path so recorded values are exact
                trial = list(terms)
                trial[q] = ev.terms(a_i, a_j)
                res = combine(trial, ev.step)
                key_ref = search_value(res.mse, res.active, scene.dim)
                if key_ref <= current_key or not cfg.include_incumbent:
                    placement = placement.with_pair(q, a_i, a_j)
                    terms, f, current_key = trial, reduce_rmse(res.mse), key_ref
            trace.steps.append(BcmStep(k, q, current, f, placement.anchors[2 * q: 2 * q + 2].tolist(), n))
            log.debug("sweep %d block %d: %.6g -> %.6g (%d evals)", k, q, current, f, n)
            current = f
        if cfg.early_stop is not None and sweep_start - current < cfg.early_stop:
            break

    return placement, ev.score(placement), trace
