"""
Fleet sizing: grow the number of anchor pairs until a target average RMSE
is reached or the pair budget runs out.

Anchors are restricted to the boundary of the space. Each round adds one
pair drawn uniformly on the boundary and re-runs BCM warm-started from the
previous optimum, so earlier pairs may still move.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Boundary, GeometryError, Placement, Scene
from .metric import Evaluator, PlacementScore
from .noise import NoiseParams
from .optimizer import BcmConfig, bcm_optimize, random_placement

log = logging.getLogger(__name__)

MET = "met"
UNSATISFIABLE = "unsatisfiable"


@dataclass
class DesignConfig:
    q_init: int = 1
    q_max: int = 8
    target_rmse: float = 0.1
    bcm: BcmConfig = field(default_factory=BcmConfig)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.q_init <= self.q_max:
            raise ValueError("need 1 <= q_init <= q_max")
        if not self.target_rmse > 0:
            raise ValueError("target_rmse must be positive")


@dataclass
class DesignResult:
    """Outcome of a design run.

    Attributes:
        q_star: Number of pairs in the returned placement.
        placement: Optimized placement with ``q_star`` pairs.
        score: Full score of ``placement``.
        history: ``(Q, avg_rmse)`` after optimizing each fleet size, Q increasing.
        status: ``"met"`` or ``"unsatisfiable"``.
    """

    q_star: int
    placement: Placement
    score: PlacementScore
    history: list
    status: str = MET

    @property
    def n_anchors(self) -> int:
        return 2 * self.q_star


class Unsatisfiable(RuntimeError):
    """The target was not reached with ``q_max`` pairs.

    ``result`` holds the last (largest) optimized fleet and the full history.
    """

    def __init__(self, result: DesignResult, target: float):
        self.result = result
        self.history = result.history
        best = min((m for _, m in result.history), default=math.inf)
        super().__init__(
            f"target {target:g} m not met with up to {result.q_star} pairs (best {best:g} m)"
        )


def _round_seed(seed: int, q: int) -> int:
    # independent of the target, so runs with different targets share a path
    return int(np.random.SeedSequence([seed, q]).generate_state(1, dtype=np.uint64)[0] >> 1)


def design_system(scene: Scene, params: NoiseParams, cfg: DesignConfig) -> DesignResult:
    """Smallest fleet (by greedy growth) whose optimized average RMSE meets the target.

    Raises:
        GeometryError: the scene does not restrict anchors to the boundary.
        Unsatisfiable: the target is still missed at ``q_max`` pairs.
    """
    if not isinstance(scene.feasible, Boundary):
        raise GeometryError("system design places anchors on the boundary; use a boundary scene")
    ev = Evaluator(scene, params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    placement = random_placement(scene, cfg.q_init, rng)
    history: list[tuple[int, float]] = []
    q = cfg.q_init
    while True:
        bcm = replace(cfg.bcm, seed=_round_seed(cfg.seed, q))
        placement, score, _ = bcm_optimize(placement, scene, params, bcm, evaluator=ev)
        history.append((q, score.avg_rmse))
        log.info("Q=%d pairs: average RMSE %.6g m", q, score.avg_rmse)
        if score.avg_rmse <= cfg.target_rmse:
            return DesignResult(q, placement, score, history, MET)
        if q >= cfg.q_max:
            raise Unsatisfiable(DesignResult(q, placement, score, history, UNSATISFIABLE), cfg.target_rmse)
        a_i = scene.feasible.sample(scene, rng)
        a_j = scene.feasible.sample(scene, rng)
        placement = placement.extended(a_i, a_j)
        q += 1
