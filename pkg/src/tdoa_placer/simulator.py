"""
Monte-Carlo check of the metric: draw TDOA measurements from the exact error
components, estimate positions by Gauss-Newton multilateration and report
empirical bias and RMSE per sample point.

Every trial owns a generator seeded from (seed, point index, trial index), so
results do not depend on batching or evaluation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .geometry import LinkStatus, Placement, Scene, grid_points
from .noise import NoiseParams

log = logging.getLogger(__name__)

MAX_ITER = 100
STEP_TOL = 1e-8
COND_LIMIT = 1e12
OUTLIER_HALF_WIDTH = 5.0
DIVERGENCE_WARN = 0.10


class Diverged(ArithmeticError):
    """Gauss-Newton hit a rank-deficient Jacobian or the iteration cap."""


class TooFewMeasurements(ValueError):
    """Fewer measurements than unknown coordinates."""


@dataclass(frozen=True)
class TruthPerturbed:
    """Start the estimator at the true position plus isotropic Gaussian noise."""

    std: float = 0.3


@dataclass(frozen=True)
class GridSearch:
    """Start at the best point of a grid over the scene bounds."""

    spacing: float = 0.25


@dataclass
class SimConfig:
    trials: int = 10000
    seed: int = 0
    outlier_rate: float = 0.0
    outlier_reject_threshold: float = 1.0
    estimator: str = "gauss-newton"
    estimator_init: Union[TruthPerturbed, GridSearch] = field(default_factory=TruthPerturbed)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if not self.outlier_reject_threshold > 0:
            raise ValueError("outlier_reject_threshold must be positive")
        if self.estimator != "gauss-newton":
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass
class PointStats:
    point: np.ndarray
    rmse: float
    bias: np.ndarray
    bias_stderr: np.ndarray
    rmse_stderr: float
    used: int
    diverged: int
    too_few: int
    estimates: Optional[np.ndarray] = None  # (trials, n), NaN where no estimate

    @property
    def failure_rate(self) -> float:
        total = self.used + self.diverged + self.too_few
        return (self.diverged + self.too_few) / total


@dataclass
class SimReport:
    points: list

    @property
    def per_point_rmse(self) -> np.ndarray:
        return np.array([s.rmse for s in self.points])

    @property
    def per_point_bias(self) -> np.ndarray:
        return np.array([s.bias for s in self.points])

    @property
    def divergences(self) -> int:
        return sum(s.diverged for s in self.points)

    @property
    def avg_rmse(self) -> float:
        r = self.per_point_rmse
        return float(np.mean(r)) if np.all(np.isfinite(r)) else math.inf

    @property
    def warnings(self) -> list[str]:
        return [
            f"point {i}: {100 * s.failure_rate:.1f}% of trials failed"
            for i, s in enumerate(self.points)
            if s.failure_rate > DIVERGENCE_WARN
        ]


# --------------------------------------------------------------------------
# measurement model


@dataclass
class _PairSetup:
    """Per-pair quantities at one true position."""

    active: np.ndarray  # (Q,) bool
    ideal: np.ndarray  # (Q,)
    tag_i: list  # LogNormalParams | None
    tag_j: list
    aa_std: np.ndarray  # (Q,)


def _pair_setup(p, placement: Placement, scene: Scene, params: NoiseParams) -> _PairSetup:
    p = np.asarray(p, dtype=float)
    a_i, a_j = placement.anchors[0::2], placement.anchors[1::2]
    s_i = scene.link_status(p, a_i)
    s_j = scene.link_status(p, a_j)
    s_aa = scene.link_status(a_i, a_j)
    r_i = np.linalg.norm(p - a_i, axis=1)
    r_j = np.linalg.norm(p - a_j, axis=1)
    r_aa = np.linalg.norm(a_i - a_j, axis=1)
    blocked = LinkStatus.BLOCKED
    active = (s_i != blocked) & (s_j != blocked) & (s_aa != blocked)
    active &= np.maximum(np.maximum(r_i, r_j), r_aa) <= scene.operating_range
    tag_i = [params.tag_component(LinkStatus(s), -1) for s in s_i]
    tag_j = [params.tag_component(LinkStatus(s), +1) for s in s_j]
    aa = [params.aa_component(LinkStatus(s)) for s in s_aa]
    aa_std = np.array([0.0 if c is None else c.std for c in aa])
    return _PairSetup(active, r_j - r_i, tag_i, tag_j, aa_std)


def _trial_rng(seed: int, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, point, trial]))


def _draw(setup: _PairSetup, sigma_los: float, cfg: SimConfig, rng: np.random.Generator):
    """One trial's errors for every pair; fixed draw layout per trial.

    Returns (error, corruption) arrays of length Q; corruption is 0 where no
    outlier was injected.
    """
    Q = setup.ideal.size
    z = rng.standard_normal(4 * Q)
    u = rng.random(2 * Q)
    err = sigma_los * z[:Q] + setup.aa_std * z[3 * Q:]
    for q in range(Q):
        for comp, zz in ((setup.tag_i[q], z[Q + q]), (setup.tag_j[q], z[2 * Q + q])):
            if comp is not None:
                err[q] += comp.sign * math.exp(comp.mu + comp.s * zz)
    corrupt = np.where(
        u[:Q] < cfg.outlier_rate, OUTLIER_HALF_WIDTH * (2.0 * u[Q:] - 1.0), 0.0
    )
    return err, corrupt


def sample_measurements(
    p,
    placement: Placement,
    scene: Scene,
    params: NoiseParams,
    rng: np.random.Generator,
    cfg: Optional[SimConfig] = None,
    injected: Optional[list] = None,
) -> list[tuple[int, float]]:
    """Noisy TDOA measurements ``(pair index, value)`` for a tag at ``p``.

    Pairs with a blocked link or out of range are omitted. Outliers, when
    enabled, are added before the rejection threshold is applied. If
    ``injected`` is a list, ``(pair index, corruption, kept)`` is appended for
    every injected outlier.
    """
    cfg = cfg or SimConfig(trials=1)
    setup = _pair_setup(p, placement, scene, params)
    err, corrupt = _draw(setup, params.sigma_los, cfg, rng)
    total = err + corrupt
    out = []
    for q in range(setup.ideal.size):
        if not setup.active[q]:
            continue
        kept = abs(total[q]) <= cfg.outlier_reject_threshold
        if injected is not None and corrupt[q] != 0.0:
            injected.append((q, float(corrupt[q]), bool(kept)))
        if kept:
            out.append((q, float(setup.ideal[q] + total[q])))
    return out


# --------------------------------------------------------------------------
# estimator


def _gauss_newton(a_i, a_j, d, mask, x0, max_iter=MAX_ITER, tol=STEP_TOL):
    """Batched damped Gauss-Newton for TDOA residuals.

    Args:
        a_i, a_j: (Q, n) pair anchors.
        d: (T, Q) measured range differences.
        mask: (T, Q) which measurements exist.
        x0: (T, n) starting points.

    Returns:
        (x, ok) with x of shape (T, n) and ok a (T,) bool of converged trials.
    """
    x = np.array(x0, dtype=float)
    T, n = x.shape
    w = mask.astype(float)
    d = np.where(mask, d, 0.0)

    def resid(y, rows):
        dj = y[:, None, :] - a_j[None]
        di = y[:, None, :] - a_i[None]
        rj = np.linalg.norm(dj, axis=2)
        ri = np.linalg.norm(di, axis=2)
        return (d[rows] - (rj - ri)) * w[rows], dj, di, rj, ri

    r, dj, di, rj, ri = resid(x, slice(None))
    cost = np.sum(r * r, axis=1)
    running = np.ones(T, dtype=bool)
    ok = np.zeros(T, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(running)
        if idx.size == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            J = (dj[idx] / rj[idx, :, None] - di[idx] / ri[idx, :, None]) * w[idx, :, None]
        JtJ = np.einsum("tqa,tqb->tab", J, J)
        Jtr = np.einsum("tqa,tq->ta", J, r[idx])
        finite = np.all(np.isfinite(JtJ), axis=(1, 2))
        c = np.full(idx.size, np.inf)
        c[finite] = np.linalg.cond(JtJ[finite])
        bad = ~(c < COND_LIMIT)
        if np.any(bad):
            running[idx[bad]] = False
            idx, JtJ, Jtr = idx[~bad], JtJ[~bad], Jtr[~bad]
        if idx.size == 0:
            break
        step = np.linalg.solve(JtJ, Jtr[..., None])[..., 0]
        # backtrack until the cost does not increase
        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        new_x = x[idx].copy()
        for _ in range(30):
            k = np.flatnonzero(pending)
            if k.size == 0:
                break
            trial = x[idx[k]] + alpha[k, None] * step[k]
            rr, *_ = resid(trial, idx[k])
            cc = np.sum(rr * rr, axis=1)
            good = cc <= cost[idx[k]]
            new_x[k[good]] = trial[good]
            pending[k[good]] = False
            alpha[k[~good]] *= 0.5
        # trials whose line search failed take the smallest step anyway
        if np.any(pending):
            k = np.flatnonzero(pending)
            new_x[k] = x[idx[k]] + alpha[k, None] * step[k]
        moved = np.linalg.norm(new_x - x[idx], axis=1)
        x[idx] = new_x
        r_new, dj_new, di_new, rj_new, ri_new = resid(x[idx], idx)
        r[idx], dj[idx], di[idx], rj[idx], ri[idx] = r_new, dj_new, di_new, rj_new, ri_new
        cost[idx] = np.sum(r_new * r_new, axis=1)
        done = moved < tol
        ok[idx[done]] = True
        running[idx[done]] = False
    return x, ok


def multilaterate(measurements, placement: Placement, x0, max_iter: int = MAX_ITER) -> np.ndarray:
    """Position estimate from ``(pair index, value)`` measurements.

    Raises:
        TooFewMeasurements: fewer measurements than coordinates.
        Diverged: rank-deficient Jacobian or no convergence in ``max_iter`` steps.
    """
    n = placement.dim
    if len(measurements) < n:
        raise TooFewMeasurements(f"{len(measurements)} measurements for {n} unknowns")
    Q = placement.n_pairs
    d = np.zeros((1, Q))
    mask = np.zeros((1, Q), dtype=bool)
    for q, v in measurements:
        d[0, q] = v
        mask[0, q] = True
    x, ok = _gauss_newton(placement.anchors[0::2], placement.anchors[1::2], d, mask,
                          np.asarray(x0, dtype=float).reshape(1, n), max_iter)
    if not ok[0]:
        raise Diverged("Gauss-Newton did not converge")
    return x[0]


def _grid_init(scene: Scene, placement: Placement, d, mask, spacing: float, chunk: int = 256):
    grid = grid_points(scene.bounds.lo, scene.bounds.hi, spacing)
    a_i, a_j = placement.anchors[0::2], placement.anchors[1::2]
    model = np.linalg.norm(grid[:, None] - a_j[None], axis=2) - np.linalg.norm(grid[:, None] - a_i[None], axis=2)
    best = np.empty((d.shape[0], grid.shape[1]))
    for s in range(0, d.shape[0], chunk):
        dd, mm = d[s:s + chunk], mask[s:s + chunk]
        cost = np.sum(((dd[:, None, :] - model[None]) * mm[:, None, :]) ** 2, axis=2)
        best[s:s + chunk] = grid[np.argmin(cost, axis=1)]
    return best


# --------------------------------------------------------------------------
# harness


def simulate_point(
    p,
    placement: Placement,
    scene: Scene,
    params: NoiseParams,
    cfg: SimConfig,
    point_index: int = 0,
    keep_trials: bool = False,
) -> PointStats:
    """Empirical bias and RMSE of the multilateration estimate at ``p``."""
    p = np.asarray(p, dtype=float)
    n, Q, T = p.size, placement.n_pairs, cfg.trials
    setup = _pair_setup(p, placement, scene, params)
    d = np.zeros((T, Q))
    mask = np.zeros((T, Q), dtype=bool)
    x0 = np.empty((T, n))
    perturb = isinstance(cfg.estimator_init, TruthPerturbed)
    for t in range(T):
        rng = _trial_rng(cfg.seed, point_index, t)
        err, corrupt = _draw(setup, params.sigma_los, cfg, rng)
        total = err + corrupt
        d[t] = setup.ideal + total
        mask[t] = setup.active & (np.abs(total) <= cfg.outlier_reject_threshold)
        if perturb:
            x0[t] = p + cfg.estimator_init.std * rng.standard_normal(n)
    if not perturb:
        x0 = _grid_init(scene, placement, d, mask, cfg.estimator_init.spacing)

    enough = mask.sum(axis=1) >= n
    x = np.full((T, n), np.nan)
    ok = np.zeros(T, dtype=bool)
    if np.any(enough):
        xe, oke = _gauss_newton(placement.anchors[0::2], placement.anchors[1::2], d[enough], mask[enough], x0[enough])
        x[enough], ok[enough] = xe, oke
    err = x[ok] - p
    used = int(ok.sum())
    if used:
        sq = np.sum(err * err, axis=1)
        mse = float(np.mean(sq))
        rmse = math.sqrt(mse)
        bias = err.mean(axis=0)
        bias_se = err.std(axis=0, ddof=1) / math.sqrt(used) if used > 1 else np.full(n, np.inf)
        # delta method on sqrt(mean(sq))
        rmse_se = float(np.std(sq, ddof=1) / math.sqrt(used) / (2 * rmse)) if used > 1 and rmse > 0 else math.inf
    else:
        rmse, bias, bias_se, rmse_se = math.inf, np.full(n, np.nan), np.full(n, np.inf), math.inf
    x[~ok] = np.nan
    stats = PointStats(p, rmse, bias, bias_se, rmse_se, used, int((enough & ~ok).sum()), int((~enough).sum()),
                       x if keep_trials else None)
    if stats.failure_rate > DIVERGENCE_WARN:
        log.warning("point %s: %.1f%% of trials failed to produce an estimate", p.tolist(), 100 * stats.failure_rate)
    return stats


def simulate(placement: Placement, scene: Scene, params: NoiseParams, cfg: SimConfig,
             keep_trials: bool = False) -> SimReport:
    """Run :func:`simulate_point` at every sample point of the scene."""
    return SimReport([
        simulate_point(p, placement, scene, params, cfg, point_index=i, keep_trials=keep_trials)
        for i, p in enumerate(scene.sample_points)
    ])
