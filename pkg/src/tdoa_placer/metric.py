"""
Bias-aware MSE lower bound for TDOA localization.

For a tag position p and anchor pairs k with Jacobian rows u_k, mask w_k,
error mean mu_k and variance v_k:

    FIM    I = sum_k w_k u_k u_k^T / v_k
    bias   beta = (J~^T J~)^-1 J~^T (w * mu)          (J~ rows w_k u_k)
    D      = d beta / d p   (central differences, NLOS indicators frozen)
    M(p)   = Tr((I + D) I^-1 (I + D)^T) + |beta|^2

The scene score is the mean over sample points of sqrt(M). Points where the
information matrix is singular get M = inf, which poisons the average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import LinkStatus, PairCondition, Placement, Scene
from .noise import ErrorModel, ModelTables, NoiseParams

COND_SINGULAR = 1e12
COND_QR = 1e6
DEFAULT_STEP = 1e-3


class SingularGeometry(ArithmeticError):
    """The active pairs cannot localize the point (rank-deficient Jacobian)."""


class CoincidentAnchor(ValueError):
    """The tag position coincides with an anchor; TDOA gradient is undefined."""


def ideal_tdoa(p, a_i, a_j) -> float:
    p, a_i, a_j = (np.asarray(x, dtype=float) for x in (p, a_i, a_j))
    ri = np.linalg.norm(p - a_i)
    rj = np.linalg.norm(p - a_j)
    if ri == 0 or rj == 0:
        raise CoincidentAnchor("tag coincides with an anchor")
    return float(rj - ri)


def tdoa_jacobian_row(p, a_i, a_j) -> np.ndarray:
    """Gradient of ||p - a_j|| - ||p - a_i|| with respect to p."""
    p, a_i, a_j = (np.asarray(x, dtype=float) for x in (p, a_i, a_j))
    di, dj = p - a_i, p - a_j
    ri, rj = np.linalg.norm(di), np.linalg.norm(dj)
    if ri == 0 or rj == 0:
        raise CoincidentAnchor("tag coincides with an anchor")
    return dj / rj - di / ri


def _rows(points, a_i, a_j):
    """Jacobian rows for an array of points (..., n); degenerate rows are nan."""
    di = points - a_i
    dj = points - a_j
    ri = np.sqrt(np.einsum("...k,...k->...", di, di))
    rj = np.sqrt(np.einsum("...k,...k->...", dj, dj))
    with np.errstate(divide="ignore", invalid="ignore"):
        return dj / rj[..., None] - di / ri[..., None], np.minimum(ri, rj)


def stencil(points: np.ndarray, step: float) -> np.ndarray:
    """(1 + 2n, N, n) array: the points, then +/- step along each axis."""
    n = points.shape[1]
    out = [points]
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        out += [points + e, points - e]
    return np.stack(out)


# --------------------------------------------------------------------------
# per-pair terms and their combination


@dataclass
class PairTerms:
    """Everything one anchor pair contributes at every sample point."""

    rows: np.ndarray  # (S, N, n) Jacobian rows on the stencil
    weight: np.ndarray  # (N,) 0/1
    mean: np.ndarray  # (N,)
    var: np.ndarray  # (N,)
    status: np.ndarray  # (N, 3) link codes: tag-i, tag-j, anchor-anchor
    in_range: np.ndarray  # (N,) bool
    coincident: np.ndarray  # (N,) bool, tag on top of an anchor


def pair_terms(scene: Scene, tables: ModelTables, st: np.ndarray, a_i, a_j) -> PairTerms:
    a_i = np.asarray(a_i, dtype=float)
    a_j = np.asarray(a_j, dtype=float)
    pts = st[0]
    s_i = scene.link_status(pts, a_i)
    s_j = scene.link_status(pts, a_j)
    s_aa = np.repeat(scene.link_status(a_i, a_j), pts.shape[0])
    ri = np.linalg.norm(pts - a_i, axis=1)
    rj = np.linalg.norm(pts - a_j, axis=1)
    r_max = np.maximum(np.maximum(ri, rj), np.linalg.norm(a_i - a_j))
    in_range = r_max <= scene.operating_range
    blocked = (s_i == LinkStatus.BLOCKED) | (s_j == LinkStatus.BLOCKED) | (s_aa == LinkStatus.BLOCKED)
    weight = (in_range & ~blocked).astype(float)
    mean, var = tables.compose(s_i, s_j, s_aa)
    rows, rmin = _rows(st, a_i, a_j)
    coincident = rmin[0] == 0
    return PairTerms(rows, weight, mean, var, np.stack([s_i, s_j, s_aa], axis=1), in_range, coincident)


@dataclass
class PointMetrics:
    jacobian: np.ndarray
    fim: np.ndarray
    bias: np.ndarray
    bias_gradient: np.ndarray
    mse_lb: float
    active_pairs: int
    conditions: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.mse_lb)


@dataclass
class Combined:
    """Vectorized metric results over all sample points."""

    fim: np.ndarray  # (N, n, n)
    bias: np.ndarray  # (N, n)
    bias_gradient: np.ndarray  # (N, n, n)
    mse: np.ndarray  # (N,)
    active: np.ndarray  # (N,)
    infeasible: np.ndarray  # (N,) bool


def _cond(mats: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(mats)
    lo, hi = ev[..., 0], ev[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(lo > 0, hi / lo, np.inf)
    return np.where(hi > 0, c, np.inf)


def partial_sums(terms: Sequence[PairTerms], shape: tuple):
    """Sums over pairs of w u u^T (stencil), w mu u (stencil) and w u u^T / v.

    Returns (A, c, F, active, coincident); masked pairs add exact zeros so
    the sums equal those over the unmasked pairs alone.
    """
    S, N, n = shape
    A = np.zeros((S, N, n, n))
    c = np.zeros((S, N, n))
    F = np.zeros((N, n, n))
    active = np.zeros(N, dtype=np.int64)
    coincident = np.zeros(N, dtype=bool)
    for t in terms:
        on = t.weight > 0
        active += on
        coincident |= on & t.coincident
        u = np.where(on[None, :, None], t.rows, 0.0)
        uu = u[..., :, None] * u[..., None, :]
        A += uu
        c += u * np.where(on, t.mean, 0.0)[None, :, None]
        F += uu[0] / np.where(on, t.var, 1.0)[:, None, None]
    return A, c, F, active, coincident


def combine(terms: Sequence[PairTerms], step: float = DEFAULT_STEP) -> Combined:
    """Assemble FIM, bias, bias gradient and the MSE bound at every point."""
    S, N, n = terms[0].rows.shape
    A, c, F, active, coincident = partial_sums(terms, (S, N, n))
    F = 0.5 * (F + np.swapaxes(F, -1, -2))
    infeasible = coincident | (active < n)
    with np.errstate(invalid="ignore"):
        cond_A = _cond(np.where(np.isfinite(A), A, 0.0))
        cond_F = _cond(np.where(np.isfinite(F), F, 0.0))
    infeasible |= (cond_F > COND_SINGULAR) | np.any(cond_A > COND_SINGULAR, axis=0)
    infeasible |= ~np.all(np.isfinite(A), axis=(0, 2, 3))

    ok = ~infeasible
    beta = np.full((S, N, n), np.nan)
    if ok.any():
        A_ok = A[:, ok]
        beta_ok = np.linalg.solve(A_ok, c[:, ok][..., None])[..., 0]
        ill = cond_A[:, ok] > COND_QR
        if ill.any():
            beta_ok[ill] = _lstsq_bias(terms, np.flatnonzero(ok), ill)
        beta[:, ok] = beta_ok

    D = np.full((N, n, n), np.nan)
    for k in range(n):
        D[:, :, k] = (beta[1 + 2 * k] - beta[2 + 2 * k]) / (2 * step)

    mse = np.full(N, np.inf)
    if ok.any():
        G = np.eye(n)[None] + D[ok]
        X = np.linalg.solve(F[ok], np.swapaxes(G, -1, -2))
        b0 = beta[0, ok]
        mse[ok] = np.einsum("nij,nji->n", G, X) + np.einsum("ni,ni->n", b0, b0)
    return Combined(F, beta[0], D, mse, active, infeasible)


def _lstsq_bias(terms, point_idx, ill_mask):
    """QR least-squares bias for ill-conditioned (stencil, point) entries."""
    out = []
    for s, col in zip(*np.nonzero(ill_mask)):
        i = point_idx[col]
        J = np.array([t.rows[s, i] if t.weight[i] else np.zeros(t.rows.shape[-1]) for t in terms])
        b = np.array([t.mean[i] if t.weight[i] else 0.0 for t in terms])
        out.append(_qr_solve(J, b))
    return np.array(out)


def _qr_solve(J, b):
    q, r = np.linalg.qr(J)
    return np.linalg.solve(r, q.T @ b)


# --------------------------------------------------------------------------
# single-point API


def _as_terms(p, placement: Placement, conditions, models, step):
    p = np.asarray(p, dtype=float)[None]
    st = stencil(p, step)
    terms = []
    for (a_i, a_j), cond, model in zip(placement.pairs(), conditions, models):
        rows, rmin = _rows(st, a_i, a_j)
        w = float(cond.weight)
        mean = model.mean if (w and model is not None) else 0.0
        var = model.variance if (w and model is not None) else 1.0
        status = np.array([[cond.tag_to_i, cond.tag_to_j, cond.anchor_to_anchor]])
        terms.append(PairTerms(rows, np.array([w]), np.array([mean]), np.array([var]),
                               status, np.array([cond.in_range]), rmin[0] == 0))
    return terms


def fim(p, placement: Placement, conditions: Sequence[PairCondition], models: Sequence[Optional[ErrorModel]]) -> np.ndarray:
    """Weighted Fisher information at p (zero matrix when nothing is usable)."""
    p = np.asarray(p, dtype=float)
    n = p.size
    out = np.zeros((n, n))
    for (a_i, a_j), cond, model in zip(placement.pairs(), conditions, models):
        if not cond.weight:
            continue
        u = tdoa_jacobian_row(p, a_i, a_j)
        out += np.outer(u, u) / model.variance
    return out


def bias(p, placement: Placement, conditions, models) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    J = []
    b = []
    for (a_i, a_j), cond, model in zip(placement.pairs(), conditions, models):
        w = cond.weight
        J.append(w * tdoa_jacobian_row(p, a_i, a_j) if w else np.zeros(p.size))
        b.append(w * model.mean if w else 0.0)
    J = np.array(J)
    b = np.array(b)
    JtJ = J.T @ J
    cond_num = _cond(JtJ[None])[0]
    if cond_num > COND_SINGULAR:
        raise SingularGeometry(f"J^T J is rank deficient (cond={cond_num:.3g})")
    if cond_num > COND_QR:
        return _qr_solve(J, b)
    return np.linalg.solve(JtJ, J.T @ b)


def bias_gradient(p, placement: Placement, conditions, models, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference Jacobian of the bias with NLOS indicators held fixed."""
    p = np.asarray(p, dtype=float)
    n = p.size
    D = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        D[:, k] = (bias(p + e, placement, conditions, models) - bias(p - e, placement, conditions, models)) / (2 * step)
    return D


def _models_for(conds, params):
    from .noise import compose_model

    return [compose_model(c, params) if c.weight else None for c in conds]


def mse_lower_bound(p, placement: Placement, scene: Scene, params: NoiseParams, step: float = DEFAULT_STEP) -> PointMetrics:
    """Weighted MSE lower bound at a single point."""
    from .geometry import classify_pair

    p = np.asarray(p, dtype=float)
    conds = [classify_pair(p, a_i, a_j, scene) for a_i, a_j in placement.pairs()]
    models = _models_for(conds, params)
    terms = _as_terms(p, placement, conds, models, step)
    J = np.array([t.rows[0, 0] * t.weight[0] if t.weight[0] else np.zeros(p.size) for t in terms])
    res = combine(terms, step)
    return PointMetrics(
        jacobian=J,
        fim=res.fim[0],
        bias=res.bias[0],
        bias_gradient=res.bias_gradient[0],
        mse_lb=float(res.mse[0]),
        active_pairs=int(res.active[0]),
        conditions=conds,
    )


# --------------------------------------------------------------------------
# scene-wide score


@dataclass
class PlacementScore:
    avg_rmse: float
    mse: np.ndarray
    bias: np.ndarray
    fim: np.ndarray
    bias_gradient: np.ndarray
    active_pairs: np.ndarray
    infeasible_points: list
    status: np.ndarray  # (N, Q, 3) link codes
    weight: np.ndarray  # (N, Q)

    @property
    def per_point_rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    def point(self, i: int) -> PointMetrics:
        return PointMetrics(
            jacobian=np.empty((0,)),
            fim=self.fim[i],
            bias=self.bias[i],
            bias_gradient=self.bias_gradient[i],
            mse_lb=float(self.mse[i]),
            active_pairs=int(self.active_pairs[i]),
        )

    def nlos_link_count(self, active_only: bool = False) -> dict[str, int]:
        st = self.status
        if active_only:
            st = st[self.weight > 0]
        return {s.name.lower(): int(np.sum(st == s)) for s in LinkStatus}


def reduce_rmse(mse: np.ndarray) -> float:
    """Mean of sqrt(M) over points, +inf if any point is unlocalizable."""
    if not np.all(np.isfinite(mse)):
        return math.inf
    return float(np.sum(np.sqrt(mse)) / mse.size)


class Evaluator:
    """Caches the stencil and per-pair terms for repeated scoring of one scene."""

    def __init__(self, scene: Scene, params: NoiseParams, step: float = DEFAULT_STEP):
        self.scene = scene
        self.params = params
        self.step = step
        self.tables = params.tables()
        self.stencil = stencil(scene.sample_points, step)

    def anchor_ok(self, a) -> bool:
        return self.scene.feasible.contains(self.scene, a)

    def terms(self, a_i, a_j) -> PairTerms:
        return pair_terms(self.scene, self.tables, self.stencil, a_i, a_j)

    def placement_terms(self, placement: Placement) -> list[PairTerms]:
        return [self.terms(a_i, a_j) for a_i, a_j in placement.pairs()]

    def rmse_from_terms(self, terms: Sequence[PairTerms]) -> float:
        return reduce_rmse(combine(terms, self.step).mse)

    def score(self, placement: Placement) -> PlacementScore:
        terms = self.placement_terms(placement)
        res = combine(terms, self.step)
        return PlacementScore(
            avg_rmse=reduce_rmse(res.mse),
            mse=res.mse,
            bias=res.bias,
            fim=res.fim,
            bias_gradient=res.bias_gradient,
            active_pairs=res.active,
            infeasible_points=[int(i) for i in np.flatnonzero(res.infeasible)],
            status=np.stack([t.status for t in terms], axis=1),
            weight=np.stack([t.weight for t in terms], axis=1),
        )


def average_rmse(placement: Placement, scene: Scene, params: NoiseParams, step: float = DEFAULT_STEP) -> PlacementScore:
    return Evaluator(scene, params, step).score(placement)
