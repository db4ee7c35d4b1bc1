"""
Scene geometry: obstacles, anchor feasibility sets, placements and
ray-traced link classification.

Obstacles are closed axis-aligned boxes. A radio link is the straight
segment between two radios; its NLOS status is decided by which obstacle
categories the segment touches.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ._kernel import inside_any

SLAB_EPS = 1e-9


class Material(enum.IntEnum):
    """Obstacle category. The value is the link status it induces."""

    NON_METAL = 1
    METAL = 2
    BLOCKING = 3

    @classmethod
    def parse(cls, name: str) -> "Material":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {
            "nonmetal": cls.NON_METAL,
            "non_metal": cls.NON_METAL,
            "common": cls.NON_METAL,
            "metal": cls.METAL,
            "blocking": cls.BLOCKING,
            "wall": cls.BLOCKING,
        }
        if key not in aliases:
            raise ValueError(f"unknown obstacle material {name!r}")
        return aliases[key]


class LinkStatus(enum.IntEnum):
    """Propagation condition of one radio link.

    Ordered by dominance so that the status of a link crossing several
    obstacles is the maximum over the materials it touches.
    """

    LOS = 0
    COMMON_NLOS = 1
    SEVERE_NLOS = 2
    BLOCKED = 3


class GeometryError(ValueError):
    """Invalid geometric input (point inside an obstacle, empty ROI, ...)."""


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size not in (2, 3):
            raise GeometryError("box corners must be 2D or 3D points of equal size")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise GeometryError("box corners must be finite")
        if not np.all(lo < hi):
            raise GeometryError(f"box min corner {lo} must be below max corner {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, p, strict: bool = False) -> bool:
        # scalar loop: called once per objective evaluation
        lo, hi = self.lo.tolist(), self.hi.tolist()
        coords = np.asarray(p, dtype=float).tolist()
        if strict:
            return all(l + SLAB_EPS < x < h - SLAB_EPS for x, l, h in zip(coords, lo, hi))
        return all(l - SLAB_EPS <= x <= h + SLAB_EPS for x, l, h in zip(coords, lo, hi))


@dataclass(frozen=True)
class Obstacle(Box):
    material: Material = Material.NON_METAL


def segments_hit_boxes(p0, p1, lo, hi, eps: float = SLAB_EPS) -> np.ndarray:
    """Vectorized slab test of M segments against K closed boxes.

    Args:
        p0, p1: segment endpoints, shape (M, n).
        lo, hi: box corners, shape (K, n).
        eps: boxes are inflated by this margin (meters) so that grazing
            and axis-parallel segments count as touching.

    Returns:
        Boolean array of shape (M, K).
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    lo = np.atleast_2d(np.asarray(lo, dtype=float)) - eps
    hi = np.atleast_2d(np.asarray(hi, dtype=float)) + eps
    if lo.shape[0] == 0:
        return np.zeros((p0.shape[0], 0), dtype=bool)

    d = (p1 - p0)[:, None, :]
    o = p0[:, None, :]
    parallel = np.abs(d) < 1e-15
    safe_d = np.where(parallel, 1.0, d)
    t0 = (lo[None] - o) / safe_d
    t1 = (hi[None] - o) / safe_d
    t_near = np.minimum(t0, t1)
    t_far = np.maximum(t0, t1)
    inside = (o >= lo[None]) & (o <= hi[None])
    t_near = np.where(parallel, np.where(inside, -np.inf, np.inf), t_near)
    t_far = np.where(parallel, np.where(inside, np.inf, -np.inf), t_far)
    enter = np.maximum(t_near.max(axis=2), 0.0)
    leave = np.minimum(t_far.min(axis=2), 1.0)
    return enter <= leave


def segment_intersects_box(p0, p1, box: Box) -> bool:
    """True when the segment p0-p1 touches the closed box."""
    return bool(segments_hit_boxes(p0, p1, box.lo[None], box.hi[None])[0, 0])


# --------------------------------------------------------------------------
# anchor feasibility sets


class AnchorFeasibility:
    """Set of admissible anchor positions with uniform sampling."""

    kind: str = ""

    def sample(self, scene: "Scene", rng: np.random.Generator, max_tries: int = 1000):
        raise NotImplementedError

    def contains(self, scene: "Scene", point) -> bool:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class NoFeasibleStart(RuntimeError):
    """The feasible-set sampler failed too many consecutive draws."""


@dataclass(frozen=True)
class FreeSpace(AnchorFeasibility):
    kind = "free_space"

    def sample(self, scene, rng, max_tries=1000):
        for _ in range(max_tries):
            p = rng.uniform(scene.bounds.lo, scene.bounds.hi)
            if not scene.inside_obstacle(p):
                return p
        raise NoFeasibleStart(f"no obstacle-free point after {max_tries} draws")

    def contains(self, scene, point) -> bool:
        point = np.asarray(point, dtype=float)
        return scene.bounds.contains(point) and not scene.inside_obstacle(point)


@dataclass(frozen=True)
class Boundary(AnchorFeasibility):
    """Anchors on the surface of the bounding box.

    In 2D the perimeter is parameterized by arc length, starting at the min
    corner and running counter-clockwise. In 3D each anchor sits on one of six
    faces (index 2*axis + side) with two in-face coordinates in [0, 1].
    """

    kind = "boundary"

    def sample(self, scene, rng, max_tries=1000):
        for _ in range(max_tries):
            if scene.dim == 2:
                p = perimeter_point(scene.bounds, rng.uniform(0.0, perimeter_length(scene.bounds)))
            else:
                areas = face_areas(scene.bounds)
                f = int(rng.choice(6, p=areas / areas.sum()))
                p = face_point(scene.bounds, f, rng.uniform(0.0, 1.0, size=2))
            if not scene.inside_obstacle(p):
                return p
        raise NoFeasibleStart(f"no boundary point outside obstacles after {max_tries} draws")

    def contains(self, scene, point) -> bool:
        point = np.asarray(point, dtype=float)
        if not scene.bounds.contains(point) or scene.inside_obstacle(point):
            return False
        gap = np.minimum(np.abs(point - scene.bounds.lo), np.abs(point - scene.bounds.hi))
        return bool(gap.min() <= 1e-6)


@dataclass(frozen=True)
class ExplicitSet(AnchorFeasibility):
    candidates: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    kind = "explicit"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        if c.shape[0] < 2:
            raise GeometryError("an explicit anchor set needs at least two candidates")
        object.__setattr__(self, "candidates", c)

    def sample(self, scene, rng, max_tries=1000):
        return self.candidates[rng.integers(len(self.candidates))].copy()

    def contains(self, scene, point) -> bool:
        d = np.linalg.norm(self.candidates - np.asarray(point, dtype=float), axis=1)
        return bool(d.min() <= 1e-9)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "points": self.candidates.tolist()}


def perimeter_length(bounds: Box) -> float:
    w, h = bounds.hi - bounds.lo
    return float(2 * (w + h))


def perimeter_point(bounds: Box, s: float) -> np.ndarray:
    """Point at arc length ``s`` (wrapped) along the 2D boundary."""
    (x0, y0), (x1, y1) = bounds.lo, bounds.hi
    w, h = x1 - x0, y1 - y0
    s = float(s) % (2 * (w + h))
    if s < w:
        return np.array([x0 + s, y0])
    s -= w
    if s < h:
        return np.array([x1, y0 + s])
    s -= h
    if s < w:
        return np.array([x1 - s, y1])
    s -= w
    return np.array([x0, y1 - s])


def perimeter_coordinate(bounds: Box, p) -> float:
    """Inverse of :func:`perimeter_point` for a point near the boundary."""
    (x0, y0), (x1, y1) = bounds.lo, bounds.hi
    w, h = x1 - x0, y1 - y0
    x, y = np.clip(np.asarray(p, dtype=float), bounds.lo, bounds.hi)
    dists = [y - y0, x1 - x, y1 - y, x - x0]
    edge = int(np.argmin(dists))
    if edge == 0:
        return float(x - x0)
    if edge == 1:
        return float(w + (y - y0))
    if edge == 2:
        return float(w + h + (x1 - x))
    return float(2 * w + h + (y1 - y))


def face_areas(bounds: Box) -> np.ndarray:
    ext = bounds.hi - bounds.lo
    areas = []
    for f in range(6):
        axis = f // 2
        others = [a for a in range(3) if a != axis]
        areas.append(ext[others[0]] * ext[others[1]])
    return np.asarray(areas)


def face_point(bounds: Box, face: int, uv) -> np.ndarray:
    axis, side = divmod(int(face), 2)
    others = [a for a in range(3) if a != axis]
    p = np.empty(3)
    p[axis] = bounds.hi[axis] if side else bounds.lo[axis]
    for k, a in enumerate(others):
        p[a] = bounds.lo[a] + uv[k] * (bounds.hi[a] - bounds.lo[a])
    return p


def face_coordinates(bounds: Box, p) -> tuple[int, np.ndarray]:
    """Face index and in-face coordinates of the face closest to ``p``."""
    p = np.asarray(p, dtype=float)
    gaps = np.stack([np.abs(p - bounds.lo), np.abs(p - bounds.hi)], axis=1).ravel()
    face = int(np.argmin(gaps))
    axis = face // 2
    others = [a for a in range(3) if a != axis]
    ext = bounds.hi - bounds.lo
    uv = np.array([(p[a] - bounds.lo[a]) / ext[a] for a in others])
    return face, np.clip(uv, 0.0, 1.0)


# --------------------------------------------------------------------------
# scene and placement


@dataclass(frozen=True)
class Scene:
    """Indoor space, obstacles, region-of-interest samples and anchor set."""

    bounds: Box
    obstacles: tuple = ()
    sample_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    feasible: AnchorFeasibility = field(default_factory=FreeSpace)
    operating_range: float = float("inf")

    def __post_init__(self):
        n = self.bounds.dim
        obstacles = tuple(self.obstacles)
        for ob in obstacles:
            if ob.dim != n:
                raise GeometryError("obstacle dimension does not match the scene")
        object.__setattr__(self, "obstacles", obstacles)
        lo = np.array([o.lo for o in obstacles]).reshape(-1, n)
        hi = np.array([o.hi for o in obstacles]).reshape(-1, n)
        codes = np.array([int(o.material) for o in obstacles], dtype=np.int64)
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)
        object.__setattr__(self, "_codes", codes)
        pts = np.asarray(self.sample_points, dtype=float).reshape(-1, n)
        if pts.shape[0] < 1:
            raise GeometryError("the region of interest needs at least one sample point")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("sample points must be finite")
        for i, p in enumerate(pts):
            if not self.bounds.contains(p):
                raise GeometryError(f"sample point {i} {p.tolist()} lies outside the bounds")
            if self.touches_obstacle(p):
                raise GeometryError(f"sample point {i} {p.tolist()} is not strictly outside every obstacle")
        pts.setflags(write=False)
        object.__setattr__(self, "sample_points", pts)
        if not self.operating_range > 0:
            raise GeometryError("operating range must be positive")

    @property
    def dim(self) -> int:
        return self.bounds.dim

    @property
    def n_points(self) -> int:
        return self.sample_points.shape[0]

    def inside_obstacle(self, p) -> bool:
        """True when p lies strictly inside some obstacle."""
        if not self.obstacles:
            return False
        return inside_any(np.asarray(p, dtype=float), self._lo, self._hi, SLAB_EPS)

    def touches_obstacle(self, p) -> bool:
        """True when p lies inside or on the surface of some obstacle."""
        if not self.obstacles:
            return False
        return inside_any(np.asarray(p, dtype=float), self._lo, self._hi, -SLAB_EPS)

    def link_status(self, p0, p1) -> np.ndarray:
        """Vectorized link classification for M segments, no validation."""
        p0 = np.atleast_2d(p0)
        p1 = np.atleast_2d(p1)
        m = max(p0.shape[0], p1.shape[0])
        if not self.obstacles:
            return np.zeros(m, dtype=np.int64)
        p0 = np.broadcast_to(p0, (m, self.dim))
        p1 = np.broadcast_to(p1, (m, self.dim))
        hits = segments_hit_boxes(p0, p1, self._lo, self._hi)
        return np.max(np.where(hits, self._codes[None, :], 0), axis=1)

    def with_sample_points(self, points) -> "Scene":
        return Scene(self.bounds, self.obstacles, points, self.feasible, self.operating_range)

    def transformed(self, rotation=None, shift=None) -> "Scene":
        """Apply p -> R p + shift to all geometry (rotation must keep boxes axis-aligned)."""
        n = self.dim
        R = np.eye(n) if rotation is None else np.asarray(rotation, dtype=float)
        t = np.zeros(n) if shift is None else np.asarray(shift, dtype=float)

        def box(lo, hi):
            a, b = R @ lo + t, R @ hi + t
            return np.minimum(a, b), np.maximum(a, b)

        blo, bhi = box(self.bounds.lo, self.bounds.hi)
        obs = []
        for o in self.obstacles:
            lo, hi = box(o.lo, o.hi)
            obs.append(Obstacle(lo, hi, o.material))
        pts = self.sample_points @ R.T + t
        return Scene(Box(blo, bhi), tuple(obs), pts, self.feasible, self.operating_range)


@dataclass(frozen=True)
class PairCondition:
    tag_to_i: LinkStatus
    tag_to_j: LinkStatus
    anchor_to_anchor: LinkStatus
    in_range: bool = True

    @property
    def weight(self) -> int:
        blocked = LinkStatus.BLOCKED in (self.tag_to_i, self.tag_to_j, self.anchor_to_anchor)
        return int(self.in_range and not blocked)


@dataclass(frozen=True)
class Placement:
    """Anchor positions; anchors (2k, 2k+1) form pair k (0-based)."""

    anchors: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        if a.shape[0] < 2 or a.shape[0] % 2:
            raise GeometryError("a placement needs a positive even number of anchors")
        if a.shape[1] not in (2, 3):
            raise GeometryError("anchors must be 2D or 3D points")
        if not np.all(np.isfinite(a)):
            raise GeometryError("anchor coordinates must be finite")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "anchors", a)

    @property
    def n_pairs(self) -> int:
        return self.anchors.shape[0] // 2

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def pair(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        return self.anchors[2 * q], self.anchors[2 * q + 1]

    def pairs(self) -> Iterable[tuple[np.ndarray, np.ndarray]]:
        for q in range(self.n_pairs):
            yield self.pair(q)

    def with_pair(self, q: int, a_i, a_j) -> "Placement":
        a = np.array(self.anchors)
        a[2 * q] = a_i
        a[2 * q + 1] = a_j
        return Placement(a)

    def subset(self, pairs: Sequence[int]) -> "Placement":
        idx = [k for q in pairs for k in (2 * q, 2 * q + 1)]
        return Placement(self.anchors[idx])

    def extended(self, a_i, a_j) -> "Placement":
        return Placement(np.vstack([self.anchors, [a_i, a_j]]))


def validate_placement(placement: Placement, scene: Scene) -> None:
    if placement.dim != scene.dim:
        raise GeometryError("placement dimension does not match the scene")
    for k, a in enumerate(placement.anchors):
        if not scene.feasible.contains(scene, a):
            why = "lies inside an obstacle" if scene.inside_obstacle(a) else f"violates the {scene.feasible.kind} feasibility set"
            raise GeometryError(f"anchor {k} {a.tolist()} {why}")


def classify_link(p0, p1, scene: Scene) -> LinkStatus:
    """Classify the radio link between two points by ray tracing."""
    for p in (p0, p1):
        if scene.inside_obstacle(p):
            raise GeometryError(f"link endpoint {np.asarray(p).tolist()} lies inside an obstacle")
    return LinkStatus(int(scene.link_status(np.asarray(p0, float), np.asarray(p1, float))[0]))


def classify_pair(p, a_i, a_j, scene: Scene) -> PairCondition:
    p, a_i, a_j = (np.asarray(x, dtype=float) for x in (p, a_i, a_j))
    r_max = max(np.linalg.norm(p - a_i), np.linalg.norm(p - a_j), np.linalg.norm(a_i - a_j))
    return PairCondition(
        classify_link(p, a_i, scene),
        classify_link(p, a_j, scene),
        classify_link(a_i, a_j, scene),
        in_range=bool(r_max <= scene.operating_range),
    )


def grid_points(lo, hi, spacing) -> np.ndarray:
    """Lexicographically ordered regular grid covering [lo, hi].

    Each axis runs from lo in steps of ``spacing`` and always includes hi,
    so a spacing larger than the region yields the corners.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not spacing > 0:
        raise GeometryError("grid spacing must be positive")
    axes = []
    for a, b in zip(lo, hi):
        k = int(np.floor((b - a) / spacing + 1e-9))
        ticks = a + spacing * np.arange(k + 1)
        if b - ticks[-1] > 1e-9 * max(1.0, abs(b)):
            ticks = np.append(ticks, b)
        axes.append(ticks)
    return np.array(list(itertools.product(*axes)), dtype=float)


def grid_sample_roi(region: Box, spacing: float, scene: Optional[Scene] = None, obstacles=None) -> np.ndarray:
    """Grid-sample a region, dropping points inside or on any obstacle."""
    pts = grid_points(region.lo, region.hi, spacing)
    obs = scene.obstacles if scene is not None else (obstacles or ())
    if obs:
        lo = np.array([o.lo for o in obs])
        hi = np.array([o.hi for o in obs])
        touched = np.all((pts[:, None] >= lo[None] - SLAB_EPS) & (pts[:, None] <= hi[None] + SLAB_EPS), axis=2)
        pts = pts[~touched.any(axis=1)]
    if pts.shape[0] == 0:
        raise GeometryError("region of interest is fully obstructed")
    return pts
