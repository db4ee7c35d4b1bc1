"""
TDOA measurement error models under LOS / common NLOS / severe NLOS links.

Each tag-anchor NLOS link adds a log-normal bias (negated for the first
anchor of the pair), an NLOS anchor-anchor link adds zero-mean Gaussian
error, and every measurement carries zero-mean Gaussian LOS noise. The
metric uses the moment-matched Gaussian of the sum; the simulator draws
from the exact components.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .geometry import LinkStatus, PairCondition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogNormalParams:
    mu: float
    s: float
    sign: int = 1

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("log-normal scale s must be positive")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    def flipped(self) -> "LogNormalParams":
        return LogNormalParams(self.mu, self.s, -self.sign)

    @property
    def mean(self) -> float:
        return gaussian_approx_lognormal(self)[0]

    @property
    def var(self) -> float:
        return gaussian_approx_lognormal(self)[1]

    def sample(self, rng: np.random.Generator, size=None):
        return self.sign * rng.lognormal(self.mu, self.s, size=size)


@dataclass(frozen=True)
class GaussianParams:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std >= 0:
            raise ValueError("std must be non-negative")

    @property
    def var(self) -> float:
        return self.std**2

    def sample(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mean, self.std, size=size)


Component = Union[LogNormalParams, GaussianParams]


def gaussian_approx_lognormal(params: LogNormalParams) -> tuple[float, float]:
    """Closest Gaussian (in KL(f || q)) to a signed log-normal: its moments."""
    mu, s = params.mu, params.s
    mean = params.sign * math.exp(mu + 0.5 * s * s)
    var = math.expm1(s * s) * math.exp(2 * mu + s * s)
    return mean, var


@dataclass(frozen=True)
class NoiseParams:
    """Error-model parameters.

    The defaults are placeholders shaped like typical UWB data: decimeter
    positive-skew tag-link bias and a zero-mean anchor-anchor error whose
    spread grows sharply for metal. Override them for real hardware.
    """

    sigma_los: float = 0.05
    common_tag: LogNormalParams = LogNormalParams(-2.0, 0.6)
    severe_tag: LogNormalParams = LogNormalParams(-1.2, 0.7)
    common_aa_std: float = 0.03
    severe_aa_std: float = 0.40

    def __post_init__(self):
        if not self.sigma_los >= 0:
            raise ValueError("sigma_los must be non-negative")
        if not (self.common_aa_std > 0 and self.severe_aa_std > 0):
            raise ValueError("anchor-anchor NLOS std must be positive")

    def tag_component(self, status: LinkStatus, sign: int) -> LogNormalParams | None:
        if status == LinkStatus.COMMON_NLOS:
            base = self.common_tag
        elif status == LinkStatus.SEVERE_NLOS:
            base = self.severe_tag
        else:
            return None
        return LogNormalParams(base.mu, base.s, sign)

    def aa_component(self, status: LinkStatus) -> GaussianParams | None:
        if status == LinkStatus.COMMON_NLOS:
            return GaussianParams(0.0, self.common_aa_std)
        if status == LinkStatus.SEVERE_NLOS:
            return GaussianParams(0.0, self.severe_aa_std)
        return None

    def tables(self) -> "ModelTables":
        return ModelTables.from_params(self)


@dataclass(frozen=True)
class ErrorModel:
    """Gaussian summary of a composed TDOA error plus its exact components."""

    mean: float
    variance: float
    components: tuple = field(default=())

    def sample(self, rng: np.random.Generator, size=None):
        total = 0.0
        for c in self.components:
            total = total + c.sample(rng, size)
        if size is not None and np.isscalar(total):
            total = np.full(size, total)
        return total


class UnusableMeasurement(ValueError):
    """The pair has a blocked link or is out of range; it yields no measurement."""


def _check_usable(cond: PairCondition) -> None:
    if not cond.in_range:
        raise UnusableMeasurement("anchor pair is out of operating range")
    if LinkStatus.BLOCKED in (cond.tag_to_i, cond.tag_to_j, cond.anchor_to_anchor):
        raise UnusableMeasurement("anchor pair has a blocked link")


def components(cond: PairCondition, params: NoiseParams) -> tuple:
    _check_usable(cond)
    comps: list = [GaussianParams(0.0, params.sigma_los)]
    for c in (
        params.tag_component(cond.tag_to_i, -1),
        params.tag_component(cond.tag_to_j, +1),
        params.aa_component(cond.anchor_to_anchor),
    ):
        if c is not None:
            comps.append(c)
    return tuple(comps)


def compose_model(cond: PairCondition, params: NoiseParams) -> ErrorModel:
    comps = components(cond, params)
    mean = 0.0
    var = 0.0
    for c in comps:
        if isinstance(c, LogNormalParams):
            m, v = gaussian_approx_lognormal(c)
        else:
            m, v = c.mean, c.var
        mean += m
        var += v
    if not var > 0:
        raise ValueError("composed error variance must be positive; set sigma_los > 0")
    return ErrorModel(mean, var, comps)


def sample_error(cond: PairCondition, params: NoiseParams, rng: np.random.Generator, size=None):
    """Exact (non-approximated) draw of the TDOA error for one condition."""
    comps = components(cond, params)
    total = np.zeros(size) if size is not None else 0.0
    for c in comps:
        total = total + c.sample(rng, size)
    return total


def model_catalog(params: NoiseParams) -> dict[tuple[LinkStatus, LinkStatus, LinkStatus], ErrorModel]:
    """All 27 LOS/common/severe combinations of (tag-i, tag-j, anchor-anchor)."""
    states = (LinkStatus.LOS, LinkStatus.COMMON_NLOS, LinkStatus.SEVERE_NLOS)
    return {
        key: compose_model(PairCondition(*key), params)
        for key in itertools.product(states, repeat=3)
    }


@dataclass(frozen=True)
class ModelTables:
    """Lookup tables indexed by LinkStatus code for vectorized composition."""

    sigma2: float
    tag_mean: np.ndarray
    tag_var: np.ndarray
    aa_var: np.ndarray

    @classmethod
    def from_params(cls, params: NoiseParams) -> "ModelTables":
        cm, cv = gaussian_approx_lognormal(params.common_tag)
        sm, sv = gaussian_approx_lognormal(params.severe_tag)
        # index 3 (blocked) is masked by the weight, zeros keep it finite
        return cls(
            sigma2=params.sigma_los**2,
            tag_mean=np.array([0.0, abs(cm), abs(sm), 0.0]),
            tag_var=np.array([0.0, cv, sv, 0.0]),
            aa_var=np.array([0.0, params.common_aa_std**2, params.severe_aa_std**2, 0.0]),
        )

    def compose(self, s_i, s_j, s_aa):
        """Mean and variance arrays for arrays of link status codes."""
        mean = self.tag_mean[s_j] - self.tag_mean[s_i]
        var = self.sigma2 + self.tag_var[s_i] + self.tag_var[s_j] + self.aa_var[s_aa]
        return mean, var
