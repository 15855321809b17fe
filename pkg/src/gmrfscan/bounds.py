"""Lower bounds, sufficient conditions and detection rates.

Unspecified universal constants are caller parameters (default 1).  Asymptotic
``o(.)`` conditions are evaluated as finite-n inequalities and labelled as
surrogates in the report.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .gmrf import CovBuilder, PhiField, covariance_submatrix
from .lattice import Region, RegionClass, h_boundary, neighborhood_offsets
from .oracle import b_functional_matrices
from .simulate import make_rng

SURROGATE = "finite-n surrogate"


@dataclass
class Condition:
    satisfied: bool
    lhs: float
    rhs: float
    note: str = ""

    def to_json(self) -> dict:
        out = {"satisfied": self.satisfied, "lhs": self.lhs, "rhs": self.rhs}
        if self.note:
            out["note"] = self.note
        return out


def _le(lhs: float, rhs: float, note: str = "") -> Condition:
    return Condition(bool(lhs <= rhs), float(lhs), float(rhs), note)


@dataclass
class BoundReport:
    """``bound_value`` is a risk lower bound; ``-inf`` means no finite-n guarantee."""

    bound_value: float
    conditions: dict[str, Condition] = field(default_factory=dict)
    constants_used: dict[str, float] = field(default_factory=dict)
    rate: float | None = None

    def __post_init__(self):
        if not self.bound_value <= 1.0:
            raise ValueError(f"risk lower bound {self.bound_value} exceeds 1")

    @property
    def all_satisfied(self) -> bool:
        return all(c.satisfied for c in self.conditions.values())

    def to_json(self) -> dict:
        out = {
            "bound_value": _json_float(self.bound_value),
            "conditions": {k: c.to_json() for k, c in self.conditions.items()},
            "constants_used": self.constants_used,
        }
        if self.rate is not None:
            out["rate"] = self.rate
        return out


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


def _sizes(regions) -> np.ndarray:
    if isinstance(regions, RegionClass):
        return regions.sizes().astype(float)
    return np.asarray([r.size if isinstance(r, Region) else r for r in regions], dtype=float)


def _check_a(a: float) -> None:
    if not 0 < a < 1:
        raise ConfigError("a must lie in (0, 1)")


# -- known covariance ------------------------------------------------------


def known_cov_bound_value(sizes: Sequence[float], l2_sq: float, l1: float) -> float:
    """``1 - (2|C|)^{-1} [sum_S exp(10 |S| l2^2 / (1 - 2 l1))]^{1/2}`` from the norms alone."""
    if l1 >= 0.5:
        raise ConfigError("the known-covariance bound needs ||phi||_1 < 1/2")
    s = np.asarray(sizes, dtype=float)
    log_terms = 10.0 * s * l2_sq / (1.0 - 2.0 * l1)
    log_sum = float(np.logaddexp.reduce(log_terms))
    return 1.0 - math.exp(0.5 * log_sum - math.log(2 * len(s)))


def known_cov_bound_cube_form(n: int, k: int, l2_sq: float, l1: float) -> float:
    """Tiling specialisation ``1 - (k/n)^{1/2}/2 * exp(5 k l2^2 / (1 - 2 l1))``."""
    if l1 >= 0.5:
        raise ConfigError("the known-covariance bound needs ||phi||_1 < 1/2")
    return 1.0 - 0.5 * math.sqrt(k / n) * math.exp(5.0 * k * l2_sq / (1.0 - 2.0 * l1))


def known_cov_lower_bound(regions: RegionClass, phi: PhiField) -> BoundReport:
    if phi.l1 >= 0.5:
        raise ConfigError("the known-covariance bound needs ||phi||_1 < 1/2")
    if not regions.is_disjoint():
        raise ConfigError("the known-covariance bound needs a disjoint class")
    sizes = _sizes(regions)
    value = known_cov_bound_value(sizes, phi.l2_sq, phi.l1)
    slope = 10.0 * phi.l2_sq / (1.0 - 2.0 * phi.l1)
    merge = math.log(len(sizes)) - slope * sizes.max()
    conditions = {"merge": Condition(bool(merge > 0), merge, 0.0, SURROGATE)}
    return BoundReport(value, conditions, {"exponent": 10.0})


def known_cov_impossibility_radius(regions, a: float, consistent: bool = False) -> float:
    """Radius on ``l2^2 / (1 - 2 l1)`` below which the risk is claimed to be at least ``1 - a``.

    The default is the customary ``min_S log(4|C|/a^2) / (10|S|)``.  Substituting
    it back into the sum-form bound gives ``1 - 1/a`` for equal sizes, so
    ``consistent=True`` returns ``min_S log(4|C| a^2) / (10|S|)`` instead, the
    largest radius for which the sum-form bound really is at least ``1 - a``
    (negative when ``4|C| a^2 < 1``).
    """
    _check_a(a)
    sizes = _sizes(regions)
    arg = 4 * len(sizes) * a**2 if consistent else 4 * len(sizes) / a**2
    return float(np.min(math.log(arg) / (10.0 * sizes)))


# -- unknown covariance ----------------------------------------------------


def theorem3_conditions(regions: RegionClass, h: int, a: float, r: float, c0: float = 1.0) -> BoundReport:
    _check_a(a)
    d = regions.d
    nh = (2 * h + 1) ** d - 1
    sizes = _sizes(regions)
    log_ca = math.log(len(sizes) / a)
    boundary = np.array([h_boundary(reg, 2 * h).size for reg in regions], dtype=float)
    cond = {
        "Nh_vs_size_over_log": _le(nh, float(np.min(sizes / log_ca))),
        "Nh_vs_size_2_5": _le(nh, float(np.min(sizes**0.4 * log_ca**0.2))),
        "Nh_vs_boundary_ratio": _le(nh, float(np.min((sizes / boundary) ** 2 * log_ca ** (-1 / 6)))),
        "r_squared": _le(r * r * sizes.max(), c0 * max(math.sqrt(nh * log_ca), log_ca)),
        "prior_acceptable": Condition(bool(r * nh < 1), r * nh, 1.0, "strict"),
    }
    value = 1.0 - a if all(c.satisfied for c in cond.values()) else -math.inf
    return BoundReport(value, cond, {"c0": c0, "a": a})


def rademacher_support(d: int, h: int, r: float) -> list[PhiField]:
    """Every sign pattern of the prior, in a fixed order (``2^{|N_h|/2}`` fields)."""
    _check_rademacher(d, h, r)
    half = neighborhood_offsets(d, h).half()
    scale = r / math.sqrt(2 * len(half))
    return [PhiField.from_offsets(d, h, {v: s * scale for v, s in zip(half, signs)})
            for signs in itertools.product((1.0, -1.0), repeat=len(half))]


def _check_rademacher(d: int, h: int, r: float) -> None:
    nh = (2 * h + 1) ** d - 1
    if r < 0 or r * nh >= 1:
        raise ConfigError(f"Rademacher prior needs 0 <= r |N_h| < 1, got {r * nh:.4g}")


def rademacher_prior_sample(d: int, h: int, r: float, seed) -> PhiField:
    """``phi_v = phi_{-v} = r |N_h|^{-1/2} xi_v`` with i.i.d. signs on the half-neighbourhood."""
    _check_rademacher(d, h, r)
    half = neighborhood_offsets(d, h).half()
    signs = make_rng(seed).choice((-1.0, 1.0), size=len(half))
    scale = r / math.sqrt(2 * len(half))
    return PhiField.from_offsets(d, h, {v: s * scale for v, s in zip(half, signs)})


def rademacher_prior(d: int, h: int, r: float) -> Callable[[np.random.Generator], PhiField]:
    _check_rademacher(d, h, r)
    return lambda rng: rademacher_prior_sample(d, h, r, rng)


def degenerate_prior(phi: PhiField) -> Callable[[np.random.Generator], PhiField]:
    return lambda rng: phi


class _GammaCache:
    def __init__(self, region: Region, cov_builder):
        self.region = region
        self.cov_builder = cov_builder or CovBuilder(region.diameter)
        self._cache: dict = {}

    def __call__(self, phi: PhiField) -> np.ndarray:
        key = phi.key()
        if key not in self._cache:
            self._cache[key] = covariance_submatrix(phi, self.region, self.cov_builder(phi))
        return self._cache[key]


@dataclass
class VsEstimate:
    estimate: float
    se: float
    n_pairs: int
    n_excluded: int


def vs_mc(region: Region, prior: Callable, cov_builder=None, n_pairs: int = 10_000, seed=0) -> VsEstimate:
    """Monte Carlo mean of ``B_{phi1,phi2}`` over i.i.d. prior pairs.

    Pairs outside the determinant domain are counted and dropped.
    """
    gamma = _GammaCache(region, cov_builder)
    rng = make_rng(seed)
    vals, excluded = [], 0
    b_cache: dict = {}
    for _ in range(n_pairs):
        p1, p2 = prior(rng), prior(rng)
        key = (p1.key(), p2.key())
        if key not in b_cache:
            try:
                b_cache[key] = b_functional_matrices(gamma(p1), gamma(p2))
            except DomainError:
                b_cache[key] = None
        b = b_cache[key]
        if b is None:
            excluded += 1
        else:
            vals.append(b)
    if not vals:
        raise DomainError("every sampled pair violated the determinant domain")
    v = np.asarray(vals)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return VsEstimate(float(v.mean()), se, len(v), excluded)


def vs_exact(region: Region, support: Iterable[PhiField], cov_builder=None) -> float:
    """``V_S`` for a uniform prior on a finite support, by enumerating all ordered pairs."""
    gamma = _GammaCache(region, cov_builder)
    support = list(support)
    total = 0.0
    for p1, p2 in itertools.product(support, repeat=2):
        total += b_functional_matrices(gamma(p1), gamma(p2))
    return total / len(support) ** 2


def vs_degenerate(gamma_s: np.ndarray) -> float:
    """Closed form ``det(I - (I - Gamma_S)^2)^{-1/2}`` for a point-mass prior."""
    eye = np.eye(len(gamma_s))
    sign, logdet = np.linalg.slogdet(eye - (eye - gamma_s) @ (eye - gamma_s))
    if sign <= 0:
        raise DomainError("Gamma_S has an eigenvalue outside (0, 2)")
    return math.exp(-0.5 * logdet)


def vs_lower_bound(vs_values: Sequence[float]) -> float:
    """``1 - (2|C|)^{-1} (sum_S V_S)^{1/2}``, one ``V_S`` per region."""
    vs = np.asarray(vs_values, dtype=float)
    return 1.0 - math.sqrt(vs.sum()) / (2 * len(vs))


# -- rates -----------------------------------------------------------------


@dataclass
class RateReport:
    lower: float
    upper: float
    conditions: dict[str, Condition] = field(default_factory=dict)
    constants_used: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "conditions": {k: c.to_json() for k, c in self.conditions.items()},
            "constants_used": self.constants_used,
        }


def _check_nk(n, k, h=1):
    if not (n >= k >= 1) or h < 1:
        raise ConfigError("rates need n >= k >= 1 and h >= 1")


def rate_ar(n: int, k: int, h: int, c1: float = 1.0, c2: float = 1.0) -> RateReport:
    """Impossibility (``lower``) and achievability (``upper``) rates for ``r^2`` in the AR_h setting."""
    _check_nk(n, k, h)
    lnk, ln = math.log(n / k), math.log(n)
    lower = c1 * (lnk / k + math.sqrt(h * lnk) / k)
    upper = c2 * (ln / k + math.sqrt(h * ln) / k)
    h_max = min(math.sqrt(k / ln), k**0.25) if ln > 0 else k**0.25
    return RateReport(lower, upper, {"h_small": _le(h, h_max, SURROGATE)}, {"c1": c1, "c2": c2})


def rate_texture(n: int, k: int, h: int, c1: float = 1.0, c2: float = 1.0) -> RateReport:
    """Both rates share the bracket ``log(n/k)/k + sqrt(h^2 log(n/k))/k``."""
    _check_nk(n, k, h)
    lnk, ln = math.log(n / k), math.log(n)
    bracket = lnk / k + math.sqrt(h * h * lnk) / k
    h_max = min(math.sqrt(k / ln), k**0.2) if ln > 0 else k**0.2
    return RateReport(c1 * bracket, c2 * bracket, {"h_small": _le(h, h_max, SURROGATE)}, {"c1": c1, "c2": c2})


def rate_hypercube(n: int, k: int, nh: int, c1: float = 1.0, c2: float = 1.0, d: int = 1) -> BoundReport:
    if not n > k >= 1:
        raise ConfigError("hypercube rate needs n > k >= 1")
    lnk = math.log(n / k)
    cond = {
        "Nh_vs_k_over_log": _le(nh, c1 * k / lnk ** max(1.0, d / 2)),
        "Nh_vs_k_2_5": _le(nh, c1 * k**0.4 * lnk**0.2),
        "Nh_vs_dimension": _le(nh, c1 * d ** (-2 * d / (d + 2)) * k ** (2 / (d + 2)) * lnk ** (d / (3 * d + 6))),
    }
    rate = c2 * max(lnk / k, math.sqrt(nh * lnk) / k)
    return BoundReport(-math.inf, cond, {"c1": c1, "c2": c2, "d": d}, rate=rate)
