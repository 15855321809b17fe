"""Stationary GMRF parameters, spectral autocovariances and the AR_h bijection.

A field with interaction vector ``phi`` on the neighborhood ``N_h`` has precision
operator ``(delta_{ij} - phi_{i-j}) / sigma_phi^2`` and spectral symbol
``1 - sum_v phi_v cos<v, w>``.  Autocovariances are obtained by inverse DFT of
``sigma_phi^2 / symbol`` on a regular frequency grid, refined by doubling until
the table stops moving.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConditioningError, ConfigError
from .lattice import NeighborhoodOffsets, Region, neighborhood_offsets

SPECTRAL_TOL = 1e-10
GRID_TOL = 1e-6
MAX_GRID_POINTS = 2**24


class SymmetryError(ConfigError):
    pass


class InvalidPhiError(ConfigError):
    pass


@dataclass(frozen=True, eq=False)
class PhiField:
    """Interaction coefficients ``phi_v`` for every ``v`` in ``N_h``.

    ``coef`` is aligned with ``neighborhood_offsets(d, h).offsets``.  Norms count
    both ``v`` and ``-v``.
    """

    d: int
    h: int
    coef: np.ndarray

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float)
        if coef.shape != (len(self.offsets),):
            raise ConfigError(f"phi needs {len(self.offsets)} coefficients, got {coef.shape}")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def zero(cls, d: int, h: int) -> "PhiField":
        return cls(d, h, np.zeros((2 * h + 1) ** d - 1))

    @classmethod
    def from_offsets(cls, d: int, h: int, values: Mapping) -> "PhiField":
        """Build from ``{offset: value}``; an offset given without its negation is mirrored."""
        offs = neighborhood_offsets(d, h).offsets
        index = {v: j for j, v in enumerate(offs)}
        coef = np.zeros(len(offs))
        given = {}
        for key, val in values.items():
            v = _as_offset(key, d)
            if v not in index:
                raise ConfigError(f"offset {v} is not in N_{h}")
            given[v] = float(val)
        for v, val in given.items():
            coef[index[v]] = val
            neg = tuple(-c for c in v)
            if neg not in given:
                coef[index[neg]] = val
        return cls(d, h, coef)

    @property
    def offsets(self) -> NeighborhoodOffsets:
        return neighborhood_offsets(self.d, self.h)

    @property
    def nh(self) -> int:
        return len(self.coef)

    @property
    def l1(self) -> float:
        return float(np.abs(self.coef).sum())

    @property
    def l2_sq(self) -> float:
        return float(np.dot(self.coef, self.coef))

    @property
    def l2(self) -> float:
        return math.sqrt(self.l2_sq)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coef)

    @property
    def is_symmetric(self) -> bool:
        # offsets are lexicographic, so the reversed order is the negation
        return bool(np.array_equal(self.coef, self.coef[::-1]))

    def value(self, v) -> float:
        v = _as_offset(v, self.d)
        return float(self.coef[self.offsets.offsets.index(v)])

    def as_dict(self) -> dict:
        return dict(zip(self.offsets.offsets, self.coef.tolist()))

    def key(self) -> tuple:
        return (self.d, self.h, self.coef.tobytes())

    def to_json(self) -> dict:
        half = self.offsets.half()
        vals = {",".join(map(str, v)): self.value(v) for v in half}
        return {"d": self.d, "h": self.h, "values": vals}

    @classmethod
    def from_json(cls, obj: Mapping) -> "PhiField":
        return cls.from_offsets(int(obj["d"]), int(obj["h"]), obj["values"])

    def __repr__(self):
        return f"PhiField(d={self.d}, h={self.h}, l1={self.l1:.4g}, l2={self.l2:.4g})"


def _as_offset(key, d: int) -> tuple[int, ...]:
    if isinstance(key, str):
        v = tuple(int(s) for s in key.split(","))
    elif isinstance(key, (int, np.integer)):
        v = (int(key),)
    else:
        v = tuple(int(c) for c in key)
    if len(v) != d:
        raise ConfigError(f"offset {key!r} is not {d}-dimensional")
    return v


def make_constant_phi(d: int, h: int, r: float) -> PhiField:
    """phi constant over N_h with l2-norm r."""
    nh = (2 * h + 1) ** d - 1
    if r < 0 or r * math.sqrt(nh) >= 1:
        raise ConfigError(f"r={r} violates r*sqrt(|N_h|) < 1 (|N_h|={nh})")
    return PhiField(d, h, np.full(nh, r / math.sqrt(nh)))


def axis_phi(d: int, value: float, h: int = 1) -> PhiField:
    """``value`` on the 2d nearest-neighbour offsets, zero elsewhere."""
    vals = {}
    for j in range(d):
        e = [0] * d
        e[j] = 1
        vals[tuple(e)] = value
    return PhiField.from_offsets(d, h, vals)


# -- spectral machinery -----------------------------------------------------


def default_grid(d: int, h: int, extent: int = 0) -> int:
    base = {1: 256, 2: 128}.get(d, 32)
    return max(8 * (extent + h), base)


def spectral_symbol(phi: PhiField, grid: int) -> np.ndarray:
    """``1 - sum_v phi_v cos<v, w>`` on the grid ``w_k = 2 pi k / grid``."""
    arr = np.zeros((grid,) * phi.d)
    idx = tuple((phi.offsets.array % grid).T)
    np.add.at(arr, idx, phi.coef)
    return 1.0 - np.fft.fftn(arr).real


@dataclass(frozen=True)
class PhiValidation:
    min_spectral_value: float
    valid: bool
    sufficient_l1: bool


def validate_phi(phi: PhiField, grid_points_per_axis: int | None = None) -> PhiValidation:
    if not phi.is_symmetric:
        raise SymmetryError("phi must satisfy phi_v = phi_{-v}")
    grid = grid_points_per_axis or default_grid(phi.d, phi.h)
    if grid < 4 * phi.h + 4:
        raise ConfigError(f"grid of {grid} points cannot resolve degree {phi.h}")
    m = float(spectral_symbol(phi, grid).min())
    return PhiValidation(m, m > SPECTRAL_TOL, phi.l1 < 1)


def _require_valid(phi: PhiField) -> None:
    rep = validate_phi(phi)
    if not rep.valid:
        raise InvalidPhiError(f"phi is outside Phi_h (min symbol {rep.min_spectral_value:.3g})")


def _sigma_on_grid(phi: PhiField, grid: int) -> tuple[float, np.ndarray]:
    sym = spectral_symbol(phi, grid)
    if sym.min() <= SPECTRAL_TOL:
        raise InvalidPhiError("spectral symbol is not positive on the grid")
    inv = 1.0 / sym
    return 1.0 / inv.mean(), inv


def sigma_phi_sq(phi: PhiField, grid_points_per_axis: int | None = None) -> float:
    """Conditional variance making the marginal variance one."""
    _require_valid(phi)
    if phi.is_zero:
        return 1.0
    if grid_points_per_axis:
        return _sigma_on_grid(phi, grid_points_per_axis)[0]
    grid = default_grid(phi.d, phi.h)
    prev = _sigma_on_grid(phi, grid)[0]
    while True:
        grid *= 2
        if grid**phi.d > MAX_GRID_POINTS:
            warnings.warn("sigma_phi^2 grid refinement hit the size cap", RuntimeWarning)
            return prev
        cur = _sigma_on_grid(phi, grid)[0]
        if abs(cur - prev) < 1e-12:
            return cur
        prev = cur


@dataclass(frozen=True, eq=False)
class CovTable:
    """Autocovariances ``gamma_v`` for ``|v|_inf <= extent`` (``gamma_0 = 1``)."""

    d: int
    h: int
    extent: int
    gamma: np.ndarray  # shape (2 extent + 1,)*d, centred at lag 0
    sigma_sq: float
    grid: int
    grid_change: float

    def lag(self, v) -> float:
        v = _as_offset(v, self.d)
        if max(abs(c) for c in v) > self.extent:
            raise ConfigError(f"lag {v} beyond tabulated extent {self.extent}")
        return float(self.gamma[tuple(c + self.extent for c in v)])

    def off_zero_sq_sum(self) -> float:
        return float((self.gamma**2).sum() - self.gamma[(self.extent,) * self.d] ** 2)


def _table_on_grid(phi: PhiField, extent: int, grid: int) -> tuple[np.ndarray, float]:
    sigma_sq, inv = _sigma_on_grid(phi, grid)
    full = np.fft.ifftn(inv).real * sigma_sq
    ix = np.arange(-extent, extent + 1) % grid
    return full[np.ix_(*([ix] * phi.d))], sigma_sq


def autocovariances(
    phi: PhiField,
    extent: int,
    grid_points_per_axis: int | None = None,
    tol: float = GRID_TOL,
) -> CovTable:
    """Autocovariance table by spectral inversion.

    With an explicit grid the table is computed once on it.  Otherwise the grid
    starts at :func:`default_grid` and doubles until two successive tables agree
    to ``tol``; the finer table is returned.
    """
    _require_valid(phi)
    if extent < 0:
        raise ConfigError("extent must be >= 0")
    min_grid = 8 * (extent + phi.h)
    if grid_points_per_axis is not None:
        if grid_points_per_axis < min_grid:
            raise ConfigError(f"grid {grid_points_per_axis} < 8*(extent+h) = {min_grid}")
        g, s = _table_on_grid(phi, extent, grid_points_per_axis)
        return CovTable(phi.d, phi.h, extent, g, s, grid_points_per_axis, math.nan)
    grid = default_grid(phi.d, phi.h, extent)
    prev, _ = _table_on_grid(phi, extent, grid)
    change = math.nan
    while True:
        nxt = grid * 2
        if nxt**phi.d > MAX_GRID_POINTS:
            warnings.warn(
                f"autocovariance grid capped at {grid} points/axis; change {change:.2e} > {tol}",
                RuntimeWarning,
            )
            return CovTable(phi.d, phi.h, extent, prev, sigma_phi_sq(phi, grid), grid, change)
        cur, s = _table_on_grid(phi, extent, nxt)
        change = float(np.abs(cur - prev).max())
        grid = nxt
        if change < tol:
            return CovTable(phi.d, phi.h, extent, cur, s, grid, change)
        prev = cur


class CovBuilder:
    """Memoised ``phi -> CovTable`` at a fixed extent."""

    def __init__(self, extent: int, tol: float = GRID_TOL):
        self.extent = extent
        self.tol = tol
        self._cache: dict = {}

    def __call__(self, phi: PhiField) -> CovTable:
        key = phi.key()
        if key not in self._cache:
            self._cache[key] = autocovariances(phi, self.extent, tol=self.tol)
        return self._cache[key]


def covariance_submatrix(phi: PhiField, region: Region, cov: CovTable, check: bool = True) -> np.ndarray:
    """Principal submatrix Gamma_S in the node order of ``region.coords``."""
    if cov.d != region.d:
        raise ConfigError("dimension mismatch between region and covariance table")
    if region.diameter > cov.extent:
        raise ConfigError(f"covariance extent {cov.extent} < region diameter {region.diameter}")
    c = region.coords
    diff = c[:, None, :] - c[None, :, :] + cov.extent
    g = cov.gamma[tuple(np.moveaxis(diff, 2, 0))]
    g = 0.5 * (g + g.T)
    if check:
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("Gamma_S is not numerically positive definite") from exc
    return g


def precision_entries(phi: PhiField, grid_points_per_axis: int | None = None) -> dict:
    """Rows of the infinite precision operator: ``{0: 1/s2, v: -phi_v/s2}``."""
    s2 = sigma_phi_sq(phi, grid_points_per_axis)
    zero = (0,) * phi.d
    out = {zero: 1.0 / s2}
    for v, c in phi.as_dict().items():
        if c != 0.0:
            out[v] = -c / s2
    return out


# -- autoregressive parameterisation ----------------------------------------


def _yule_walker_correlations(psi: np.ndarray) -> np.ndarray:
    """rho_1..rho_h of a stationary AR(h) by solving the Yule-Walker equations."""
    h = len(psi)
    a = np.eye(h)
    b = np.zeros(h)
    for k in range(1, h + 1):
        for i in range(1, h + 1):
            lag = abs(k - i)
            if lag == 0:
                b[k - 1] += psi[i - 1]
            else:
                a[k - 1, lag - 1] -= psi[i - 1]
    return np.linalg.solve(a, b)


@dataclass(frozen=True, eq=False)
class ArParams:
    """AR(h) coefficients with the innovation variance fixed by unit marginal variance."""

    psi: tuple[float, ...]

    def __post_init__(self):
        psi = tuple(float(p) for p in np.atleast_1d(self.psi))
        if not psi:
            raise ConfigError("AR order must be >= 1")
        object.__setattr__(self, "psi", psi)
        if not self.is_stationary:
            raise ConfigError(f"AR coefficients {psi} are not stationary")

    @property
    def h(self) -> int:
        return len(self.psi)

    @property
    def is_stationary(self) -> bool:
        roots = np.roots(np.concatenate([[1.0], -np.asarray(self.psi)]))
        return bool(np.all(np.abs(roots) < 1))

    @property
    def tau_sq(self) -> float:
        rho = _yule_walker_correlations(np.asarray(self.psi))
        return float(1.0 - np.dot(self.psi, rho))

    def autocorrelations(self, maxlag: int) -> np.ndarray:
        """rho_0..rho_maxlag from the Yule-Walker recursion."""
        psi = np.asarray(self.psi)
        rho = np.ones(max(maxlag, self.h) + 1)
        rho[1 : self.h + 1] = _yule_walker_correlations(psi)
        for k in range(self.h + 1, maxlag + 1):
            rho[k] = sum(psi[i - 1] * rho[k - i] for i in range(1, self.h + 1))
        return rho[: maxlag + 1]


def ar_to_gmrf(ar: ArParams) -> PhiField:
    psi = np.asarray(ar.psi)
    h = ar.h
    norm = 1.0 + float(psi @ psi)
    half = {}
    for i in range(1, h + 1):
        cross = sum(psi[k - 1] * psi[k - i - 1] for k in range(i + 1, h + 1))
        half[(i,)] = (psi[i - 1] - cross) / norm
    return PhiField.from_offsets(1, h, half)


def ar_sigma_sq(ar: ArParams) -> float:
    psi = np.asarray(ar.psi)
    return ar.tau_sq / (1.0 + float(psi @ psi))
