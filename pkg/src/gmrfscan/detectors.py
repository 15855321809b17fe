"""Scan tests: the normalized GLRT (known covariance) and the Fisher-type
pseudo-likelihood scan (unknown covariance), plus Monte Carlo calibration.

Both detectors work on batches of fields ``X`` of shape ``(R, n)`` and return
per-region statistics of shape ``(R, |C|)``; single-field helpers wrap them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, EmptyScanError
from .gmrf import CovBuilder, CovTable, PhiField, covariance_submatrix
from .lattice import Lattice, Region, RegionClass, h_interior, interior_size, neighborhood_offsets
from .simulate import STREAM_CALIBRATION, STREAM_MISC, Field, make_rng

GLRT_THRESHOLD = 4.0
RANK_TOL = 1e-10
EIGH_LIMIT = 2000
BLOCK = 250  # replicates per RNG stream; fixed so results do not depend on worker count


class RankDeficiencyWarning(UserWarning):
    pass


class RegionSkipped(ValueError):
    """The Fisher statistic is not defined on this region."""


@dataclass
class DetectorOutput:
    detector: str
    regions: RegionClass
    per_region: np.ndarray  # aligned with class order, nan where skipped
    max_value: float
    argmax: int
    threshold: float | None = None
    reject: bool | None = None
    skipped: list = field(default_factory=list)

    @property
    def argmax_region(self) -> Region:
        return self.regions[self.argmax]

    def as_mapping(self) -> dict:
        return {self.regions[i]: float(v) for i, v in enumerate(self.per_region) if np.isfinite(v)}

    def with_threshold(self, threshold: float) -> "DetectorOutput":
        return replace(self, threshold=float(threshold), reject=bool(self.max_value > threshold))

    def to_json(self, emit_all: bool = False) -> dict:
        out = {
            "detector": self.detector,
            "max_value": self.max_value,
            "argmax": self.argmax,
            "argmax_region": self.argmax_region.to_dict(),
            "threshold": self.threshold,
            "reject": self.reject,
            "n_regions": len(self.regions),
            "n_skipped": len(self.skipped),
        }
        if emit_all:
            out["per_region"] = [None if not np.isfinite(v) else float(v) for v in self.per_region]
        return out


def _first_argmax(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.where(np.isnan(values), -np.inf, values)
    idx = np.argmax(v, axis=-1)
    return np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], idx


def _as_batch(x, lat: Lattice) -> np.ndarray:
    if isinstance(x, Field):
        x = x.data
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != lat.n:
        raise ConfigError(f"field has {x.shape[1]} values, lattice has {lat.n}")
    return x


def _window_values(xb: np.ndarray, lat: Lattice, regions: RegionClass, idx: np.ndarray, side: int | None):
    """Values of each region in ``idx`` as ``(R, len(idx), |S|)`` in region node order."""
    if side is not None:
        grid = xb.reshape((xb.shape[0],) + lat.shape)
        win = sliding_window_view(grid, (side,) * lat.d, axis=tuple(range(1, lat.d + 1)))
        c = regions.corners[idx] - 1
        sel = win[(slice(None),) + tuple(c.T)]
        return sel.reshape(xb.shape[0], len(idx), -1)
    flat = np.stack([regions[i].flat_indices(lat) for i in idx])
    return xb[:, flat]


def _chunk(n_rows: int, per_row: int, budget: int = 4_000_000) -> int:
    return max(1, min(n_rows, budget // max(per_row, 1)))


# -- GLRT -------------------------------------------------------------------


@dataclass
class ShapeStats:
    m: np.ndarray  # I_S - Gamma_S^{-1}
    trace: float
    fro: float
    op: float


@dataclass
class GlrtPrecomputed:
    phi: PhiField
    n_regions: int
    log_c: float
    shapes: dict
    groups: list  # (shape key, region indices, box side or None)

    def normalizer(self, key) -> float:
        s = self.shapes[key]
        return s.fro * math.sqrt(self.log_c) + s.op * self.log_c


def _op_norm(m: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    if len(m) <= EIGH_LIMIT:
        return float(np.abs(np.linalg.eigvalsh(m)).max())
    v = np.random.default_rng(0).standard_normal(len(m))
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = m @ (m @ v)
        new = math.sqrt(np.linalg.norm(w))
        v = w / np.linalg.norm(w)
        if abs(new - est) <= tol * new:
            return new
        est = new
    return est


def glrt_precompute(regions: RegionClass, phi: PhiField, cov: CovTable | None = None) -> GlrtPrecomputed:
    """Per-shape ``M_S = I - Gamma_S^{-1}`` with trace, Frobenius and operator norms."""
    if len(regions) < 2:
        raise ConfigError("GLRT normalization needs |C| >= 2 (log|C| > 0)")
    if phi.is_zero:
        raise ConfigError("GLRT statistic is degenerate for phi = 0")
    grouped = _shape_groups(regions)
    if cov is None:
        cov = CovBuilder(max(rep.diameter for rep, _, _ in grouped.values()))(phi)
    shapes, groups = {}, []
    for key, (rep, idx, side) in grouped.items():
        g = covariance_submatrix(phi, rep, cov)
        m = np.eye(len(g)) - np.linalg.inv(g)
        m = 0.5 * (m + m.T)
        shapes[key] = ShapeStats(m, float(np.trace(m)), float(np.linalg.norm(m)), _op_norm(m))
        groups.append((key, idx, side))
    if min(interior_size(rep, phi.h) / rep.size for rep, _, _ in grouped.values()) < 0.5:
        warnings.warn(
            "some regions have |S^h| < |S|/2; the universal threshold 4 is not covered there",
            UserWarning,
        )
    return GlrtPrecomputed(phi, len(regions), math.log(len(regions)), shapes, groups)


def _shape_groups(regions: RegionClass) -> dict:
    out = {}
    if regions.is_box_class:
        for s in np.unique(regions.sides):
            idx = np.flatnonzero(regions.sides == s)
            out[("box", regions.d, int(s))] = (regions[int(idx[0])], idx, int(s))
        return out
    keys: dict = {}
    for i, r in enumerate(regions):
        keys.setdefault(r.shape_key(), []).append(i)
    for key, idx in keys.items():
        out[key] = (regions[idx[0]], np.asarray(idx), None)
    return out


class GlrtDetector:
    name = "glrt"

    def __init__(self, lat: Lattice, regions: RegionClass, phi: PhiField, cov: CovTable | None = None,
                 pre: GlrtPrecomputed | None = None):
        self.lat = lat
        self.regions = regions
        self.phi = phi
        self.pre = pre or glrt_precompute(regions, phi, cov)

    def numerators(self, x) -> np.ndarray:
        """Centered quadratic forms ``x_S^T M_S x_S - tr(M_S)``, shape ``(R, |C|)``."""
        xb = _as_batch(x, self.lat)
        out = np.empty((xb.shape[0], len(self.regions)))
        for key, idx, side in self.pre.groups:
            st = self.pre.shapes[key]
            k = len(st.m)
            step = _chunk(xb.shape[0], len(idx) * k)
            for a in range(0, xb.shape[0], step):
                w = _window_values(xb[a : a + step], self.lat, self.regions, idx, side)
                out[a : a + step, idx] = np.einsum("rnk,rnk->rn", w @ st.m, w) - st.trace
        return out

    def statistics(self, x) -> np.ndarray:
        num = self.numerators(x)
        for key, idx, _ in self.pre.groups:
            num[:, idx] /= self.pre.normalizer(key)
        return num

    def max_statistic(self, x) -> tuple[np.ndarray, np.ndarray]:
        return _first_argmax(self.statistics(x))

    def scan(self, x, threshold: float | None = None) -> DetectorOutput:
        vals = self.statistics(x)[0]
        mx, am = _first_argmax(vals)
        out = DetectorOutput("glrt", self.regions, vals, float(mx), int(am))
        return out.with_threshold(threshold) if threshold is not None else out


def glrt_statistic(x, regions: RegionClass, phi: PhiField, pre: GlrtPrecomputed | None = None,
                   lat: Lattice | None = None) -> DetectorOutput:
    lat = lat or (x.lattice if isinstance(x, Field) else None)
    return GlrtDetector(lat, regions, phi, pre=pre).scan(x)


def glrt_test(x, regions: RegionClass, phi: PhiField, pre: GlrtPrecomputed | None = None,
              lat: Lattice | None = None) -> DetectorOutput:
    return glrt_statistic(x, regions, phi, pre, lat).with_threshold(GLRT_THRESHOLD)


# -- Fisher-type pseudo-likelihood scan -------------------------------------


def _fisher_from_design(y: np.ndarray, design: np.ndarray) -> float:
    beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=RANK_TOL)
    if rank < design.shape[1]:
        warnings.warn(f"design matrix has rank {rank} < {design.shape[1]}", RankDeficiencyWarning)
    fitted = design @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    ess = float(fitted @ fitted)
    return len(y) * ess / rss if rss > 0 else math.inf


def fisher_design(x, region: Region, h: int, lat: Lattice | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Response ``X_{S,h}`` and design ``F_{S,h}`` (rows ``X_{i+v}``, ``v`` in ``N_h``)."""
    if isinstance(x, Field):
        lat = x.lattice
        x = x.data
    grid = np.asarray(x, dtype=float).reshape(lat.shape)
    inner = h_interior(region, h)
    if inner is None:
        raise RegionSkipped("h-interior is empty")
    c = inner.coords - 1
    offs = neighborhood_offsets(lat.d, h).array
    nb = c[:, None, :] + offs[None, :, :]
    if nb.min() < 0 or nb.max() >= lat.m:
        raise ConfigError("neighborhood of an interior node leaves the lattice")
    y = grid[tuple(c.T)]
    design = grid[tuple(np.moveaxis(nb, 2, 0))]
    return y, design


def fisher_statistic_region(x, region: Region, h: int, lat: Lattice | None = None) -> float:
    """``T_S = |S^h| ||Pi X||^2 / ||X - Pi X||^2`` by rank-revealing least squares."""
    y, design = fisher_design(x, region, h, lat)
    if len(y) <= design.shape[1]:
        raise RegionSkipped(f"|S^h| = {len(y)} <= |N_h| = {design.shape[1]}")
    return _fisher_from_design(y, design)


class FisherDetector:
    """Fisher scan; box classes use summed-area tables of the per-node Gram terms."""

    name = "fisher"

    def __init__(self, lat: Lattice, regions: RegionClass, h: int):
        self.lat = lat
        self.regions = regions
        self.h = h
        self.offsets = neighborhood_offsets(lat.d, h).array
        self.p = len(self.offsets)
        if lat.m <= 2 * h:
            raise ConfigError("lattice too small for the neighborhood radius")
        n = len(regions)
        self.valid = np.zeros(n, dtype=bool)
        self.n_inner = np.zeros(n, dtype=np.int64)
        if regions.is_box_class:
            inner_side = regions.sides - 2 * h
            self.n_inner = np.where(inner_side > 0, np.maximum(inner_side, 0) ** lat.d, 0)
            self.valid = self.n_inner > self.p
            self._lo = regions.corners - 1  # reduced-grid coordinates of interior corners
            self._hi = self._lo + np.maximum(inner_side, 0)[:, None]
        else:
            for i, r in enumerate(regions):
                self.n_inner[i] = interior_size(r, h)
            self.valid = self.n_inner > self.p
        self.skipped = np.flatnonzero(~self.valid).tolist()
        if not self.valid.any():
            raise EmptyScanError("every region fails the Fisher preconditions")

    def _gram_integral(self, xb: np.ndarray) -> np.ndarray:
        """Zero-padded cumulative sums of ``z z^T`` (upper triangle), ``z = (X_i, F_i)``."""
        d, m, h = self.lat.d, self.lat.m, self.h
        r = xb.shape[0]
        grid = xb.reshape((r,) + self.lat.shape)
        core = tuple(slice(h, m - h) for _ in range(d))
        cols = [grid[(slice(None),) + core]]
        for v in self.offsets:
            sl = tuple(slice(h + o, m - h + o) for o in v)
            cols.append(grid[(slice(None),) + sl])
        z = np.stack(cols, axis=-1)
        iu = np.triu_indices(self.p + 1)
        prods = z[..., iu[0]] * z[..., iu[1]]
        pad = [(0, 0)] + [(1, 0)] * d + [(0, 0)]
        integ = np.pad(prods, pad)
        for ax in range(1, d + 1):
            np.cumsum(integ, axis=ax, out=integ)
        return integ

    def _box_sums(self, integ: np.ndarray, idx: np.ndarray) -> np.ndarray:
        d = self.lat.d
        lo, hi = self._lo[idx], self._hi[idx]
        total = 0.0
        for corner in np.ndindex(*(2,) * d):
            pick = np.where(np.asarray(corner, dtype=bool), hi, lo)
            sign = (-1) ** (d - sum(corner))
            total = total + sign * integ[(slice(None),) + tuple(pick.T)]
        return total  # (R, len(idx), n_terms)

    def statistics(self, x) -> np.ndarray:
        xb = _as_batch(x, self.lat)
        r = xb.shape[0]
        out = np.full((r, len(self.regions)), np.nan)
        idx = np.flatnonzero(self.valid)
        if not self.regions.is_box_class:
            for a in range(r):
                for i in idx:
                    out[a, i] = fisher_statistic_region(xb[a], self.regions[i], self.h, self.lat)
            return out
        p = self.p
        iu = np.triu_indices(p + 1)
        step = _chunk(r, self.lat.n * len(iu[0]) + len(idx) * (p + 1) ** 2, budget=20_000_000)
        for a in range(0, r, step):
            integ = self._gram_integral(xb[a : a + step])
            sums = self._box_sums(integ, idx)
            g = np.empty(sums.shape[:2] + (p + 1, p + 1))
            g[..., iu[0], iu[1]] = sums
            g[..., iu[1], iu[0]] = sums
            yy = g[..., 0, 0]
            b = g[..., 1:, 0]
            amat = g[..., 1:, 1:]
            # Hadamard ratio det(A) / prod(diag A) flags near-singular Gram matrices cheaply
            sign, logdet = np.linalg.slogdet(amat)
            diag = np.diagonal(amat, axis1=-2, axis2=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ok = (sign > 0) & (logdet - np.log(diag).sum(axis=-1) > math.log(RANK_TOL))
            q = np.full(yy.shape, np.nan)
            if ok.all():
                q = np.einsum("...i,...i->...", b, np.linalg.solve(amat, b[..., None])[..., 0])
            else:
                q[ok] = np.einsum("ni,ni->n", b[ok], np.linalg.solve(amat[ok], b[ok][..., None])[..., 0])
                for rr, j in zip(*np.nonzero(~ok)):
                    out[a + rr, idx[j]] = fisher_statistic_region(xb[a + rr], self.regions[idx[j]], self.h, self.lat)
            rss = yy - q
            t = self.n_inner[idx] * q / rss
            t = np.where(rss > 0, t, np.inf)
            block = out[a : a + step]
            sel = np.broadcast_to(ok, t.shape)
            block[:, idx] = np.where(sel, t, block[:, idx])
        return out

    def max_statistic(self, x) -> tuple[np.ndarray, np.ndarray]:
        return _first_argmax(self.statistics(x))

    def scan(self, x, threshold: float | None = None) -> DetectorOutput:
        vals = self.statistics(x)[0]
        mx, am = _first_argmax(vals)
        out = DetectorOutput("fisher", self.regions, vals, float(mx), int(am), skipped=list(self.skipped))
        return out.with_threshold(threshold) if threshold is not None else out


def fisher_statistic(x, regions: RegionClass, h: int, lat: Lattice | None = None) -> DetectorOutput:
    lat = lat or (x.lattice if isinstance(x, Field) else None)
    return FisherDetector(lat, regions, h).scan(x)


def fisher_threshold_theoretical(nh: int, n_regions: int, alpha: float, c3: float = 1.0) -> float:
    """Null deviation level ``|N_h| + c3 [sqrt(|N_h| (log|C| + 1 + log 1/a)) + log|C| + log 1/a]``."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    lc, la = math.log(n_regions), math.log(1.0 / alpha)
    return nh + c3 * (math.sqrt(nh * (lc + 1.0 + la)) + lc + la)


# -- Monte Carlo calibration ------------------------------------------------


@dataclass
class Calibration:
    threshold: float
    se: float
    level: float
    n_sims: int


def null_max_statistics(detector, n_sims: int, seed: int, stream: int = STREAM_CALIBRATION,
                        prefix: tuple = ()) -> np.ndarray:
    """Max statistic over ``n_sims`` null fields drawn in fixed-size stream blocks
    ``(seed, *prefix, stream, block)``."""
    out = np.empty(n_sims)
    for b, a in enumerate(range(0, n_sims, BLOCK)):
        size = min(BLOCK, n_sims - a)
        rng = make_rng(seed, *prefix, stream, b)
        out[a : a + size] = detector.max_statistic(rng.standard_normal((size, detector.lat.n)))[0]
    return out


def calibrate_threshold_mc(detector, level: float, n_sims: int, seed: int,
                           n_boot: int = 500, prefix: tuple = ()) -> Calibration:
    """Empirical ``1 - level`` quantile of the null max statistic, with bootstrap SE."""
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    if n_sims < 100:
        raise ConfigError("calibration needs n_sims >= 100")
    if level * n_sims < 5:
        raise ConfigError(f"n_sims={n_sims} is too small for level {level}")
    stats = null_max_statistics(detector, n_sims, seed, prefix=prefix)
    return calibration_from_maxima(stats, level, seed, n_boot, prefix)


def calibration_from_maxima(stats: np.ndarray, level: float, seed: int, n_boot: int = 500,
                            prefix: tuple = ()) -> Calibration:
    thr = float(np.quantile(stats, 1.0 - level))
    rng = make_rng(seed, *prefix, STREAM_MISC, 0)
    boot = np.quantile(rng.choice(stats, size=(n_boot, len(stats)), replace=True), 1.0 - level, axis=1)
    return Calibration(thr, float(boot.std(ddof=1)), level, len(stats))


def make_detector(spec: dict, lat: Lattice, regions: RegionClass, phi: PhiField | None = None,
                  cov: CovTable | None = None):
    kind = spec.get("type", spec.get("detector"))
    if kind == "glrt":
        if phi is None:
            raise ConfigError("the GLRT needs a known phi")
        return GlrtDetector(lat, regions, phi, cov)
    if kind == "fisher":
        return FisherDetector(lat, regions, int(spec.get("h", 1)))
    raise ConfigError(f"unknown detector {kind!r}")
