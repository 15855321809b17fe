"""Replicated risk estimation over sweeps of ``(n, k, h, r)``.

Every random draw comes from a stream keyed ``(seed, sweep_id, stream, ...)``
and replicates are processed in fixed blocks, so results do not depend on the
number of workers.  Reported type II error is the worst over the configured
planted regions ("empirical worst-case over configured grid").
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bounds import rademacher_prior_sample
from .detectors import (
    BLOCK,
    GLRT_THRESHOLD,
    calibration_from_maxima,
    fisher_threshold_theoretical,
    make_detector,
)
from .errors import ConfigError, NoCrossingError
from .gmrf import ArParams, CovBuilder, PhiField, ar_to_gmrf, make_constant_phi
from .lattice import Region, make_lattice, region_class_from_config
from .simulate import STREAM_CALIBRATION, STREAM_EVAL, STREAM_PRIOR, PatchSampler, make_rng

CSV_HEADER = ("sweep_id", "n", "k", "h", "r", "type1", "type2", "risk", "se", "runtime_ms")
AXES = ("n", "k", "h", "r")
RISK_LABEL = "empirical worst-case over configured grid"
_CONFIG_KEYS = {"name", "lattice", "regions", "signal", "planted", "detector", "n_replicates", "seed", "sweep"}


@dataclass
class ExperimentConfig:
    lattice: dict
    regions: dict
    signal: dict
    detector: dict
    n_replicates: int = 200
    seed: int = 0
    planted: object = "center"
    sweep: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be positive")
        unknown = set(self.sweep) - set(AXES)
        if unknown:
            raise ConfigError(f"unknown sweep axes {sorted(unknown)}")
        for axis, values in self.sweep.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list")
        if self.detector.get("type") not in ("glrt", "fisher"):
            raise ConfigError("detector.type must be 'glrt' or 'fisher'")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        missing = {"lattice", "regions", "signal", "detector"} - set(obj)
        if missing:
            raise ConfigError(f"missing config keys {sorted(missing)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def sweep_points(self) -> list[dict]:
        axes = [a for a in AXES if a in self.sweep]
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]


def phi_from_spec(sig: dict, d: int, h: int | None = None, r: float | None = None) -> PhiField | None:
    """Signal spec to a fixed phi; ``None`` for the random Rademacher prior."""
    kind = sig.get("type")
    h = int(h if h is not None else sig.get("h", 1))
    r = r if r is not None else sig.get("r")
    if kind == "ar":
        return ar_to_gmrf(ArParams(tuple(sig["psi"])))
    if kind == "phi":
        return PhiField.from_json(sig)
    if kind in ("constant", "rademacher") and r is None:
        raise ConfigError(f"signal type {kind!r} needs r")
    if kind == "constant":
        return make_constant_phi(d, h, float(r))
    if kind == "rademacher":
        rademacher_prior_sample(d, h, float(r), 0)  # validates r |N_h| < 1
        return None
    if kind == "none":
        return PhiField.zero(d, h)
    raise ConfigError(f"unknown signal type {kind!r}")


# -- per-point context -----------------------------------------------------


class _Context:
    """Everything needed to simulate and scan at one sweep point."""

    def __init__(self, cfg: ExperimentConfig, point: dict):
        d = int(cfg.lattice["d"])
        m = int(cfg.lattice["m"])
        if "n" in point:
            m = round(point["n"] ** (1.0 / d))
            if m**d != point["n"]:
                raise ConfigError(f"n={point['n']} is not a perfect power for d={d}")
        self.lat = make_lattice(d, m)
        reg_spec = dict(cfg.regions)
        if "k" in point:
            reg_spec["k"] = reg_spec["side"] = int(point["k"])
        self.k = int(reg_spec.get("k", reg_spec.get("side", 0)) or 0)
        self.regions = region_class_from_config(self.lat, reg_spec)
        if len(self.regions) == 0:
            raise ConfigError("region class is empty on this lattice")

        sig = cfg.signal
        self.h = int(point.get("h", cfg.detector.get("h", sig.get("h", 1))))
        self.r = point.get("r", sig.get("r"))
        self.rademacher = (d, self.h, float(self.r)) if sig.get("type") == "rademacher" else None
        self.phi = phi_from_spec(sig, d, self.h, self.r)
        if self.phi is not None and self.r is None:
            self.r = self.phi.l2

        self.planted = self._planted(cfg.planted)
        for reg in self.planted:
            if not self.lat.contains(reg):
                raise ConfigError(f"planted {reg} is not inside the lattice")
        extent = max(reg.diameter for reg in self.planted)
        det = dict(cfg.detector, h=self.h)
        if det["type"] == "glrt":
            if self.phi is None:
                raise ConfigError("the GLRT needs a deterministic signal phi")
            extent = max(extent, max(reg.diameter for reg in self.regions))
        self.cov_builder = CovBuilder(extent)
        cov = self.cov_builder(self.phi) if self.phi is not None else None
        self.detector = make_detector(det, self.lat, self.regions, self.phi, cov)
        self._samplers: dict = {}

    def _planted(self, spec) -> list[Region]:
        if spec == "center":
            if self.k < 1:
                raise ConfigError("planted 'center' needs a region side k")
            corner = [(self.lat.m - self.k) // 2 + 1] * self.lat.d
            return [Region.box(corner, self.k)]
        if isinstance(spec, list) and spec:
            return [Region.from_dict(r) for r in spec]
        raise ConfigError("planted must be 'center' or a non-empty list of regions")

    def sampler(self, j: int, phi: PhiField) -> PatchSampler:
        key = (j, phi.key())
        if key not in self._samplers:
            self._samplers[key] = PatchSampler(phi, self.planted[j], self.cov_builder(phi))
        return self._samplers[key]

    def null_block(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_normal((size, self.lat.n))

    def alt_block(self, j: int, rng: np.random.Generator, prior_rng, size: int) -> np.ndarray:
        x = rng.standard_normal((size, self.lat.n))
        flat = self.planted[j].flat_indices(self.lat)
        if self.rademacher is None:
            x[:, flat] = self.sampler(j, self.phi).draw(rng, size)
        else:
            for i in range(size):
                phi = rademacher_prior_sample(*self.rademacher, prior_rng)
                x[i, flat] = self.sampler(j, phi).draw(rng)
        return x

    def overlaps(self, argmax: np.ndarray, j: int) -> np.ndarray:
        target = self.planted[j]
        if self.regions.is_box_class and target.is_box:
            lo = self.regions.corners[argmax]
            hi = lo + self.regions.sides[argmax][:, None]
            t_lo = np.asarray(target.corner)
            return np.all((lo < t_lo + target.side) & (t_lo < hi), axis=1)
        nodes = target.node_set
        return np.array([not nodes.isdisjoint(self.regions[a].node_set) for a in argmax])


_CONTEXTS: dict = {}


def _context(cfg: ExperimentConfig, sweep_id: int, point: dict) -> _Context:
    key = (cfg.config_hash, sweep_id)
    if key not in _CONTEXTS:
        if len(_CONTEXTS) > 8:
            _CONTEXTS.clear()
        _CONTEXTS[key] = _Context(cfg, point)
    return _CONTEXTS[key]


def _run_unit(task) -> tuple[np.ndarray, np.ndarray]:
    """One block of replicates; returns the max statistic and its argmax per replicate."""
    cfg_dict, sweep_id, point, kind, j, block, size = task
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ctx = _context(cfg, sweep_id, point)
    if kind == "cal":
        x = ctx.null_block(make_rng(cfg.seed, sweep_id, STREAM_CALIBRATION, block), size)
    elif j < 0:
        x = ctx.null_block(make_rng(cfg.seed, sweep_id, STREAM_EVAL, 0, block), size)
    else:
        rng = make_rng(cfg.seed, sweep_id, STREAM_EVAL, 1 + j, block)
        prior_rng = make_rng(cfg.seed, sweep_id, STREAM_PRIOR, j, block)
        x = ctx.alt_block(j, rng, prior_rng, size)
    mx, am = ctx.detector.max_statistic(x)
    return np.asarray(mx, dtype=float), np.asarray(am, dtype=np.int64)


def _blocks(total: int):
    for b, a in enumerate(range(0, total, BLOCK)):
        yield b, min(BLOCK, total - a)


class _Serial:
    def map(self, fn, items):
        return map(fn, items)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _executor(workers: int):
    return _Serial() if workers <= 1 else ProcessPoolExecutor(max_workers=workers)


# -- results ---------------------------------------------------------------


@dataclass
class ResultRow:
    sweep_id: int
    n: int
    k: int
    h: int
    r: float
    type1: float
    type2: float
    risk: float
    se: float
    runtime_ms: float
    extras: dict = field(default_factory=dict)

    def csv_fields(self, include_runtime: bool = True) -> list[str]:
        vals = [str(self.sweep_id), str(self.n), str(self.k), str(self.h)]
        vals += [repr(float(v)) for v in (self.r, self.type1, self.type2, self.risk, self.se)]
        if include_runtime:
            vals.append(repr(float(self.runtime_ms)))
        return vals


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    config_hash: str = ""
    seed: int | None = None
    label: str = RISK_LABEL

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv_text(self, include_runtime: bool = True) -> str:
        header = CSV_HEADER if include_runtime else CSV_HEADER[:-1]
        lines = [",".join(header)] + [",".join(r.csv_fields(include_runtime)) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "label": self.label,
            "columns": list(CSV_HEADER),
            "rows": [asdict(r) for r in self.rows],
        }


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def emit(table: ResultTable, path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "csv":
        path.write_text(table.to_csv_text())
    elif fmt == "json":
        path.write_text(json.dumps(_nan_to_none(table.to_json()), indent=2))
    else:
        raise ConfigError(f"unknown output format {fmt!r}")


def _num(v):
    return math.nan if v is None else float(v)


def read_table(path, fmt: str | None = None) -> ResultTable:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    if fmt == "json":
        obj = json.loads(path.read_text())
        rows = []
        for r in obj["rows"]:
            vals = {k: (_num(r[k]) if k in ("r", "type1", "type2", "risk", "se", "runtime_ms") else r[k])
                    for k in CSV_HEADER}
            rows.append(ResultRow(**vals, extras=r.get("extras", {})))
        return ResultTable(rows, obj.get("config_hash", ""), obj.get("seed"), obj.get("label", RISK_LABEL))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ConfigError(f"unexpected CSV header {header}")
        rows = [ResultRow(int(a), int(b), int(c), int(d), *(float(v) for v in rest)) for a, b, c, d, *rest in reader]
    return ResultTable(rows)


# -- experiment driver -----------------------------------------------------


def _threshold(cfg: ExperimentConfig, ctx: _Context, sweep_id: int, point: dict, pool) -> tuple[float, dict]:
    spec = cfg.detector.get("threshold", {"mode": "fixed"})
    mode = spec.get("mode", "fixed")
    if mode == "fixed":
        default = GLRT_THRESHOLD if cfg.detector["type"] == "glrt" else None
        value = spec.get("value", default)
        if value is None:
            raise ConfigError("fixed threshold needs a value")
        return float(value), {}
    if mode == "theoretical":
        if cfg.detector["type"] == "glrt":
            return GLRT_THRESHOLD, {}
        nh = (2 * ctx.h + 1) ** ctx.lat.d - 1
        return fisher_threshold_theoretical(nh, len(ctx.regions), float(spec.get("alpha", 0.05)),
                                            float(spec.get("c", 1.0))), {}
    if mode == "mc":
        level = float(spec.get("level", 0.05))
        n_cal = int(spec.get("n_cal", 1000))
        tasks = [(cfg.to_dict(), sweep_id, point, "cal", -1, b, s) for b, s in _blocks(n_cal)]
        maxima = np.concatenate([mx for mx, _ in pool.map(_run_unit, tasks)])
        cal = calibration_from_maxima(maxima, level, cfg.seed, prefix=(sweep_id,))
        return cal.threshold, {"threshold_se": cal.se, "n_cal": n_cal}
    if mode == "always":
        return -math.inf, {}
    raise ConfigError(f"unknown threshold mode {mode!r}")


def _run_point(cfg: ExperimentConfig, sweep_id: int, point: dict, pool) -> ResultRow:
    t0 = time.perf_counter()
    try:
        ctx = _context(cfg, sweep_id, point)
    except ConfigError as exc:
        d = int(cfg.lattice["d"])
        return ResultRow(sweep_id, int(point.get("n", int(cfg.lattice["m"]) ** d)), int(point.get("k", 0)),
                         int(point.get("h", 0)), float(point.get("r", math.nan)), math.nan, math.nan,
                         math.nan, math.nan, 0.0, {"error": str(exc)})
    thr, extras = _threshold(cfg, ctx, sweep_id, point, pool)
    always = thr == -math.inf
    reps = cfg.n_replicates
    n_planted = len(ctx.planted)
    tasks = [(cfg.to_dict(), sweep_id, point, "eval", j, b, s)
             for j in range(-1, n_planted) for b, s in _blocks(reps)]
    results = list(pool.map(_run_unit, tasks))
    per_target = len(list(_blocks(reps)))
    grouped = [results[i * per_target:(i + 1) * per_target] for i in range(n_planted + 1)]

    def rejects(chunk):
        mx = np.concatenate([m for m, _ in chunk])
        am = np.concatenate([a for _, a in chunk])
        return (np.ones_like(mx, dtype=bool) if always else mx > thr), am

    rej0, _ = rejects(grouped[0])
    type1 = float(rej0.mean())
    misses, overlaps = [], []
    for j in range(n_planted):
        rej, am = rejects(grouped[j + 1])
        misses.append(float(1.0 - rej.mean()))
        hits = am[rej]
        overlaps.append(float(ctx.overlaps(hits, j).mean()) if len(hits) else math.nan)
    worst = int(np.argmax(misses))
    type2 = misses[worst]
    se = math.sqrt(type1 * (1 - type1) / reps + type2 * (1 - type2) / reps)
    extras.update(threshold=thr, type2_per_planted=misses, overlap=overlaps, n_replicates=reps)
    runtime = (time.perf_counter() - t0) * 1000.0
    return ResultRow(sweep_id, ctx.lat.n, ctx.k, ctx.h, float(ctx.r if ctx.r is not None else math.nan),
                     type1, type2, type1 + type2, se, runtime, extras)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ResultTable:
    rows = []
    with _executor(workers) as pool:
        for sweep_id, point in enumerate(cfg.sweep_points()):
            rows.append(_run_point(cfg, sweep_id, point, pool))
    return ResultTable(rows, cfg.config_hash, cfg.seed)


# -- phase curve -----------------------------------------------------------


@dataclass
class PhaseCurve:
    table: ResultTable
    r_half: float
    se: float
    n_boot: int


def _crossing(r: np.ndarray, risk: np.ndarray, level: float = 0.5) -> float | None:
    for i in range(len(r) - 1):
        a, b = risk[i], risk[i + 1]
        if a >= level > b:
            return float(r[i] + (a - level) * (r[i + 1] - r[i]) / (a - b))
    return None


def phase_curve(cfg: ExperimentConfig, workers: int = 1, n_boot: int = 200) -> PhaseCurve:
    """Risk against ``r`` and the interpolated radius where it crosses 1/2.

    Infeasible sweep points (reported as NaN rows) are left out of the curve.
    """
    rs = cfg.sweep.get("r", [])
    if len(rs) < 4:
        raise ConfigError("phase_curve needs at least 4 r values")
    if any(len(v) > 1 for a, v in cfg.sweep.items() if a != "r"):
        raise ConfigError("phase_curve sweeps r only; fix the other axes")
    table = run_experiment(cfg, workers)
    feasible = np.isfinite(table.column("risk"))
    order = np.argsort(table.column("r"), kind="stable")
    order = order[feasible[order]]
    r = table.column("r")[order]
    p1, p2 = table.column("type1")[order], table.column("type2")[order]
    r_half = _crossing(r, p1 + p2)
    if r_half is None:
        raise NoCrossingError("risk curve does not cross 1/2", table=table)
    rng = make_rng(cfg.seed, 0, 3, 99)
    reps = cfg.n_replicates
    boot = []
    for _ in range(n_boot):
        risk = rng.binomial(reps, p1) / reps + rng.binomial(reps, p2) / reps
        c = _crossing(r, risk)
        if c is not None:
            boot.append(c)
    se = float(np.std(boot, ddof=1)) if len(boot) > 1 else math.nan
    return PhaseCurve(table, r_half, se, len(boot))
