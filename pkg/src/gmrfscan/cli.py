"""Command line entry point: ``gmrfscan <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds, oracle
from .detectors import GLRT_THRESHOLD, calibrate_threshold_mc, fisher_threshold_theoretical, make_detector
from .errors import ConfigError, NumericalError
from .gmrf import CovBuilder, PhiField
from .harness import ExperimentConfig, emit, phase_curve, phi_from_spec, run_experiment
from .lattice import Region, make_lattice, region_class_from_config
from .simulate import Field, sample_alternative, sample_null

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _write_json(obj, out) -> None:
    text = json.dumps(_clean(obj), indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _setup(cfg: ExperimentConfig):
    lat = make_lattice(int(cfg.lattice["d"]), int(cfg.lattice["m"]))
    regions = region_class_from_config(lat, cfg.regions)
    h = int(cfg.detector.get("h", cfg.signal.get("h", 1)))
    phi = phi_from_spec(cfg.signal, lat.d, h)
    return lat, regions, phi


# -- subcommands -----------------------------------------------------------


def cmd_simulate(args) -> None:
    cfg = _config(args)
    lat, regions, phi = _setup(cfg)
    if args.null:
        field = sample_null(lat, cfg.seed)
    else:
        if phi is None:
            raise ConfigError("simulate needs a deterministic signal phi")
        if cfg.planted == "center":
            k = int(cfg.regions.get("k", cfg.regions.get("side")))
            region = Region.box([(lat.m - k) // 2 + 1] * lat.d, k)
        else:
            region = Region.from_dict(cfg.planted[0])
        field = sample_alternative(lat, region, phi, CovBuilder(region.diameter)(phi), cfg.seed)
    out = args.out or "field.csv"
    if str(out).endswith(".json"):
        field.to_json(out)
    else:
        field.to_csv(out)


def _detector_threshold(cfg: ExperimentConfig, detector, lat, regions) -> float | None:
    spec = cfg.detector.get("threshold", {"mode": "fixed"})
    mode = spec.get("mode", "fixed")
    if mode == "fixed":
        if "value" in spec:
            return float(spec["value"])
        return GLRT_THRESHOLD if detector.name == "glrt" else None
    if mode == "theoretical":
        if detector.name == "glrt":
            return GLRT_THRESHOLD
        nh = (2 * detector.h + 1) ** lat.d - 1
        return fisher_threshold_theoretical(nh, len(regions), float(spec.get("alpha", 0.05)),
                                            float(spec.get("c", 1.0)))
    if mode == "mc":
        cal = calibrate_threshold_mc(detector, float(spec.get("level", 0.05)), int(spec.get("n_cal", 1000)),
                                     cfg.seed)
        return cal.threshold
    raise ConfigError(f"unknown threshold mode {mode!r}")


def cmd_scan(args) -> None:
    cfg = _config(args)
    if args.detector:
        cfg.detector = dict(cfg.detector, type=args.detector)
    lat, regions, phi = _setup(cfg)
    path = str(args.input)
    field = Field.from_json(path) if path.endswith(".json") else Field.from_csv(path, lat)
    cov = None
    if cfg.detector["type"] == "glrt" and phi is not None:
        cov = CovBuilder(max(r.diameter for r in regions))(phi)
    detector = make_detector(cfg.detector, lat, regions, phi, cov)
    thr = _detector_threshold(cfg, detector, lat, regions)
    result = detector.scan(field.data, thr)
    _write_json(result.to_json(emit_all=args.emit_all), args.out)


def cmd_calibrate(args) -> None:
    cfg = _config(args)
    lat, regions, phi = _setup(cfg)
    cov = None
    if cfg.detector["type"] == "glrt" and phi is not None:
        cov = CovBuilder(max(r.diameter for r in regions))(phi)
    detector = make_detector(cfg.detector, lat, regions, phi, cov)
    cal = calibrate_threshold_mc(detector, args.level, args.n_sims, cfg.seed)
    _write_json({"threshold": cal.threshold, "se": cal.se, "level": cal.level, "n_sims": cal.n_sims,
                 "seed": cfg.seed, "config_hash": cfg.config_hash}, args.out)


def cmd_sweep(args) -> None:
    cfg = _config(args)
    if args.phase:
        pc = phase_curve(cfg, workers=args.workers)
        table = pc.table
        summary = {"r_half": pc.r_half, "se": pc.se, "n_boot": pc.n_boot}
    else:
        table, summary = run_experiment(cfg, workers=args.workers), None
    out = args.out
    if out:
        emit(table, out, "json" if str(out).endswith(".json") else "csv")
    else:
        sys.stdout.write(table.to_csv_text())
    if summary is not None:
        _write_json(summary, None)


def _phi_param(obj, d: int | None = None) -> PhiField:
    if "psi" in obj:
        return phi_from_spec({"type": "ar", "psi": obj["psi"]}, 1)
    if "values" in obj:
        return PhiField.from_json(obj)
    if obj.get("zero"):
        return PhiField.zero(int(obj.get("d", d or 1)), int(obj.get("h", 1)))
    raise ConfigError("phi parameters need 'psi', 'values' or 'zero'")


def _params_class(p):
    lat = make_lattice(int(p["lattice"]["d"]), int(p["lattice"]["m"]))
    return lat, region_class_from_config(lat, p["regions"])


def cmd_bounds(args) -> None:
    p = _load_json(args.params)
    mode = args.mode
    if mode == "ar":
        report = bounds.rate_ar(p["n"], p["k"], p.get("h", 1), p.get("c1", 1.0), p.get("c2", 1.0))
    elif mode == "texture":
        report = bounds.rate_texture(p["n"], p["k"], p.get("h", 1), p.get("c1", 1.0), p.get("c2", 1.0))
    elif mode == "hypercube":
        d = int(p.get("d", 1))
        nh = p.get("nh", (2 * int(p.get("h", 1)) + 1) ** d - 1)
        report = bounds.rate_hypercube(p["n"], p["k"], nh, p.get("c1", 1.0), p.get("c2", 1.0), d)
    elif mode == "thm3":
        _, regions = _params_class(p)
        report = bounds.theorem3_conditions(regions, p.get("h", 1), p["a"], p["r"], p.get("c0", 1.0))
    elif mode == "cor3":
        if "sizes" in p:
            value = bounds.known_cov_bound_value(p["sizes"], p["l2_sq"], p["l1"])
            report = bounds.BoundReport(value, constants_used={"exponent": 10.0})
        else:
            _, regions = _params_class(p)
            report = bounds.known_cov_lower_bound(regions, _phi_param(p["phi"]))
        if "a" in p:
            report.constants_used["radius"] = bounds.known_cov_impossibility_radius(
                p["sizes"] if "sizes" in p else regions, p["a"])
    else:
        raise ConfigError(f"unknown bounds mode {mode!r}")
    _write_json(report.to_json(), args.out)


def cmd_oracle(args) -> None:
    p = _load_json(args.params)
    suite = args.suite
    seed = p.get("seed", args.seed or 0)
    n_sims = int(p.get("n_sims", 100_000))
    reports: list[dict] = []
    phi = _phi_param(p.get("phi", {"psi": [0.3]}))
    region = Region.from_dict(p["region"]) if "region" in p else Region.box([1] * phi.d, 4)
    if suite in ("all", "lemmas"):
        reports += [r.to_json() for r in oracle.lemma_suite(phi, region, n_sims=min(n_sims, 20_000), seed=seed)]
    if suite in ("all", "second-moment"):
        phi2 = _phi_param(p["phi2"]) if "phi2" in p else phi
        reports += [r.to_json() for r in oracle.second_moment_check(phi, phi2, region, n_sims, seed)]
    if suite in ("all", "bayes"):
        lat, regions = _params_class(p) if "lattice" in p else _toy_class()
        res = oracle.bayes_risk_mc(lat, regions, phi, int(p.get("bayes_sims", 20_000)), seed)
        reports.append(oracle.OracleReport("bayes risk >= RHS - 3 SE", res.sandwich_holds, res.risk,
                                           res.lower_bound_rhs, 3 * res.se, res.n_sims,
                                           note=f"type1={res.type1:.4g} type2={res.type2:.4g}").to_json())
    if suite not in ("all", "lemmas", "second-moment", "bayes"):
        raise ConfigError(f"unknown suite {suite!r}")
    _write_json(reports, args.out)
    if not all(r["pass"] for r in reports):
        raise NumericalError("oracle checks failed")


def _toy_class():
    lat = make_lattice(1, 12)
    return lat, region_class_from_config(lat, {"class": "tiling", "k": 3})


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", default=None, help="output path (stdout if omitted)")

    parser = argparse.ArgumentParser(prog="gmrfscan", description="Detect GMRF patches hidden in white noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw one field from the config")
    p.add_argument("--config", required=True)
    p.add_argument("--null", action="store_true", help="draw pure noise")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scan", parents=[common], help="scan one field")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--detector", choices=("glrt", "fisher"))
    p.add_argument("--emit-all", action="store_true", help="include every per-region statistic")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("calibrate", parents=[common], help="Monte Carlo null threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--n-sims", type=int, default=1000)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", parents=[common], help="replicated risk over the config sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", action="store_true", help="also estimate the r where risk crosses 1/2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", parents=[common], help="evaluate a bound or rate")
    p.add_argument("--mode", required=True, choices=("ar", "texture", "hypercube", "thm3", "cor3"))
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("oracle-check", parents=[common], help="run oracle identity checks")
    p.add_argument("--suite", default="all", choices=("all", "lemmas", "second-moment", "bayes"))
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (KeyError, TypeError, OSError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
