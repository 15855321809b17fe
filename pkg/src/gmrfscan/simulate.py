"""Seeded sampling under the null (white noise) and under a planted GMRF patch."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConditioningError, ConfigError
from .gmrf import CovTable, PhiField, covariance_submatrix
from .lattice import Lattice, Region, make_lattice

RNG_ALGORITHM = "numpy.Philox4x64-10+SeedSequence"
MAX_PATCH = 10_000

# spawn-key namespaces; calibration and evaluation never share a stream
STREAM_EVAL = 0
STREAM_CALIBRATION = 1
STREAM_PRIOR = 2
STREAM_MISC = 3


def make_rng(seed, *key) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *key)``."""
    if isinstance(seed, np.random.Generator):
        if key:
            raise ConfigError("stream keys need an integer seed")
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Field:
    lattice: Lattice
    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).ravel()
        if self.data.shape != (self.lattice.n,):
            raise ConfigError(f"field has {self.data.size} values, lattice has {self.lattice.n} nodes")

    @property
    def grid(self) -> np.ndarray:
        return self.data.reshape(self.lattice.shape)

    def values_on(self, region: Region) -> np.ndarray:
        return self.data[region.flat_indices(self.lattice)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "value"])
            for i, v in enumerate(self.data):
                w.writerow([i, repr(float(v))])

    @classmethod
    def from_csv(cls, path, lattice: Lattice) -> "Field":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        data = np.empty(len(rows))
        for row in rows:
            data[int(row["index"])] = float(row["value"])
        return cls(lattice, data, {"source": str(path)})

    def to_json(self, path) -> None:
        obj = {
            "lattice": {"d": self.lattice.d, "m": self.lattice.m},
            "provenance": self.provenance,
            "data": self.data.tolist(),
        }
        Path(path).write_text(json.dumps(obj))

    @classmethod
    def from_json(cls, path) -> "Field":
        obj = json.loads(Path(path).read_text())
        lat = make_lattice(obj["lattice"]["d"], obj["lattice"]["m"])
        return cls(lat, np.asarray(obj["data"]), obj.get("provenance", {}))


class PatchSampler:
    """Exact ``N(0, Gamma_S)`` draws via a cached Cholesky factor."""

    def __init__(self, phi: PhiField, region: Region, cov: CovTable):
        if region.size > MAX_PATCH:
            raise ConfigError(f"patch of {region.size} nodes exceeds the dense limit {MAX_PATCH}")
        self.phi = phi
        self.region = region
        self.gamma = covariance_submatrix(phi, region, cov, check=False)
        try:
            self.chol = np.linalg.cholesky(self.gamma)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("Gamma_S is not numerically positive definite") from exc

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        k = self.region.size
        if size is None:
            return self.chol @ rng.standard_normal(k)
        return rng.standard_normal((size, k)) @ self.chol.T


def _provenance(hyp, seed, region=None, phi=None) -> dict:
    prov = {"hypothesis": hyp, "seed": seed if isinstance(seed, int) else None, "rng": RNG_ALGORITHM}
    if region is not None:
        prov["region"] = region.to_dict()
    if phi is not None:
        prov["phi"] = phi.to_json()
    return prov


def sample_null(lat: Lattice, seed) -> Field:
    rng = make_rng(seed)
    return Field(lat, rng.standard_normal(lat.n), _provenance("H0", seed))


def sample_gmrf_patch(phi: PhiField, region: Region, cov: CovTable, seed) -> np.ndarray:
    return PatchSampler(phi, region, cov).draw(make_rng(seed))


def sample_alternative(lat: Lattice, region: Region, phi: PhiField, cov: CovTable, seed) -> Field:
    if not lat.contains(region):
        raise ConfigError("planted region is not inside the lattice")
    rng = make_rng(seed)
    data = rng.standard_normal(lat.n)
    data[region.flat_indices(lat)] = PatchSampler(phi, region, cov).draw(rng)
    return Field(lat, data, _provenance("H1", seed, region, phi))


def null_batch(lat: Lattice, rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.standard_normal((size, lat.n))


def alternative_batch(lat: Lattice, sampler: PatchSampler, rng: np.random.Generator, size: int) -> np.ndarray:
    x = rng.standard_normal((size, lat.n))
    x[:, sampler.region.flat_indices(lat)] = sampler.draw(rng, size)
    return x
