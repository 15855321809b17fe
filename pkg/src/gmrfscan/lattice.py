"""Lattice geometry: nodes, neighborhoods, candidate regions and scan classes.

Nodes are d-tuples with coordinates in ``1..m`` (1-based, as in the usual
``{1, ..., m}^d`` notation).  Flat indices are 0-based and row-major.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError

MAX_NODES = 2**31 - 1

Node = tuple[int, ...]


@dataclass(frozen=True)
class Lattice:
    d: int
    m: int

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ConfigError(f"lattice needs d >= 1 and m >= 1, got d={self.d}, m={self.m}")

    @property
    def n(self) -> int:
        return self.m**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.d

    def flat_index(self, nodes) -> np.ndarray:
        """Row-major 0-based flat indices of 1-based node coordinates ``(k, d)``."""
        coords = np.asarray(nodes, dtype=np.int64).reshape(-1, self.d) - 1
        return np.ravel_multi_index(tuple(coords.T), self.shape)

    def node(self, flat: int) -> Node:
        return tuple(int(c) + 1 for c in np.unravel_index(flat, self.shape))

    def contains(self, region: "Region") -> bool:
        lo, hi = region.bounds
        return bool(np.all(lo >= 1) and np.all(hi <= self.m))


def make_lattice(d: int, m: int) -> Lattice:
    if d < 1 or m < 1:
        raise ConfigError(f"lattice needs d >= 1 and m >= 1, got d={d}, m={m}")
    if d * math.log(m) > math.log(MAX_NODES):
        raise ConfigError(f"lattice of {m}^{d} nodes exceeds the addressable size {MAX_NODES}")
    return Lattice(d, m)


@dataclass(frozen=True, eq=False)
class Region:
    """A finite node set S.

    Boxes (intervals, hypercubes) are stored by lower corner and side and
    expand their nodes lazily; other sets keep an explicit sorted node tuple.
    Equality and hashing are by node set.
    """

    d: int
    corner: Node | None = None
    side: int | None = None
    explicit: tuple[Node, ...] | None = None
    shape: str = "explicit"

    @classmethod
    def box(cls, corner: Sequence[int], side: int) -> "Region":
        corner = tuple(int(c) for c in corner)
        if side < 1:
            raise ConfigError("box side must be >= 1")
        shape = "interval" if len(corner) == 1 else "hypercube"
        return cls(d=len(corner), corner=corner, side=int(side), shape=shape)

    @classmethod
    def interval(cls, start: int, length: int) -> "Region":
        """Interval ``{start, ..., start + length - 1}`` (1-based)."""
        return cls.box((start,), length)

    @classmethod
    def from_nodes(cls, nodes) -> "Region":
        arr = np.asarray(nodes, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.size == 0:
            raise ConfigError("a region needs at least one node")
        uniq = sorted(set(map(tuple, arr.tolist())))
        if len(uniq) != len(arr):
            raise ConfigError("region nodes must be distinct")
        return cls(d=arr.shape[1], explicit=tuple(uniq))

    @property
    def is_box(self) -> bool:
        return self.corner is not None

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates as an ``(|S|, d)`` int array, lexicographic order."""
        if self.is_box:
            axes = [np.arange(c, c + self.side) for c in self.corner]
            grid = np.meshgrid(*axes, indexing="ij")
            return np.stack([g.ravel() for g in grid], axis=1)
        return np.asarray(self.explicit, dtype=np.int64).reshape(-1, self.d)

    @property
    def nodes(self) -> tuple[Node, ...]:
        return tuple(map(tuple, self.coords.tolist()))

    @cached_property
    def node_set(self) -> frozenset:
        return frozenset(self.nodes)

    @property
    def size(self) -> int:
        return self.side**self.d if self.is_box else len(self.explicit)

    def __len__(self) -> int:
        return self.size

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_box:
            lo = np.asarray(self.corner)
            return lo, lo + self.side - 1
        c = self.coords
        return c.min(axis=0), c.max(axis=0)

    @property
    def diameter(self) -> int:
        """Largest l_inf distance between two nodes."""
        lo, hi = self.bounds
        return int((hi - lo).max())

    def flat_indices(self, lat: Lattice) -> np.ndarray:
        return lat.flat_index(self.coords)

    def shape_key(self) -> tuple:
        """Key identifying the region up to translation."""
        if self.is_box:
            return ("box", self.d, self.side)
        c = self.coords
        return ("set", tuple(map(tuple, (c - c.min(axis=0)).tolist())))

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        if self.is_box and other.is_box:
            return self.corner == other.corner and self.side == other.side
        return self.node_set == other.node_set

    def __hash__(self):
        return hash(self.node_set)

    def __repr__(self):
        if self.is_box:
            return f"Region({self.shape}, corner={self.corner}, side={self.side})"
        return f"Region(explicit, {self.size} nodes)"

    def to_dict(self) -> dict:
        if self.is_box:
            return {"corner": list(self.corner), "side": self.side}
        return {"nodes": [list(v) for v in self.explicit]}

    @classmethod
    def from_dict(cls, obj: dict) -> "Region":
        if "corner" in obj:
            return cls.box(obj["corner"], obj["side"])
        return cls.from_nodes(obj["nodes"])


@dataclass(frozen=True)
class NeighborhoodOffsets:
    d: int
    h: int
    offsets: tuple[Node, ...]

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.int64).reshape(-1, self.d)

    def half(self) -> tuple[Node, ...]:
        """Offsets whose first nonzero coordinate is positive (one per +/- pair)."""
        return tuple(v for v in self.offsets if next(c for c in v if c != 0) > 0)


def neighborhood_offsets(d: int, h: int) -> NeighborhoodOffsets:
    if h < 1 or d < 1:
        raise ConfigError("neighborhood needs d >= 1 and h >= 1")
    zero = (0,) * d
    offs = tuple(v for v in itertools.product(range(-h, h + 1), repeat=d) if v != zero)
    return NeighborhoodOffsets(d, h, offs)


# -- boundary / interior ----------------------------------------------------


def _interior_mask(region: Region, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean interior flags aligned with ``region.coords``."""
    coords = region.coords
    if region.is_box:
        lo = np.asarray(region.corner) + h
        hi = np.asarray(region.corner) + region.side - 1 - h
        return coords, np.all((coords >= lo) & (coords <= hi), axis=1)
    lo, hi = region.bounds
    shape = tuple(hi - lo + 1 + 2 * h)
    mask = np.zeros(shape, dtype=bool)
    local = coords - lo + h
    mask[tuple(local.T)] = True
    eroded = ndimage.binary_erosion(
        mask, structure=np.ones((2 * h + 1,) * region.d, dtype=bool), border_value=0
    )
    return coords, eroded[tuple(local.T)]


def h_boundary(region: Region, h: int, lat: Lattice | None = None) -> Region:
    """Nodes of S within l_inf distance h of Z^d \\ S (the infinite lattice)."""
    if lat is not None and not lat.contains(region):
        raise ConfigError("region is not inside the lattice")
    coords, inner = _interior_mask(region, h)
    return Region.from_nodes(coords[~inner])


def h_interior(region: Region, h: int) -> Region | None:
    """S minus its h-boundary, or None when empty."""
    if region.is_box:
        side = region.side - 2 * h
        if side < 1:
            return None
        return Region.box(tuple(c + h for c in region.corner), side)
    coords, inner = _interior_mask(region, h)
    if not inner.any():
        return None
    return Region.from_nodes(coords[inner])


def interior_size(region: Region, h: int) -> int:
    if region.is_box:
        return max(region.side - 2 * h, 0) ** region.d
    return int(_interior_mask(region, h)[1].sum())


# -- region classes ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegionClass:
    """An ordered class of candidate regions.

    Box classes keep ``corners`` (``(N, d)``, 1-based) and ``sides`` arrays and
    materialise :class:`Region` objects on access, so scans over ~1e5 windows
    stay cheap.
    """

    kind: str
    d: int
    corners: np.ndarray | None = None
    sides: np.ndarray | None = None
    explicit: tuple[Region, ...] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self) < 1:
            raise ConfigError("region class is empty")

    @property
    def is_box_class(self) -> bool:
        return self.corners is not None

    @property
    def uniform_side(self) -> int | None:
        if not self.is_box_class:
            return None
        s = np.unique(self.sides)
        return int(s[0]) if len(s) == 1 else None

    def __len__(self) -> int:
        if self.corners is not None:
            return len(self.corners)
        return len(self.explicit)

    def __getitem__(self, i: int) -> Region:
        if self.corners is not None:
            return Region.box(self.corners[i].tolist(), int(self.sides[i]))
        return self.explicit[i]

    def __iter__(self) -> Iterator[Region]:
        for i in range(len(self)):
            yield self[i]

    def sizes(self) -> np.ndarray:
        if self.is_box_class:
            return self.sides.astype(np.int64) ** self.d
        return np.array([r.size for r in self.explicit], dtype=np.int64)

    def subset(self, indices) -> "RegionClass":
        idx = np.asarray(indices, dtype=np.int64)
        if self.is_box_class:
            return RegionClass(self.kind, self.d, self.corners[idx], self.sides[idx], params=self.params)
        return RegionClass(self.kind, self.d, explicit=tuple(self.explicit[i] for i in idx), params=self.params)

    def coverage(self, lat: Lattice) -> np.ndarray:
        """How many regions contain each node (array shaped like the lattice)."""
        count = np.zeros(lat.shape, dtype=np.int64)
        for r in self:
            if r.is_box:
                sl = tuple(slice(c - 1, c - 1 + r.side) for c in r.corner)
                count[sl] += 1
            else:
                count[tuple((r.coords - 1).T)] += 1
        return count

    def is_disjoint(self, lat: Lattice | None = None) -> bool:
        if lat is not None:
            return bool(self.coverage(lat).max() <= 1)
        seen: set = set()
        for r in self:
            if not seen.isdisjoint(r.node_set):
                return False
            seen |= r.node_set
        return True


def _box_class(kind: str, d: int, corners: np.ndarray, sides, params) -> RegionClass:
    corners = np.asarray(corners, dtype=np.int64).reshape(-1, d)
    sides = np.broadcast_to(np.asarray(sides, dtype=np.int64), (len(corners),)).copy()
    return RegionClass(kind, d, corners, sides, params=params)


def _grid_corners(d: int, starts: np.ndarray) -> np.ndarray:
    grids = np.meshgrid(*([starts] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def interval_class(lat: Lattice, k: int) -> RegionClass:
    if lat.d != 1:
        raise ConfigError("interval_class needs a 1-dimensional lattice")
    if not 1 <= k <= lat.m:
        raise ConfigError(f"interval length k={k} leaves an empty class on m={lat.m}")
    return _box_class("intervals", 1, np.arange(1, lat.m - k + 2), k, {"k": k})


def hypercube_class(lat: Lattice, side: int) -> RegionClass:
    if not 1 <= side <= lat.m:
        raise ConfigError(f"hypercube side {side} does not fit in m={lat.m}")
    corners = _grid_corners(lat.d, np.arange(1, lat.m - side + 2))
    return _box_class("hypercubes", lat.d, corners, side, {"side": side})


def disjoint_tiling(lat: Lattice, side: int) -> RegionClass:
    """Tiles ``prod {a l + 1, ..., (a + 1) l}``; partial tiles at the far edge are dropped."""
    if not 1 <= side <= lat.m:
        raise ConfigError(f"tile side {side} does not fit in m={lat.m}")
    starts = np.arange(lat.m // side) * side + 1
    return _box_class("tiling", lat.d, _grid_corners(lat.d, starts), side, {"side": side})


def dyadic_count(d: int, m: int) -> int:
    total, side = 0, 1
    while side <= m:
        total += (m // side) ** d
        side *= 2
    return total


def dyadic_hypercubes(lat: Lattice) -> RegionClass:
    corners, sides = [], []
    side = 1
    while side <= lat.m:
        starts = np.arange(lat.m // side) * side + 1
        c = _grid_corners(lat.d, starts)
        corners.append(c)
        sides.append(np.full(len(c), side))
        side *= 2
    corners = np.concatenate(corners)
    sides = np.concatenate(sides)
    order = np.lexsort((sides,) + tuple(corners[:, j] for j in reversed(range(lat.d))))
    cls = _box_class("dyadic", lat.d, corners[order], sides[order], {})
    assert len(cls) < 2 * lat.n
    return cls


def explicit_class(regions: Sequence[Region]) -> RegionClass:
    regions = tuple(regions)
    if not regions:
        raise ConfigError("region class is empty")
    return RegionClass("explicit", regions[0].d, explicit=regions)


def region_class_from_config(lat: Lattice, spec: dict) -> RegionClass:
    """Build a class from ``{"class": "intervals", "k": 50}``-style specs."""
    kind = spec.get("class")
    if kind == "intervals":
        return interval_class(lat, int(spec["k"]))
    if kind == "hypercubes":
        return hypercube_class(lat, int(spec.get("side", spec.get("k"))))
    if kind == "tiling":
        return disjoint_tiling(lat, int(spec.get("side", spec.get("k"))))
    if kind == "dyadic":
        return dyadic_hypercubes(lat)
    if kind == "explicit":
        return explicit_class([Region.from_dict(r) for r in spec["regions"]])
    raise ConfigError(f"unknown region class {kind!r}")
