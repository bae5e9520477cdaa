"""Symbolic open sets in C^N, grid sampling, Hausdorff distances and kernels.

Every domain node exposes a signed distance ``sdf`` that is negative exactly
on the open set and 1-Lipschitz in the Euclidean metric of C^N = R^{2N}.
Primitives are exact; set algebra uses min/max, which keeps the sign exact
and the Lipschitz bound, so grid searches may prune whole blocks of lattice
points from a single evaluation.

Domains built only from polydiscs and balls centred at the origin are
invariant under the torus (z_j) -> (e^{i t_j} z_j).  For those, every grid
computation runs on the modulus chart (|z_1|, ..., |z_N|); Euclidean
distance to a torus-invariant set equals the distance between modulus
vectors, so nothing is lost by the reduction.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InputError, SequenceInvariantError, UndefinedDistanceError
from .seeds import SeedSplitter

INTERIOR = "interior"
EXTERIOR = "exterior"
NEAR_BOUNDARY = "near_boundary"

#: lattice points with sdf <= CLOSED_TOL sample the closure of a domain
CLOSED_TOL = 1e-9

#: dense lattices beyond this many points are refused
MAX_DENSE_POINTS = 60_000_000


# ---------------------------------------------------------------------------
# points


def as_point(coords) -> np.ndarray:
    p = np.asarray(coords, dtype=complex).reshape(-1)
    if p.size == 0:
        raise InputError("a point needs at least one coordinate")
    if not np.all(np.isfinite(p)):
        raise InputError(f"non-finite coordinates in {coords!r}")
    return p


def point_from_pairs(values: Sequence[float]) -> np.ndarray:
    """(re_1, im_1, ..., re_N, im_N) -> complex point."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size % 2:
        raise InputError("complex coordinates come as [re, im] pairs")
    return as_point(v[0::2] + 1j * v[1::2])


def as_points(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=complex)
    if Z.ndim == 1:
        Z = Z[None, :]
    return Z


def _cdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hermitian product <a, b> = sum a_i conj(b_i) along the last axis."""
    return np.sum(a * np.conj(b), axis=-1)


# ---------------------------------------------------------------------------
# domain expressions


class DomainExpr:
    """Base class of the expression tree."""

    dim: int

    def sdf(self, Z) -> np.ndarray:
        raise NotImplementedError

    def bbox(self) -> np.ndarray:
        """(2N, 2) array of [lo, hi] per real coordinate (re_1, im_1, ...)."""
        raise NotImplementedError

    def torus_invariant(self) -> bool:
        return False

    def contains_points(self, Z) -> np.ndarray:
        return self.sdf(as_points(Z)) < 0

    # operator sugar
    def __or__(self, other):
        return Union((self, other))

    def __and__(self, other):
        return Intersection((self, other))

    def __sub__(self, other):
        return Difference(self, other)


def _check_center(center, dim=None) -> tuple:
    c = as_point(center)
    if dim is not None and c.size != dim:
        raise InputError(f"expected {dim} coordinates, got {c.size}")
    return tuple(complex(x) for x in c)


def _check_radius(r) -> float:
    r = float(r)
    if not (math.isfinite(r) and r > 0):
        raise InputError(f"radii must be strictly positive, got {r}")
    return r


@dataclass(frozen=True)
class Polydisc(DomainExpr):
    center: tuple
    radius: tuple

    def __post_init__(self):
        c = _check_center(self.center)
        r = tuple(_check_radius(x) for x in np.atleast_1d(self.radius))
        if len(r) != len(c):
            raise InputError("polyradius and center have different lengths")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return len(self.center)

    def sdf(self, Z):
        Z = as_points(Z)
        d = np.abs(Z - np.asarray(self.center)) - np.asarray(self.radius)
        inside = d.max(axis=1)
        outside = np.sqrt(np.sum(np.maximum(d, 0.0) ** 2, axis=1))
        return np.where(inside <= 0, inside, outside)

    def bbox(self):
        out = []
        for c, r in zip(self.center, self.radius):
            out += [[c.real - r, c.real + r], [c.imag - r, c.imag + r]]
        return np.array(out)

    def torus_invariant(self):
        return all(c == 0 for c in self.center)


@dataclass(frozen=True)
class Ball(DomainExpr):
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _check_center(self.center))
        object.__setattr__(self, "radius", _check_radius(self.radius))

    @property
    def dim(self) -> int:
        return len(self.center)

    def sdf(self, Z):
        Z = as_points(Z)
        return np.linalg.norm(Z - np.asarray(self.center), axis=1) - self.radius

    def bbox(self):
        out = []
        for c in self.center:
            out += [[c.real - self.radius, c.real + self.radius],
                    [c.imag - self.radius, c.imag + self.radius]]
        return np.array(out)

    def torus_invariant(self):
        return all(c == 0 for c in self.center)


@dataclass(frozen=True)
class Tube(DomainExpr):
    """Neighbourhood of a complex line segment.

    The core is the closed complex disc {c + t v : |t| <= 1} with
    c = (start + end)/2 and v = (end - start)/2, i.e. the piece of the complex
    line through the two endpoints having the real segment [start, end] as a
    diameter.
    """

    start: tuple
    end: tuple
    radius: float

    def __post_init__(self):
        a = _check_center(self.start)
        b = _check_center(self.end, len(a))
        if np.allclose(np.asarray(a), np.asarray(b)):
            raise InputError("tube endpoints must differ")
        object.__setattr__(self, "start", a)
        object.__setattr__(self, "end", b)
        object.__setattr__(self, "radius", _check_radius(self.radius))

    @property
    def dim(self) -> int:
        return len(self.start)

    @property
    def core_center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.start) + np.asarray(self.end))

    @property
    def core_vector(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.end) - np.asarray(self.start))

    def core_distance(self, Z) -> np.ndarray:
        Z = as_points(Z)
        c, v = self.core_center, self.core_vector
        vv = float(np.real(_cdot(v, v)))
        w = Z - c
        t = _cdot(w, v) / vv
        perp = w - t[:, None] * v
        excess = np.maximum(np.abs(t) - 1.0, 0.0)
        return np.sqrt(np.real(_cdot(perp, perp)) + vv * excess ** 2)

    def sdf(self, Z):
        return self.core_distance(Z) - self.radius

    def bbox(self):
        c, v = self.core_center, self.core_vector
        out = []
        for ci, vi in zip(c, v):
            reach = abs(vi) + self.radius
            out += [[ci.real - reach, ci.real + reach], [ci.imag - reach, ci.imag + reach]]
        return np.array(out)


@dataclass(frozen=True)
class Union(DomainExpr):
    children: tuple

    def __post_init__(self):
        ch = tuple(self.children)
        if not ch:
            raise InputError("union needs at least one child")
        if len({c.dim for c in ch}) != 1:
            raise InputError("union children live in different dimensions")
        object.__setattr__(self, "children", ch)

    @property
    def dim(self):
        return self.children[0].dim

    def sdf(self, Z):
        Z = as_points(Z)
        out = self.children[0].sdf(Z)
        for c in self.children[1:]:
            out = np.minimum(out, c.sdf(Z))
        return out

    def bbox(self):
        boxes = np.stack([c.bbox() for c in self.children])
        return np.stack([boxes[:, :, 0].min(axis=0), boxes[:, :, 1].max(axis=0)], axis=1)

    def torus_invariant(self):
        return all(c.torus_invariant() for c in self.children)


@dataclass(frozen=True)
class Intersection(DomainExpr):
    children: tuple

    def __post_init__(self):
        ch = tuple(self.children)
        if not ch:
            raise InputError("intersection needs at least one child")
        if len({c.dim for c in ch}) != 1:
            raise InputError("intersection children live in different dimensions")
        object.__setattr__(self, "children", ch)

    @property
    def dim(self):
        return self.children[0].dim

    def sdf(self, Z):
        Z = as_points(Z)
        out = self.children[0].sdf(Z)
        for c in self.children[1:]:
            out = np.maximum(out, c.sdf(Z))
        return out

    def bbox(self):
        boxes = np.stack([c.bbox() for c in self.children])
        return np.stack([boxes[:, :, 0].max(axis=0), boxes[:, :, 1].min(axis=0)], axis=1)

    def torus_invariant(self):
        return all(c.torus_invariant() for c in self.children)


@dataclass(frozen=True)
class Difference(DomainExpr):
    """left minus the closure of right (an open set)."""

    left: DomainExpr
    right: DomainExpr

    def __post_init__(self):
        if self.left.dim != self.right.dim:
            raise InputError("difference operands live in different dimensions")

    @property
    def dim(self):
        return self.left.dim

    def sdf(self, Z):
        Z = as_points(Z)
        return np.maximum(self.left.sdf(Z), -self.right.sdf(Z))

    def bbox(self):
        return self.left.bbox()

    def torus_invariant(self):
        return self.left.torus_invariant() and self.right.torus_invariant()


@dataclass(frozen=True)
class Thickening(DomainExpr):
    child: DomainExpr
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "epsilon", _check_radius(self.epsilon))

    @property
    def dim(self):
        return self.child.dim

    def sdf(self, Z):
        return self.child.sdf(Z) - self.epsilon

    def bbox(self):
        b = self.child.bbox().copy()
        b[:, 0] -= self.epsilon
        b[:, 1] += self.epsilon
        return b

    def torus_invariant(self):
        return self.child.torus_invariant()


def polydisc(radius, center=None) -> Polydisc:
    radius = tuple(np.atleast_1d(radius).astype(float))
    if center is None:
        center = (0j,) * len(radius)
    return Polydisc(center, radius)


def coordinate_radii(expr: DomainExpr) -> np.ndarray:
    """Per-coordinate bounds r_i >= sup |z_i| over the domain."""
    if isinstance(expr, Polydisc):
        return np.abs(np.asarray(expr.center)) + np.asarray(expr.radius)
    if isinstance(expr, Ball):
        return np.abs(np.asarray(expr.center)) + expr.radius
    if isinstance(expr, Tube):
        return np.abs(expr.core_center) + np.abs(expr.core_vector) + expr.radius
    if isinstance(expr, Union):
        return np.max([coordinate_radii(c) for c in expr.children], axis=0)
    if isinstance(expr, Intersection):
        return np.min([coordinate_radii(c) for c in expr.children], axis=0)
    if isinstance(expr, Difference):
        return coordinate_radii(expr.left)
    if isinstance(expr, Thickening):
        return coordinate_radii(expr.child) + expr.epsilon
    b = expr.bbox()
    return np.hypot(np.max(np.abs(b[0::2]), axis=1), np.max(np.abs(b[1::2]), axis=1))


# ---------------------------------------------------------------------------
# membership


def contains(D: DomainExpr, p, tol: float) -> str:
    """Classify p as interior / exterior / near_boundary of D."""
    if not (tol > 0 and math.isfinite(tol)):
        raise InputError("tol must be a positive finite real")
    p = as_point(p)
    if p.size != D.dim:
        raise InputError(f"point has {p.size} coordinates, domain lives in C^{D.dim}")
    s = float(D.sdf(p[None, :])[0])
    if s < -tol:
        return INTERIOR
    if s > tol:
        return EXTERIOR
    return NEAR_BOUNDARY


# ---------------------------------------------------------------------------
# lattices


def bounding_box(*exprs: DomainExpr, pad: float = 0.0) -> np.ndarray:
    boxes = np.stack([e.bbox() for e in exprs])
    box = np.stack([boxes[:, :, 0].min(axis=0), boxes[:, :, 1].max(axis=0)], axis=1)
    box[:, 0] -= pad
    box[:, 1] += pad
    return box


def _as_box(box, N: int) -> np.ndarray:
    b = np.asarray(box, dtype=float)
    if b.shape != (2 * N, 2):
        raise InputError(f"box must have shape ({2 * N}, 2), got {b.shape}")
    if not np.all(np.isfinite(b)) or np.any(b[:, 1] < b[:, 0]):
        raise InputError("box bounds must be finite with lo <= hi")
    return b


def choose_mode(*exprs: DomainExpr, mode: str = "auto") -> str:
    if mode not in ("auto", "cartesian", "modulus"):
        raise InputError(f"unknown grid mode {mode!r}")
    if mode == "auto":
        return "modulus" if all(e.torus_invariant() for e in exprs) else "cartesian"
    if mode == "modulus" and not all(e.torus_invariant() for e in exprs):
        raise InputError("modulus grid requested for a domain that is not torus invariant")
    return mode


@dataclass(frozen=True)
class Lattice:
    """Regular grid with pitch h, in real coordinates or in the modulus chart.

    Cartesian lattices use the coordinates (re_1, im_1, ..., re_N, im_N) and
    contain the origin; modulus lattices use (|z_1|, ..., |z_N|) >= 0 and
    reflect through 0 when looking up neighbours.
    """

    mode: str
    N: int
    h: float
    start: tuple  # integer index of the first lattice point along each axis
    shape: tuple

    @classmethod
    def from_box(cls, box, h: float, N: int, mode: str) -> "Lattice":
        if not (h > 0 and math.isfinite(h)):
            raise InputError("pitch h must be positive")
        b = _as_box(box, N)
        if mode == "cartesian":
            lo = np.floor(b[:, 0] / h - 1e-9).astype(int)
            hi = np.ceil(b[:, 1] / h + 1e-9).astype(int)
            return cls(mode, N, float(h), tuple(lo.tolist()), tuple((hi - lo + 1).tolist()))
        if mode == "modulus":
            amax = np.max(np.abs(b), axis=1).reshape(N, 2)
            rmax = np.hypot(amax[:, 0], amax[:, 1])
            hi = np.ceil(rmax / h + 1e-9).astype(int)
            return cls(mode, N, float(h), (0,) * N, tuple((hi + 1).tolist()))
        raise InputError(f"unknown lattice mode {mode!r}")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def coords(self, idx: np.ndarray) -> np.ndarray:
        """Integer multi-indices (M, D) -> real coordinates (M, D)."""
        return (np.asarray(idx) + np.asarray(self.start)) * self.h

    def to_points(self, coords: np.ndarray) -> np.ndarray:
        coords = np.atleast_2d(coords)
        if self.mode == "cartesian":
            return coords[:, 0::2] + 1j * coords[:, 1::2]
        return coords.astype(complex)

    def points(self, idx: np.ndarray) -> np.ndarray:
        return self.to_points(self.coords(idx))

    def embed(self, Z: np.ndarray) -> np.ndarray:
        """Complex points -> coordinates of this lattice's chart."""
        Z = as_points(Z)
        if self.mode == "cartesian":
            out = np.empty((Z.shape[0], 2 * self.N))
            out[:, 0::2] = Z.real
            out[:, 1::2] = Z.imag
            return out
        return np.abs(Z)

    def nearest_index(self, p) -> np.ndarray:
        c = self.embed(as_point(p)[None, :])[0]
        return np.rint(c / self.h).astype(int) - np.asarray(self.start)

    def in_range(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)

    def neighbours(self, idx: np.ndarray):
        """Yield (axis-neighbour indices, valid mask) for the 2D axis moves."""
        idx = np.atleast_2d(idx)
        for axis in range(self.ndim):
            for step in (-1, 1):
                nb = idx.copy()
                nb[:, axis] += step
                if self.mode == "modulus":
                    nb[:, axis] = np.abs(nb[:, axis])
                yield nb, self.in_range(nb)

    def all_indices(self) -> np.ndarray:
        grids = np.indices(self.shape).reshape(self.ndim, -1).T
        return grids


def lattice_for(box, h: float, *exprs: DomainExpr, mode: str = "auto") -> Lattice:
    N = exprs[0].dim
    return Lattice.from_box(box, h, N, choose_mode(*exprs, mode=mode))


def sublevel_indices(lattice: Lattice, fn: Callable[[np.ndarray], np.ndarray],
                     thresh: float, chunk: int = 400_000) -> np.ndarray:
    """All lattice multi-indices with fn(point) <= thresh.

    fn maps complex points (M, N) to values and must be 1-Lipschitz in the
    lattice chart; blocks whose centre value exceeds thresh by more than the
    block half-diagonal are discarded unseen.
    """
    D = lattice.ndim
    shape = np.asarray(lattice.shape)
    b = 1
    while b < shape.max():
        b *= 2
    blocks = np.zeros((1, D), dtype=np.int64)
    offsets = np.indices((2,) * D).reshape(D, -1).T
    while b > 1:
        half = b // 2
        cand = (blocks[:, None, :] + offsets[None, :, :] * half).reshape(-1, D)
        cand = cand[np.all(cand < shape, axis=1)]
        # lattice points covered by each block: [k, min(k+half, shape)) per axis
        top = np.minimum(cand + half, shape) - 1
        centre_idx = 0.5 * (cand + top)
        halfdiag = 0.5 * lattice.h * np.linalg.norm(top - cand, axis=1)
        keep = np.empty(cand.shape[0], dtype=bool)
        for s in range(0, cand.shape[0], chunk):
            sl = slice(s, s + chunk)
            pts = lattice.to_points(lattice.coords(centre_idx[sl]))
            keep[sl] = fn(pts) <= thresh + halfdiag[sl] + 1e-12
        blocks = cand[keep]
        b = half
    out = []
    for s in range(0, blocks.shape[0], chunk):
        blk = blocks[s:s + chunk]
        vals = fn(lattice.points(blk))
        out.append(blk[vals <= thresh])
    if not out:
        return np.zeros((0, D), dtype=np.int64)
    return np.concatenate(out)


def dense_values(lattice: Lattice, fn, chunk: int = 2_000_000) -> np.ndarray:
    if lattice.size > MAX_DENSE_POINTS:
        raise InputError(f"dense lattice of {lattice.size} points exceeds the limit; "
                         "raise h or shrink the box")
    idx = lattice.all_indices()
    out = np.empty(idx.shape[0])
    for s in range(0, idx.shape[0], chunk):
        out[s:s + chunk] = fn(lattice.points(idx[s:s + chunk]))
    return out.reshape(lattice.shape)


# ---------------------------------------------------------------------------
# sample clouds


@dataclass
class SampleCloud:
    points: np.ndarray  # (M, N) complex
    resolution: float
    tag: str  # "interior" | "boundary" | "F" | ...
    symmetry: str = "none"  # "torus": points are orbit representatives
    empty_warning: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.asarray(self.points, dtype=complex)
        if P.ndim == 1:
            P = P[:, None]
        self.points = P

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def chart(self) -> np.ndarray:
        """Real embedding used for distances."""
        if self.symmetry == "torus":
            return np.abs(self.points)
        P = self.points
        out = np.empty((P.shape[0], 2 * P.shape[1]))
        out[:, 0::2] = P.real
        out[:, 1::2] = P.imag
        return out

    def distance_to(self, Z, upper: float = math.inf) -> np.ndarray:
        """Euclidean distance from arbitrary points to the cloud; inf beyond `upper`."""
        if self.is_empty:
            raise UndefinedDistanceError("distance to an empty cloud")
        Z = as_points(Z)
        if self.symmetry == "torus":
            q = np.abs(Z)
        else:
            q = np.empty((Z.shape[0], 2 * Z.shape[1]))
            q[:, 0::2] = Z.real
            q[:, 1::2] = Z.imag
        return self._tree().query(q, distance_upper_bound=upper)[0]

    def _tree(self) -> cKDTree:
        t = self.extra.get("_tree")
        if t is None:
            t = cKDTree(self.chart())
            self.extra["_tree"] = t
        return t


def _cloud(lattice: Lattice, idx: np.ndarray, tag: str) -> SampleCloud:
    pts = lattice.points(idx) if idx.size else np.zeros((0, lattice.N), dtype=complex)
    return SampleCloud(pts, lattice.h, tag,
                       symmetry="torus" if lattice.mode == "modulus" else "none",
                       empty_warning=idx.shape[0] == 0,
                       extra={"indices": idx, "lattice": lattice})


def _interior_idx(D: DomainExpr, lattice: Lattice, closed: bool) -> np.ndarray:
    idx = sublevel_indices(lattice, D.sdf, 1e-12 if closed else 0.0)
    if not closed:
        pts = lattice.points(idx)
        idx = idx[D.sdf(pts) < 0]
    return idx


def sample(D: DomainExpr, box, h: float, mode: str = "auto", closed: bool = False) -> SampleCloud:
    """Lattice points of D (or of its closure with ``closed=True``)."""
    lat = lattice_for(box, h, D, mode=mode)
    return _cloud(lat, _interior_idx(D, lat, closed), INTERIOR)


def _layer_from_candidates(lattice: Lattice, idx: np.ndarray, member_fn) -> np.ndarray:
    """Members among idx having at least one non-member axis neighbour."""
    if idx.shape[0] == 0:
        return idx
    hit = np.zeros(idx.shape[0], dtype=bool)
    for nb, valid in lattice.neighbours(idx):
        out = ~valid
        if valid.any():
            out_valid = ~member_fn(nb[valid])
            out[valid] = out_valid
        hit |= out
    return idx[hit]


def boundary_sample(D: DomainExpr, box, h: float, mode: str = "auto") -> SampleCloud:
    """Closure points of D with a lattice neighbour outside the closure."""
    lat = lattice_for(box, h, D, mode=mode)
    return _cloud(lat, _closed_layer(lat, D), "boundary")


def _closed_layer(lat: Lattice, D: DomainExpr) -> np.ndarray:
    h = lat.h
    # a closure point next to an exterior point has -h <= sdf <= 0
    cand = sublevel_indices(lat, lambda Z: np.abs(D.sdf(Z) + 0.5 * h), 0.6 * h)
    cand = cand[D.sdf(lat.points(cand)) <= CLOSED_TOL]
    return _layer_from_candidates(lat, cand, lambda nb: D.sdf(lat.points(nb)) <= CLOSED_TOL)


# ---------------------------------------------------------------------------
# Hausdorff and rho


def _directed(a: np.ndarray, b_tree: cKDTree) -> float:
    if a.shape[0] == 0:
        return 0.0
    return float(np.max(b_tree.query(a)[0]))


def hausdorff_distance(A: SampleCloud, B: SampleCloud) -> float:
    if A.is_empty or B.is_empty:
        raise UndefinedDistanceError("undefined Hausdorff distance: empty cloud")
    if A.symmetry != B.symmetry:
        raise InputError("clouds sampled in different charts cannot be compared")
    a, b = A.chart(), B.chart()
    return max(_directed(a, cKDTree(b)), _directed(b, cKDTree(a)))


@dataclass(frozen=True)
class RhoResult:
    closure_part: float
    boundary_part: float

    @property
    def value(self) -> float:
        return self.closure_part + self.boundary_part

    def __float__(self):
        return self.value


def _rho_parts(lattice: Lattice, a_only: np.ndarray, b_only: np.ndarray,
               layer_a: np.ndarray, layer_b: np.ndarray) -> RhoResult:
    if layer_a.shape[0] == 0 or layer_b.shape[0] == 0:
        raise UndefinedDistanceError("domain has no lattice points at this resolution")
    ca, cb = lattice.coords(layer_a), lattice.coords(layer_b)
    ta, tb = cKDTree(ca), cKDTree(cb)
    # the nearest member of a grid set seen from outside lies in its boundary layer
    closure = max(_directed(lattice.coords(a_only), tb), _directed(lattice.coords(b_only), ta))
    boundary = max(_directed(ca, tb), _directed(cb, ta))
    return RhoResult(closure, boundary)


def rho_components(U: DomainExpr, V: DomainExpr, box, h: float, mode: str = "auto") -> RhoResult:
    lat = lattice_for(box, h, U, V, mode=mode)
    su, sv = U.sdf, V.sdf
    t = CLOSED_TOL

    def only(sa, sb):
        idx = sublevel_indices(lat, lambda Z: np.maximum(sa(Z), -sb(Z)), t)
        Z = lat.points(idx)
        return idx[(sa(Z) <= t) & (sb(Z) > t)]

    return _rho_parts(lat, only(su, sv), only(sv, su), _closed_layer(lat, U), _closed_layer(lat, V))


def rho_distance(U: DomainExpr, V: DomainExpr, box, h: float, mode: str = "auto") -> float:
    """H(closures) + H(boundaries), computed at pitch h."""
    return rho_components(U, V, box, h, mode=mode).value


def mask_layer(lattice: Lattice, mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask)
    return _layer_from_candidates(lattice, idx, lambda nb: mask[tuple(nb.T)])


def rho_masks(lattice: Lattice, A: np.ndarray, B: np.ndarray) -> RhoResult:
    return _rho_parts(lattice, np.argwhere(A & ~B), np.argwhere(B & ~A),
                      mask_layer(lattice, A), mask_layer(lattice, B))


# ---------------------------------------------------------------------------
# domain sequences and kernels


@dataclass
class DomainSequence:
    generator: Callable[[int], DomainExpr]
    base_point: np.ndarray
    declared_kernel: Optional[DomainExpr] = None
    declared_F: Optional[object] = None
    name: str = ""
    ambient: Optional[DomainExpr] = None
    subsequences: Optional[Callable[[int], dict]] = None
    metadata: dict = field(default_factory=dict)
    _checked: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        self.base_point = as_point(self.base_point)

    def __call__(self, n: int) -> DomainExpr:
        n = int(n)
        if n < 1:
            raise InputError("sequences are indexed from n = 1")
        D = self.generator(n)
        if n not in self._checked:
            if not (D.sdf(self.base_point[None, :])[0] < 0):
                raise SequenceInvariantError(
                    f"base point {self.base_point} is not inside W_{n} of {self.name or 'sequence'}")
            self._checked.add(n)
        return D

    @property
    def dim(self) -> int:
        return self.base_point.size

    def declared_subsequences(self, n_max: int) -> dict:
        return dict(self.subsequences(n_max)) if self.subsequences else {}


DEGENERATE = "{0}"


@dataclass
class KernelResult:
    lattice: Lattice
    mask: np.ndarray
    degenerate: bool
    inconclusive: bool
    indices: tuple
    horizon: int

    @property
    def marker(self) -> Optional[str]:
        return DEGENERATE if self.degenerate else None

    def interior_cloud(self) -> SampleCloud:
        return _cloud(self.lattice, np.argwhere(self.mask), INTERIOR)

    def boundary_cloud(self) -> SampleCloud:
        return _cloud(self.lattice, mask_layer(self.lattice, self.mask), "boundary")

    def rho_to(self, D: DomainExpr) -> RhoResult:
        other = dense_values(self.lattice, D.sdf) <= CLOSED_TOL
        return rho_masks(self.lattice, self.mask, other)


def _default_box(S: DomainSequence, indices: Sequence[int]) -> np.ndarray:
    return bounding_box(*(S(n) for n in indices[:: max(1, len(indices) // 8)] + [indices[-1]]))


def _shifted(lattice: Lattice, mask: np.ndarray, axis: int, step: int) -> np.ndarray:
    """out[i] = mask[i + step along axis]; False outside the lattice."""
    out = np.zeros_like(mask)
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if step == 1:
        src[axis], dst[axis] = slice(1, None), slice(None, -1)
    else:
        src[axis], dst[axis] = slice(None, -1), slice(1, None)
    out[tuple(dst)] = mask[tuple(src)]
    if lattice.mode == "modulus" and step == -1 and mask.shape[axis] > 1:
        # the neighbour of |z| = 0 at -h is the lattice point at +h
        s0 = [slice(None)] * mask.ndim
        s1 = [slice(None)] * mask.ndim
        s0[axis], s1[axis] = 0, 1
        out[tuple(s0)] = mask[tuple(s1)]
    return out


def erode(lattice: Lattice, mask: np.ndarray) -> np.ndarray:
    """Grid interior: cells whose whole 3^D cube of neighbours lies in the mask.

    The cube is the Minkowski sum of the axis segments, so it is applied one
    axis at a time.
    """
    out = mask
    for axis in range(lattice.ndim):
        out = out & _shifted(lattice, out, axis, -1) & _shifted(lattice, out, axis, 1)
    return out


def dilate(lattice: Lattice, mask: np.ndarray) -> np.ndarray:
    """Cells whose 3^D cube of neighbours meets the mask."""
    out = mask
    for axis in range(lattice.ndim):
        out = out | _shifted(lattice, out, axis, -1) | _shifted(lattice, out, axis, 1)
    return out


def kernel_of_sequence(S: DomainSequence, n_max: int, box=None, h: float = 0.05,
                       indices: Optional[Sequence[int]] = None,
                       horizon: Optional[int] = None, mode: str = "auto") -> KernelResult:
    """Grid kernel of a (sub)sequence truncated at n_max.

    The eventual intersections V~_n = W_n ∩ ... ∩ W_last grow with n, so the
    union of their base components is the component at the largest n used.
    Using n = last alone would just return int(W_last); the union therefore
    runs up to a tail horizon (default: ceil(n_max / 2)), so that every V~_n
    still intersects the second half of the truncated sequence.  The horizon
    is an index value shared by all subsequences, which keeps
    kernel(subsequence) ⊇ kernel(sequence).
    """
    if n_max < 1:
        raise InputError("n_max must be at least 1")
    idx_list = sorted(set(int(n) for n in (indices if indices is not None else range(1, n_max + 1))))
    idx_list = [n for n in idx_list if 1 <= n <= n_max]
    if not idx_list:
        raise InputError("empty index set")
    doms = {n: S(n) for n in idx_list}  # validates the base point
    if box is None:
        box = _default_box(S, idx_list)
    lat = lattice_for(box, h, *doms.values(), mode=mode)
    if lat.size > MAX_DENSE_POINTS:
        raise InputError(f"kernel lattice of {lat.size} points exceeds the limit; raise h")
    cut = (n_max + 1) // 2 if horizon is None else int(horizon)
    tail = [n for n in idx_list if n >= cut] or idx_list[-1:]

    all_idx = lat.all_indices()
    alive = np.arange(all_idx.shape[0])
    pts = lat.points(all_idx)
    for n in reversed(tail):
        if alive.size == 0:
            break
        alive = alive[doms[n].sdf(pts[alive]) <= CLOSED_TOL]
    mask = np.zeros(lat.size, dtype=bool)
    mask[alive] = True
    vmask = mask.reshape(lat.shape)
    mask = erode(lat, vmask)

    base = lat.nearest_index(S.base_point)
    degenerate = inconclusive = False
    if not lat.in_range(base[None, :])[0]:
        raise InputError("base point outside the lattice box")
    if mask[tuple(base)]:
        structure = ndimage.generate_binary_structure(lat.ndim, 1)
        labels, _ = ndimage.label(mask, structure=structure)
        # closure of the interior component, restricted to the grid set
        comp = dilate(lat, labels == labels[tuple(base)]) & vmask
    else:
        comp = np.zeros_like(mask)
        degenerate = True
        for nb, valid in lat.neighbours(base[None, :]):
            if valid[0] and mask[tuple(nb[0])]:
                inconclusive = True
    return KernelResult(lat, comp, degenerate, inconclusive, tuple(idx_list), tail[0])


@dataclass
class ConvergenceVerdict:
    verdict: str  # "converges" | "fails" | "inconclusive"
    witness: dict
    kernel: KernelResult


def check_kernel_convergence(S: DomainSequence, subsequence_count: int, n_max: int,
                             box=None, h: float = 0.05, seed: int = 0,
                             mode: str = "auto") -> ConvergenceVerdict:
    full = list(range(1, n_max + 1))
    if box is None:
        box = _default_box(S, full)
    rng = SeedSplitter(seed).rng("kernel-subsequences")
    subs: dict[str, list[int]] = {
        "even": full[1::2],
        "odd": full[0::2],
    }
    subs.update({k: list(v) for k, v in S.declared_subsequences(n_max).items()})
    for k in range(subsequence_count):
        chosen = [n for n in full if rng.random() < 0.5]
        if len(chosen) < 2:
            chosen = full[-2:]
        subs[f"random_{k}"] = chosen
    ref = kernel_of_sequence(S, n_max, box, h, mode=mode)
    tol = 2 * h
    witness: dict = {"tolerance": tol, "rho": {}}
    verdict = "converges"
    if ref.inconclusive:
        verdict = "inconclusive"
    for name, seq in subs.items():
        ker = kernel_of_sequence(S, n_max, box, h, indices=seq, mode=mode)
        if ker.inconclusive:
            verdict = "inconclusive" if verdict == "converges" else verdict
            witness["rho"][name] = None
            continue
        if ker.degenerate or ref.degenerate:
            agree = ker.degenerate == ref.degenerate
            witness["rho"][name] = 0.0 if agree else math.inf
        else:
            r = rho_masks(ref.lattice, ref.mask, ker.mask).value
            witness["rho"][name] = r
            agree = r <= tol
        if not agree:
            verdict = "fails"
            witness.setdefault("failing", name)
    if S.declared_kernel is not None and not ref.degenerate:
        witness["rho_to_declared"] = ref.rho_to(S.declared_kernel).value
    return ConvergenceVerdict(verdict, witness, ref)


@dataclass(frozen=True)
class Absorption:
    index: Optional[int]
    absorbed: bool


def compact_absorption_index(S: DomainSequence, K: SampleCloud, n_max: int) -> Absorption:
    """Smallest n0 with K inside W_n for every tested n in [n0, n_max]."""
    if K.is_empty:
        return Absorption(1, True)
    pts = K.points
    inside = [bool(np.all(S(n).sdf(pts) < 0)) for n in range(1, n_max + 1)]
    if not inside[-1]:
        return Absorption(None, False)
    n0 = n_max
    while n0 > 1 and inside[n0 - 2]:
        n0 -= 1
    return Absorption(n0, True)


def write_cloud_csv(cloud: SampleCloud, path) -> None:
    N = cloud.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{p}_{i}" for i in range(1, N + 1) for p in ("re", "im")] + ["tag"])
        for z in cloud.points:
            row = []
            for c in z:
                row += [repr(float(c.real)), repr(float(c.imag))]
            w.writerow(row + [cloud.tag])


def iter_domains(S: DomainSequence, indices: Iterable[int]):
    for n in indices:
        yield n, S(n)
