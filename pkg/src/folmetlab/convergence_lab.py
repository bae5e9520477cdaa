"""Escape-limit sets, defective sets, removability and convergence experiments.

For a kernel-convergent sequence W_n -> W, F collects the limits of points
of W_n outside the closure of W, and the defective set S is the saturation
of F by leaves, intersected with W.  Off S (and off the singular set E) the
leafwise modulus eta_n converges to eta_W; the experiments here measure
that on sample points and compact clouds.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .cplx_geometry import (DomainExpr, DomainSequence, SampleCloud, Tube, Union,
                            as_point, bounding_box, check_kernel_convergence, coordinate_radii, kernel_of_sequence,
                            lattice_for, polydisc, rho_distance, sublevel_indices)
from .errors import DomainError, InputError
from .eta_engine import MC_SANDWICH, EtaEstimate, eta_estimate
from .foliation import (CATALOG_EXACT, LeafModel, PolyVectorField, exact_flow, example_6_1_field,
                        example_6_2_field, example_6_3_field, in_singular_set, leaf_model,
                        radial_field, template_singular_set, transversal_type_check, TRANSVERSAL)
from .seeds import SeedSplitter

F_THRESHOLD = 0.6
MC_REL_TOL = 0.05
REMOVABLE = "removable"
NOT_REMOVABLE = "not_removable"
INCONCLUSIVE = "inconclusive"


# ---------------------------------------------------------------------------
# families


@dataclass
class Family:
    """A foliated sequence of domains with its limit and what is known about F."""

    name: str
    field: PolyVectorField
    sequence: DomainSequence
    W: DomainExpr
    ambient: DomainExpr
    F_sampler: Optional[Callable[[float], np.ndarray]] = None
    S_predicate: Optional[Callable[[np.ndarray], np.ndarray]] = None
    length: Optional[int] = None  # finite sequences
    notes: str = ""

    @property
    def box(self) -> np.ndarray:
        """Box holding W and the early terms, where escaping points live."""
        ns = range(1, self.length + 1) if self.length else (1, 2, 4, 8)
        return bounding_box(self.W, *(self.sequence(n) for n in ns), pad=0.1)


def _annulus_points(h: float, r0: float, r1: float) -> np.ndarray:
    """Points of the planar annulus r0 <= |w| <= r1 at pitch about h."""
    rs = np.linspace(r0, r1, max(2, int(math.ceil((r1 - r0) / h)) + 1))
    out = []
    for r in rs:
        k = max(8, int(math.ceil(2 * math.pi * r / h)))
        out.append(r * np.exp(2j * math.pi * np.arange(k) / k))
    return np.concatenate(out)


def example_1_3() -> Family:
    W = polydisc((1.0, 1.0))
    S = DomainSequence(lambda n: Union((W, polydisc((2.0, 1.0 / n)))), np.zeros(2), W, name="example_1_3",
                       ambient=polydisc((5.0, 5.0)))

    def F(h):
        w = _annulus_points(h, 1.0, 2.0)
        return np.c_[w, np.zeros_like(w)]

    def S_pred(P):
        P = np.atleast_2d(P)
        return (P[:, 1] == 0) & (P[:, 0] != 0)

    return Family("example_1_3", radial_field(2), S, W, polydisc((5.0, 5.0)), F, S_pred,
                  notes="arms P(0,(2,1/n)) collapse onto the disc {|x| < 2, y = 0}")


def concentric_polydiscs(field_name: str = "radial") -> Family:
    W = polydisc((1.0, 1.0))
    S = DomainSequence(lambda n: polydisc((1 + 1.0 / n, 1 + 1.0 / n)), np.zeros(2), W,
                       name="concentric_polydiscs", ambient=polydisc((5.0, 5.0)))
    X = radial_field(2) if field_name == "radial" else example_6_3_field()
    return Family("concentric_polydiscs", X, S, W, polydisc((5.0, 5.0)), lambda h: np.zeros((0, 2), complex),
                  lambda P: np.zeros(np.atleast_2d(P).shape[0], dtype=bool))


def exhaustion() -> Family:
    W = polydisc((1.0, 1.0))
    S = DomainSequence(lambda n: polydisc((1 - 1.0 / (n + 1), 1 - 1.0 / (n + 1))), np.zeros(2), W,
                       name="exhaustion", ambient=polydisc((5.0, 5.0)))
    return Family("exhaustion", radial_field(2), S, W, polydisc((5.0, 5.0)),
                  lambda h: np.zeros((0, 2), complex), lambda P: np.zeros(np.atleast_2d(P).shape[0], dtype=bool))


def _thin_slab_family(name: str, X: PolyVectorField) -> Family:
    W = polydisc((1.0, 1.0, 1.0))
    U = polydisc((5.0, 5.0, 5.0))
    S = DomainSequence(lambda n: Union((W, polydisc((1.0 / n, 2.0, 1.0 / n)))), np.zeros(3), W,
                       name=name, ambient=U)

    def F(h):
        w = _annulus_points(h, 1.0, 2.0)
        z = np.zeros_like(w)
        return np.c_[z, w, z]

    # F lies inside E, so no leaf passes through it
    return Family(name, X, S, W, U, F, lambda P: np.zeros(np.atleast_2d(P).shape[0], dtype=bool),
                  notes="F = {(0, y, 0): 1 < |y| < 2} is contained in the singular set")


def example_6_1() -> Family:
    return _thin_slab_family("example_6_1", example_6_1_field())


def example_6_2() -> Family:
    return _thin_slab_family("example_6_2", example_6_2_field())


def example_6_3() -> Family:
    W = polydisc((1.0, 1.0))
    U = polydisc((5.0, 5.0))
    S = DomainSequence(lambda n: Union((W, Tube((-3.0, -3.0), (3.0, 3.0), 1.0 / n))), np.zeros(2), W,
                       name="example_6_3", ambient=U)

    def F(h):
        w = _annulus_points(h, 1.0, 3.0)
        return np.c_[w, w]

    def S_pred(P):
        # the leaf {x0^2 y = y0 x^2} meets the diagonal at x = x0^2 / y0
        P = np.atleast_2d(P)
        ax, ay = np.abs(P[:, 0]), np.abs(P[:, 1])
        return (ay > 0) & (ax > 0) & (ay < ax ** 2) & (ay > ax ** 2 / 3)

    return Family("example_6_3", example_6_3_field(), S, W, U, F, S_pred,
                  notes="leaves meet the diagonal segment once; S = {|x|^2/3 < |y| < |x|^2}")


def dense_directions(count: int, seed: int = 0) -> np.ndarray:
    """Points q_j on the boundary of P(0,(1,1)), coarse to fine.

    Level l uses real angles k pi / 2^(l+3) and phases 2 pi m / 2^l on the
    second coordinate; each level adds only new directions, shuffled with
    the seed.  Level 0 is the 8 real directions, so the real slice gets lines
    every pi/8 from the start.
    """
    rng = SeedSplitter(seed).rng("dense-directions")
    seen: list = []
    out: list = []
    level = 0
    while len(out) < count:
        cand = []
        for k in range(2 ** (level + 3)):
            th = k * math.pi / 2 ** (level + 3)
            for m in range(2 ** level):
                v = np.array([math.cos(th), math.sin(th) * np.exp(2j * math.pi * m / 2 ** level)])
                v = v / np.max(np.abs(v))
                if not any(_same_line(v, w) for w in seen):
                    cand.append(v)
                    seen.append(v)
        if level > 0:
            rng.shuffle(cand)
        out.extend(cand)
        level += 1
    return np.array(out[:count])


def _same_line(a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> bool:
    return abs(a[0] * b[1] - a[1] * b[0]) <= tol * np.linalg.norm(a) * np.linalg.norm(b)


def diagonal_order(j_max: int, m_max: int) -> list:
    """Boustrophedon enumeration (1,1), (1,2), (2,1), (3,1), (2,2), (1,3), ... of the j_max x m_max block."""
    out = []
    for d in range(2, j_max + m_max + 1):
        diag = [(j, d - j) for j in range(1, d)]
        if d % 2 == 0:
            diag.reverse()
        out.extend((j, m) for j, m in diag if j <= j_max and m <= m_max)
    return out


def dense_defective_construction(j_max: int, m_max: int, seed: int = 0) -> DomainSequence:
    """W_n = P(0,(1,1)) union a tube of radius 1/m around the line through q_j, diagonally enumerated."""
    if j_max < 1 or m_max < 1:
        raise InputError("j_max and m_max must be positive")
    W = polydisc((1.0, 1.0))
    q = dense_directions(j_max, seed)
    order = diagonal_order(j_max, m_max)

    def gen(n):
        if n > len(order):
            raise InputError(f"the truncated sequence has {len(order)} terms")
        j, m = order[n - 1]
        return Union((W, Tube(tuple(-2 * q[j - 1]), tuple(2 * q[j - 1]), 1.0 / m)))

    def subs(n_max):
        rows = {}
        for j in range(1, j_max + 1):
            rows[f"row_{j}"] = [i + 1 for i, (jj, _) in enumerate(order) if jj == j and i + 1 <= n_max]
        return rows

    return DomainSequence(gen, np.zeros(2), W, name="dense_defective", ambient=polydisc((5.0, 5.0)),
                          subsequences=subs,
                          metadata={"length": len(order), "order": order, "directions": q})


def dense_defective(j_max: int = 8, m_max: int = 8, seed: int = 0) -> Family:
    S = dense_defective_construction(j_max, m_max, seed)
    q = S.metadata["directions"]

    def F(h):
        pts = []
        for v in q:
            lam = _annulus_points(h / np.linalg.norm(v), 1.0, 2.0)
            pts.append(lam[:, None] * v[None, :])
        return np.concatenate(pts)

    def S_pred(P):
        P = np.atleast_2d(P)
        hit = np.zeros(P.shape[0], dtype=bool)
        for v in q:
            hit |= np.abs(P[:, 0] * v[1] - P[:, 1] * v[0]) <= 1e-12 * np.linalg.norm(P, axis=1)
        return hit & (np.linalg.norm(P, axis=1) > 0)

    return Family("dense_defective", radial_field(2), S, S.declared_kernel, S.ambient, F, S_pred,
                  length=S.metadata["length"], notes=f"j_max={j_max}, m_max={m_max}")


FAMILIES: dict = {
    "example_1_3": example_1_3,
    "concentric_polydiscs": concentric_polydiscs,
    "exhaustion": exhaustion,
    "example_6_1": example_6_1,
    "example_6_2": example_6_2,
    "example_6_3": example_6_3,
    "dense_defective": dense_defective,
}


def build_family(name: str, **params) -> Family:
    try:
        builder = FAMILIES[name]
    except KeyError:
        raise InputError(f"unknown sequence family {name!r}; known: {sorted(FAMILIES)}") from None
    try:
        return builder(**params)
    except TypeError as exc:
        raise InputError(f"bad parameters for family {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# escape-limit set F


def _subsequences(indices: list, declared: dict, count: int, seed: int) -> dict:
    subs = {"full": indices, "even": [n for n in indices if n % 2 == 0],
            "odd": [n for n in indices if n % 2 == 1]}
    subs.update({k: [n for n in v if n in set(indices)] for k, v in declared.items()})
    rng = SeedSplitter(seed).rng("F-subsequences")
    for k in range(count):
        subs[f"random_{k}"] = [n for n in indices if rng.random() < 0.5]
    return {k: v for k, v in subs.items() if len(v) >= 2}


def _tail(seq: list) -> list:
    """Second half of the tested terms of a subsequence."""
    return seq[len(seq) // 2:]


def _clusters(idx: np.ndarray) -> np.ndarray:
    """Connected components of lattice points under the 3^D cube adjacency."""
    M = idx.shape[0]
    if M == 0:
        return np.zeros(0, dtype=int)
    tree = cKDTree(idx.astype(float))
    pairs = tree.query_pairs(math.sqrt(idx.shape[1]) + 1e-9, output_type="ndarray")
    if pairs.size == 0:
        return np.arange(M)
    # query_pairs uses the Euclidean ball; keep true cube neighbours only
    ok = np.max(np.abs(idx[pairs[:, 0]] - idx[pairs[:, 1]]), axis=1) <= 1
    pairs = pairs[ok]
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(M, M))
    return connected_components(g, directed=False)[1]


def detect_F(S: DomainSequence, W: DomainExpr, box, h: float, n_max: int,
             subsequence_count: int = 3, seed: int = 0, threshold: float = F_THRESHOLD,
             mode: str = "auto") -> SampleCloud:
    """Lattice points outside the closure of W that W_n keeps reaching.

    A point p (with s_W(p) > 1.5 h) is hit at index n when s_{W_n}(p) < h,
    i.e. W_n meets the h-ball around p.  p belongs to F when, along some
    tested subsequence, at least `threshold` of the second half of its
    terms hit p.
    """
    length = S.metadata.get("length")
    if length is not None:
        n_max = min(n_max, int(length))
    if n_max < 2:
        raise InputError("detect_F needs at least two terms")
    indices = list(range(1, n_max + 1))
    subs = _subsequences(indices, S.declared_subsequences(n_max), subsequence_count, seed)
    tails = {k: _tail(v) for k, v in subs.items()}
    tested = sorted(set().union(*tails.values()))
    doms = {n: S(n) for n in tested}
    lat = lattice_for(box, h, W, *doms.values(), mode=mode)

    def band(Z):
        inner = np.min(np.stack([doms[n].sdf(Z) for n in tested]), axis=0)
        return np.maximum(1.5 * h - W.sdf(Z), inner - h)

    cand = sublevel_indices(lat, band, 0.0)
    pts = lat.points(cand) if cand.size else np.zeros((0, S.dim), dtype=complex)
    pos = {n: k for k, n in enumerate(tested)}
    hits = np.stack([doms[n].sdf(pts) < h for n in tested]) if pts.shape[0] else np.zeros((len(tested), 0), bool)
    in_F = np.zeros(pts.shape[0], dtype=bool)
    source = np.full(pts.shape[0], "", dtype=object)
    fractions = {}
    for name, tail in tails.items():
        frac = hits[[pos[n] for n in tail]].mean(axis=0) if pts.shape[0] else np.zeros(0)
        ok = frac >= threshold
        source[ok & ~in_F] = name
        in_F |= ok
        fractions[name] = frac
    idx = cand[in_F]
    labels = _clusters(idx)
    return SampleCloud(pts[in_F], h, "F", symmetry="torus" if lat.mode == "modulus" else "none",
                       empty_warning=not in_F.any(),
                       extra={"thickness": h, "indices": idx, "lattice": lat, "labels": labels,
                              "clusters": int(labels.max() + 1) if labels.size else 0,
                              "source": source[in_F], "tested": tested, "subsequences": list(subs)})


def F_cluster_distances(F: SampleCloud, reference: np.ndarray) -> list:
    """Per cluster, the largest distance from its samples to a reference point set."""
    if F.is_empty:
        return []
    ref = SampleCloud(np.atleast_2d(reference), F.resolution, "reference", symmetry=F.symmetry)
    d = ref.distance_to(F.points)
    labels = F.extra.get("labels", np.zeros(len(F), dtype=int))
    return [float(d[labels == k].max()) for k in np.unique(labels)]


# ---------------------------------------------------------------------------
# defective set


@dataclass
class DefectiveSetModel:
    F_samples: SampleCloud
    S_membership: Callable[[np.ndarray], bool]
    symbolic_S: Optional[str] = None
    removable_flags: dict = field(default_factory=dict)
    leafy_F: Optional[SampleCloud] = None  # F samples away from E, the ones leaves can pass through


def F_off_singular(X: PolyVectorField, F: SampleCloud, margin: float) -> SampleCloud:
    """Drop F samples within `margin` of the singular set: no leaf passes through E."""
    if F.is_empty:
        return F
    E = template_singular_set(X)
    if E.subspaces is None:
        keep = np.linalg.norm(X(F.points), axis=1) > 1e-12
    else:
        keep = E.distance(F.points) > margin
    extra = {k: (v[keep] if isinstance(v, np.ndarray) and v.shape[:1] == keep.shape else v)
             for k, v in F.extra.items() if k != "_tree"}
    return SampleCloud(F.points[keep], F.resolution, F.tag, F.symmetry, not keep.any(), extra)


def _ambient_for(F: SampleCloud, W: Optional[DomainExpr]) -> DomainExpr:
    r = np.max(np.abs(F.points), axis=0) if not F.is_empty else 0.0
    if W is not None:
        r = np.maximum(r, coordinate_radii(W))
    return polydisc(tuple(np.atleast_1d(r + 2 * F.resolution + 1.0)))


def _chart_lipschitz(L: LeafModel, pts: np.ndarray) -> np.ndarray:
    return np.linalg.norm(L.derivative(pts), axis=1)


def _omega_box(L: LeafModel) -> tuple:
    return tuple(float(v) for v in L.omega.bbox())


def chart_hits(L: LeafModel, F: SampleCloud, radius: float, pitch: float,
               coarse_points: int = 10_000) -> tuple:
    """Chart-plane grid points q in Omega with dist(phi(q), F) < radius.

    A coarse grid is screened first; only coarse cells that can contain hits
    (by the chart's local Lipschitz bound) are refined to `pitch`.
    Returns (points, pitch).
    """
    if F.is_empty:
        return np.zeros(0, dtype=complex), pitch
    xmin, xmax, ymin, ymax = _omega_box(L)
    span = max(xmax - xmin, ymax - ymin)
    k = 0
    while (span / (pitch * 2 ** k)) ** 2 > coarse_points:
        k += 1
    pc = pitch * 2 ** k
    xs = np.arange(xmin + pc / 2, xmax, pc)
    ys = np.arange(ymin + pc / 2, ymax, pc)
    Q = (xs[None, :] + 1j * ys[:, None]).ravel()
    inside = L.region_sdf(Q) < 0
    # keep coarse cells whose square can touch Omega: centre within a cell of it
    lipq = _chart_lipschitz(L, Q)
    near = inside | (np.abs(L.region_sdf(Q)) < lipq * pc)
    Q, lipq = Q[near], lipq[near]
    if Q.size == 0:
        return np.zeros(0, dtype=complex), pitch
    # |phi'| varies across a cell; allow a factor 2 on the local bound
    bound = radius + 2 * lipq * pc * math.sqrt(0.5)
    d = F.distance_to(L.chart(Q), float(bound.max()))
    keep = d < bound
    Q = Q[keep]
    if Q.size == 0:
        return np.zeros(0, dtype=complex), pitch
    m = 2 ** k
    offs = (np.arange(m) - (m - 1) / 2) * pitch
    sub = (offs[None, :] + 1j * offs[:, None]).ravel()
    fine = (Q[:, None] + sub[None, :]).ravel()
    ok = L.region_sdf(fine) < 0
    for a in L.punctures:
        ok &= fine != a
    fine = fine[ok]
    if fine.size == 0:
        return fine, pitch
    d = F.distance_to(L.chart(fine), radius)
    return fine[d < radius], pitch


def _leaf_in(X: PolyVectorField, p, U: DomainExpr) -> tuple:
    L = leaf_model(X, p, U)
    return L, L.provenance == CATALOG_EXACT


def _default_pitch(L: LeafModel, h: float) -> float:
    lip = L.lipschitz if math.isfinite(L.lipschitz) and L.lipschitz > 0 else 1.0
    return h / (4.0 * lip)


@dataclass
class MembershipResult:
    member: bool
    distance: float
    confident: bool
    leaf: str


def defective_membership_detail(X: PolyVectorField, F: SampleCloud, p, W: Optional[DomainExpr] = None,
                                h: Optional[float] = None, ambient: Optional[DomainExpr] = None,
                                tolerance: float = 1.0) -> MembershipResult:
    p = as_point(p)
    if in_singular_set(X, p):
        raise DomainError("p lies in E, where no leaf passes")
    if F.is_empty:
        return MembershipResult(False, math.inf, True, "")
    h = F.resolution if h is None else float(h)
    U = ambient if ambient is not None else _ambient_for(F, W)
    L, confident = _leaf_in(X, p, U)
    radius = tolerance * h
    hits, _ = chart_hits(L, F, radius, _default_pitch(L, h))
    return MembershipResult(bool(hits.size), radius if hits.size else math.inf, confident, L.description)


def defective_membership(X: PolyVectorField, F: SampleCloud, p, W: Optional[DomainExpr] = None,
                         h: Optional[float] = None, ambient: Optional[DomainExpr] = None) -> bool:
    """Does the leaf through p (in the ambient domain) meet the h-neighbourhood of F?"""
    return defective_membership_detail(X, F, p, W, h, ambient).member


def build_defective_model(family: Family, h: float, method: str = "declared", n_max: Optional[int] = None,
                          seed: int = 0) -> DefectiveSetModel:
    """F samples (declared or detected) and the induced S-membership predicate."""
    if method == "declared" and family.F_sampler is not None:
        pts = family.F_sampler(h)
        F = SampleCloud(pts, h, "F", extra={"source": np.full(len(pts), "declared", dtype=object)})
    elif method in ("detect", "declared"):
        nm = n_max if n_max is not None else int(math.ceil(4 / h))
        F = detect_F(family.sequence, family.W, family.box, h, nm, seed=seed)
    else:
        raise InputError(f"unknown defective-set method {method!r}")
    leafy = F_off_singular(family.field, F, 2 * h)

    def member(p):
        if in_singular_set(family.field, p):
            return False
        return defective_membership(family.field, leafy, p, family.W, h, family.ambient)

    return DefectiveSetModel(F, member, family.notes or None, {}, leafy)


def slice_S_samples(family: Family, model: DefectiveSetModel, coords: Sequence[float]) -> np.ndarray:
    """Points of the real slice grid coords x coords (in C^2) inside W, off E and in S."""
    if family.field.dim != 2:
        raise InputError("the real slice is defined for families in C^2")
    xs = np.asarray(coords, dtype=float)
    P = np.array([(x, y) for y in xs for x in xs], dtype=complex)
    P = P[family.W.sdf(P) < 0]
    keep = [not in_singular_set(family.field, p) and bool(model.S_membership(p)) for p in P]
    return P[np.array(keep, dtype=bool)] if len(P) else P


def grid_coverage(samples: np.ndarray, test_points: np.ndarray) -> float:
    """Largest distance from a test point to its nearest sample (inf without samples)."""
    if len(samples) == 0:
        return math.inf
    S = SampleCloud(np.atleast_2d(samples), 0.0, "S")
    return float(np.max(S.distance_to(np.atleast_2d(test_points))))


# ---------------------------------------------------------------------------
# removability


@dataclass
class RemovabilityVerdict:
    verdict: str
    witness: dict


def _grid_components(points: np.ndarray, pitch: float) -> list:
    if points.size == 0:
        return []
    ij = np.rint(np.c_[points.real, points.imag] / pitch).astype(np.int64)
    labels = _clusters(ij)
    return [(points[labels == k], ij[labels == k]) for k in np.unique(labels)]


def _leafwise_diameter(L: LeafModel, pts: np.ndarray, pitch: float) -> float:
    """Upper estimate: chart bounding-box diagonal (plus a cell) times max |phi'|."""
    diag = math.hypot(np.ptp(pts.real) + pitch, np.ptp(pts.imag) + pitch)
    return diag * float(_chart_lipschitz(L, pts).max())


def _leafwise_inradius(L: LeafModel, pts: np.ndarray, ij: np.ndarray, pitch: float) -> float:
    """Lower estimate: grid distance transform times min |phi'| over the cluster."""
    lo = ij.min(axis=0) - 1
    shape = tuple(ij.max(axis=0) - lo + 2)
    mask = np.zeros(shape, dtype=bool)
    mask[tuple((ij - lo).T)] = True
    dt = ndimage.distance_transform_edt(mask)
    r = (float(dt.max()) - 1.0) * pitch
    return max(r, 0.0) * float(_chart_lipschitz(L, pts).min())


def _cloud_thickness(F: SampleCloud) -> float:
    """How far F samples may sit from the set they represent."""
    return float(F.extra.get("thickness", F.resolution / 2))


def removability_check(X: PolyVectorField, F: SampleCloud, p, h: Optional[float] = None,
                       ambient: Optional[DomainExpr] = None, W: Optional[DomainExpr] = None) -> RemovabilityVerdict:
    """Does L_p ∩ F have empty interior in the leaf?

    Clusters of {q : dist(phi(q), F) < r} are measured at r = h and r = 2h.
    Both the leafwise diameter and inradius grow about linearly in r + t,
    t being the thickness of the F cloud, so each is extrapolated back to
    the set itself.  Every cluster at most 2h across gives `removable`; a
    cluster holding a leafwise disc of radius > 4h gives `not_removable`.
    """
    if F.is_empty:
        return RemovabilityVerdict(REMOVABLE, {"reason": "F is empty"})
    h = F.resolution if h is None else float(h)
    t = _cloud_thickness(F)
    U = ambient if ambient is not None else _ambient_for(F, W)
    L, confident = _leaf_in(X, as_point(p), U)
    pitch = _default_pitch(L, h)
    hits1, _ = chart_hits(L, F, h, pitch)
    hits2, _ = chart_hits(L, F, 2 * h, pitch)
    if hits2.size == 0:
        return RemovabilityVerdict(REMOVABLE, {"reason": "leaf does not meet F", "confident": confident})
    comps2 = _grid_components(hits2, pitch)
    comps1 = _grid_components(hits1, pitch)
    tree = cKDTree(np.c_[hits2.real, hits2.imag])
    owner = np.empty(hits2.size, dtype=int)
    for k, (pts, _) in enumerate(comps2):
        owner[tree.query(np.c_[pts.real, pts.imag])[1]] = k
    scale = (h + t) / h
    diam0, inr0 = [], []
    for k, (pts2, ij2) in enumerate(comps2):
        inner = [(c, ij) for c, ij in comps1 if owner[tree.query([c[0].real, c[0].imag])[1]] == k]
        D2 = _leafwise_diameter(L, pts2, pitch)
        I2 = _leafwise_inradius(L, pts2, ij2, pitch)
        if not inner:
            diam0.append(0.0)
            inr0.append(0.0)
            continue
        pts1 = np.concatenate([c for c, _ in inner])
        D1 = _leafwise_diameter(L, pts1, pitch)
        I1 = max(_leafwise_inradius(L, c, ij, pitch) for c, ij in inner)
        diam0.append(max(D1 - (D2 - D1) * scale, 0.0))
        inr0.append(max(I1 - (I2 - I1) * scale, 0.0))
    witness = {"clusters": len(comps2), "diameter_at_0": max(diam0), "inradius_at_0": max(inr0),
               "thickness": t, "confident": confident, "leaf": L.description}
    if max(inr0) > 4 * h:
        return RemovabilityVerdict(NOT_REMOVABLE, witness)
    if max(diam0) <= 2 * h:
        return RemovabilityVerdict(REMOVABLE, witness)
    return RemovabilityVerdict(INCONCLUSIVE, witness)


# ---------------------------------------------------------------------------
# eta along sequences


def eta_point(X: PolyVectorField, p, D: DomainExpr, budget: int = 2000, seed: int = 0,
              lipschitz: Optional[float] = None, reach: Optional[float] = None) -> EtaEstimate:
    """Closed form on catalog leaves, 0 on E, certified sandwich otherwise."""
    return eta_estimate(X, p, D, budget, seed, lipschitz=lipschitz, reach=reach)


def _common_mc(X: PolyVectorField, family: Family) -> dict:
    """One Lipschitz bound and reach for every domain of the family, so certified regions nest."""
    r = np.maximum(coordinate_radii(family.W), coordinate_radii(family.sequence(1)))
    lip = X.sup_bound(r)
    return {"lipschitz": lip, "reach_scale": float(np.max(r))}


def _mc_reach(X: PolyVectorField, p: np.ndarray, common: dict) -> float:
    """Chart-plane reach shared by the nested domains; RK4 charts get less room than closed forms."""
    speed = float(np.linalg.norm(X(p[None, :])[0]))
    factor, cap = (40.0, 200.0) if exact_flow(X, p, np.zeros(1)) is not None else (4.0, 50.0)
    return min(cap, factor * common["reach_scale"] / max(speed, 1e-12))


@dataclass
class ExperimentRow:
    point: np.ndarray
    n: int
    eta_n: EtaEstimate
    eta_W: EtaEstimate
    in_S: Optional[bool]
    in_E: bool
    flags: tuple = ()

    @property
    def mc(self) -> bool:
        return self.eta_n.method == MC_SANDWICH or self.eta_W.method == MC_SANDWICH

    @property
    def gap(self) -> float:
        return abs(self.eta_n.value - self.eta_W.value)

    @property
    def relative_gap(self) -> float:
        ref = max(self.eta_W.value, 1e-300)
        return self.gap / ref

    @property
    def width(self) -> float:
        """Relative sandwich width of the wider of the two estimates (0 for closed forms)."""
        w = 0.0
        for e in (self.eta_n, self.eta_W):
            if e.method == MC_SANDWICH:
                w = max(w, (e.upper - e.lower) / e.upper if e.upper > 0 else math.inf)
        return w


@dataclass
class ExperimentReport:
    config: dict
    rows: list
    verdicts: dict
    tolerances: dict
    runtime: float
    extra: dict = field(default_factory=dict)

    def recompute_verdicts(self) -> dict:
        return _verdicts(self.rows, self.tolerances, self.extra.get("kind", "pointwise"))


def _row_converged(row: ExperimentRow, tol: float, mc_tol: float) -> bool:
    if "starved" in row.flags:
        # a zero lower bound carries no information about convergence
        return False
    if row.mc:
        return row.relative_gap < mc_tol
    return row.gap < tol


def _row_liminf(row: ExperimentRow, tol: float) -> bool:
    """eta_n >= eta_W up to tolerance; for sandwiches, no certified violation."""
    if row.in_E:
        return True
    if row.mc:
        return row.eta_n.upper >= row.eta_W.lower - tol
    return row.eta_n.value >= row.eta_W.value - tol


def _verdicts(rows: list, tol: dict, kind: str) -> dict:
    by_point: dict = {}
    for r in rows:
        by_point.setdefault(tuple(np.round(r.point, 15)), []).append(r)
    liminf_ok = True
    conv_ok = True
    for pts_rows in by_point.values():
        pts_rows.sort(key=lambda r: r.n)
        tail = pts_rows[len(pts_rows) // 2:]
        liminf_ok &= all(_row_liminf(r, tol["tol"]) for r in tail)
        last = pts_rows[-1]
        if last.in_E and kind == "pointwise":
            continue
        if last.in_S and kind == "pointwise":
            continue
        conv_ok &= _row_converged(last, tol["tol"], tol["mc_tol"])
    key = "uniform_ok_on_K" if kind == "uniform" else "pointwise_ok"
    return {key: bool(conv_ok), "liminf_ok": bool(liminf_ok)}


def _tolerances(h: float, tol: Optional[float]) -> dict:
    return {"tol": float(tol) if tol is not None else max(10 * h, 1e-4), "mc_tol": MC_REL_TOL, "h": h}


def thread_count(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, else FOLMETLAB_THREADS, else 1."""
    if threads is None:
        env = os.environ.get("FOLMETLAB_THREADS", "1")
        try:
            threads = int(env)
        except ValueError:
            raise InputError(f"FOLMETLAB_THREADS must be an integer, got {env!r}") from None
    return max(1, int(threads))


def _experiment_rows(family: Family, points: np.ndarray, schedule: Sequence[int], budget: int, seed: int,
                     in_S: Optional[Sequence[Optional[bool]]] = None, threads: Optional[int] = None) -> list:
    X = family.field
    common = _common_mc(X, family)
    splitter = SeedSplitter(seed)
    domains = {n: family.sequence(n) for n in schedule}
    P = [as_point(p) for p in points]
    for p in P:
        if not family.W.sdf(p[None, :])[0] < 0:
            raise DomainError(f"sample point {p} is not inside W")

    def one(k):
        p = P[k]
        onE = in_singular_set(X, p)
        s = None if in_S is None else in_S[k]
        reach = None if onE else _mc_reach(X, p, common)
        pseed = int(splitter.sequence(f"point-{k}").generate_state(1)[0])
        eW = eta_point(X, p, family.W, budget, pseed, common["lipschitz"], reach)
        out = []
        for n in schedule:
            Dn = domains[n]
            if not Dn.sdf(p[None, :])[0] < 0:
                # eta_n(p) is defined once W_n has absorbed p
                continue
            en = eta_point(X, p, Dn, budget, pseed, common["lipschitz"], reach)
            flags = []
            if en.method == MC_SANDWICH or eW.method == MC_SANDWICH:
                flags.append("mc")
            if en.flags.get("starved") or eW.flags.get("starved"):
                flags.append("starved")
            if onE:
                flags.append("on_E")
            out.append(ExperimentRow(p, int(n), en, eW, s, onE, tuple(flags)))
        return out

    workers = thread_count(threads)
    if workers == 1:
        chunks = [one(k) for k in range(len(P))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, range(len(P))))
    return [r for chunk in chunks for r in chunk]


def pointwise_convergence_experiment(family: Family, points, schedule: Sequence[int], h: float = 0.02,
                                     tol: Optional[float] = None, budget: int = 2000, seed: int = 0,
                                     defective: Optional[DefectiveSetModel] = None,
                                     config: Optional[dict] = None, threads: Optional[int] = None) -> ExperimentReport:
    """eta_n(p) along the schedule against eta_W(p), with S membership of each point."""
    t0 = time.perf_counter()
    P = np.array([as_point(p) for p in points])
    schedule = sorted(int(n) for n in schedule)
    if not schedule:
        raise InputError("empty n schedule")
    model = defective or build_defective_model(family, h, seed=seed)
    in_S = [None if in_singular_set(family.field, p) else bool(model.S_membership(p)) for p in P]
    rows = _experiment_rows(family, P, schedule, budget, seed, in_S, threads)
    tols = _tolerances(h, tol)
    report = ExperimentReport(config or {}, rows, {}, tols, 0.0, {"kind": "pointwise", "family": family.name})
    report.verdicts = _verdicts(rows, tols, "pointwise")
    report.extra["S_points"] = [tuple(p) for p, s in zip(P, in_S) if s]
    report.runtime = time.perf_counter() - t0
    return report


def compact_cloud(X: PolyVectorField, W: DomainExpr, count: int, radius: float, seed: int = 0,
                  mix: bool = True) -> SampleCloud:
    """Seeded cloud in the polydisc P(0, radius): generic points plus points on invariant planes and E.

    With `mix`, the cloud holds about 40% generic points, 45% on the
    coordinate hyperplanes {z_i = 0} and on {z_i = z_j} when the field
    keeps them invariant, and 15% on or within 1e-3 of E.
    """
    N = X.dim
    rng = SeedSplitter(seed).rng("compact-cloud")

    def draw(m):
        r = radius * np.sqrt(rng.uniform(size=(m, N)))
        return r * np.exp(2j * math.pi * rng.uniform(size=(m, N)))

    if not mix:
        P = draw(count)
    else:
        n_gen = int(round(0.4 * count))
        n_E = int(round(0.15 * count))
        n_pl = count - n_gen - n_E
        parts = [draw(n_gen)]
        planes = []
        for i in range(N):
            if X.divisible(i, i):
                planes.append(("zero", i))
        P_pl = draw(n_pl)
        for k in range(n_pl):
            kind, i = planes[k % len(planes)] if planes else ("none", 0)
            if kind == "zero":
                P_pl[k, i] = 0
        parts.append(P_pl)
        E = template_singular_set(X)
        subs = [J for J in (E.subspaces or ()) if len(J) > 0]
        P_E = draw(n_E)
        for k in range(n_E):
            if not subs:
                P_E[k] = 0
                continue
            J = subs[k % len(subs)]
            mask = np.ones(N, dtype=bool)
            mask[list(J)] = False
            P_E[k, mask] = 0
            if k % 2 == 1:
                # near E rather than on it
                j = int(np.flatnonzero(mask)[0])
                P_E[k, j] = 1e-3 * np.exp(2j * math.pi * rng.uniform())
        parts.append(P_E)
        P = np.concatenate(parts)
    inside = W.sdf(P) < 0
    return SampleCloud(P[inside], 0.0, "K", extra={"seed": seed})


def uniform_convergence_experiment(family: Family, K: SampleCloud, schedule: Sequence[int], h: float = 0.02,
                                   tol: Optional[float] = None, budget: int = 2000, seed: int = 0,
                                   defective: Optional[DefectiveSetModel] = None, transversal: Optional[bool] = None,
                                   config: Optional[dict] = None, threads: Optional[int] = None) -> ExperimentReport:
    """sup over K of the gap per n; K must avoid S, and E unless the foliation is transversal there."""
    t0 = time.perf_counter()
    X = family.field
    P = K.points
    schedule = sorted(int(n) for n in schedule)
    model = defective or build_defective_model(family, h, seed=seed)
    onE = np.array([in_singular_set(X, p) for p in P], dtype=bool)
    bad_S = [tuple(p) for p, e in zip(P, onE) if not e and model.S_membership(p)]
    if bad_S:
        raise DomainError(f"K meets the defective set at {bad_S[:5]}")
    trans_info = {}
    if onE.any():
        if transversal is None:
            verdicts = [transversal_type_check(X, p).verdict for p in P[onE]]
            transversal = all(v == TRANSVERSAL for v in verdicts)
            trans_info = {"checked": len(verdicts), "transversal": transversal}
        if not transversal:
            raise DomainError(f"K meets E at {[tuple(p) for p in P[onE]][:5]} and the foliation is not "
                              "transversal there")
    rows = _experiment_rows(family, P, schedule, budget, seed, [False] * len(P), threads)
    tols = _tolerances(h, tol)
    report = ExperimentReport(config or {}, rows, {}, tols, 0.0, {"kind": "uniform", "family": family.name})
    report.verdicts = _verdicts(rows, tols, "uniform")
    sup = {}
    for n in schedule:
        closed = [r.gap for r in rows if r.n == n and not r.mc]
        mc = [r.relative_gap for r in rows if r.n == n and r.mc]
        sup[n] = {"sup_gap": max(closed, default=0.0), "sup_relative_gap_mc": max(mc, default=0.0)}
    report.extra.update({"sup": sup, "transversal": trans_info,
                         "mc_rows": sum(1 for r in rows if r.mc and r.n == schedule[-1]),
                         "starved_rows": sum(1 for r in rows if "starved" in r.flags),
                         "max_width_mc": max((r.width for r in rows if r.mc), default=0.0)})
    report.runtime = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Hausdorff convergence implies kernel convergence


@dataclass
class StageReport:
    verdict: str  # "pass" | "fail"
    failing_stage: Optional[str]
    rho: dict
    kernel_rho: Optional[float]
    F_size: Optional[int]
    message: str = ""


def hausdorff_to_kernel_check(S: DomainSequence, box, h: float, n_values: Optional[Sequence[int]] = None,
                              n_max: Optional[int] = None, mode: str = "auto", seed: int = 0) -> StageReport:
    """Stage 1: rho(W_n, W) -> 0; stage 2: kernel = W; stage 3: F empty."""
    W = S.declared_kernel
    if W is None:
        raise InputError("hausdorff_to_kernel_check needs a declared limit")
    n_max = n_max or int(math.ceil(4 / h))
    if n_values is None:
        n_values = sorted({max(1, n_max // 8), max(1, n_max // 4), max(1, n_max // 2), n_max})
    rho = {int(n): rho_distance(S(n), W, box, h, mode) for n in n_values}
    vals = [rho[n] for n in sorted(rho)]
    if not (vals[-1] <= 4 * h and vals[-1] <= vals[0] + 2 * h):
        return StageReport("fail", "hausdorff", rho, None, None, "not Hausdorff-convergent")
    ker = kernel_of_sequence(S, n_max, box, h, mode=mode)
    if ker.degenerate:
        return StageReport("fail", "kernel", rho, math.inf, None, "kernel is degenerate")
    kr = ker.rho_to(W).value
    if kr > 2 * h:
        return StageReport("fail", "kernel", rho, kr, None, "kernel differs from the limit")
    F = detect_F(S, W, box, h, n_max, seed=seed, mode=mode)
    if not F.is_empty:
        return StageReport("fail", "escape_set", rho, kr, len(F), "F is not empty")
    return StageReport("pass", None, rho, kr, 0, "Hausdorff convergence, kernel = W, F = ∅")


def constant_sequence(D: DomainExpr, base_point) -> DomainSequence:
    return DomainSequence(lambda n: D, base_point, D, name="constant")


def kernel_summary(S: DomainSequence, n_max: int, box, h: float, subsequences: int = 5, seed: int = 0) -> dict:
    v = check_kernel_convergence(S, subsequences, n_max, box, h, seed)
    return {"verdict": v.verdict, "rho": v.witness.get("rho", {}),
            "rho_to_declared": v.witness.get("rho_to_declared"), "failing": v.witness.get("failing")}
