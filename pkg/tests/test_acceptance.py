"""The eight acceptance criteria, each at its stated tolerance.

Every part of a criterion is recorded; the terminal summary prints one
PASS/FAIL line per criterion.  Parts that cannot hold as literally stated
are strict xfails, so the criterion line reads FAIL, and each has a
companion test with the corrected statement.

Run alone with `python -m pytest tests/test_acceptance.py -v`.
"""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from folmetlab.convergence_lab import (REMOVABLE, F_cluster_distances, build_defective_model, compact_cloud,
                                       concentric_polydiscs, dense_defective, detect_F, example_1_3, example_6_1,
                                       example_6_3, exhaustion, grid_coverage, hausdorff_to_kernel_check,
                                       pointwise_convergence_experiment, removability_check, slice_S_samples,
                                       uniform_convergence_experiment)
from folmetlab.cplx_geometry import check_kernel_convergence, kernel_of_sequence, polydisc, rho_distance
from folmetlab.eta_engine import CLOSED_FORM, MC_SANDWICH, eta_exact, eta_mc_lower, eta_upper_projection
from folmetlab.foliation import (NOT_TRANSVERSAL, TRANSVERSAL, example_6_1_field, example_6_2_field,
                                 example_6_3_field, in_singular_set, leaf_through_catalog, radial_field,
                                 transversal_type_check)
from folmetlab.planar_hyperbolic import (Annulus, Disc, PuncturedDisc, annulus_cover, catalog_density, exp_cover,
                                         identity_cover, is_subdomain, pushforward_consistency_check,
                                         scaled_disc_cover)

from . import oracles
from .conftest import ACCEPTANCE

P11 = polydisc((1.0, 1.0))
P111 = polydisc((1.0, 1.0, 1.0))


@contextmanager
def part(criterion, name):
    """Record whether the enclosed checks hold; failures still propagate."""
    parts = ACCEPTANCE.setdefault(criterion, {})
    try:
        yield
    except BaseException:
        parts[name] = False
        raise
    parts[name] = parts.get(name, True)


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. the persistent gap of the arm sequence


def test_c1_arm_sequence_regression():
    with part(1, "exact values and gap"):
        t0 = time.perf_counter()
        fam = example_1_3()
        eW = eta_exact(leaf_through_catalog(fam.field, (0.5, 0), fam.W)).exact
        assert abs(eW ** 2 - 0.1201133) < 1e-7
        assert abs(eW ** 2 - float(oracles.mp.log(4) ** 2 / 16)) < 1e-9
        for n in (1, 2, 5, 10, 100, 1000, 10 ** 6):
            en = eta_exact(leaf_through_catalog(fam.field, (0.5, 0), fam.sequence(n))).exact
            assert abs(en ** 2 - 0.4804530) < 1e-7
            assert abs(en ** 2 - float(oracles.mp.log(16) ** 2 / 16)) < 1e-9
            assert abs(abs(en - eW) - 0.3465736) < 1e-6
        assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. kernel of the arm sequence


def test_c2_kernel_of_arm_sequence():
    with part(2, "kernel and subsequences"):
        t0 = time.perf_counter()
        fam = example_1_3()
        h = 0.02
        k = kernel_of_sequence(fam.sequence, 100, fam.box, h)
        assert not k.degenerate
        assert k.rho_to(P11).value <= 2 * h
        v = check_kernel_convergence(fam.sequence, 5, 100, fam.box, h, seed=0)
        assert v.verdict == "converges"
        assert len(v.witness["rho"]) >= 5
        assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------------
# 3. Hausdorff convergence of concentric polydiscs

C3_H = 0.02
C3_NS = (2, 4, 8, 16, 32, 50)


@pytest.fixture(scope="module")
def c3_rho():
    fam = concentric_polydiscs()
    t0 = time.perf_counter()
    rho = {n: rho_distance(fam.sequence(n), fam.W, fam.box, C3_H) for n in C3_NS}
    return rho, time.perf_counter() - t0


@pytest.mark.xfail(strict=True, reason="in Euclidean C^2 the distance is 2*sqrt(2)/n, off 2/n by more than 4h")
def test_c3_literal_rate_two_over_n(c3_rho):
    with part(3, "rho = 2/n +- 4h as stated"):
        rho, _ = c3_rho
        for n, r in rho.items():
            assert abs(r - 2 / n) <= 4 * C3_H


def test_c3_euclidean_rate(c3_rho):
    with part(3, "rho = 2*sqrt(2)/n +- 4h (Euclidean oracle)"):
        rho, _ = c3_rho
        vals = [rho[n] for n in C3_NS]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        for n, r in rho.items():
            assert abs(r - float(oracles.polydisc_rho(1.0, 1.0 + 1.0 / n))) <= 4 * C3_H


def test_c3_kernel_and_empty_F(c3_rho):
    with part(3, "kernel = W and F empty"):
        _, t_rho = c3_rho
        fam = concentric_polydiscs()
        rep, t = timed(hausdorff_to_kernel_check, fam.sequence, fam.box, C3_H)
        assert rep.verdict == "pass"
        assert rep.kernel_rho <= 2 * C3_H
        F = detect_F(fam.sequence, fam.W, fam.box, C3_H, 200)
        assert F.is_empty and rep.F_size == 0
        assert t + t_rho < 60.0


# ---------------------------------------------------------------------------
# 4. thin slab on the first foliation

C4_SCHEDULE = (25, 50, 100, 200)


@pytest.fixture(scope="module")
def c4_report():
    fam = example_6_1()
    h = 0.02
    K = compact_cloud(fam.field, fam.W, 100, 0.9, seed=1, mix=True)
    model = build_defective_model(fam, h)
    rep, t = timed(uniform_convergence_experiment, fam, K, C4_SCHEDULE, h, 1e-3, 1000, 1, model)
    return rep, t


def test_c4_escape_set():
    with part(4, "F near the segment"):
        h = 0.05
        fam = example_6_1()
        F = detect_F(fam.sequence, fam.W, fam.box, h, 80)
        assert not F.is_empty
        r = np.linspace(1.0, 2.0, 200)
        th = np.linspace(0, 2 * math.pi, 200, endpoint=False)
        w = (r[:, None] * np.exp(1j * th[None, :])).ravel()
        ref = np.c_[np.zeros_like(w), w, np.zeros_like(w)]
        assert max(F_cluster_distances(F, ref)) <= 2 * h


def test_c4_transversal_near_origin():
    with part(4, "transversal on 20 E points"):
        X = example_6_1_field()
        rng = np.random.default_rng(41)
        for k in range(20):
            t = 0.1 * math.sqrt(rng.uniform()) * np.exp(2j * math.pi * rng.uniform())
            p = (0, t, 0) if k % 2 else (0, 0, t)
            assert in_singular_set(X, p)
            assert transversal_type_check(X, p).verdict == TRANSVERSAL


def test_c4_uniform_closed_form_rows(c4_report):
    with part(4, "closed-form sup gap < 1e-3 at n = 200"):
        rep, t = c4_report
        K_size = len({tuple(r.point) for r in rep.rows})
        assert K_size == 100
        closed = [r for r in rep.rows if r.n == 200 and not r.mc]
        assert len(closed) >= 30
        assert all(r.eta_n.method == CLOSED_FORM for r in closed if not r.in_E)
        assert max(r.gap for r in closed) < 1e-3
        assert rep.verdicts["uniform_ok_on_K"] and rep.verdicts["liminf_ok"]
        assert t < 600.0


@pytest.mark.xfail(strict=True, reason="certified MC lower bounds leave sandwiches up to about 60% wide")
def test_c4_literal_sandwich_width(c4_report):
    with part(4, "MC sandwich width < 5% as stated"):
        rep, _ = c4_report
        mc = [r for r in rep.rows if r.n == 200 and r.mc]
        assert mc
        assert max(r.width for r in mc) < 0.05


def test_c4_mc_rows_consistent(c4_report):
    with part(4, "MC rows: same-seed gap < 5%, sandwiches overlap"):
        rep, _ = c4_report
        mc = [r for r in rep.rows if r.n == 200 and r.mc]
        assert mc and rep.extra["starved_rows"] == 0
        for r in mc:
            assert r.eta_n.method == MC_SANDWICH or r.eta_W.method == MC_SANDWICH
            assert r.relative_gap < 0.05
            assert max(r.eta_n.lower, r.eta_W.lower) <= min(r.eta_n.upper, r.eta_W.upper)


# ---------------------------------------------------------------------------
# 5. the non-transversal foliation


def test_c5_not_transversal_witness():
    with part(5, "not_transversal with witness e1"):
        v = transversal_type_check(example_6_2_field(), (0.5, 0, 0))
        assert v.verdict == NOT_TRANSVERSAL
        w = np.asarray(v.witness, dtype=complex)
        w = w / np.linalg.norm(w)
        assert math.acos(min(1.0, abs(w[0]))) < 1e-3


def test_c5_two_sequence_discontinuity():
    with part(5, "eta_W constant along p_n, -> 0 along the separatrix"):
        X = example_6_2_field()
        k = 1 / float(oracles.punctured(0.5, 1))
        prev = math.inf
        for n in (2, 5, 10, 100, 1000, 10 ** 5):
            L = leaf_through_catalog(X, (0.5, 1 / n, 0), P111)
            assert isinstance(L.omega, PuncturedDisc)
            assert abs(eta_exact(L).exact - k) < 1e-9
            # the separatrix {x = 0.5, y = 0} through q_n = (0.5, 0, 1/n)
            M = leaf_through_catalog(X, (0.5, 0, 1 / n), P111)
            e = eta_exact(M).exact
            assert abs(e - 1 / float(oracles.punctured(1 / n, 1))) < 1e-9
            assert e < prev
            prev = e
        assert k > 0.3 and prev < 1e-3


# ---------------------------------------------------------------------------
# 6. the tube along the diagonal

C6_H = 0.05


@pytest.fixture(scope="module")
def c6_data():
    t0 = time.perf_counter()
    fam = example_6_3()
    model = build_defective_model(fam, C6_H)
    rng = np.random.default_rng(6)
    P = np.sqrt(rng.uniform(0, 1, (1000, 2))) * np.exp(2j * math.pi * rng.uniform(size=(1000, 2)))
    P = np.array([p for p in P if not in_singular_set(fam.field, p)])
    member = np.array([model.S_membership(p) for p in P])
    return fam, model, P, member, time.perf_counter() - t0


def _margin(P, c):
    """Distance from each point to the hypersurface {|y| = c |x|^2}, to first order."""
    ax, ay = np.abs(P[:, 0]), np.abs(P[:, 1])
    return np.abs(ay - c * ax ** 2) / np.sqrt(1 + 4 * c * c * ax ** 2)


@pytest.mark.xfail(strict=True, reason="leaves with |y| <= |x|^2/3 meet the diagonal at |x| > 3, outside the tube")
def test_c6_literal_predicate(c6_data):
    with part(6, "membership = {|y| < |x|^2} as stated"):
        _, _, P, member, _ = c6_data
        ok = _margin(P, 1.0) > 2 * C6_H
        pred = np.abs(P[:, 1]) < np.abs(P[:, 0]) ** 2
        assert np.sum(member[ok] != pred[ok]) == 0


def test_c6_corrected_predicate(c6_data):
    with part(6, "membership = {|x|^2/3 < |y| < |x|^2}"):
        fam, _, P, member, t = c6_data
        ok = (_margin(P, 1.0) > 2 * C6_H) & (_margin(P, 1 / 3) > 2 * C6_H)
        assert ok.sum() > 400
        assert np.sum(member[ok] != fam.S_predicate(P[ok])) == 0
        assert t < 300.0


def test_c6_removable_and_convergent(c6_data):
    with part(6, "50 samples removable and converging"):
        fam, model, P, member, t_mem = c6_data
        t0 = time.perf_counter()
        ok = (_margin(P, 1.0) > 2 * C6_H) & (_margin(P, 1 / 3) > 2 * C6_H)
        S = P[member & ok][:50]
        assert len(S) == 50
        for p in S:
            assert removability_check(fam.field, model.leafy_F, p, C6_H, fam.ambient).verdict == REMOVABLE
        rep = pointwise_convergence_experiment(fam, S, [10, 50, 200], C6_H, 1e-3, 2000, 0, model)
        last = [r for r in rep.rows if r.n == 200]
        assert len(last) == 50
        assert all(r.eta_n.method == CLOSED_FORM and r.eta_W.method == CLOSED_FORM for r in last)
        assert max(r.gap for r in last) < 1e-3
        assert t_mem + time.perf_counter() - t0 < 300.0


# ---------------------------------------------------------------------------
# 7. property suites


def test_c7_schwarz_pick_and_covers():
    with part(7, "Schwarz-Pick and pushforward"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 1000:
            R2 = rng.uniform(0.5, 5)
            R1 = R2 * rng.uniform(0.2, 1.0)
            r1 = R1 * rng.uniform(0.01, 0.9)
            inner = [Disc(R1), PuncturedDisc(R1), Annulus(r1, R1)][rng.integers(3)]
            outer = [Disc(R2), PuncturedDisc(R2), Annulus(min(r1, R2) * rng.uniform(0.1, 1.0), R2)][rng.integers(3)]
            if not is_subdomain(inner, outer):
                continue
            lo = getattr(inner, "r", 0.0)
            q = (lo + rng.uniform(0.02, 0.98) * (inner.R - lo)) * np.exp(2j * math.pi * rng.uniform())
            assert catalog_density(inner, q).value >= catalog_density(outer, q).value * (1 - 1e-12)
            checked += 1
        z = np.sqrt(rng.uniform(0, 0.81, 100)) * np.exp(2j * math.pi * rng.uniform(size=100))
        for cover in (identity_cover(), scaled_disc_cover(2.5), exp_cover(1.0), annulus_cover(0.2, 1.0)):
            assert np.max(pushforward_consistency_check(cover, z) / cover.source_density(z)) < 1e-10
        ACCEPTANCE.setdefault("_c7_time", {})["t"] = time.perf_counter() - t0


CATALOG = [
    (radial_field(2), (0.5, 0), P11),
    (radial_field(2), (0.3, 0.4j), P11),
    (radial_field(2), (0.5, 0), example_1_3().sequence(7)),
    (example_6_3_field(), (0.5, 0.25), P11),
    (example_6_3_field(), (0.5, 0), P11),
    (example_6_2_field(), (0.5, 0.25, 0), P111),
    (example_6_2_field(), (0.5, 0, 0.3), P111),
    (example_6_1_field(), (0.5, 0, 0.3), P111),
]


def test_c7_mc_sandwich_on_catalog():
    with part(7, "MC sandwich on catalog leaves"):
        t0 = time.perf_counter()
        for X, p, D in CATALOG:
            L = leaf_through_catalog(X, p, D)
            ex = eta_exact(L).exact
            low = eta_mc_lower(X, p, D, budget=10_000, seed=7).lower
            up = eta_upper_projection(X, p, D)
            assert low <= ex * (1 + 1e-12) and ex <= up * (1 + 1e-12)
            if isinstance(L.omega, PuncturedDisc):
                assert low >= 0.95 * ex
        ACCEPTANCE.setdefault("_c7_time", {})["m"] = time.perf_counter() - t0


def test_c7_liminf_on_every_row(c4_report):
    with part(7, "liminf on every row off E"):
        t0 = time.perf_counter()
        reports = [c4_report[0],
                   pointwise_convergence_experiment(example_1_3(), [(0.5, 0), (0.3, 0.2), (0.1j, -0.6)],
                                                    [1, 5, 20, 80], 0.05),
                   pointwise_convergence_experiment(exhaustion(), [(0.5, 0.1), (0.2j, 0.7)], [2, 8, 32], 0.05),
                   pointwise_convergence_experiment(example_6_3(), [(0.5, 0.2), (0.3, 0.05), (-0.4, 0.6j)],
                                                    [10, 40], 0.05)]
        count = 0
        for rep in reports:
            tol = rep.tolerances["tol"]
            assert rep.verdicts["liminf_ok"]
            for r in rep.rows:
                if r.in_E:
                    continue
                # a sandwich only certifies a violation when its upper bound falls short
                assert r.eta_n.upper >= r.eta_W.lower - tol
                count += 1
        assert count > 350
        spent = time.perf_counter() - t0 + sum(ACCEPTANCE.get("_c7_time", {}).values())
        assert spent < 300.0


# ---------------------------------------------------------------------------
# 8. dense defective set


def test_c8_dense_slice_coverage():
    with part(8, "S meets every 0.25-ball of the 9x9 grid"):
        fam = dense_defective(8, 8)
        model = build_defective_model(fam, 0.05)
        S = slice_S_samples(fam, model, np.linspace(-0.9, 0.9, 19))
        g = np.linspace(-0.8, 0.8, 9)
        grid = np.array([(x, y) for y in g for x in g], dtype=complex)
        assert len(S) > 0
        assert np.all(np.abs(S.imag) == 0)
        assert grid_coverage(S, grid) < 0.25


def teardown_module(module):
    ACCEPTANCE.pop("_c7_time", None)
