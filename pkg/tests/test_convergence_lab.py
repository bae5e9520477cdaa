import math

import numpy as np
import pytest

from folmetlab.convergence_lab import (INCONCLUSIVE, NOT_REMOVABLE, REMOVABLE, F_cluster_distances,
                                       build_defective_model, build_family, compact_cloud, concentric_polydiscs,
                                       constant_sequence, defective_membership, dense_defective, dense_directions,
                                       detect_F, diagonal_order, example_1_3, example_6_1, example_6_2, example_6_3,
                                       exhaustion, grid_coverage, hausdorff_to_kernel_check,
                                       pointwise_convergence_experiment, removability_check, slice_S_samples,
                                       thread_count, uniform_convergence_experiment)
from folmetlab.cplx_geometry import SampleCloud, bounding_box, hausdorff_distance, polydisc
from folmetlab.errors import DomainError, InputError
from folmetlab.eta_engine import CLOSED_FORM, eta_exact
from folmetlab.foliation import in_singular_set, leaf_through_catalog

from . import oracles

GAP_1_3 = 0.346573590279972655  # log(16)/4 - log(4)/4


def segment(points_abs, lo, hi, embed, count=400):
    """Reference samples of {embed(w) : lo <= |w| <= hi}."""
    r = np.linspace(lo, hi, count)
    th = np.linspace(0, 2 * math.pi, count, endpoint=False)
    w = (r[:, None] * np.exp(1j * th[None, :])).ravel()
    return embed(w)


class TestFamilies:
    def test_build_by_name(self):
        assert build_family("example_6_3").name == "example_6_3"
        with pytest.raises(InputError):
            build_family("nope")

    def test_example_1_3_terms_contain_W(self):
        fam = example_1_3()
        for n in (1, 5, 40):
            assert fam.sequence(n).sdf(np.array([[1.5, 0.5 / n]]))[0] < 0

    def test_diagonal_order(self):
        assert diagonal_order(3, 3)[:6] == [(1, 1), (1, 2), (2, 1), (3, 1), (2, 2), (1, 3)]
        assert len(diagonal_order(8, 8)) == 64

    def test_dense_directions_distinct_lines_on_boundary(self):
        q = dense_directions(20, seed=1)
        assert np.allclose(np.max(np.abs(q), axis=1), 1.0)
        for i in range(20):
            for j in range(i):
                assert abs(q[i, 0] * q[j, 1] - q[i, 1] * q[j, 0]) > 1e-6

    def test_dense_truncated_length(self):
        fam = dense_defective(2, 3)
        assert fam.length == 6
        with pytest.raises(InputError):
            fam.sequence(7)


class TestDetectF:
    def test_example_1_3_near_segment(self):
        h = 0.05
        fam = example_1_3()
        F = detect_F(fam.sequence, fam.W, fam.box, h, 40)
        assert not F.is_empty
        ref = segment(None, 1.0, 2.0, lambda w: np.c_[w, np.zeros_like(w)])
        assert max(F_cluster_distances(F, ref)) <= 2 * h
        # and F covers the part of the segment away from the limit boundary
        far = ref[np.abs(ref[:, 0]) >= 1 + 3 * h]
        assert F.distance_to(far).max() <= 2 * h

    def test_example_6_1_near_segment(self):
        h = 0.1
        fam = example_6_1()
        F = detect_F(fam.sequence, fam.W, fam.box, h, 40)
        ref = segment(None, 1.0, 2.0, lambda w: np.c_[np.zeros_like(w), w, np.zeros_like(w)])
        assert not F.is_empty
        assert max(F_cluster_distances(F, ref)) <= 2 * h

    def test_concentric_empty(self):
        fam = concentric_polydiscs()
        F = detect_F(fam.sequence, fam.W, fam.box, 0.05, 80)
        assert F.is_empty and F.empty_warning

    def test_stable_under_refinement(self):
        fam = example_1_3()
        a = detect_F(fam.sequence, fam.W, fam.box, 0.1, 40)
        b = detect_F(fam.sequence, fam.W, fam.box, 0.05, 40)
        assert hausdorff_distance(a, b) < 2 * 0.1

    def test_needs_two_terms(self):
        fam = example_1_3()
        with pytest.raises(InputError):
            detect_F(fam.sequence, fam.W, fam.box, 0.1, 1)


class TestMembership:
    fam = example_6_3()
    model = build_defective_model(fam, 0.05)

    def test_examples(self):
        assert self.model.S_membership((0.5, 0.2))
        assert not self.model.S_membership((0.5, 0.3))

    def test_singular_points_excluded(self):
        assert not self.model.S_membership((0, 0))

    def test_empty_F(self):
        F = SampleCloud(np.zeros((0, 2), complex), 0.05, "F")
        assert not defective_membership(self.fam.field, F, (0.5, 0.2), self.fam.W)

    def test_leafwise_saturation(self):
        # S is a union of leaves: every point of the leaf through a member is a member
        c = 0.2 / 0.5 ** 2
        for t in (0.3, 0.6 + 0.2j, -0.7, 0.4j):
            p = (t, c * t * t)
            assert self.fam.W.sdf(np.array([p]))[0] < 0
            assert self.model.S_membership(p)

    def test_predicate_agrees_away_from_boundary(self):
        rng = np.random.default_rng(4)
        P = (rng.uniform(0.1, 0.95, (40, 2)) * np.exp(2j * math.pi * rng.uniform(size=(40, 2))))
        for p in P:
            ax, ay = abs(p[0]), abs(p[1])
            if min(abs(ay - ax ** 2), abs(ay - ax ** 2 / 3)) < 3 * 0.05:
                continue
            assert self.model.S_membership(p) == bool(self.fam.S_predicate(p)[0])


class TestRemovability:
    def test_example_6_3_removable(self):
        fam = example_6_3()
        F = build_defective_model(fam, 0.05).leafy_F
        v = removability_check(fam.field, F, (0.5, 0.2), 0.05, fam.ambient)
        assert v.verdict == REMOVABLE

    def test_example_1_3_not_removable(self):
        fam = example_1_3()
        F = build_defective_model(fam, 0.05).leafy_F
        v = removability_check(fam.field, F, (0.5, 0), 0.05, fam.ambient)
        assert v.verdict == NOT_REMOVABLE
        assert v.witness["inradius_at_0"] > 4 * 0.05

    def test_empty_F_removable(self):
        F = SampleCloud(np.zeros((0, 2), complex), 0.05, "F")
        assert removability_check(example_1_3().field, F, (0.5, 0)).verdict == REMOVABLE

    def test_verdict_values(self):
        assert {REMOVABLE, NOT_REMOVABLE, INCONCLUSIVE} == {"removable", "not_removable", "inconclusive"}


class TestPointwise:
    def test_example_1_3_persistent_gap(self):
        fam = example_1_3()
        rep = pointwise_convergence_experiment(fam, [(0.5, 0), (0.3, 0.2)], [5, 20, 80], h=0.05)
        on_axis = [r for r in rep.rows if r.point[1] == 0]
        assert all(abs(r.gap - GAP_1_3) < 1e-9 for r in on_axis)
        assert all(r.in_S for r in on_axis)
        off = [r for r in rep.rows if r.point[1] != 0]
        assert all(r.gap < 1e-12 for r in off)
        assert rep.verdicts == {"pointwise_ok": True, "liminf_ok": True}
        assert rep.verdicts == rep.recompute_verdicts()

    def test_failing_points_lie_in_S_or_E(self):
        fam = example_1_3()
        rep = pointwise_convergence_experiment(fam, [(0.5, 0), (0.3, 0.2), (0, 0.4)], [10, 40], h=0.05)
        for r in rep.rows:
            if r.gap >= rep.tolerances["tol"]:
                assert r.in_S or r.in_E

    def test_example_6_1_generic_point(self):
        fam = example_6_1()
        rep = pointwise_convergence_experiment(fam, [(0.5, 0.5, 0.5)], [25, 100], h=0.05, budget=500)
        assert rep.verdicts["pointwise_ok"] and rep.verdicts["liminf_ok"]

    def test_exhaustion_increases_to_limit(self):
        fam = exhaustion()
        rep = pointwise_convergence_experiment(fam, [(0.5, 0.1)], [2, 4, 8, 16, 64], h=0.05)
        vals = [r.eta_n.value for r in sorted(rep.rows, key=lambda r: r.n)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert all(v <= rep.rows[0].eta_W.value for v in vals)
        assert all(r.eta_n.method == CLOSED_FORM for r in rep.rows)

    def test_points_outside_W_rejected(self):
        with pytest.raises(DomainError):
            pointwise_convergence_experiment(example_1_3(), [(1.5, 0)], [5], h=0.1)

    def test_threads_do_not_change_rows(self):
        fam = example_6_3()
        pts = [(0.5, 0.2), (0.3, 0.05), (-0.4j, 0.1)]
        a = pointwise_convergence_experiment(fam, pts, [10, 40], h=0.05, threads=1)
        b = pointwise_convergence_experiment(fam, pts, [10, 40], h=0.05, threads=2)
        assert [(r.n, r.eta_n.value, r.eta_W.value) for r in a.rows] == \
               [(r.n, r.eta_n.value, r.eta_W.value) for r in b.rows]

    def test_thread_count_from_environment(self, monkeypatch):
        monkeypatch.setenv("FOLMETLAB_THREADS", "3")
        assert thread_count() == 3
        monkeypatch.setenv("FOLMETLAB_THREADS", "x")
        with pytest.raises(InputError):
            thread_count()


class TestUniform:
    def test_K_meeting_S_rejected(self):
        fam = example_1_3()
        K = SampleCloud(np.array([[0.5, 0], [0.3, 0.2]], complex), 0.0, "K")
        with pytest.raises(DomainError):
            uniform_convergence_experiment(fam, K, [5, 10], h=0.05)

    def test_non_transversal_E_rejected(self):
        fam = example_6_2()
        K = SampleCloud(np.array([[0.5, 0, 0], [0.3, 0.2, 0.1]], complex), 0.0, "K")
        with pytest.raises(DomainError):
            uniform_convergence_experiment(fam, K, [5, 10], h=0.1)

    def test_example_6_2_off_E(self):
        fam = example_6_2()
        K = SampleCloud(np.array([[0.5, 0.25, 0], [0.4 + 0.1j, 0.3 - 0.2j, 0.5j]], complex), 0.0, "K")
        rep = uniform_convergence_experiment(fam, K, [25, 100], h=0.1, budget=200, seed=1)
        assert rep.verdicts["liminf_ok"]
        assert rep.extra["starved_rows"] == 0
        for r in rep.rows:
            assert 0 < r.eta_n.lower <= r.eta_n.upper

    def test_compact_cloud_composition(self):
        fam = example_6_1()
        K = compact_cloud(fam.field, fam.W, 100, 0.9, seed=1)
        P = K.points
        assert len(P) == 100
        assert np.all(np.abs(P) < 0.9)
        on_plane = np.any(P == 0, axis=1)
        assert 0.4 <= on_plane.mean() <= 0.7
        assert sum(in_singular_set(fam.field, p) for p in P) >= 3
        assert np.array_equal(P, compact_cloud(fam.field, fam.W, 100, 0.9, seed=1).points)


class TestHausdorffToKernel:
    def test_concentric_passes(self):
        fam = concentric_polydiscs()
        rep = hausdorff_to_kernel_check(fam.sequence, fam.box, 0.05)
        assert rep.verdict == "pass" and rep.F_size == 0
        for n, r in rep.rho.items():
            assert r == pytest.approx(float(oracles.polydisc_rho(1.0, 1 + 1 / n)), abs=4 * 0.05)

    def test_example_1_3_fails_at_hausdorff(self):
        fam = example_1_3()
        rep = hausdorff_to_kernel_check(fam.sequence, fam.box, 0.05)
        assert rep.verdict == "fail" and rep.failing_stage == "hausdorff"

    def test_constant_passes(self):
        D = polydisc((1.0, 1.0))
        rep = hausdorff_to_kernel_check(constant_sequence(D, np.zeros(2)), bounding_box(D, pad=0.2), 0.05)
        assert rep.verdict == "pass"


class TestDense:
    def test_single_direction_slice_is_its_line(self):
        fam = dense_defective(1, 2)
        model = build_defective_model(fam, 0.1)
        P = slice_S_samples(fam, model, np.linspace(-0.9, 0.9, 7))
        q = dense_directions(1)[0]
        assert len(P) > 0
        assert np.all(np.abs(P[:, 0] * q[1] - P[:, 1] * q[0]) < 1e-12)

    def test_detected_F_near_line(self):
        h = 0.1
        fam = dense_defective(1, 6)
        F = detect_F(fam.sequence, fam.W, fam.box, h, fam.length)
        assert not F.is_empty
        v = dense_directions(1)[0]
        # distance from z to the complex line through v is |det(z, v)| / |v|
        d = np.abs(F.points[:, 0] * v[1] - F.points[:, 1] * v[0]) / np.linalg.norm(v)
        # the earliest tail term tested is n = 3, a tube of radius 1/3
        assert min(F.extra["tested"]) == 3
        assert d.max() <= 1 / 3 + 2 * h
        assert np.all(fam.W.sdf(F.points) > h)

    def test_grid_coverage(self):
        S = np.array([[0, 0], [1, 0]], complex)
        assert grid_coverage(S, np.array([[0.5, 0]], complex)) == pytest.approx(0.5)
        assert grid_coverage(np.zeros((0, 2)), S) == math.inf

    def test_slice_needs_two_coordinates(self):
        fam = example_6_1()
        with pytest.raises(InputError):
            slice_S_samples(fam, build_defective_model(fam, 0.1), [0.0])


class TestClosedFormRoutes:
    def test_example_6_3_rows_use_closed_forms(self):
        fam = example_6_3()
        L = leaf_through_catalog(fam.field, (0.5, 0.2), fam.W)
        assert eta_exact(L).method == CLOSED_FORM
