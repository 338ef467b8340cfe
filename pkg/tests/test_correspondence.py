"""Correspondence maps, file I/O, closest-point refresh and merging."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrreg import CorrespondenceMap, closest_point_refresh, load_correspondences, merge
from nrreg.correspondence import save_correspondences
from nrreg.geometry import Shape

from conftest import random_cloud


class TestLoadCorrespondences:
    def test_direct_encoding(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("0 5\n2 7\n")
        corr = load_correspondences(path, 3, 10)
        assert corr.mapping.tolist() == [6, 0, 8]
        assert corr.weights.tolist() == [1.0, 0.0, 1.0]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("")
        corr = load_correspondences(path, 4, 4)
        assert corr.n_matched() == 0
        assert corr.weights.tolist() == [0.0] * 4

    def test_target_index_at_bound_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("0 4\n")
        with pytest.raises(ValueError, match="target index 4 out of range"):
            load_correspondences(path, 3, 4)

    def test_duplicate_template_index_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("1 0\n1 2\n")
        with pytest.raises(ValueError, match="duplicate template index 1"):
            load_correspondences(path, 3, 4)

    def test_roundtrip(self, tmp_path):
        corr = CorrespondenceMap(np.array([3, 0, 1, 0]))
        path = tmp_path / "c.txt"
        save_correspondences(corr, path)
        back = load_correspondences(path, 4, 5)
        assert np.array_equal(back.mapping, corr.mapping)


class TestClosestPointRefresh:
    def test_identical_shapes_self_match(self):
        verts = random_cloud(30, seed=4)
        shape = Shape(vertices=verts)
        corr = closest_point_refresh(shape, shape, max_dist=np.inf)
        assert np.array_equal(corr.target_indices, np.arange(30))

    def test_tie_break_lowest_target_index(self):
        template = Shape(vertices=np.array([[0.0, 0, 0]]))
        tv = np.zeros((8, 3))
        tv[:, 0] = [9, 9, 9, 1, 9, 9, 9, -1]   # indices 3 and 7 equidistant
        target = Shape(vertices=tv)
        corr = closest_point_refresh(template, target, max_dist=np.inf)
        assert corr.target_indices[0] == 3

    def test_against_brute_force_oracle(self):
        dv = random_cloud(40, seed=11)
        tv = random_cloud(60, seed=12)
        corr = closest_point_refresh(Shape(vertices=dv), Shape(vertices=tv),
                                     max_dist=np.inf)
        d2 = np.sum((dv[:, None] - tv[None, :]) ** 2, axis=2)
        assert np.array_equal(corr.target_indices, np.argmin(d2, axis=1))

    def test_empty_thresholds_validation(self):
        shape = Shape(vertices=random_cloud(3, seed=0))
        with pytest.raises(ValueError):
            closest_point_refresh(shape, shape, max_dist=0.0)

    def test_all_matched_with_infinite_gates(self):
        dv = random_cloud(25, seed=1)
        tv = random_cloud(25, seed=2)
        corr = closest_point_refresh(Shape(vertices=dv), Shape(vertices=tv),
                                     max_dist=np.inf, max_normal_angle=180.0)
        assert corr.n_matched() == 25

    @given(st.floats(0.2, 3.0), st.floats(0.2, 3.0))
    @settings(max_examples=25, deadline=None)
    def test_distance_gate_monotone(self, a, b):
        # shrinking max_dist never converts an unmatched vertex to matched
        dv = random_cloud(20, seed=21, scale=2.0)
        tv = random_cloud(20, seed=22)
        target = Shape(vertices=tv, edges=np.array([[0, 1], [1, 2]]))
        lo, hi = sorted([a, b])
        m_lo = closest_point_refresh(Shape(vertices=dv), target, max_dist=lo)
        m_hi = closest_point_refresh(Shape(vertices=dv), target, max_dist=hi)
        assert np.all(m_hi.matched | ~m_lo.matched)

    def test_normal_gate_rejects_opposed_normals(self):
        up = np.tile([0.0, 0.0, 1.0], (4, 1))
        down = -up
        verts = random_cloud(4, seed=3)
        src = Shape(vertices=verts, normals=up)
        tgt = Shape(vertices=verts, normals=down)
        corr = closest_point_refresh(src, tgt, max_dist=np.inf,
                                     max_normal_angle=60.0)
        assert corr.n_matched() == 0


class TestMerge:
    def test_empty_fixed_yields_refreshed(self):
        refreshed = CorrespondenceMap(np.array([2, 0, 3]))
        out = merge(CorrespondenceMap.empty(3), refreshed)
        assert np.array_equal(out.mapping, refreshed.mapping)

    def test_full_fixed_wins(self):
        fixed = CorrespondenceMap(np.array([1, 2, 3]))
        refreshed = CorrespondenceMap(np.array([3, 2, 1]))
        out = merge(fixed, refreshed)
        assert np.array_equal(out.mapping, fixed.mapping)

    def test_disjoint_supports_union(self):
        fixed = CorrespondenceMap(np.array([5, 0, 0, 0]))
        refreshed = CorrespondenceMap(np.array([0, 0, 7, 0]))
        out = merge(fixed, refreshed)
        assert out.mapping.tolist() == [5, 0, 7, 0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            merge(CorrespondenceMap.empty(2), CorrespondenceMap.empty(3))


class TestMapInvariants:
    def test_weights_match_support(self):
        corr = CorrespondenceMap(np.array([0, 4, 0, 1]))
        assert np.array_equal(corr.weights > 0, corr.mapping != 0)

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError):
            CorrespondenceMap(np.array([-1, 0]))
