import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rgsan.scene import (PointCloudScene, SceneError, SuperpointPartition, build_superpoint_partition,
                         load_scene, pool_gt_mask, save_scene, superpoint_centroids, superpoint_pool_features,
                         target_centroid_gt)


def make_scene(positions, ids=None, feats=None, **kw):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    return PointCloudScene(positions, np.zeros((n, 3)) if feats is None else feats,
                           np.zeros(n, int) if ids is None else ids, "s", **kw)


def group_mean_oracle(x, assignment, n):
    out = np.zeros((n, x.shape[1]))
    for i in range(n):
        rows = [x[k] for k in range(len(x)) if assignment[k] == i]
        out[i] = sum(rows) / len(rows)
    return out


def random_partition(rng, n_points, n_sp):
    a = np.concatenate([np.arange(n_sp), rng.integers(0, n_sp, n_points - n_sp)])
    rng.shuffle(a)
    return SuperpointPartition(a, n_sp)


class TestScene:
    def test_rejects_empty(self):
        with pytest.raises(SceneError, match="empty point cloud"):
            make_scene(np.zeros((0, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(SceneError):
            make_scene([[0, 0, np.nan]])

    def test_rejects_bad_instance_ids(self):
        with pytest.raises(SceneError):
            make_scene([[0, 0, 0]], ids=[-2])

    def test_arrays_are_read_only(self):
        s = make_scene([[0, 0, 0]])
        with pytest.raises(ValueError):
            s.positions[0, 0] = 1.0

    def test_json_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(50, 3)) * 1e3
        s = PointCloudScene(pos, rng.uniform(size=(50, 3)), rng.integers(-1, 3, 50), "room",
                            {0: "chair", 1: "table", 2: "bed"}, np.arange(50) % 7)
        save_scene(s, tmp_path / "s.json")
        back = load_scene(tmp_path / "s.json")
        assert back.equals(s)
        assert back.positions.tobytes() == s.positions.tobytes()

    def test_load_reports_path(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"scene_id": "x", "positions": [], "features": [], "instance_ids": []}))
        with pytest.raises(SceneError, match="bad.json"):
            load_scene(p)


class TestPartition:
    def test_single_cell(self):
        s = make_scene([[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [0.4, 0.4, 0.4], [0.0, 0.0, 0.0]])
        p = build_superpoint_partition(s, 0.5)
        assert p.num_superpoints == 1
        assert p.assignment.tolist() == [0, 0, 0, 0]

    def test_separated_cells(self):
        p = build_superpoint_partition(make_scene([[0, 0, 0], [10, 10, 10]]), 1.0)
        assert p.num_superpoints == 2

    def test_ids_dense_in_first_occurrence_order(self):
        s = make_scene([[5, 5, 5], [0, 0, 0], [5.1, 5.1, 5.1], [9, 0, 0]])
        p = build_superpoint_partition(s, 1.0)
        assert p.assignment.tolist() == [0, 1, 0, 2]

    def test_brute_force_cells(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(-3, 3, size=(1000, 3))
        p = build_superpoint_partition(make_scene(pos), 0.5)
        cell_of_id = {}
        for k in range(1000):
            cell = tuple(int(np.floor(c / 0.5)) for c in pos[k])
            cell_of_id.setdefault(p.assignment[k], cell)
            assert cell_of_id[p.assignment[k]] == cell
        assert len(set(cell_of_id.values())) == p.num_superpoints

    def test_bad_cell_size(self):
        with pytest.raises(SceneError):
            build_superpoint_partition(make_scene([[0, 0, 0]]), 0.0)

    def test_empty_superpoint_rejected(self):
        with pytest.raises(SceneError, match="empty"):
            SuperpointPartition([0, 0, 2], 3)


class TestPooling:
    def test_mean_of_two(self):
        out = superpoint_pool_features(np.array([[1.0, 3.0], [3.0, 5.0]]), SuperpointPartition([0, 0], 1))
        assert out.tolist() == [[2.0, 4.0]]

    def test_identity_partition(self):
        x = np.random.default_rng(0).normal(size=(9, 4))
        np.testing.assert_array_equal(superpoint_pool_features(x, SuperpointPartition(np.arange(9), 9)), x)

    def test_matches_group_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 8))
        p = random_partition(rng, 50, 7)
        np.testing.assert_allclose(superpoint_pool_features(x, p), group_mean_oracle(x, p.assignment, 7),
                                   rtol=0, atol=1e-12)

    def test_torch_input_is_differentiable(self):
        x = torch.randn(6, 2, dtype=torch.float64, requires_grad=True)
        out = superpoint_pool_features(x, SuperpointPartition([0, 0, 1, 1, 1, 2], 3))
        out.sum().backward()
        assert torch.allclose(x.grad[:, 0], torch.tensor([1 / 2, 1 / 2, 1 / 3, 1 / 3, 1 / 3, 1.0], dtype=torch.float64))

    def test_dimension_mismatch(self):
        with pytest.raises(SceneError):
            superpoint_pool_features(np.zeros((3, 2)), SuperpointPartition([0, 0], 1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_within_superpoints_is_invariant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(20, 3))
        p = random_partition(rng, 20, 5)
        perm = rng.permutation(20)
        a = superpoint_pool_features(x, p)
        b = superpoint_pool_features(x[perm], SuperpointPartition(p.assignment[perm], 5))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestCentroids:
    def test_midpoint(self):
        s = make_scene([[0, 0, 0], [2, 0, 0]])
        assert superpoint_centroids(s, SuperpointPartition([0, 0], 1)).tolist() == [[1, 0, 0]]

    def test_singletons(self):
        pos = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(superpoint_centroids(make_scene(pos), SuperpointPartition(np.arange(5), 5)), pos)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_oracle_and_bounding_box(self, seed):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-5, 5, size=(40, 3))
        p = random_partition(rng, 40, 6)
        c = superpoint_centroids(make_scene(pos), p)
        np.testing.assert_allclose(c, group_mean_oracle(pos, p.assignment, 6), atol=1e-12)
        for i in range(6):
            members = pos[p.assignment == i]
            assert (members.min(0) - 1e-12 <= c[i]).all() and (c[i] <= members.max(0) + 1e-12).all()


class TestGtMask:
    def test_all_members_masked(self):
        assert pool_gt_mask([1, 1, 1], SuperpointPartition([0, 0, 0], 1)).tolist() == [True]

    def test_exactly_half_is_zero(self):
        assert pool_gt_mask([1, 0, 1, 1], SuperpointPartition([0, 0, 1, 1], 2)).tolist() == [False, True]

    def test_oracle(self):
        rng = np.random.default_rng(5)
        p = random_partition(rng, 60, 9)
        m = rng.integers(0, 2, 60)
        expected = []
        for i in range(9):
            vals = [m[k] for k in range(60) if p.assignment[k] == i]
            expected.append(sum(vals) / len(vals) > 0.5)
        assert pool_gt_mask(m, p).tolist() == expected

    def test_consistent_permutation(self):
        rng = np.random.default_rng(6)
        p = random_partition(rng, 30, 4)
        m = rng.integers(0, 2, 30)
        perm = rng.permutation(30)
        assert (pool_gt_mask(m, p) == pool_gt_mask(m[perm], SuperpointPartition(p.assignment[perm], 4))).all()


class TestTargetCentroid:
    def test_single_target_superpoint(self):
        s = make_scene([[0, 0, 0], [2, 0, 0], [5, 5, 5]])
        p = SuperpointPartition([0, 0, 1], 2)
        assert target_centroid_gt(s, p, [1, 1, 0]).tolist() == [1, 0, 0]

    def test_two_target_superpoints(self):
        s = make_scene([[0, 0, 0], [2, 2, 2], [9, 9, 9]])
        p = SuperpointPartition([0, 1, 2], 3)
        assert target_centroid_gt(s, p, [1, 1, 0]).tolist() == [1, 1, 1]

    def test_random_against_masked_mean(self):
        rng = np.random.default_rng(8)
        pos = rng.normal(size=(40, 3))
        p = random_partition(rng, 40, 8)
        m = rng.integers(0, 2, 40)
        sp = pool_gt_mask(m, p)
        if not sp.any():
            m[:] = 1
            sp = pool_gt_mask(m, p)
        cents = group_mean_oracle(pos, p.assignment, 8)
        expected = sum(cents[i] for i in range(8) if sp[i]) / sp.sum()
        np.testing.assert_allclose(target_centroid_gt(make_scene(pos), p, m), expected, atol=1e-12)

    def test_degenerate(self):
        s = make_scene([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(SceneError, match="degenerate target"):
            target_centroid_gt(s, SuperpointPartition([0, 0], 1), [1, 0])
