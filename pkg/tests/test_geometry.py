import numpy as np
import pytest

from growseg.geometry import (
    PointCloud,
    SpatialIndex,
    estimate_normals,
    knn_all,
    radius_all,
    voxel_downsample,
)

from conftest import brute_knn, brute_radius, random_cloud


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(positions=np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(positions=np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(positions=np.array([[0.0, 0.0, np.nan]]))
    with pytest.raises(ValueError):
        PointCloud(positions=np.zeros((2, 3)), colors=np.full((2, 3), 1.5))


def test_spatial_index_cells():
    pos = np.array([[0.01, 0.01, 0.01], [0.99, 0.01, 0.01], [0.01, 0.99, 0.01]])
    index = SpatialIndex.build(pos, 0.5)
    assert index.cell_of(0) == (0, 0, 0)
    assert list(index.points_in_cell((0, 0, 0))) == [0]
    assert list(index.points_in_cell((9, 9, 9))) == []


def test_knn_matches_brute_force(rng):
    for trial in range(5):
        cloud = random_cloud(rng, n=80)
        index = SpatialIndex.build(cloud.positions, 0.21)
        ids, counts = knn_all(index, cloud.positions, 7)
        for q in range(len(cloud)):
            expect = brute_knn(cloud.positions, q, 7)
            assert counts[q] == len(expect)
            np.testing.assert_array_equal(ids[q, :counts[q]], expect)


def test_knn_requests_more_than_available(rng):
    cloud = random_cloud(rng, n=5)
    index = SpatialIndex.build(cloud.positions, 0.3)
    ids, counts = knn_all(index, cloud.positions, 10)
    assert np.all(counts == 4)
    assert np.all(ids[:, 4:] == -1)


def test_radius_matches_brute_force(rng):
    for trial in range(5):
        cloud = random_cloud(rng, n=80)
        index = SpatialIndex.build(cloud.positions, 0.17)
        indptr, indices = radius_all(index, cloud.positions, 0.25)
        for q in range(len(cloud)):
            got = indices[indptr[q]:indptr[q + 1]]
            np.testing.assert_array_equal(got, brute_radius(cloud.positions, q, 0.25))


def test_voxel_downsample_centroids():
    pos = np.array([[0.01, 0.0, 0.0], [0.03, 0.0, 0.0],   # same voxel
                    [0.11, 0.0, 0.0]])
    cloud = PointCloud(positions=pos,
                       colors=np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0],
                                        [0.5, 0.5, 0.5]]),
                       gt_labels=np.array([2, 2, 0]))
    vox, mapping = voxel_downsample(cloud, 0.1)
    assert len(vox) == 2
    np.testing.assert_allclose(vox.positions[0], [0.02, 0.0, 0.0])
    np.testing.assert_allclose(vox.colors[0], [0.5, 0.5, 0.5])
    assert vox.gt_labels.tolist() == [2, 0]
    assert mapping.tolist() == [0, 0, 1]


def test_voxel_downsample_label_majority_and_ignore():
    pos = np.zeros((5, 3))
    pos[:, 0] = [0.01, 0.02, 0.03, 0.04, 0.25]
    labels = np.array([1, 1, 0, -1, -1])
    cloud = PointCloud(positions=pos, gt_labels=labels)
    vox, _ = voxel_downsample(cloud, 0.1)
    # majority of the first voxel's valid labels is 1; all-ignored voxel -> -1
    assert vox.gt_labels.tolist() == [1, -1]


def test_voxel_downsample_label_tie_takes_lower():
    pos = np.zeros((4, 3))
    pos[:, 0] = [0.01, 0.02, 0.03, 0.04]
    cloud = PointCloud(positions=pos, gt_labels=np.array([3, 1, 3, 1]))
    vox, _ = voxel_downsample(cloud, 0.5)
    assert vox.gt_labels.tolist() == [1]


def test_voxel_downsample_invalid_grid(rng):
    with pytest.raises(ValueError):
        voxel_downsample(random_cloud(rng), 0.0)


def test_normals_flat_plane(rng):
    xy = rng.uniform(0, 1, size=(120, 2))
    pos = np.concatenate([xy, np.zeros((120, 1))], axis=1)
    field = estimate_normals(PointCloud(positions=pos), k=12)
    np.testing.assert_allclose(np.abs(field.normals[:, 2]), 1.0, atol=1e-9)
    np.testing.assert_allclose(field.curvatures, 0.0, atol=1e-9)
    # orientation rule: n_z positive
    assert np.all(field.normals[:, 2] > 0)


def test_normals_curvature_bounded(rng):
    cloud = random_cloud(rng, n=100)
    field = estimate_normals(cloud, k=10)
    norms = np.linalg.norm(field.normals, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    assert np.all(field.curvatures >= 0)
    assert np.all(field.curvatures <= 1.0 / 3.0 + 1e-12)


def test_normals_line_perpendicular():
    pos = np.zeros((6, 3))
    pos[:, 0] = np.arange(6) * 0.1
    field = estimate_normals(PointCloud(positions=pos), k=5)
    # a line constrains the normal only to its perpendicular plane
    np.testing.assert_allclose(field.normals[:, 0], 0.0, atol=1e-9)
    np.testing.assert_allclose(field.curvatures, 0.0, atol=1e-12)
    assert not field.degenerate.any()


def test_normals_zero_spread_fallback():
    pos = np.tile([0.3, 0.4, 0.5], (5, 1))
    field = estimate_normals(PointCloud(positions=pos), k=4)
    np.testing.assert_array_equal(field.normals,
                                  np.tile([0.0, 0.0, 1.0], (5, 1)))
    assert field.degenerate.all()
