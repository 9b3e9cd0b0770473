import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from adaptmesh.geometry import (GeometryError, PointCloud, Pose, build_scanblock, load_point_cloud,
                                load_trajectory, partition_frames, save_point_cloud, save_trajectory,
                                transform_cloud, voxel_downsample)


def random_pose(rng):
    return Pose(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.normal(size=3))


def test_pose_rejects_improper_rotation():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        Pose(np.eye(3) * 1.01)


def test_pose_inverse_and_composition():
    rng = np.random.default_rng(0)
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).apply(p), p, atol=1e-12)


def test_quaternion_roundtrip():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    back = Pose.from_quaternion(pose.translation, pose.quaternion())
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-12)


def test_pointcloud_rejects_bad_normals_and_nan():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((2, 3)), np.array([[0, 0, 2.0], [0, 0, 1.0]]))
    with pytest.raises(GeometryError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_transform_identity_is_exact():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(50, 3))
    nrm = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    c = PointCloud(pts, nrm)
    out = transform_cloud(c, Pose.identity())
    assert np.array_equal(out.points, c.points)
    assert np.array_equal(out.normals, c.normals)


def test_transform_translation_and_rotation():
    c = PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))
    out = transform_cloud(c, Pose(np.eye(3), [1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.points, [[1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(out.normals, [[0.0, 0.0, 1.0]])
    rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    rot = transform_cloud(PointCloud(np.array([[1.0, 0.0, 0.0]])), Pose(rz))
    np.testing.assert_allclose(rot.points, [[0.0, 1.0, 0.0]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_transform_roundtrip_property(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    pts = rng.uniform(-50, 50, size=(20, 3))
    nrm = rng.normal(size=(20, 3))
    c = PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True), rng.normal(size=3))
    back = transform_cloud(transform_cloud(c, pose), pose.inverse())
    np.testing.assert_allclose(back.points, c.points, atol=1e-9)
    np.testing.assert_allclose(back.sensor_origin, c.sensor_origin, atol=1e-9)
    assert np.all(np.abs(np.linalg.norm(back.normals, axis=1) - 1) < 1e-6)


def test_scanblock_identity_poses_is_concatenation():
    rng = np.random.default_rng(3)
    clouds = [PointCloud(rng.normal(size=(5, 3))) for _ in range(3)]
    block = build_scanblock([(Pose.identity(), c) for c in clouds], k=20)
    assert np.array_equal(block.cloud.points, np.concatenate([c.points for c in clouds]))
    assert block.frame_count == 3
    assert list(block.frame_index) == [0] * 5 + [1] * 5 + [2] * 5


def test_scanblock_consistency_of_shared_world_point():
    w = np.array([[4.0, 1.0, -2.0]])
    T0 = Pose(Rotation.from_euler("z", 30, degrees=True).as_matrix(), [0.5, 0.0, 0.0])
    T1 = T0 @ Pose(np.eye(3), [1.0, 0.0, 0.0])
    frames = [(T, PointCloud(T.inverse().apply(w))) for T in (T0, T1)]
    block = build_scanblock(frames)
    np.testing.assert_allclose(block.cloud.points[0], block.cloud.points[1], atol=1e-12)
    np.testing.assert_allclose(block.sensor_origins[1], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(block.to_world().cloud.points, np.vstack([w, w]), atol=1e-12)


def test_scanblock_twenty_frames_of_thousand_points():
    rng = np.random.default_rng(4)
    frames = [(Pose.identity(), PointCloud(rng.normal(size=(1000, 3)))) for _ in range(20)]
    assert len(build_scanblock(frames, 20).cloud) == 20000


def test_scanblock_errors():
    with pytest.raises(GeometryError):
        build_scanblock([])
    frames = [(Pose.identity(), PointCloud(np.zeros((1, 3))))] * 3
    with pytest.raises(GeometryError):
        build_scanblock(frames, k=2)


def test_partition_keeps_trailing_block():
    parts = partition_frames(list(range(45)), 20)
    assert [len(p) for p in parts] == [20, 20, 5]


def test_voxel_downsample_examples():
    two = PointCloud(np.array([[0.1, 0.1, 0.1], [0.3, 0.2, 0.4]]))
    out = voxel_downsample(two, 0.5)
    assert len(out) == 1
    np.testing.assert_allclose(out.points[0], [0.2, 0.15, 0.25])
    grid = np.stack(np.meshgrid(*[np.arange(4) * 0.6] * 3, indexing="ij"), -1).reshape(-1, 3) + 0.01
    assert len(voxel_downsample(PointCloud(grid), 0.5)) == len(grid)
    with pytest.raises(GeometryError):
        voxel_downsample(two, 0.0)


def test_voxel_downsample_tube_block_shrinks():
    rng = np.random.default_rng(5)
    th = rng.uniform(0, 2 * np.pi, 20000)
    x = rng.uniform(0, 8, 20000)
    pts = np.stack([x, 3 * np.cos(th), 3 * np.sin(th)], 1)
    assert len(voxel_downsample(PointCloud(pts), 0.5)) < 20000


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.25, 0.5, 1.0]))
def test_voxel_downsample_idempotent(seed, voxel):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, size=(300, 3))
    nrm = rng.normal(size=(300, 3))
    c = PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    once = voxel_downsample(c, voxel)
    twice = voxel_downsample(once, voxel)
    assert len(once) <= len(c)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)
    assert np.all(np.abs(np.linalg.norm(once.normals, axis=1) - 1) < 1e-6)


def test_ply_roundtrip_and_parse(tmp_path):
    p = tmp_path / "three.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n")
    c = load_point_cloud(p)
    assert len(c) == 3 and c.normals is None
    rng = np.random.default_rng(6)
    n = rng.normal(size=(4, 3))
    cloud = PointCloud(rng.normal(size=(4, 3)), n / np.linalg.norm(n, axis=1, keepdims=True))
    save_point_cloud(cloud, tmp_path / "c.ply")
    back = load_point_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.points, cloud.points)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-15)


def test_xyz_normals_are_renormalised(tmp_path):
    p = tmp_path / "n.xyz"
    p.write_text("0 0 0 0 0 2\n1 1 1 3 0 0\n")
    c = load_point_cloud(p)
    np.testing.assert_allclose(c.normals, [[0, 0, 1], [1, 0, 0]])


def test_nan_and_malformed_records_report_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 nan 0\n")
    with pytest.raises(GeometryError, match=r":2: non-finite"):
        load_point_cloud(p)
    q = tmp_path / "bad2.xyz"
    q.write_text("0 0 0\n1 a 0\n")
    with pytest.raises(GeometryError, match=r":2: malformed"):
        load_point_cloud(q)


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    poses = [random_pose(rng) for _ in range(5)]
    save_trajectory(tmp_path / "t.txt", np.arange(5) * 0.1, poses)
    stamps, back = load_trajectory(tmp_path / "t.txt")
    np.testing.assert_allclose(stamps, np.arange(5) * 0.1)
    for a, b in zip(poses, back):
        np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-12)
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-15)
