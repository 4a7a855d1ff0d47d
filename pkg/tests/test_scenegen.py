import math

import numpy as np
import pytest

from splatlidar.camera import CameraIntrinsics
from splatlidar.lidar import LidarSpec, range_to_pointcloud
from splatlidar.scene import SensorRig
from splatlidar.scenegen import (
    ActorSpec, Box, Plane, PrimitiveScene, Sphere, camera_mount, desk_scene_config, holdout_frames, init_splats,
    observe, raycast_camera, raycast_lidar, scene_from_config,
)
from splatlidar.se3 import SE3Pose

K = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
I = SE3Pose.identity()


def scene(prims, actors=None, ego=None, lidar=None):
    rig = SensorRig(K, lidar or LidarSpec.uniform(), ego or [I], camera_mount(), I)
    return PrimitiveScene(prims, actors or {}, rig)


def test_empty_scene_is_sky():
    ps = scene([])
    obs = raycast_camera(ps, I, K, 0)
    assert obs["sky_mask"].all() and not obs["fg_mask"].any()
    np.testing.assert_allclose(obs["color"][5, 5], ps.sky_color)
    assert not raycast_lidar(ps, I, LidarSpec.uniform(), 0).valid.any()


def test_plane_depth_constant():
    ps = scene([Plane([0, 0, 10], [0, 0, 1], (50, 50), [0.5, 0.5, 0.5])])
    obs = raycast_camera(ps, I, K, 0)
    np.testing.assert_allclose(obs["depth"], 10.0, rtol=1e-12)
    assert obs["fg_mask"].all()


def test_sphere_silhouette_radius():
    ps = scene([Sphere([0, 0, 10], 1.0, [1, 1, 1])])
    Kb = CameraIntrinsics(100, 100, 100, 100, 200, 200)
    obs = raycast_camera(ps, I, Kb, 0)
    want = 100 * 1 / math.sqrt(10**2 - 1)
    area = obs["fg_mask"].sum()
    assert math.sqrt(area / math.pi) == pytest.approx(want, rel=0.02)


def test_supersampled_edge_pixel_mixes_colors():
    # the plane's edge runs through the middle of column 40
    plane = Plane([0, 0, 10], [0, 0, 1], (0.85, 50), [0.8, 0.2, 0.1])
    ps = scene([plane])
    ps.camera_supersample = 4
    obs = raycast_camera(ps, I, K, 0)
    inside = obs["color"][32, 39]
    np.testing.assert_allclose(obs["color"][32, 40], 0.5 * (inside + ps.sky_color), rtol=1e-12)
    np.testing.assert_allclose(obs["color"][32, 41], ps.sky_color)
    assert obs["fg_mask"][32, 39] and not obs["fg_mask"][32, 40]
    assert obs["sky_mask"][32, 41] and not obs["sky_mask"][32, 40]


def test_supersample_must_be_positive():
    with pytest.raises(ValueError):
        PrimitiveScene([], {}, scene([]).rig, camera_supersample=0)


def test_lidar_plane_closed_form():
    spec = LidarSpec(np.deg2rad([-1.0, 0.0, 1.0]), 360, 0.5, 250)
    ps = scene([Plane([15, 0, 0], [1, 0, 0], (100, 100), [1, 1, 1])], lidar=spec)
    ri = raycast_lidar(ps, I, spec, 0)
    th = spec.azimuth_centers()
    front = np.cos(th) > 0.3
    np.testing.assert_allclose(ri.ranges[1].numpy()[front], 15 / np.cos(th[front]), rtol=1e-12)


def test_lidar_sphere_inside_min_range():
    spec = LidarSpec.uniform(min_range=2.0)
    ps = scene([Sphere([0.5, 0, 0], 0.5, [1, 1, 1])], lidar=spec)
    assert not raycast_lidar(ps, I, spec, 0).valid.any()


def test_lidar_roundtrip_onto_plane():
    spec = LidarSpec.uniform()
    ps = scene([Plane([0, 0, -1.5], [0, 0, 1], (30, 30), [1, 1, 1])], lidar=spec)
    ri = raycast_lidar(ps, I, spec, 0)
    pts = range_to_pointcloud(ri, spec, math.inf)
    assert len(pts) == int(ri.valid.sum()) > 0
    np.testing.assert_allclose(pts[:, 2], -1.5, atol=1e-6)


def test_box_and_actor_motion():
    poses = {0: SE3Pose.translation_only([10, 0, 0]), 1: SE3Pose.translation_only([10, 3, 0])}
    car = Box([0, 0, 0], [2, 2, 2], [1, 0, 0], actor="car")
    ps = scene([car], {"car": ActorSpec(np.array([2.2, 2.2, 2.2]), poses)}, ego=[I, I])
    spec = ps.rig.lidar_spec
    r0 = raycast_lidar(ps, I, spec, 0)
    r1 = raycast_lidar(ps, I, spec, 1)
    assert r0.valid.any() and r1.valid.any()
    assert float(r0.ranges[r0.valid].min()) == pytest.approx(9.0, abs=0.01)
    th = spec.azimuth_centers()
    s0 = np.sin(th[np.nonzero(r0.valid.numpy())[1]]).mean()
    s1 = np.sin(th[np.nonzero(r1.valid.numpy())[1]]).mean()
    assert abs(s0) < 1e-9 and s1 > 0.2  # moving left (+y) means positive azimuth
    obs = raycast_camera(ps, camera_mount().inverse(), K, 0)
    assert obs["box_mask"][obs["fg_mask"]].all()


def test_lidar_offsets_move_only_lidar_view():
    poses = {0: SE3Pose.translation_only([10, 0, 0])}
    car = Box([0, 0, 0], [2, 2, 2], [1, 0, 0], actor="car")
    ps = scene([car], {"car": ActorSpec(np.array([2, 2, 2]), poses)})
    W = camera_mount().inverse()
    cam0 = raycast_camera(ps, W, K, 0)["fg_mask"]
    lid0 = raycast_lidar(ps, I, ps.rig.lidar_spec, 0).valid.numpy()
    ps.lidar_offsets["car"] = SE3Pose.translation_only([0, 0.5, 0])
    assert np.array_equal(raycast_camera(ps, W, K, 0)["fg_mask"], cam0)
    assert not np.array_equal(raycast_lidar(ps, I, ps.rig.lidar_spec, 0).valid.numpy(), lid0)


def test_init_counts_and_frames():
    sph = Sphere([0, 0, 0], 1.0, [0.5, 0.5, 0.5])
    s = init_splats(scene([sph]), 25.0)
    assert abs(len(s.background) - 4 * math.pi * 25) <= 0.1 * 4 * math.pi * 25
    box = Box([0, 0, 0], [2, 1, 1], [1, 0, 0], actor="car")
    poses = {0: SE3Pose.from_rotvec([0, 0, 0.5], [5, 5, 0])}
    s = init_splats(scene([box], {"car": ActorSpec(np.array([2.2, 1.2, 1.2]), poses)}), 20.0)
    m = s.actor("car").model
    assert len(m) > 0 and len(s.background) == 0
    assert np.all(np.abs(m.means.numpy()) <= np.array([1.1, 0.6, 0.6]) + 1e-9)
    with pytest.raises(ValueError):
        init_splats(scene([]), 10.0)
    with pytest.raises(ValueError):
        init_splats(scene([sph]), 0.0)


def test_init_colors_match_shading():
    ps = scene([Plane([0, 0, 10], [0, 0, -1], (1, 1), [0.8, 0.2, 0.4])])
    s = init_splats(ps, 4.0)
    from splatlidar.core import sh_to_color

    want = ps.shade(np.array([0.8, 0.2, 0.4]), np.array([[0.0, 0.0, -1.0]]))[0]
    np.testing.assert_allclose(sh_to_color(s.background.sh[0].numpy(), [0, 0, 1]), want, atol=1e-12)


def test_raycast_deterministic_and_desk_config():
    cfg = desk_scene_config(frames=6)
    ps = scene_from_config(cfg)
    a, b = observe(ps, [3]), observe(scene_from_config(cfg), [3])
    assert np.array_equal(a[0].color, b[0].color)
    assert np.array_equal(a[0].ranges.ranges.numpy(), b[0].ranges.ranges.numpy())
    assert holdout_frames(cfg) == [2]
    assert holdout_frames(desk_scene_config()) == [2, 7, 12, 17]
    assert a[0].fg_mask.any() and a[0].sky_mask.any() and a[0].box_mask.any()


def test_primitive_validation():
    with pytest.raises(ValueError):
        Sphere([0, 0, 0], 0.0, [1, 1, 1])
    with pytest.raises(ValueError):
        Plane([0, 0, 0], [0, 0, 1], (0, 1), [1, 1, 1])
    with pytest.raises(ValueError):
        Box([0, 0, 0], [1, -1, 1], [1, 1, 1])
    with pytest.raises((KeyError, ValueError)):
        scene_from_config({**desk_scene_config(), "primitives": [{"type": "torus"}]})
