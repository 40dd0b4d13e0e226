import math
import os
import sys

import numpy as np
import pytest

# Ensure src is in path
sys.path.append(os.path.abspath(os.path.dirname(__file__)))

import matplotlib.pyplot as plt  # noqa: E402

from src.exceptions import FrameMismatch, MissingNormals, NotARigidTransform, ShapeMismatch, ZeroRange  # noqa: E402
from src.layer1.class_map import default_class_map  # noqa: E402
from src.layer1.scan_io import PointCloud, SensorId  # noqa: E402
from src.layer1.scene_generator import Box, SceneSpec, Sphere, raycast_sensor, synth_scene  # noqa: E402
from src.layer1.sensor_rig import SensorConfig, default_rig  # noqa: E402
from src.layer2.geometry import RigidTransform, apply, compose, fuse, surface_normals  # noqa: E402
from src.layer2.projection import (Frame, ProjectionModel, destagger, project, spherical_coords,  # noqa: E402
                                   spherical_coords_array, unproject)
from src.layer2.render import render_png, render_stack  # noqa: E402

SMALL_SCENE = SceneSpec(curbs=1, lane_stripes=2, buildings=1, objects=2, persons=1, forklifts=1,
                        cars=1, vegetation=1)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _random_transform(rng):
    return RigidTransform(_random_rotation(rng), rng.uniform(-5, 5, size=3))


def _round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _oracle_pixels(xyz, model):
    """Per-point loop: nearest return per pixel, lowest index on ties."""
    best, kept = {}, 0
    for i, p in enumerate(xyz):
        r = math.sqrt(float(p[0]) ** 2 + float(p[1]) ** 2 + float(p[2]) ** 2)
        if r == 0.0:
            continue
        phi = math.atan2(p[1], p[0])
        theta = math.asin(p[2] / r)
        u = _round_half_away(phi / model.delta_phi + model.cols / 2.0) % model.cols
        v = _round_half_away(-theta / model.delta_theta + model.c_theta)
        if not (0 <= v < model.rows) or theta > model.fov_up or theta < model.fov_down:
            continue
        kept += 1
        if (v, u) not in best or r < best[(v, u)][0]:
            best[(v, u)] = (r, i)
    return best, kept


def _vehicle_image(cloud, sensor):
    return surface_normals(apply(sensor.extrinsic, project(cloud, sensor.model)))


# --- projection ---

def test_projection_constants():
    model = default_rig().front.model
    assert model.c_phi == 128.0
    assert model.c_theta == pytest.approx(15.5)
    assert model.delta_theta == pytest.approx(math.radians(90.0) / 32)
    assert model.delta_phi == pytest.approx(2 * math.pi / 256)


def test_spherical_coords_of_origin_raises():
    with pytest.raises(ZeroRange):
        spherical_coords((0.0, 0.0, 0.0))
    phi, theta, r = spherical_coords((0.0, 2.0, 0.0))
    assert (phi, theta, r) == pytest.approx((math.pi / 2, 0.0, 2.0))


def test_spherical_coords_of_axis_points():
    assert spherical_coords((1.0, 0.0, 0.0)) == pytest.approx((0.0, 0.0, 1.0))
    assert spherical_coords((0.0, 1.0, 1.0)) == pytest.approx((math.pi / 2, math.pi / 4, math.sqrt(2.0)))


def test_spherical_coords_agree_with_extended_precision():
    rng = np.random.default_rng(21)
    xyz = rng.uniform(-50.0, 50.0, size=(1000, 3))
    ext = xyz.astype(np.longdouble)
    r_ref = np.sqrt(np.sum(ext * ext, axis=1))
    phi_ref = np.arctan2(ext[:, 1], ext[:, 0])
    theta_ref = np.arcsin(ext[:, 2] / r_ref)
    got = np.array([spherical_coords(p) for p in xyz])
    np.testing.assert_allclose(got[:, 0], phi_ref.astype(np.float64), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(got[:, 1], theta_ref.astype(np.float64), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(got[:, 2], r_ref.astype(np.float64), rtol=1e-12)
    vec = np.stack(spherical_coords_array(xyz), axis=1)
    np.testing.assert_allclose(vec, got, rtol=1e-12, atol=1e-12)



@pytest.mark.parametrize("seed", range(50))
def test_full_grid_round_trip(seed):
    scene = synth_scene(seed, SMALL_SCENE)
    rig = default_rig()
    for sid in SensorId:
        cloud = scene.clouds[sid]
        img = project(cloud, rig[sid].model)
        assert img.valid.all()
        assert img.stats["collisions"] == 0 and img.stats["out_of_fov"] == 0
        # Every ray lands on its own pixel
        np.testing.assert_array_equal(img.point_index.reshape(-1), np.arange(32 * 256))
        back = unproject(img)
        np.testing.assert_allclose(back.xyz, cloud.xyz, rtol=1e-5)
        np.testing.assert_array_equal(back.labels, cloud.labels)
        np.testing.assert_allclose(img.range.reshape(-1), np.linalg.norm(cloud.xyz, axis=1), rtol=1e-5)
        assert img.consistency_errors() == []


@pytest.mark.parametrize("seed", range(10))
def test_collisions_keep_the_nearest_return(seed):
    rng = np.random.default_rng([3, seed])
    n = 2000
    phi = rng.uniform(-math.pi, math.pi, n)
    theta = rng.uniform(math.radians(-60), math.radians(60), n)
    r = rng.uniform(1.0, 30.0, n)
    xyz = np.stack([r * np.cos(theta) * np.cos(phi), r * np.cos(theta) * np.sin(phi), r * np.sin(theta)], axis=1)
    # Exact duplicates tie on range; the lower index must win
    xyz = np.concatenate([xyz, xyz[:50], np.zeros((1, 3))])
    points = np.concatenate([xyz, rng.uniform(0, 1, size=(len(xyz), 1))], axis=1)
    cloud = PointCloud(points=points, labels=np.arange(len(xyz)) % 9)

    model = ProjectionModel.from_degrees(8, 16, 45.0, -45.0)
    img = project(cloud, model)
    best, kept = _oracle_pixels(cloud.xyz, model)

    assert int(img.valid.sum()) == len(best)
    for (v, u), (r_best, i) in best.items():
        assert img.point_index[v, u] == i
        assert img.range[v, u] == pytest.approx(r_best)
    assert img.stats["zero_range"] == 1
    assert img.stats["out_of_fov"] == len(xyz) - 1 - kept
    assert img.stats["collisions"] == kept - len(best)
    assert img.consistency_errors() == []


def test_consistency_errors_flag_stray_values():
    img = project(synth_scene(0, SceneSpec.plane_only()).clouds[SensorId.FRONT], default_rig().front.model)
    assert not img.valid.all()
    v, u = np.argwhere(~img.valid)[0]
    img.range[v, u] = 3.0
    assert any("range" in e for e in img.consistency_errors())


def test_single_point_lands_in_the_top_row_center():
    model = ProjectionModel.from_degrees(32, 256, 45.0, -45.0)
    theta = model.fov_up - model.delta_theta / 2
    cloud = PointCloud(points=np.array([[5.0 * math.cos(theta), 0.0, 5.0 * math.sin(theta), 0.4]]))
    img = project(cloud, model)
    expected = np.zeros((32, 256), dtype=bool)
    expected[0, int(model.c_phi)] = True
    np.testing.assert_array_equal(img.valid, expected)
    assert img.point_index[0, int(model.c_phi)] == 0
    assert img.range[0, int(model.c_phi)] == pytest.approx(5.0)


def test_azimuth_increases_along_a_row():
    model = default_rig().front.model
    img = project(synth_scene(6, SMALL_SCENE).clouds[SensorId.FRONT], model)
    assert img.valid.all()
    for v in (0, 13, 31):
        phi = np.unwrap(np.arctan2(img.xyz[v, :, 1], img.xyz[v, :, 0]))
        steps = np.diff(phi)
        assert np.all(steps > 0)
        np.testing.assert_allclose(steps, model.delta_phi, atol=1e-4)



def test_destagger_round_trip_and_direction():
    scene = synth_scene(4, SMALL_SCENE)
    img = project(scene.clouds[SensorId.DOWN], default_rig().down.model)
    shifts = np.random.default_rng(0).integers(-300, 300, size=32)
    shifted = destagger(img, shifts)
    v, u = 5, 17
    assert shifted.range[v, (u + shifts[v]) % 256] == img.range[v, u]
    back = destagger(shifted, -shifts)
    for plane in ("xyz", "range", "reflectivity", "labels", "valid", "point_index"):
        np.testing.assert_array_equal(getattr(back, plane), getattr(img, plane))
    with pytest.raises(ShapeMismatch):
        destagger(img, shifts[:-1])


def test_destagger_by_whole_turns_is_identity():
    img = project(synth_scene(4, SMALL_SCENE).clouds[SensorId.DOWN], default_rig().down.model)
    rows, cols = img.shape
    for shifts in (np.full(rows, cols), np.arange(rows) % 3 * cols - cols):
        out = destagger(img, shifts)
        for plane in ("xyz", "range", "reflectivity", "labels", "valid", "point_index"):
            np.testing.assert_array_equal(getattr(out, plane), getattr(img, plane))



# --- rigid transforms ---

def test_rigid_transform_matches_homogeneous_matrix():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        tf = _random_transform(rng)
        pts = rng.uniform(-50, 50, size=(20, 3))
        homog = np.concatenate([pts, np.ones((20, 1))], axis=1) @ tf.as_matrix().T
        np.testing.assert_allclose(tf.apply_points(pts), homog[:, :3], atol=1e-9)


def test_inverse_and_compose():
    rng = np.random.default_rng(8)
    a, b = _random_transform(rng), _random_transform(rng)
    np.testing.assert_allclose(compose(a, a.inverse()).as_matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose((a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)
    pts = rng.uniform(-5, 5, size=(10, 3))
    np.testing.assert_allclose((a @ b).apply_points(pts), a.apply_points(b.apply_points(pts)), atol=1e-9)


def test_positive_pitch_points_x_downward():
    tf = RigidTransform.from_euler(0.0, math.pi / 2, 0.0)
    np.testing.assert_allclose(tf.apply_points(np.array([[1.0, 0.0, 0.0]]))[0], [0.0, 0.0, -1.0], atol=1e-12)


def test_from_matrix_repairs_small_drift_and_rejects_large():
    tf = _random_transform(np.random.default_rng(9))
    m = tf.as_matrix()
    m[0, 1] += 1e-5
    repaired = RigidTransform.from_matrix(m)
    np.testing.assert_allclose(repaired.rotation.T @ repaired.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(repaired.rotation, tf.rotation, atol=1e-4)
    m[0, 1] += 0.05
    with pytest.raises(NotARigidTransform):
        RigidTransform.from_matrix(m)
    with pytest.raises(NotARigidTransform):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_apply_moves_viewpoint_and_refuses_a_second_application():
    sensor = default_rig().down
    img = project(synth_scene(0, SMALL_SCENE).clouds[SensorId.DOWN], sensor.model)
    moved = apply(sensor.extrinsic, img)
    assert moved.frame_tag == Frame.VEHICLE
    np.testing.assert_allclose(moved.viewpoint, sensor.extrinsic.translation)
    np.testing.assert_array_equal(moved.range, img.range)
    with pytest.raises(FrameMismatch):
        apply(sensor.extrinsic, moved)


# --- surface normals ---

def test_normals_require_vehicle_frame():
    img = project(synth_scene(0, SMALL_SCENE).clouds[SensorId.FRONT], default_rig().front.model)
    with pytest.raises(FrameMismatch):
        surface_normals(img)


@pytest.mark.parametrize("sid", list(SensorId))
def test_flat_ground_normals_point_up(sid):
    scene = synth_scene(0, SceneSpec.plane_only())
    img = _vehicle_image(scene.clouds[sid], default_rig()[sid])
    defined = img.normals_valid
    assert defined[:, -1].any(), "seam column should have defined normals"
    assert not defined[-1].any()
    np.testing.assert_allclose(img.normals[defined], np.tile([0.0, 0.0, 1.0], (int(defined.sum()), 1)), atol=1e-4)
    np.testing.assert_allclose(np.linalg.norm(img.normals[defined], axis=1), 1.0, atol=1e-6)
    assert not np.any(img.normals_valid & ~img.valid)


def test_wall_normals_face_the_sensor():
    sensor = SensorConfig(SensorId.FRONT, RigidTransform.identity())
    cloud, _ = raycast_sensor(sensor, [Box((10.0, -50.0, -50.0), (10.5, 50.0, 50.0), "building")], default_class_map())
    img = _vehicle_image(cloud, sensor)
    check = img.normals_valid & (np.abs(img.xyz[..., 1]) < 17.0)
    assert check.sum() > 100
    np.testing.assert_allclose(img.normals[check], np.tile([-1.0, 0.0, 0.0], (int(check.sum()), 1)), atol=1e-4)


def test_sphere_normals_seen_from_inside():
    sensor = SensorConfig(SensorId.FRONT, RigidTransform.identity())
    cloud, _ = raycast_sensor(sensor, [Sphere((0.0, 0.0, 0.0), 5.0)], default_class_map())
    img = _vehicle_image(cloud, sensor)
    defined = img.normals_valid
    assert defined.sum() == 31 * 256
    p = img.xyz[defined]
    expected = -p / np.linalg.norm(p, axis=1, keepdims=True)
    cos = np.clip(np.sum(img.normals[defined] * expected, axis=1), -1.0, 1.0)
    within = np.degrees(np.arccos(cos)) < 2.0
    assert within.mean() >= 0.99


def test_normals_commute_with_rotation():
    rng = np.random.default_rng(12)
    sensor = default_rig().front
    img = project(synth_scene(6, SMALL_SCENE).clouds[SensorId.FRONT], sensor.model)
    tf = _random_transform(rng)
    base = surface_normals(apply(RigidTransform.identity(), img))
    moved = surface_normals(apply(tf, img))
    assert np.mean(base.normals_valid == moved.normals_valid) >= 0.999
    both = base.normals_valid & moved.normals_valid
    close = np.all(np.abs(base.normals[both] @ tf.rotation.T - moved.normals[both]) < 1e-5, axis=1)
    assert close.mean() >= 0.999


# --- fusion and rendering ---

def test_fuse_joins_vehicle_frame_points():
    scene = synth_scene(1, SMALL_SCENE)
    rig = default_rig()
    images = [_vehicle_image(scene.clouds[sid], rig[sid]) for sid in SensorId]
    fused = fuse(images)
    assert len(fused) == sum(int(img.valid.sum()) for img in images)
    assert fused.stats == {"front": 32 * 256, "down": 32 * 256}
    assert fused.normals.shape == (len(fused), 3)
    # Both sensors see the floor at z = 0 in the vehicle frame
    ground = fused.labels == default_class_map().id_of("driveable ground")
    assert np.all(np.abs(fused.points[ground, 2]) < 1e-4)
    with pytest.raises(FrameMismatch):
        fuse([project(scene.clouds[SensorId.FRONT], rig.front.model)])
    with pytest.raises(ShapeMismatch):
        fuse([])


def test_render_png_is_one_pixel_per_cell(tmp_path):
    sensor = default_rig().front
    img = project(synth_scene(0, SMALL_SCENE).clouds[SensorId.FRONT], sensor.model)
    path = render_png(img, "reflectivity", str(tmp_path / "refl.png"))
    assert plt.imread(path).shape[:2] == (32, 256)
    with pytest.raises(MissingNormals):
        render_png(img, "normals", str(tmp_path / "n.png"))


def test_render_stack_writes_figure(tmp_path):
    sensor = default_rig().front
    img = _vehicle_image(synth_scene(0, SMALL_SCENE).clouds[SensorId.FRONT], sensor)
    path = render_stack(img, str(tmp_path / "out" / "stack.png"), prediction=img.labels)
    assert os.path.getsize(path) > 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
