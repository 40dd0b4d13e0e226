import math
import os
import sys

import numpy as np
import pytest
import yaml

# Ensure src is in path
sys.path.append(os.path.abspath(os.path.dirname(__file__)))

from src.exceptions import (EmptyScan, InvalidConfig, InvalidSpec, LengthMismatch, MalformedFile,
                            MissingSensor, NotARigidTransform)
from src.layer1.class_map import class_map_from_config, class_statistics, default_class_map, load_class_map
from src.layer1.scan_io import (PointCloud, SensorId, load_labeled_scan, load_labels, load_manifest,
                                load_scan, write_labels, write_scan)
from src.layer1.scene_generator import (SceneSpec, build_layout, load_scene_spec, membership_labels,
                                        synth_scene, write_dataset)
from src.layer1.sensor_rig import SensorConfig, default_rig, load_rig, save_rig
from src.layer2.geometry import RigidTransform

CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config")

SMALL_SCENE = SceneSpec(curbs=1, lane_stripes=2, buildings=1, objects=2, persons=1, forklifts=1,
                        cars=1, vegetation=1)


def _random_cloud(n=200, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.concatenate([rng.uniform(-20, 20, size=(n, 3)), rng.uniform(0, 1, size=(n, 1))], axis=1)
    return PointCloud(points=pts.astype(np.float32).astype(np.float64), labels=rng.integers(0, 9, size=n))


# --- class map ---

def test_config_class_map_matches_builtin_default():
    cm = load_class_map(os.path.join(CONFIG, "config.yaml"))
    ref = default_class_map()
    assert cm.names() == ref.names()
    assert cm.num_classes == 9
    assert cm.ignore_id == 255
    np.testing.assert_array_equal(cm.lookup_table(), ref.lookup_table())


def test_lookup_table_folds_learning_map_and_ignores_unknown():
    cm = default_class_map()
    table = cm.lookup_table()
    assert table[40] == cm.id_of("driveable ground")
    assert table[44] == cm.id_of("driveable ground")   # parking
    assert table[48] == cm.id_of("other ground")       # sidewalk
    assert table[0] == cm.ignore_id
    assert table[12345] == cm.ignore_id


def test_to_raw_inverts_class_ids():
    cm = default_class_map()
    ids = np.arange(cm.num_classes)
    np.testing.assert_array_equal(cm.lookup_table()[cm.to_raw(ids)], ids)
    assert cm.to_raw(np.array([cm.ignore_id]))[0] == 0


def test_class_statistics_skips_ignore():
    cm = default_class_map()
    counts = class_statistics([np.array([0, 0, 3, 255]), np.array([[8, 255], [0, 3]])], cm)
    assert counts.tolist() == [3, 0, 0, 2, 0, 0, 0, 0, 1]


def test_config_ignore_raw_ids_are_read_and_checked():
    with open(os.path.join(CONFIG, "config.yaml"), 'r') as f:
        config = yaml.safe_load(f)
    assert class_map_from_config(config).ignore_raw_ids == (0, 1)
    config["dataset"]["ignore_raw_ids"] = [0, 44]
    with pytest.raises(InvalidConfig):
        class_map_from_config(config)



# --- scans and labels ---

def test_scan_round_trip(tmp_path):
    cloud = _random_cloud()
    path = str(tmp_path / "000000.bin")
    write_scan(path, cloud)
    assert os.path.getsize(path) == 16 * len(cloud)
    loaded = load_scan(path, SensorId.DOWN)
    np.testing.assert_array_equal(loaded.points, cloud.points)
    assert loaded.sensor_id == SensorId.DOWN
    assert loaded.stats["dropped_non_finite"] == 0


def test_scan_drops_non_finite_and_clamps_reflectivity(tmp_path):
    raw = np.array([[1, 2, 3, 0.5], [np.nan, 0, 0, 0.1], [4, 5, 6, 1.7], [1, 1, np.inf, 0.2]], dtype=np.float32)
    path = str(tmp_path / "bad.bin")
    raw.tofile(path)
    cloud = load_scan(path)
    assert len(cloud) == 2
    assert cloud.stats["dropped_non_finite"] == 2
    assert cloud.stats["clamped_reflectivity"] == 1
    assert cloud.reflectivity.max() == 1.0


def test_scan_with_partial_record_is_malformed(tmp_path):
    path = str(tmp_path / "short.bin")
    np.zeros(7, dtype=np.float32).tofile(path)
    with pytest.raises(MalformedFile):
        load_scan(path)


def test_empty_scan_raises(tmp_path):
    path = str(tmp_path / "empty.bin")
    open(path, "wb").close()
    with pytest.raises(EmptyScan):
        load_scan(path)


def test_labels_round_trip_and_instance_bits(tmp_path):
    cm = default_class_map()
    ids = np.array([0, 4, 6, 8, 255, 2], dtype=np.int32)
    path = str(tmp_path / "000000.label")
    write_labels(path, ids, cm, instances=np.array([0, 7, 0, 3, 0, 65535]))
    np.testing.assert_array_equal(load_labels(path, len(ids), cm), ids)


def test_label_count_mismatch(tmp_path):
    cm = default_class_map()
    path = str(tmp_path / "000000.label")
    write_labels(path, np.zeros(5, dtype=np.int32), cm)
    with pytest.raises(LengthMismatch):
        load_labels(path, 6, cm)


def test_labeled_scan_discards_labels_of_dropped_points(tmp_path):
    cm = default_class_map()
    raw = np.array([[1, 0, 0, 0.1], [np.nan, 0, 0, 0.2], [0, 2, 0, 0.3]], dtype=np.float32)
    scan = str(tmp_path / "s.bin")
    raw.tofile(scan)
    label = str(tmp_path / "s.label")
    write_labels(label, np.array([0, 1, 2]), cm)
    cloud = load_labeled_scan(scan, label, cm)
    assert cloud.labels.tolist() == [0, 2]


def test_point_cloud_rejects_label_length_mismatch():
    with pytest.raises(LengthMismatch):
        PointCloud(points=np.zeros((3, 4)), labels=np.zeros(2))


def test_labeled_scan_counts_unknown_raw_ids(tmp_path):
    cm = default_class_map()
    raw = np.array([[1, 0, 0, 0.1], [2, 0, 0, 0.2], [3, 0, 0, 0.3], [np.nan, 0, 0, 0.4],
                    [4, 0, 0, 0.5], [5, 0, 0, 0.6]], dtype=np.float32)
    scan = str(tmp_path / "s.bin")
    raw.tofile(scan)
    # 0 is unlabeled; 12345 and 777 are unknown; 999 sits on the dropped point
    words = np.array([10, 12345 | (3 << 16), 0, 999, 44 | (7 << 16), 777], dtype=np.uint32)
    label = str(tmp_path / "s.label")
    words.tofile(label)
    cloud = load_labeled_scan(scan, label, cm)
    assert cloud.labels.tolist() == [0, 255, 255, 4, 255]
    assert cloud.stats["unknown_raw_ids"] == 2


def test_labeled_scan_without_labels_reports_no_unknowns(tmp_path):
    path = str(tmp_path / "s.bin")
    write_scan(path, _random_cloud(10))
    assert "unknown_raw_ids" not in load_labeled_scan(path, None, default_class_map()).stats


@pytest.mark.parametrize("seed", range(5))
def test_label_remap_matches_bitmask_lookup(tmp_path, seed):
    cm = default_class_map()
    rng = np.random.default_rng([17, seed])
    n = 3000
    pool = np.array([c.raw_id for c in cm.classes] + list(cm.learning_map) + [0, 1, 2, 65535])
    low = np.where(rng.random(n) < 0.7, rng.choice(pool, n), rng.integers(0, 1 << 16, n))
    words = (low.astype(np.uint32) | (rng.integers(0, 1 << 16, n).astype(np.uint32) << 16))
    path = str(tmp_path / "r.label")
    words.astype("<u4").tofile(path)

    by_raw = {c.raw_id: c.id for c in cm.classes}
    by_raw.update({k: v for k, v in cm.learning_map.items() if k not in by_raw})
    expected = [by_raw.get(int(w) & 0xFFFF, cm.ignore_id) for w in words]
    assert load_labels(path, n, cm).tolist() == expected



# --- sensor rig ---

def test_rig_file_matches_default_rig():
    rig = load_rig(os.path.join(CONFIG, "rig.yaml"))
    ref = default_rig()
    for sid in SensorId:
        np.testing.assert_allclose(rig[sid].extrinsic.as_matrix(), ref[sid].extrinsic.as_matrix(), atol=1e-9)
        assert (rig[sid].rows, rig[sid].cols) == (32, 256)
        assert rig[sid].destagger_shifts == (0,) * 32


def test_down_sensor_looks_below_horizontal():
    down = default_rig().down
    forward = down.extrinsic.rotation @ np.array([1.0, 0.0, 0.0])
    assert forward[2] == pytest.approx(-math.sin(math.radians(30.0)))


def test_rig_round_trip(tmp_path):
    path = str(tmp_path / "rig.yaml")
    save_rig(default_rig(16, 128), path)
    rig = load_rig(path)
    assert rig.front.rows == 16 and rig.front.cols == 128
    np.testing.assert_allclose(rig.down.extrinsic.as_matrix(), default_rig().down.extrinsic.as_matrix(), atol=1e-12)


def test_rig_without_down_sensor(tmp_path):
    path = str(tmp_path / "rig.yaml")
    with open(path, "w") as f:
        f.write("sensors:\n  front:\n    extrinsic: [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]\n")
    with pytest.raises(MissingSensor):
        load_rig(path)


def test_rig_with_sheared_extrinsic(tmp_path):
    path = str(tmp_path / "rig.yaml")
    bad = "[[1,0.5,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]"
    with open(path, "w") as f:
        f.write(f"sensors:\n  front:\n    extrinsic: {bad}\n  down:\n    extrinsic: {bad}\n")
    with pytest.raises(NotARigidTransform):
        load_rig(path)


def test_destagger_shift_count_must_match_rows():
    with pytest.raises(InvalidConfig):
        SensorConfig(SensorId.FRONT, RigidTransform.identity(), rows=4, destagger_shifts=(1, 2))


# --- synthetic scenes ---

def test_scene_spec_file_loads():
    spec = load_scene_spec(os.path.join(CONFIG, "scene.yaml"))
    assert spec == SceneSpec()


def test_scene_spec_rejects_negative_counts():
    with pytest.raises(InvalidSpec):
        SceneSpec(persons=-1)


def test_synthetic_scene_is_deterministic():
    a = synth_scene(7, SMALL_SCENE)
    b = synth_scene(7, SMALL_SCENE)
    c = synth_scene(8, SMALL_SCENE)
    for sid in SensorId:
        np.testing.assert_array_equal(a.clouds[sid].points, b.clouds[sid].points)
        np.testing.assert_array_equal(a.labels(sid), b.labels(sid))
    assert not np.array_equal(a.clouds[SensorId.FRONT].points, c.clouds[SensorId.FRONT].points)


def test_enclosed_scene_returns_every_ray():
    scene = synth_scene(0, SMALL_SCENE)
    for sid in SensorId:
        assert len(scene.clouds[sid]) == 32 * 256
        assert scene.clouds[sid].stats["hits"] == scene.clouds[sid].stats["rays"]


def test_obstacles_keep_clear_of_the_vehicle():
    layout = build_layout(3, SceneSpec())
    for prim in layout.primitives:
        if type(prim).__name__ == "Box" and prim.class_name != "other ground":
            lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
            dx = max(lo[0] - 0.9, 0.0, 0.9 - hi[0])
            dy = max(lo[1], 0.0, -hi[1])
            assert math.hypot(dx, dy) >= SceneSpec().clear_radius - 1e-9


def test_labels_agree_with_surface_membership_on_a_plane():
    spec = SceneSpec.plane_only()
    scene = synth_scene(0, spec)
    cm = default_class_map()
    for sid in SensorId:
        oracle = membership_labels(scene.vehicle_points[sid], scene.layout.primitives, cm)
        np.testing.assert_array_equal(oracle, scene.labels(sid))
        assert np.all(scene.labels(sid) == cm.id_of("driveable ground"))


def test_labels_agree_with_surface_membership_in_a_cluttered_yard():
    scene = synth_scene(11, SceneSpec())
    cm = default_class_map()
    for sid in SensorId:
        oracle = membership_labels(scene.vehicle_points[sid], scene.layout.primitives, cm)
        agreement = np.mean(oracle == scene.labels(sid))
        assert agreement >= 0.999, f"{sid.value}: {agreement:.5f}"


def test_lane_markings_are_bright():
    scene = synth_scene(2, SceneSpec(lane_stripes=8, reflectivity_noise=0.0))
    cm = default_class_map()
    labels = np.concatenate([scene.labels(sid) for sid in SensorId])
    refl = np.concatenate([scene.clouds[sid].reflectivity for sid in SensorId])
    lane = labels == cm.id_of("lane marking")
    ground = labels == cm.id_of("driveable ground")
    assert lane.any() and ground.any()
    assert refl[lane].min() > refl[ground].max()


def test_write_dataset_layout_and_split(tmp_path):
    root = str(tmp_path / "data")
    path = write_dataset(root, SMALL_SCENE, train_scenes=2, test_scenes=1, seed=5)
    manifest = load_manifest(path)
    assert len(manifest.split("train")) == 4
    assert len(manifest.split("test")) == 2
    assert {e.sequence for e in manifest.split("test")} == {"0000"}
    assert os.path.exists(os.path.join(root, "sequences", "0001", "down", "velodyne", "000001.bin"))
    assert os.path.exists(manifest.rig_path)
    frames = manifest.frames("train")
    assert len(frames) == 2 and all(set(f) == set(SensorId) for f in frames)

    cm = default_class_map()
    e = manifest.split("test")[0]
    cloud = load_labeled_scan(e.scan_path, e.label_path, cm, e.sensor_id)
    scene = synth_scene(5, SMALL_SCENE)
    np.testing.assert_array_equal(cloud.labels, scene.labels(e.sensor_id))


def test_write_dataset_honours_the_test_sequence(tmp_path):
    manifest = load_manifest(write_dataset(str(tmp_path), SMALL_SCENE, train_scenes=1, test_scenes=1,
                                           seed=2, test_sequence="0007"))
    assert manifest.test_sequences == ("0007",)
    assert {e.sequence for e in manifest.split("test")} == {"0007"}
    assert {e.sequence for e in manifest.split("train")} == {"0001"}
    with pytest.raises(InvalidSpec):
        write_dataset(str(tmp_path / "clash"), SMALL_SCENE, test_sequence="0001")


def test_manifest_keeps_test_sequence_out_of_training(tmp_path):
    path = write_dataset(str(tmp_path), SMALL_SCENE, train_scenes=1, test_scenes=1, seed=2)
    with open(path, 'r') as f:
        doc = yaml.safe_load(f)
    for entry in doc["entries"]:
        if entry["sequence"] == "0000":
            entry["split"] = "train"
    with open(path, 'w') as f:
        yaml.safe_dump(doc, f, sort_keys=False)
    with pytest.raises(MalformedFile):
        load_manifest(path)



def test_missing_manifest(tmp_path):
    with pytest.raises(MalformedFile):
        load_manifest(str(tmp_path))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
