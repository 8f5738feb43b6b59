import numpy as np
import pytest

from mossm.aggregation import aggregate_scans
from mossm.errors import UnknownSuite
from mossm.kitti_io import MOVING, STATIC, read_calib, read_labels, read_poses, read_scan, remap_mos_labels, scan_path, label_path
from mossm.synth import SENSOR_HEIGHT, Box, SceneSpec, generate_sequence, scene_suite, write_sequence


def _static_world(ego=(0.8, 0.3, 0.0), noise=0.01):
    return SceneSpec(static_boxes=(Box((8, 3, -1.0), (4, 2, 1.5)), Box((-6, -9, -1.0), (4, 2, 1.5))),
                     ego_velocity=ego, noise=noise, seed=3)


def test_zero_velocity_noise_free_is_identical():
    seq = generate_sequence(_static_world(ego=(0, 0, 0), noise=0.0), 4)
    for scan in seq.scans[1:]:
        np.testing.assert_array_equal(scan.points, seq.scans[0].points)


def test_moving_box_displacement():
    spec = SceneSpec(moving_boxes=(Box((10, 0, -1.0), (4, 2, 1.5), (1.0, 0, 0)),), noise=0.0, range_ref=None)
    seq = generate_sequence(spec, 3)
    for k in (1, 2):
        a = seq.scans[0].xyz[seq.labels[0] == MOVING]
        b = seq.scans[k].xyz[seq.labels[k] == MOVING]
        np.testing.assert_allclose(b - a, np.tile([k, 0.0, 0.0], (len(a), 1)), atol=1e-5)
    assert set(np.unique(seq.labels[0])) == {STATIC, MOVING}


def test_ego_compensation_spread():
    sigma = 0.01
    F = 4
    seq = generate_sequence(_static_world(noise=sigma), F)
    scans, poses, _ = seq.window(F - 1, F)
    cloud = aggregate_scans(scans, poses)
    n = cloud.counts_per_scan[0]
    copies = cloud.xyz.reshape(F, n, 3)
    spread = copies.std(axis=0, ddof=1)
    assert spread.max() <= 3 * sigma
    raw = np.stack([s.xyz for s in scans])
    assert raw.std(axis=0, ddof=1).max() > 10 * sigma


def test_ground_height_and_determinism():
    a = generate_sequence(scene_suite("easy", 1, seed=4)[0], 2)
    b = generate_sequence(scene_suite("easy", 1, seed=4)[0], 2)
    for x, y in zip(a.scans, b.scans):
        np.testing.assert_array_equal(x.points, y.points)
    assert a.scans[0].xyz[:, 2].min() > -SENSOR_HEIGHT - 0.1


def test_suites():
    easy = scene_suite("easy", 3)
    assert len(easy) == 3 and len({s.seed for s in easy}) == 3
    assert all(len(s.moving_boxes) == 1 and len(s.static_boxes) == 2 for s in easy)
    crowded = scene_suite("crowded")[0]
    assert len(crowded.moving_boxes) == 6
    ranges = scene_suite("ranges")[0]
    r = sorted(np.hypot(b.center[0], b.center[1]) for b in ranges.moving_boxes)
    assert 8 <= r[0] <= 12 and 28 <= r[1] <= 32 and 58 <= r[2] <= 62
    assert scene_suite("easy", 2, seed=1) != scene_suite("easy", 2, seed=2)
    with pytest.raises(UnknownSuite):
        scene_suite("nope")


def test_window_order():
    seq = generate_sequence(_static_world(), 5)
    scans, poses, _ = seq.window(4, 3)
    assert scans[0] is seq.scans[4] and scans[2] is seq.scans[2]
    with pytest.raises(ValueError):
        seq.window(1, 3)


def test_bad_specs():
    with pytest.raises(ValueError):
        Box((0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        Box((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        SceneSpec(noise=-1)
    with pytest.raises(ValueError):
        generate_sequence(SceneSpec(), 0)


def test_write_sequence_round_trip(tmp_path):
    seq = generate_sequence(scene_suite("easy")[0], 2)
    root = write_sequence(seq, tmp_path / "00")
    calib = read_calib(root / "calib.txt")
    poses = read_poses(root / "poses.txt", calib)
    for k in range(2):
        np.testing.assert_array_equal(read_scan(scan_path(root, k)).points.astype(np.float32),
                                      seq.scans[k].points.astype(np.float32))
        np.testing.assert_array_equal(remap_mos_labels(read_labels(label_path(root, k))), seq.labels[k])
        np.testing.assert_allclose(poses[k], seq.poses[k], atol=1e-12)
