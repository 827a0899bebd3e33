import numpy as np
import pytest

from evigrid.core import PoseSE3
from evigrid.synth import (
    GROUND_LABEL,
    Box,
    Cylinder,
    SceneSpec,
    SensorModel,
    box_scene,
    drive_scene,
    footprint_mask,
    moving_box_scene,
    simulate_scan,
    simulate_sequence,
    swept_box_mask,
)

SIGMA = 0.02


def flat_scene(noise=SIGMA, seed=1):
    return SceneSpec(
        trajectory=[(0.0, PoseSE3.from_translation(0, 0, 1.8))],
        sensor=SensorModel(beams=16, azimuth_steps=90, vfov=(-89.0, -10.0), max_range=30.0, range_noise=noise, seed=seed),
    )


def test_ground_only_heights():
    sim = simulate_scan(flat_scene(), 0.0)
    assert len(sim.labels) == 16 * 90
    assert np.all(sim.labels == GROUND_LABEL)
    world = sim.pose.apply(sim.cloud.points)
    # range noise on a slanted ray moves the height by at most the range error,
    # so the Gaussian 3-sigma tail bounds the outlier fraction
    assert np.mean(np.abs(world[:, 2]) < 3 * SIGMA) > 0.99
    assert np.max(np.abs(world[:, 2])) < 5 * SIGMA


def test_box_front_face():
    scene = SceneSpec(
        boxes=[Box((10.5, 0.0, 1.0), (1.0, 4.0, 2.0), 0.8)],
        trajectory=[(0.0, PoseSE3.from_translation(1.5, 0.0, 1.0))],
        sensor=SensorModel(beams=8, azimuth_steps=36, hfov=20.0, vfov=(-5.0, 5.0), range_noise=0.01, seed=2),
    )
    sim = simulate_scan(scene, 0.0)
    on_box = sim.labels == 1
    assert on_box.sum() > 50
    np.testing.assert_allclose(sim.cloud.points[on_box, 0], 10.0 - 1.5, atol=0.05)
    np.testing.assert_allclose(sim.cloud.intensity[on_box], 0.8)


def test_deterministic():
    a = simulate_scan(box_scene(SensorModel(beams=8, azimuth_steps=60, range_noise=0.02, seed=9)), 0.0)
    b = simulate_scan(box_scene(SensorModel(beams=8, azimuth_steps=60, range_noise=0.02, seed=9)), 0.0)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = simulate_scan(box_scene(SensorModel(beams=8, azimuth_steps=60, range_noise=0.02, seed=10)), 0.0)
    assert not np.array_equal(a.cloud.points, c.cloud.points)


def _surface_residual(prim, p, t=0.0):
    if isinstance(prim, Box):
        c = prim.center_at(t)
        h = 0.5 * np.asarray(prim.size)
        q = np.abs(p - c) - h
        # on the boundary: inside all slabs, touching at least one face
        return np.maximum(np.max(q, axis=1), 0) + np.abs(np.max(q, axis=1))
    b = prim.base_at(t)
    r = np.hypot(p[:, 0] - b[0], p[:, 1] - b[1])
    side = np.abs(r - prim.radius)
    top = np.abs(p[:, 2] - (b[2] + prim.height))
    return np.minimum(side, top)


def test_noise_free_points_on_surfaces():
    pose = PoseSE3.from_rotvec([0.0, 0.05, 0.3], [0.5, -1.0, 1.6])
    scene = box_scene(SensorModel(beams=24, azimuth_steps=180, vfov=(-30.0, 10.0), max_range=40.0), pose)
    sim = simulate_scan(scene, 0.0)
    world = sim.pose.apply(sim.cloud.points)
    g = world[sim.labels == GROUND_LABEL]
    assert np.max(np.abs(g[:, 2])) < 1e-9
    for k, prim in enumerate(scene.primitives, start=1):
        p = world[sim.labels == k]
        if len(p):
            assert np.max(_surface_residual(prim, p)) < 1e-9


def test_static_sequence_poses_identical():
    sim = simulate_sequence(flat_scene(0.0), rate=5.0, duration=0.8)
    assert len(sim.gt_poses) == 5
    for p in sim.gt_poses[1:]:
        assert np.array_equal(p.matrix(), sim.gt_poses[0].matrix())
    assert [s.scan_id for s in sim.sequence.scans] == [f"{k:06d}" for k in range(5)]


def test_drive_deltas():
    scene = drive_scene(speed=1.0, duration=4.0, sensor=SensorModel(beams=4, azimuth_steps=20))
    sim = simulate_sequence(scene, rate=1.0, duration=4.0)
    assert len(sim.gt_poses) == 5
    for a, b in zip(sim.gt_poses, sim.gt_poses[1:]):
        d = a.inverse() @ b
        np.testing.assert_allclose(d.t, [1.0, 0.0, 0.0], atol=1e-12)
    rel = sim.relative_gt()
    np.testing.assert_allclose(rel[0].matrix(), np.eye(4), atol=1e-12)


def test_trajectory_span():
    scene = drive_scene(duration=2.0)
    with pytest.raises(ValueError):
        scene.pose_at(2.5)
    mid = scene.pose_at(1.0)
    np.testing.assert_allclose(mid.t, [-4.0, 0.0, 1.8])


def test_scene_json_roundtrip():
    scene = moving_box_scene()
    back = SceneSpec.from_dict(scene.to_dict())
    assert back.to_dict() == scene.to_dict()
    a = simulate_scan(scene, 0.5)
    b = simulate_scan(back, 0.5)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()


def test_moving_box_labels_and_sweep():
    scene = moving_box_scene()
    box = scene.boxes[1]
    assert box.moving and not scene.boxes[0].moving
    xs = np.arange(6.0, 10.0, 0.1) + 0.05
    ys = np.arange(-6.0, 6.0, 0.1) + 0.05
    X, Y = np.meshgrid(xs, ys)
    xy = np.stack([X.ravel(), Y.ravel()], axis=1)
    swept = swept_box_mask(box, -2.0, 2.0, xy)
    # union of footprints sampled densely in time is inside the analytic sweep
    sampled = np.zeros(len(xy), bool)
    for t in np.linspace(-2.0, 2.0, 401):
        sampled |= footprint_mask(box, t, xy)
    assert np.array_equal(swept, sampled)
    assert np.all(np.abs(xy[swept, 0] - 8.0) <= 0.4)
    assert np.all(np.abs(xy[swept, 1]) <= 4.4)
    # the moving box is actually seen at the start and end of the sweep
    for t in (-2.0, 2.0):
        labels = simulate_scan(scene, t).labels
        assert np.any(labels == 2)


def test_cylinder_hits():
    scene = SceneSpec(
        cylinders=[Cylinder((5.0, 0.0, 0.0), 0.5, 3.0, 0.4)],
        trajectory=[(0.0, PoseSE3.from_translation(0, 0, 1.0))],
        sensor=SensorModel(beams=4, azimuth_steps=40, hfov=10.0, vfov=(-2.0, 2.0)),
    )
    sim = simulate_scan(scene, 0.0)
    hits = sim.cloud.points[sim.labels == 1]
    assert len(hits) > 0
    r = np.hypot(hits[:, 0] - 5.0, hits[:, 1])
    np.testing.assert_allclose(r, 0.5, atol=1e-9)
