import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evigrid.core import PointCloud, PoseSE3, ScanSequence
from evigrid.evidential import combine_counts, project_pillar
from evigrid.ground import PlaneParams
from evigrid.mapping import (
    INPUT_LAYERS,
    BeliefGrid,
    EvidentialVoxelMap,
    MultiLayerGridMap,
    accumulate_scan,
    augment_crop,
    build_input_grid,
    build_target_grid,
    pack_keys,
    project_to_grid,
    segment_corridor,
    unpack_keys,
)
from evigrid.spatial import GridGeometry, traverse_voxels_3d
from evigrid.synth import Box, SceneSpec, SensorModel, box_scene, simulate_scan, simulate_sequence

FLAT = PlaneParams([0, 0, 1.0], 0.0)
E = 0.125


@given(st.lists(st.tuples(*[st.integers(-(2**20), 2**20 - 1)] * 3), min_size=1, max_size=30))
def test_key_round_trip_and_order(idx):
    idx = np.array(idx, np.int64)
    keys = pack_keys(idx)
    np.testing.assert_array_equal(unpack_keys(keys), idx)
    lex = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    assert np.all(np.diff(keys[lex]) >= 0)


def test_key_range_checked():
    with pytest.raises(ValueError):
        pack_keys(np.array([[2**20, 0, 0]]))
    vm = EvidentialVoxelMap(1.0)
    with pytest.raises(ValueError):
        vm.insert_rays([0, 0, 0], [[2.0**21, 0, 0]])


def test_one_metre_ray():
    vm = EvidentialVoxelMap(E)
    o = np.array([0.5, 0.5, 0.5]) * E
    vm.insert_rays(o, [o + [1.0, 0, 0]])
    assert vm.counts_at([8, 0, 0]) == (1, 0)
    for i in range(8):
        assert vm.counts_at([i, 0, 0]) == (0, 1)
    assert len(vm) == 9
    assert vm.total_reflections == 1 and vm.total_transmissions == 8


def test_insertion_is_additive(rng):
    cloud = PointCloud(rng.uniform(-5, 5, (300, 3)))
    pose = PoseSE3.from_yaw(0.4, (1.0, 2.0, 0.3))
    once = accumulate_scan(EvidentialVoxelMap(E), cloud, pose)
    twice = accumulate_scan(accumulate_scan(EvidentialVoxelMap(E), cloud, pose), cloud, pose)
    np.testing.assert_array_equal(twice.keys, once.keys)
    np.testing.assert_array_equal(twice.m, 2 * once.m)
    np.testing.assert_array_equal(twice.n, 2 * once.n)
    assert once.total_reflections == len(cloud)


def test_opposing_rays_share_voxel():
    vm = EvidentialVoxelMap(E)
    vm.insert_rays([-1.0, 0.06, 0.06], [[1.0, 0.06, 0.06]])
    vm.insert_rays([1.0, 0.06, 0.06], [[-1.0, 0.06, 0.06]])
    assert vm.counts_at([0, 0, 0]) == (0, 2)
    assert vm.counts_at([8, 0, 0]) == (1, 1)


def test_counts_match_traversal(rng):
    origin = rng.uniform(-1, 1, 3)
    ends = origin + rng.uniform(-4, 4, (50, 3))
    vm = EvidentialVoxelMap(E, (0.3, -0.2, 0.1))
    vm.insert_rays(origin, ends)
    m, n = {}, {}
    for e in ends:
        walk = [tuple(v) for v in traverse_voxels_3d(origin, e, vm.geometry)]
        for v in walk[:-1]:
            n[v] = n.get(v, 0) + 1
        m[walk[-1]] = m.get(walk[-1], 0) + 1
    for v in set(m) | set(n):
        assert vm.counts_at(v) == (m.get(v, 0), n.get(v, 0))
    assert len(vm) == len(set(m) | set(n))


def test_zero_length_rays_skipped():
    vm = EvidentialVoxelMap(E)
    vm.insert_rays([0, 0, 0], [[0, 0, 0], [1, 0, 0]])
    assert vm.skipped_rays == 1 and vm.total_reflections == 1


def test_small_chunks_same_result(rng):
    ends = rng.uniform(-3, 3, (200, 3))
    a = EvidentialVoxelMap(E)
    a.insert_rays([0.01, 0.02, 0.03], ends)
    b = EvidentialVoxelMap(E)
    b.insert_rays([0.01, 0.02, 0.03], ends, chunk_voxels=50)
    assert a == b


@settings(max_examples=15)
@given(st.integers(0, 2**31))
def test_accumulation_order_invariant(seed):
    rng = np.random.default_rng(seed)
    clouds = [PointCloud(rng.uniform(-4, 4, (80, 3))) for _ in range(4)]
    poses = [PoseSE3.from_yaw(rng.uniform(-1, 1), rng.uniform(-1, 1, 3)) for _ in range(4)]
    geo = GridGeometry.centered(12.0, E)
    ref = EvidentialVoxelMap(E, (geo.origin[0], geo.origin[1], 0.0))
    for c, p in zip(clouds, poses):
        accumulate_scan(ref, c, p)
    perm = rng.permutation(4)
    alt = EvidentialVoxelMap(E, (geo.origin[0], geo.origin[1], 0.0))
    for k in perm:
        accumulate_scan(alt, clouds[k], poses[k])
    assert alt == ref
    assert project_to_grid(alt, geo) == project_to_grid(ref, geo)


def test_corridor_by_center_height():
    vm = EvidentialVoxelMap(E)
    # centers at 1.0625 m and 0.0625 m
    vm.add_counts(pack_keys(np.array([[0, 0, 8], [0, 0, 0], [0, 0, 23], [0, 0, 1]])), [1, 1, 1, 1], [0, 0, 0, 0])
    kept = segment_corridor(vm, FLAT)
    assert sorted(unpack_keys(kept.keys)[:, 2].tolist()) == [8, 23]
    tilted = segment_corridor(vm, PlaneParams([0, 0, 1.0], -0.5))
    assert sorted(unpack_keys(tilted.keys)[:, 2].tolist()) == [8, 23]


def test_corridor_on_synthetic_scene():
    scene = SceneSpec(
        boxes=[Box((6.0, 0.0, 1.0), (2.0, 2.0, 2.0))],
        trajectory=[(0.0, PoseSE3.from_translation(0.0, 0.0, 1.8))],
        sensor=SensorModel(beams=24, azimuth_steps=360, vfov=(-30, 5), max_range=25),
    )
    sim = simulate_scan(scene, 0.0)
    vm = accumulate_scan(EvidentialVoxelMap(E), sim.cloud, sim.pose)
    corr = segment_corridor(vm, scene.plane)
    refl = corr.filtered(corr.m > 0)
    z = refl.centers()[:, 2]
    assert np.all((z >= 0.2) & (z <= 3.0))
    ground_hits = vm.filtered((vm.m > 0) & (vm.centers()[:, 2] < 0.125))
    assert len(ground_hits) > 100
    assert not np.isin(ground_hits.keys, corr.keys).any()
    box_pts = sim.pose.apply(sim.cloud.points[sim.labels == 1])
    box_pts = box_pts[(box_pts[:, 2] > 0.25) & (box_pts[:, 2] < 2.9)]
    box_keys = pack_keys(corr.geometry.index_of(box_pts))
    assert np.isin(box_keys, corr.keys).all()


def test_projection_matches_pillar_oracle(rng):
    vm = EvidentialVoxelMap(E, (-1.0, -1.0, 0.0))
    idx = np.c_[rng.integers(0, 16, 400), rng.integers(0, 16, 400), rng.integers(0, 30, 400)]
    vm.add_counts(pack_keys(idx), rng.integers(0, 4, 400), rng.integers(0, 6, 400))
    geo = GridGeometry(16, 16, E, (-1.0, -1.0))
    grid = project_to_grid(vm, geo)
    grid.validate()
    vi = vm.indices()
    for ix in range(16):
        for iy in range(16):
            sel = (vi[:, 0] == ix) & (vi[:, 1] == iy)
            if not sel.any():
                assert grid.bel_O[iy, ix] == 0 and grid.bel_F[iy, ix] == 0
                continue
            masses = [combine_counts(int(m), int(n)) for m, n in zip(vm.m[sel], vm.n[sel])]
            o, f = project_pillar(masses)
            assert grid.bel_O[iy, ix] == pytest.approx(o, abs=1e-12)
            assert grid.bel_F[iy, ix] == pytest.approx(f, abs=1e-12)


def test_projection_ignores_out_of_grid_voxels():
    vm = EvidentialVoxelMap(E)
    vm.add_counts(pack_keys(np.array([[100, 100, 5], [0, 0, 5]])), [1, 1], [0, 0])
    grid = project_to_grid(vm, GridGeometry(4, 4, E, (0.0, 0.0)))
    assert grid.bel_O[0, 0] == pytest.approx(0.4) and grid.bel_O.sum() == pytest.approx(0.4)


@pytest.fixture(scope="module")
def static_seq():
    sensor = SensorModel(beams=24, azimuth_steps=360, vfov=(-25.0, 5.0), max_range=25.0, range_noise=0.01, seed=1)
    scene = box_scene(sensor)
    scene.trajectory = [(0.0, PoseSE3.from_translation(-2.0, 0.0, 1.8)), (4.0, PoseSE3.from_translation(2.0, 1.0, 1.8))]
    sim = simulate_sequence(scene, 1.0, 4.0)
    return sim.sequence.with_poses(sim.relative_gt())


def test_single_scan_reflections_occupied(static_seq):
    geo = GridGeometry.centered(40.0, E)
    build = build_target_grid(static_seq, "000002", geo, scan_indices=[2], details=True)
    refl = build.corridor.filtered(build.corridor.m > 0)
    cells = geo.index_of(refl.centers()[:, :2])
    inside = geo.contains(cells)
    cells, m, n = cells[inside], refl.m[inside], refl.n[inside]
    bel = build.grid.bel_O[cells[:, 1], cells[:, 0]]
    pure = n == 0
    assert pure.sum() > 100
    assert np.all(bel[pure] >= 0.4)
    # a grazing ray can add transmissions to a reflection voxel; the pillar
    # is still at least as occupied as that voxel alone
    assert np.all(bel >= combine_counts(m, n)[0] - 1e-15)
    build.grid.validate()


def test_untouched_cells_fully_uncertain(static_seq):
    geo = GridGeometry.centered(100.0, E)
    grid = build_target_grid(static_seq, "000002", geo)
    far = grid.theta[:40, :40]  # the corner beyond every wall and the max range
    assert np.all(far == 1.0)
    assert np.all(grid.bel_O + grid.bel_F <= 1 + 1e-12)


def test_multi_view_not_worse(static_seq):
    geo = GridGeometry.centered(40.0, E)
    multi = build_target_grid(static_seq, "000002", geo)
    single = build_target_grid(static_seq, "000002", geo, scan_indices=[2])
    assert multi.determinate().sum() >= single.determinate().sum()


def test_scan_index_permutation_bit_equal(static_seq):
    geo = GridGeometry.centered(30.0, E)
    a = build_target_grid(static_seq, "000002", geo, scan_indices=[0, 1, 2, 3, 4])
    b = build_target_grid(static_seq, "000002", geo, scan_indices=[3, 0, 4, 2, 1])
    assert a == b


def test_window_selection(static_seq):
    geo = GridGeometry.centered(30.0, E)
    build = build_target_grid(static_seq, "000002", geo, details=True)
    assert build.scan_ids == ["000000", "000001", "000002", "000003", "000004"]
    from evigrid.mapping import TargetParams

    narrow = build_target_grid(static_seq, "000002", geo, params=TargetParams(window=1.0), details=True)
    assert narrow.scan_ids == ["000001", "000002", "000003"]
    with pytest.raises(ValueError):
        build_target_grid(ScanSequence(static_seq.scans), "000002", geo)


# -- input grid ----------------------------------------------------------------

def test_single_non_ground_point():
    geo = GridGeometry(16, 16, E, (0.0, 0.0))
    scan = PointCloud([[1.0 + E / 2, E / 2, 1.0]], [0.7], sensor_origin=[E / 2, E / 2, 1.8])
    g = build_input_grid(scan, FLAT, geo)
    assert g["detections_non_ground"].sum() == 1 and g["detections_non_ground"][0, 8] == 1
    assert g["transmissions_non_ground"][0, :8].tolist() == [1] * 8
    assert g["transmissions_non_ground"].sum() == 8
    assert g["intensity_non_ground"][0, 8] == pytest.approx(0.7)
    for name in ("detections_ground", "transmissions_ground", "intensity_ground"):
        assert g[name].sum() == 0


def test_mean_intensity():
    geo = GridGeometry(16, 16, E, (0.0, 0.0))
    scan = PointCloud([[1.01, 0.05, 1.0], [1.02, 0.06, 1.5]], [0.2, 0.6], sensor_origin=[0.05, 0.05, 1.8])
    g = build_input_grid(scan, FLAT, geo)
    assert g["detections_non_ground"][0, 8] == 2
    assert g["intensity_non_ground"][0, 8] == pytest.approx(0.4, abs=1e-15)
    assert g["intensity_non_ground"][g["detections_non_ground"] == 0].max() == 0


def test_layer_families_disjoint(rng):
    pts = np.c_[rng.uniform(-10, 10, (500, 2)), rng.uniform(-0.5, 2, 500)]
    scan = PointCloud(pts, rng.uniform(size=500))
    geo = GridGeometry.centered(25.0, E)
    g = build_input_grid(scan, FLAT, geo)
    h = pts[:, 2]
    assert g["detections_ground"].sum() == ((h >= -0.2) & (h <= 0.2)).sum()
    assert g["detections_non_ground"].sum() == (h > 0.2).sum()
    assert set(g.layers) == set(INPUT_LAYERS)
    for name in INPUT_LAYERS:
        if name.startswith(("detections", "transmissions")):
            assert g[name].dtype.kind == "i" and g[name].min() >= 0
        else:
            assert 0 <= g[name].min() and g[name].max() <= 1


def test_wall_shadow():
    wall = Box((5.0, 0.0, 2.0), (0.5, 4.0, 4.0), 0.5)
    scene = SceneSpec(boxes=[wall], sensor=SensorModel(beams=32, azimuth_steps=720, vfov=(-30, 10), max_range=40))
    sim = simulate_scan(scene, 0.0)
    geo = GridGeometry.centered(40.0, E)
    g = build_input_grid(sim.cloud, FLAT.transformed(sim.pose.inverse()), geo)
    xy = geo.center_of(np.stack(np.meshgrid(np.arange(geo.width), np.arange(geo.height)), -1))
    # cells whose whole footprint lies in the shadow cone behind the wall
    x, y = xy[..., 0], xy[..., 1]
    shadow = (x > 5.25 + E) & (np.abs(y) + E < 2.0 * (x - E) / 5.25 * 0.95) & (x < 19.0)
    assert shadow.sum() > 1000
    for name in INPUT_LAYERS:
        if not name.startswith("intensity"):
            assert g[name][shadow].sum() == 0, name
    visible = (x > 5.25 + E) & (np.abs(y) > 4.0) & (x < 15)
    assert g["transmissions_ground"][visible].sum() > 0


def test_input_grid_performance_smoke():
    # full-size timing lives in the acceptance suite; here just the shapes
    geo = GridGeometry.centered()
    scan = PointCloud(np.random.default_rng(0).uniform(-40, 40, (1000, 3)))
    g = build_input_grid(scan, FLAT, geo)
    assert g["detections_ground"].shape == (800, 800)


# -- augmentation --------------------------------------------------------------

def _random_belief(rng, n=32):
    o = rng.uniform(size=(n, n))
    f = rng.uniform(size=(n, n)) * (1 - o)
    return BeliefGrid(GridGeometry(n, n, E, (-n * E / 2, -n * E / 2)), o, f)


def test_augment_identity(rng):
    g = _random_belief(rng)
    out = augment_crop(g, 0.0, (0.0, 0.0), 32)
    assert out == g


def test_augment_four_quarter_turns(rng):
    g = _random_belief(rng)
    out = g
    for _ in range(4):
        out = augment_crop(out, np.pi / 2, (0.0, 0.0), 32)
    assert out == g


def test_augment_half_turn_preserves_sums(rng):
    g = MultiLayerGridMap(
        GridGeometry(32, 32, E, (0.0, 0.0)),
        {"detections_ground": rng.integers(0, 5, (32, 32)), "intensity_ground": rng.uniform(size=(32, 32))},
    )
    out = augment_crop(g, np.pi, (0.0, 0.0), 32)
    assert out["detections_ground"].sum() == g["detections_ground"].sum()
    assert out["detections_ground"].dtype.kind == "i"
    assert out["intensity_ground"].sum() == pytest.approx(g["intensity_ground"].sum(), abs=1e-9)


def test_augment_crop_and_offset(rng):
    g = _random_belief(rng, 64)
    out = augment_crop(g, 0.0, (1.0, -0.5), 16)
    # offset in whole cells is a pure shift of the window
    c0 = 32 - 8 + 8
    r0 = 32 - 8 - 4
    np.testing.assert_array_equal(out.bel_O, g.bel_O[r0:r0 + 16, c0:c0 + 16])
    assert out.geometry.origin == pytest.approx((g.geometry.center[0] + 1.0 - 1.0, g.geometry.center[1] - 0.5 - 1.0))


@given(st.floats(0, 2 * np.pi), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_augment_keeps_beliefs_valid(rot, dx, dy):
    g = _random_belief(np.random.default_rng(1), 64)
    out = augment_crop(g, rot, (dx, dy), 36)
    out.validate()


def test_augment_window_too_large(rng):
    g = _random_belief(rng)
    with pytest.raises(ValueError):
        augment_crop(g, np.pi / 4, (0.0, 0.0), 32)
    with pytest.raises(ValueError):
        augment_crop(g, 0.0, (1.0, 0.0), 32)
