"""Independent reference implementations used as test oracles."""
import numpy as np

SAMPLES = 10_000


def supersample_cells(u0, u1, samples=SAMPLES):
    """Ordered, de-duplicated cells hit by ``samples`` evenly spaced points (grid units)."""
    s = np.linspace(0.0, 1.0, samples)[:, None]
    pts = u0[None, :] + s * (u1 - u0)[None, :]
    idx = np.floor(pts).astype(np.int64)
    keep = np.r_[True, np.any(idx[1:] != idx[:-1], axis=1)]
    return idx[keep]


def min_crossing_gap(u0, u1):
    """Smallest parameter gap between consecutive grid-plane crossings (or to the ends)."""
    ts = [0.0, 1.0]
    for a in range(len(u0)):
        lo, hi = sorted((u0[a], u1[a]))
        planes = np.arange(np.floor(lo) + 1, np.floor(hi) + 1)
        if len(planes) and u1[a] != u0[a]:
            ts.extend(((planes - u0[a]) / (u1[a] - u0[a])).tolist())
    ts = np.sort(np.asarray(ts))
    return float(np.min(np.diff(ts)))


def brute_knn(points, queries, k):
    d = np.sqrt(((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    k = min(k, len(points))
    idx = np.empty((len(queries), k), np.int64)
    dist = np.empty((len(queries), k))
    for r in range(len(queries)):
        order = np.lexsort((np.arange(len(points)), d[r]))[:k]
        idx[r] = order
        dist[r] = d[r, order]
    return dist, idx


def noisy_plane(seed, n=2000, sigma=0.02, outlier_frac=0.3, extent=10.0):
    """Points on a random gently tilted plane with noise and above-plane outliers.

    Returns ``(points, normal, d)`` for the true plane ``normal . p + d = 0``.
    """
    rng = np.random.default_rng(seed)
    tilt = rng.uniform(0, np.deg2rad(8))
    az = rng.uniform(0, 2 * np.pi)
    normal = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
    d = rng.uniform(-2, 2)
    xy = rng.uniform(-extent, extent, (n, 2))
    z_plane = -(d + xy @ normal[:2]) / normal[2]
    h = rng.normal(0, sigma, n)
    n_out = int(round(outlier_frac * n))
    h[:n_out] = rng.uniform(0, 3.0, n_out)
    # move along the normal so h is the true signed distance
    base = np.c_[xy, z_plane]
    pts = base + h[:, None] * normal[None, :]
    return pts, normal, d


def rotation_angle_deg(R):
    return float(np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))))


def pose_error(a, b):
    """(translation error m, rotation error deg) between two poses."""
    return float(np.linalg.norm(a.t - b.t)), rotation_angle_deg(a.R.T @ b.R)


def scan_pair(offset=(0.3, 0.0, 0.0), yaw_deg=5.0, noise=0.01, seed=0):
    """Two box-scene scans and the true pose of the second in the frame of the first."""
    from evigrid.core import PoseSE3
    from evigrid.synth import SensorModel, box_scene, simulate_scan

    sensor = SensorModel(beams=32, azimuth_steps=360, vfov=(-25.0, 5.0), max_range=40.0, range_noise=noise, seed=seed)
    p0 = PoseSE3.from_translation(0.0, 0.0, 1.8)
    rel = PoseSE3.from_yaw(np.deg2rad(yaw_deg), offset)
    a = simulate_scan(box_scene(sensor, p0), 0.0, "a").cloud
    b = simulate_scan(box_scene(sensor, p0 @ rel), 1.0, "b").cloud
    return a, b, rel


def drive_sequence(n, spacing, noise=0.01, rate=10.0, seed=0):
    from evigrid.synth import SensorModel, drive_scene, simulate_sequence

    sensor = SensorModel(beams=32, azimuth_steps=360, vfov=(-25.0, 5.0), max_range=40.0, range_noise=noise, seed=seed)
    duration = (n - 1) / rate
    scene = drive_scene(speed=spacing * rate, duration=duration, sensor=sensor)
    return simulate_sequence(scene, rate, duration)
