"""Independent reference implementations used by the tests."""

import numpy as np

from adaptmesh.geometry import PointCloud, Pose, ScanBlock, normalize_rows

# (scene, method, accuracy, completeness, chamfer) as printed in the ablation table
ABLATION_ROWS = [
    (1, "PIN-SLAM", 10.47, 10.87, 10.67),
    (1, "w/o RL", 9.98, 10.76, 10.37),
    (1, "full", 9.55, 10.35, 9.95),
    (2, "PIN-SLAM", 10.56, 10.81, 10.68),
    (2, "w/o RL", 10.38, 10.61, 10.50),
    (2, "full", 9.74, 10.20, 9.97),
    (3, "PIN-SLAM", 11.04, 11.30, 11.17),
    (3, "w/o RL", 11.05, 11.03, 11.04),
    (3, "full", 9.95, 10.43, 10.19),
]


def block_of(points, origin=(0.0, 0.0, 0.0)) -> ScanBlock:
    points = np.asarray(points, dtype=np.float64)
    return ScanBlock(Pose.identity(), PointCloud(points), 1, np.asarray([origin], dtype=np.float64),
                     np.zeros(len(points), np.int64))


def brute_nearest(src, dst):
    d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    return d.min(1)


def brute_metrics(pred, gt, threshold_cm):
    dp, dg = brute_nearest(pred, gt), brute_nearest(gt, pred)
    acc, comp = dp.mean() * 100, dg.mean() * 100
    t = threshold_cm / 100
    P, R = np.mean(dp <= t), np.mean(dg <= t)
    f = 0.0 if P + R == 0 else 200 * P * R / (P + R)
    return acc, comp, f


def brute_zeta(D, beta, eta):
    """Evaluate both candidates {0, D} of the hard-threshold problem and keep the cheaper."""
    cost_zero = beta * (D ** 2).sum(-1)
    cost_keep = eta * np.any(D != 0, axis=-1)
    return np.where((cost_zero < cost_keep)[..., None], 0.0, D)


def relaxed_normal_objective(n, n_hat, neighbours, zeta, beta):
    """Per-point quadratic whose stationary point is the closed-form normal update."""
    return ((n - n_hat) ** 2).sum() + beta * ((n[None] - neighbours - zeta) ** 2).sum()


def finite_difference_gradient(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def gae_double_loop(rewards, values, dones, gamma, lam, last_value=0.0):
    """A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at the first terminal step."""
    T = len(rewards)
    next_values = [0.0 if dones[t] else (values[t + 1] if t + 1 < T else last_value) for t in range(T)]
    delta = [rewards[t] + gamma * next_values[t] - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        for l in range(T - t):
            total += (gamma * lam) ** l * delta[t + l]
            if dones[t + l]:
                break
        adv[t] = total
    return adv


def noisy_plane_normals(n, sigma_deg, rng, side=10.0):
    """Plane z = 0 with normals tilted by |N(0, sigma)| polar angle in a uniform azimuth."""
    pts = np.c_[rng.uniform(0, side, (n, 2)), np.zeros(n)]
    theta = rng.normal(0.0, np.radians(sigma_deg), n)
    phi = rng.uniform(0, 2 * np.pi, n)
    nrm = np.c_[np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    nrm *= np.sign(nrm[:, 2:3])
    return pts, normalize_rows(nrm)


def mean_angle_deg(normals, reference):
    c = np.clip(normals @ np.asarray(reference, dtype=np.float64), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)).mean())


def icosphere(subdivisions=4, radius=1.0):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces)
