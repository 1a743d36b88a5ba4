"""Small fixture builders shared by several test modules."""
import numpy as np

from triplane_grasp.geometry import PointCloud


def cube_cloud(edge=0.05, per_side=8, center=(0.0, 0.0, 0.025)):
    """Cell-centred grid on each face of an axis-aligned cube, exact normals."""
    h = edge / 2
    t = (np.arange(per_side) + 0.5) / per_side * edge - h
    u, v = np.meshgrid(t, t, indexing="ij")
    u, v = u.ravel(), v.ravel()
    pts, nrm = [], []
    for axis in range(3):
        a1, a2 = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            p = np.zeros((len(u), 3))
            p[:, axis] = sign * h
            p[:, a1], p[:, a2] = u, v
            n = np.zeros_like(p)
            n[:, axis] = sign
            pts.append(p)
            nrm.append(n)
    return PointCloud(np.concatenate(pts) + np.asarray(center), np.concatenate(nrm))


def sphere_cloud(radius=0.03, n=800, seed=0, center=(0.0, 0.0, 0.03)):
    """Fibonacci sphere with exact outward normals."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return PointCloud(radius * d + np.asarray(center), d)


def recover_pairs(grasps, cloud, slack):
    """Map emitted grasps back to (anchor index, partner index) through their jaw points."""
    from scipy.spatial import cKDTree

    tree = cKDTree(cloud.points)
    out = []
    for g in grasps:
        d1, i = tree.query(g.contact + slack * g.baseline)
        d2, j = tree.query(g.second_contact - slack * g.baseline)
        assert d1 < 1e-12 and d2 < 1e-12
        out.append((int(i), int(j)))
    return out
