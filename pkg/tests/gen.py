"""Seeded generators of random test inputs."""
import numpy as np

from autorig.skeleton import Skeleton

MIN_SEP_256 = np.sqrt(3.0) * 2.0 / 255.0


def random_parents(rng, k):
    return np.array([-1] + [int(rng.integers(0, i)) for i in range(1, k)])


def separated_joints(rng, k, min_sep, low=-1.0, high=1.0):
    """Rejection-sample k points in a cube with pairwise distance > min_sep."""
    from scipy.spatial.distance import pdist
    for _ in range(20):
        pts = rng.uniform(low, high, (k, 3))
        if k < 2 or pdist(pts).min() > min_sep:
            return pts
    pts = []
    while len(pts) < k:
        p = rng.uniform(low, high, 3)
        if all(np.linalg.norm(p - q) > min_sep for q in pts):
            pts.append(p)
    return np.array(pts)


def random_skeleton(rng, k, min_sep=MIN_SEP_256):
    joints = separated_joints(rng, k, min_sep)
    parents = random_parents(rng, k)
    perm = rng.permutation(k)
    # shuffle labels so the root is not always joint 0
    inv = np.argsort(perm)
    new_parents = np.array([-1 if parents[perm[i]] < 0 else inv[parents[perm[i]]] for i in range(k)])
    return Skeleton(joints[perm], new_parents)


def box_mesh(lo, hi, n=4):
    """Closed axis-aligned box surface, each face an n x n grid of quads
    split into triangles; the layout is mirror-symmetric when lo = -hi."""
    from autorig.skeleton import Mesh
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts, faces = [], []
    t = np.linspace(0.0, 1.0, n + 1)
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.empty(3)
                    p[axis] = (lo if side == 0 else hi)[axis]
                    p[u] = lo[u] + t[i] * (hi[u] - lo[u])
                    p[v] = lo[v] + t[j] * (hi[v] - lo[v])
                    verts.append(p)
            for i in range(n):
                for j in range(n):
                    a, b = base + i * (n + 1) + j, base + (i + 1) * (n + 1) + j
                    faces += [[a, b, b + 1], [a, b + 1, a + 1]]
    # merge coincident edge vertices so the surface is closed
    verts = np.array(verts)
    uniq, inv = np.unique(np.round(verts, 12), axis=0, return_inverse=True)
    return Mesh(uniq, inv.reshape(-1)[np.array(faces)])


def sdf_mesh(sdf_fn, lo=-1.0, hi=1.0, n=72):
    """Marching-cubes surface of the zero level of ``sdf_fn`` on a cube grid."""
    from skimage.measure import marching_cubes
    from autorig.skeleton import Mesh
    axis = np.linspace(lo, hi, n)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    step = axis[1] - axis[0]
    verts, faces, _, _ = marching_cubes(sdf_fn(pts), level=0.0, spacing=(step,) * 3)
    return Mesh(verts + lo, faces)
