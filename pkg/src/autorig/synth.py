"""Synthetic rigged assets and dataset splitting.

Skeletons come from a handful of shape templates with random jitter. The mesh
is the marching-cubes surface of the union of capsules around the bones, so
it is closed and contains every bone.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.spatial.transform import Rotation
from skimage.measure import marching_cubes

from .gvb import driving_groups
from .metrics import point_segment_distance
from .skeleton import K_MAX, K_MIN, ROOT, Mesh, RigAsset, Skeleton, SkinWeights, normalize_rig

log = logging.getLogger(__name__)

TEMPLATES = ("chain", "quadruped", "biped", "star", "random-tree")
TEMPLATE_CATEGORY = {
    "chain": "marine",
    "quadruped": "animal",
    "biped": "simple_character",
    "star": "insect",
    "random-tree": "plant",
}


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _jitter_dir(d, rng, max_deg):
    axis = _unit(rng.normal(size=3))
    angle = np.deg2rad(rng.uniform(0, max_deg))
    return Rotation.from_rotvec(axis * angle).apply(d)


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.joints = [np.zeros(3)]
        self.parents = [ROOT]

    def add(self, parent, pos):
        self.joints.append(np.asarray(pos, dtype=np.float64))
        self.parents.append(parent)
        return len(self.joints) - 1

    def limb(self, parent, direction, n, length=1.0, bend=15.0):
        """Append a chain of ``n`` joints; returns the last index."""
        d = _unit(direction)
        cur = parent
        for _ in range(n):
            d = _unit(_jitter_dir(d, self.rng, bend))
            seg = length * self.rng.uniform(0.8, 1.2)
            cur = self.add(cur, self.joints[cur] + seg * d)
        return cur


def _split(total, weights, rng):
    """Integer allocation of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    out = np.floor(raw).astype(int)
    rem = total - out.sum()
    frac = raw - out + rng.uniform(0, 1e-3, size=len(w))
    for i in np.argsort(-frac)[:rem]:
        out[i] += 1
    return out


def _chain(b, k):
    b.limb(0, [1.0, 0.0, 0.0], k - 1, bend=25.0)


def _star(b, k):
    rng = b.rng
    arms = int(min(k - 1, rng.integers(3, 7)))
    base = Rotation.random(random_state=int(rng.integers(2**31)))
    # golden-spiral directions spread evenly over the sphere
    i = np.arange(arms) + 0.5
    phi = np.arccos(1 - 2 * i / arms)
    theta = np.pi * (1 + 5 ** 0.5) * i
    dirs = base.apply(np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1))
    for d, n in zip(dirs, _split(k - 1, np.ones(arms), rng)):
        if n:
            b.limb(0, d, n, bend=10.0)


def _biped(b, k):
    rng = b.rng
    # spine, legs, arms, head
    spine_n, lleg, rleg, larm, rarm, head = _split(k - 1, [3, 3, 3, 3, 3, 1], rng)
    top = b.limb(0, [0, 1, 0], spine_n, length=0.8, bend=8.0) if spine_n else 0
    if lleg:
        b.limb(0, [0.35, -1, 0], lleg, bend=6.0)
    if rleg:
        b.limb(0, [-0.35, -1, 0], rleg, bend=6.0)
    if larm:
        b.limb(top, [1, 0.15, 0], larm, length=0.8, bend=12.0)
    if rarm:
        b.limb(top, [-1, 0.15, 0], rarm, length=0.8, bend=12.0)
    if head:
        b.limb(top, [0, 1, 0.1], head, length=0.6, bend=5.0)


def _quadruped(b, k):
    rng = b.rng
    spine_n, fl, fr, hl, hr, neck, tail = _split(k - 1, [3, 2, 2, 2, 2, 2, 1], rng)
    front = b.limb(0, [1, 0, 0], spine_n, bend=6.0) if spine_n else 0
    for n, d, at in ((hl, [0, -1, 0.45], 0), (hr, [0, -1, -0.45], 0),
                     (fl, [0, -1, 0.45], front), (fr, [0, -1, -0.45], front)):
        if n:
            b.limb(at, d, n, length=0.8, bend=6.0)
    if neck:
        b.limb(front, [1, 1, 0], neck, length=0.7, bend=10.0)
    if tail:
        b.limb(0, [-1, 0.3, 0], tail, length=0.8, bend=15.0)


def _random_tree(b, k):
    rng = b.rng
    while len(b.joints) < k:
        parent = int(rng.integers(len(b.joints)))
        pj = b.joints[parent]
        pp = b.parents[parent]
        away = pj - b.joints[pp] if pp != ROOT else rng.normal(size=3)
        for _ in range(50):
            d = _jitter_dir(_unit(away), rng, 70.0)
            cand = pj + rng.uniform(0.8, 1.2) * _unit(d)
            if min(np.linalg.norm(cand - j) for j in b.joints) > 0.5:
                b.add(parent, cand)
                break


_BUILDERS = {"chain": _chain, "star": _star, "biped": _biped,
             "quadruped": _quadruped, "random-tree": _random_tree}


def synth_skeleton(rng, k: int, template: str) -> Skeleton:
    if template not in _BUILDERS:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    b = _Builder(rng)
    _BUILDERS[template](b, k)
    return Skeleton(np.array(b.joints), np.array(b.parents))


def capsule_mesh(skel: Skeleton, radius: float, max_cells: int = 96) -> Mesh:
    """Closed surface of the union of capsules of ``radius`` around the bones."""
    idx = np.array([(p, c) for c, p in enumerate(skel.parents) if p != ROOT])
    a, b = skel.joints[idx[:, 0]], skel.joints[idx[:, 1]]
    lo = skel.joints.min(axis=0) - 2 * radius
    hi = skel.joints.max(axis=0) + 2 * radius
    step = max(radius / 2.5, float(np.max(hi - lo)) / max_cells)
    axes = [np.arange(lo[i], hi[i] + step, step) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = np.full(len(pts), np.inf)
    for s in range(len(a)):
        sdf = np.minimum(sdf, point_segment_distance(pts, a[s:s + 1], b[s:s + 1])[:, 0])
    sdf = (sdf - radius).reshape(len(axes[0]), len(axes[1]), len(axes[2]))
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(step, step, step))
    verts = verts + lo
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(verts, faces[ok])


def nearest_bone_skin(mesh: Mesh, skel: Skeleton, softness: float, max_influences: int = 4) -> SkinWeights:
    """Soft-min of distances to each driving joint's bones, so the heaviest
    weight always belongs to the joint driving the nearest bone."""
    groups = driving_groups(skel)
    gids = list(groups)
    V = mesh.vertices
    d = np.empty((len(V), len(gids)))
    for gi, j in enumerate(gids):
        idx = np.array(groups[j])
        d[:, gi] = point_segment_distance(V, skel.joints[idx[:, 0]], skel.joints[idx[:, 1]]).min(axis=1)
    w = np.exp(-(d - d.min(axis=1, keepdims=True)) / softness)
    keep = min(max_influences, len(gids))
    top = np.argsort(-w, axis=1, kind="stable")[:, :keep]
    rows = np.arange(len(V))[:, None]
    pruned = np.zeros_like(w)
    pruned[rows, top] = w[rows, top]
    pruned /= pruned.sum(axis=1, keepdims=True)
    W = np.zeros((len(V), skel.k))
    W[:, gids] = pruned
    return SkinWeights(W)


def synth_rig(seed, k: int, template: str = "chain", radius: float = 0.22) -> RigAsset:
    """Deterministic synthetic rig, normalized to [-1, 1]."""
    if not (K_MIN <= k <= K_MAX):
        raise ValueError(f"k={k} outside [{K_MIN}, {K_MAX}]")
    rng = np.random.default_rng(seed)
    skel = synth_skeleton(rng, k, template)
    extent = float(np.max(skel.joints.max(axis=0) - skel.joints.min(axis=0)))
    r = max(radius, extent / 40.0)
    mesh = capsule_mesh(skel, r)
    skin = nearest_bone_skin(mesh, skel, softness=0.25 * r)
    asset, _ = normalize_rig(RigAsset(mesh, skel, skin, TEMPLATE_CATEGORY[template]))
    return asset


def synth_dataset(seed, n: int, k_range=(3, 8), templates=TEMPLATES) -> list[RigAsset]:
    """``n`` assets cycling through ``templates`` with seeded joint counts."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = templates[i % len(templates)]
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        out.append(synth_rig(int(rng.integers(2**31)), k, t))
    return out


def make_splits(entries, ratio: int = 20, seed=0) -> list[dict]:
    """Per-category train/test split at ``ratio``:1.

    ``entries`` are dicts with ``path`` and ``category``. Categories with a
    single asset go entirely to train.
    """
    rng = np.random.default_rng(seed)
    by_cat: dict[str, list[dict]] = {}
    for e in entries:
        by_cat.setdefault(e["category"], []).append(e)
    manifest = []
    for cat in sorted(by_cat):
        items = by_cat[cat]
        n = len(items)
        if n < 2:
            warnings.warn(f"category {cat!r} has {n} asset(s); all go to train")
            n_test = 0
        else:
            n_test = max(1, int(round(n / (ratio + 1))))
        perm = rng.permutation(n)
        test = set(perm[:n_test].tolist())
        for i, e in enumerate(items):
            manifest.append({"path": e["path"], "split": "test" if i in test else "train",
                             "category": cat})
    return manifest


def epoch_subset(manifest, epoch: int, seed=0, fraction: float = 0.2,
                 categories=("complex_character", "simple_character")) -> list[dict]:
    """Training entries for one epoch with the character categories
    subsampled to ``fraction``."""
    rng = np.random.default_rng([int(seed), int(epoch)])
    train = [e for e in manifest if e["split"] == "train"]
    chars = [e for e in train if e["category"] in categories]
    rest = [e for e in train if e["category"] not in categories]
    if chars:
        n = max(1, int(round(fraction * len(chars))))
        pick = sorted(rng.choice(len(chars), size=n, replace=False))
        chars = [chars[i] for i in pick]
    return rest + chars
