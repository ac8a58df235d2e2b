"""Minimum-spanning-tree connectivity for an unordered joint set."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .skeleton import ROOT, Skeleton


def centroid_root(joints: np.ndarray) -> int:
    d = np.linalg.norm(joints - joints.mean(axis=0), axis=1)
    return int(np.argmin(d))


def mst_connectivity(joints, root_rule=centroid_root) -> Skeleton:
    """Prim's algorithm on the complete Euclidean graph, grown from the root
    so parent links already point away from it. Ties go to the lowest index."""
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    k = len(joints)
    if k < 2:
        raise ValueError("need at least two joints")
    d = cdist(joints, joints)
    off_diag = d[~np.eye(k, dtype=bool)]
    if np.any(off_diag == 0):
        raise ValueError("degenerate joint set")
    root = root_rule(joints)
    parents = np.full(k, ROOT, dtype=np.int64)
    in_tree = np.zeros(k, dtype=bool)
    in_tree[root] = True
    best = d[root].copy()
    link = np.full(k, root)
    for _ in range(k - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        in_tree[j] = True
        parents[j] = link[j]
        closer = (d[j] < best) & ~in_tree
        best[closer] = d[j][closer]
        link[closer] = j
    return Skeleton(joints, parents)


def tree_weight(skel: Skeleton) -> float:
    j = skel.joints
    return float(sum(np.linalg.norm(j[c] - j[p]) for c, p in enumerate(skel.parents) if p != ROOT))
