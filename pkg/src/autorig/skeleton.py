"""Core rig data model: meshes, skeletons, skin weights and whole assets.

All containers hold read-only numpy arrays. Constructors never validate so
that broken assets can be built and inspected with :func:`validate_rig`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROOT = -1
K_MIN = 2
K_MAX = 100
MAX_INFLUENCES = 8
ROW_SUM_TOL = 1e-6

CATEGORIES = (
    "complex_character",
    "simple_character",
    "animal",
    "marine",
    "bird",
    "insect",
    "plant",
    "other",
)


class RigValidationError(ValueError):
    """Raised when an operation needs a valid rig and gets an invalid one."""

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(f"{v.code}: {v.message}" for v in self.violations)
        super().__init__(msg or "invalid rig")


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64).reshape(-1, 3))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangles(self) -> np.ndarray:
        """(f, 3, 3) array of triangle corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)


@dataclass(frozen=True)
class Skeleton:
    joints: np.ndarray
    parents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joints", _frozen(self.joints, np.float64).reshape(-1, 3))
        object.__setattr__(self, "parents", _frozen(self.parents, np.int64).reshape(-1))

    @property
    def k(self) -> int:
        return len(self.joints)

    @property
    def root(self) -> int:
        roots = np.flatnonzero(self.parents == ROOT)
        if len(roots) != 1:
            raise RigValidationError(_skeleton_violations(self))
        return int(roots[0])

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.k)]
        for j, p in enumerate(self.parents):
            if 0 <= p < self.k:
                kids[p].append(j)
        return kids

    def with_joints(self, joints) -> "Skeleton":
        return Skeleton(joints, self.parents)


@dataclass(frozen=True)
class SkinWeights:
    """Per-vertex convex joint weights.

    Stored densely as an ``(n, k)`` matrix; :meth:`rows` gives the sparse
    ``(joint, weight)`` view used by the file format.
    """

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(np.atleast_2d(self.matrix), np.float64))

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_joints(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_rows(cls, rows, n_joints: int) -> "SkinWeights":
        m = np.zeros((len(rows), n_joints))
        for i, row in enumerate(rows):
            for j, w in row:
                m[i, int(j)] += float(w)
        return cls(m)

    def rows(self) -> list[list[tuple[int, float]]]:
        out = []
        for r in self.matrix:
            nz = np.flatnonzero(r)
            out.append([(int(j), float(r[j])) for j in nz])
        return out


@dataclass(frozen=True)
class RigAsset:
    mesh: Mesh
    skeleton: Skeleton
    skin: Optional[SkinWeights] = None
    category: str = "other"
    # unknown JSON fields, carried through load/save untouched
    extra: dict = field(default_factory=dict, compare=False)

    def replace(self, **changes) -> "RigAsset":
        kw = dict(mesh=self.mesh, skeleton=self.skeleton, skin=self.skin,
                  category=self.category, extra=self.extra)
        kw.update(changes)
        return RigAsset(**kw)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def _skeleton_violations(skel: Skeleton) -> list[Violation]:
    out: list[Violation] = []
    k = len(skel.joints)
    parents = skel.parents
    if len(parents) != k:
        out.append(Violation("parent_count_mismatch",
                             f"{len(parents)} parents for {k} joints"))
        return out
    if not (K_MIN <= k <= K_MAX):
        out.append(Violation("joint_count_out_of_range", f"k={k} outside [{K_MIN}, {K_MAX}]"))
    if not np.all(np.isfinite(skel.joints)):
        out.append(Violation("non_finite_joint", "joint coordinates must be finite"))
    n_roots = int(np.sum(parents == ROOT))
    if n_roots == 0:
        out.append(Violation("no_root", "no joint has parent -1"))
    elif n_roots > 1:
        out.append(Violation("multiple_roots", f"{n_roots} joints have parent -1"))
    bad = [j for j, p in enumerate(parents) if p != ROOT and not (0 <= p < k)]
    for j in bad:
        out.append(Violation("parent_index_out_of_range",
                             f"joint {j} has parent index {int(parents[j])}, k={k}"))
    if bad:
        return out
    if any(p == j for j, p in enumerate(parents)):
        out.append(Violation("cycle_detected", "joint is its own parent"))
        return out
    # walk each joint up to a root; revisiting a node on the walk means a cycle
    state = np.zeros(k, dtype=np.int8)  # 0 unseen, 1 on stack, 2 reaches root
    cycle = False
    for start in range(k):
        path = []
        j = start
        while j != ROOT and state[j] == 0:
            state[j] = 1
            path.append(j)
            j = int(parents[j])
        if j != ROOT and state[j] == 1:
            cycle = True
        for p in path:
            state[p] = 2
    if cycle:
        out.append(Violation("cycle_detected", "parent links contain a cycle"))
    elif n_roots > 1:
        out.append(Violation("disconnected", "parent graph is a forest, not a tree"))
    return out


def validate_skeleton(skel: Skeleton) -> list[Violation]:
    return _skeleton_violations(skel)


def validate_mesh(mesh: Mesh) -> list[Violation]:
    out: list[Violation] = []
    n = len(mesh.vertices)
    if n < 3:
        out.append(Violation("too_few_vertices", f"mesh has {n} vertices, need >= 3"))
    if not np.all(np.isfinite(mesh.vertices)):
        out.append(Violation("non_finite_vertex", "vertex coordinates must be finite"))
    if len(mesh.faces):
        f = mesh.faces
        if np.any((f < 0) | (f >= n)):
            out.append(Violation("face_index_out_of_range", "face references a missing vertex"))
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(degenerate):
            out.append(Violation("degenerate_face",
                                 f"{int(degenerate.sum())} faces repeat a vertex index"))
    else:
        out.append(Violation("no_faces", "mesh has no faces"))
    return out


def validate_rig(asset: RigAsset) -> list[Violation]:
    """Return every violated invariant of ``asset``; empty means valid."""
    out = validate_mesh(asset.mesh)
    n = len(asset.mesh.vertices)
    out.extend(_skeleton_violations(asset.skeleton))
    if asset.category not in CATEGORIES:
        out.append(Violation("unknown_category", f"category {asset.category!r}"))
    skin = asset.skin
    if skin is not None:
        m = skin.matrix
        if m.shape[0] != n:
            out.append(Violation("skin_row_count", f"{m.shape[0]} skin rows for {n} vertices"))
        if m.shape[1] != asset.skeleton.k:
            out.append(Violation("skin_joint_count",
                                 f"skin has {m.shape[1]} joint columns, skeleton has {asset.skeleton.k}"))
        if not np.all(np.isfinite(m)):
            out.append(Violation("non_finite_weight", "skin weights must be finite"))
        elif m.size:
            if np.any(m < 0):
                out.append(Violation("negative_weight", "skin weights must be >= 0"))
            sums = m.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
                out.append(Violation("row_sum", "skin rows must sum to 1"))
            if np.any((m != 0).sum(axis=1) > MAX_INFLUENCES):
                out.append(Violation("too_many_influences",
                                     f"a row has more than {MAX_INFLUENCES} nonzero weights"))
    return out


def require_valid(asset_or_skeleton) -> None:
    if isinstance(asset_or_skeleton, Skeleton):
        v = validate_skeleton(asset_or_skeleton)
    else:
        v = validate_rig(asset_or_skeleton)
    if v:
        raise RigValidationError(v)


@dataclass(frozen=True)
class NormTransform:
    """``normalized = (x - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def bbox_transform(vertices) -> NormTransform:
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise ValueError("degenerate bounding box")
    return NormTransform(center=(lo + hi) / 2.0, scale=2.0 / extent)


def normalize_rig(asset: RigAsset) -> tuple[RigAsset, NormTransform]:
    """Map the mesh bounding box into [-1, 1] (uniform scale, centered)."""
    if len(asset.mesh.vertices) == 0:
        raise ValueError("empty mesh")
    tf = bbox_transform(asset.mesh.vertices)
    out = asset.replace(
        mesh=asset.mesh.with_vertices(tf.apply(asset.mesh.vertices)),
        skeleton=asset.skeleton.with_joints(tf.apply(asset.skeleton.joints)),
    )
    return out, tf


def traversal_order(skel: Skeleton) -> list[int]:
    """Depth-first joint order from the root, children by (x, y, z) position."""
    require_valid(skel)
    kids = skel.children()
    joints = skel.joints
    order = []
    stack = [skel.root]
    while stack:
        j = stack.pop()
        order.append(j)
        ch = sorted(kids[j], key=lambda c: (joints[c, 0], joints[c, 1], joints[c, 2], c))
        stack.extend(reversed(ch))
    return order


def bones_of(skel: Skeleton) -> list[tuple[int, int]]:
    """(parent, child) pairs in traversal order of the child."""
    return [(int(skel.parents[c]), c) for c in traversal_order(skel)[1:]]


def reorder(skel: Skeleton, order) -> Skeleton:
    """Relabel joints so that new joint ``i`` is old joint ``order[i]``."""
    order = np.asarray(order)
    inv = np.empty(len(order), dtype=np.int64)
    inv[order] = np.arange(len(order))
    parents = np.array([ROOT if skel.parents[o] == ROOT else inv[skel.parents[o]] for o in order])
    return Skeleton(skel.joints[order], parents)


def bone_segments(skel: Skeleton) -> np.ndarray:
    """(b, 2, 3) array of bone endpoints (parent first)."""
    b = bones_of(skel)
    if not b:
        return np.zeros((0, 2, 3))
    idx = np.array(b)
    return np.stack([skel.joints[idx[:, 0]], skel.joints[idx[:, 1]]], axis=1)


def same_topology(a: Skeleton, b: Skeleton) -> bool:
    """True if the joints of ``a`` and ``b`` pair up one-to-one by position
    (optimal assignment) and every pair has corresponding parents."""
    from scipy.optimize import linear_sum_assignment

    if a.k != b.k:
        return False
    cost = np.linalg.norm(a.joints[:, None, :] - b.joints[None, :, :], axis=-1)
    ia, ib = linear_sum_assignment(cost)
    to_b = np.empty(a.k, dtype=np.int64)
    to_b[ia] = ib
    for j in range(a.k):
        pa = a.parents[j]
        pb = b.parents[to_b[j]]
        if (pa == ROOT) != (pb == ROOT):
            return False
        if pa != ROOT and to_b[pa] != pb:
            return False
    return True
