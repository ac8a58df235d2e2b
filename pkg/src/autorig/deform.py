"""Forward kinematics, linear blend skinning and random pose augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .skeleton import ROOT, Mesh, RigAsset, Skeleton, SkinWeights, normalize_rig, require_valid, traversal_order


@dataclass(frozen=True)
class JointTransform:
    """Rigid map ``x -> R x + t``; rotation is a unit quaternion (x, y, z, w)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "JointTransform":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "JointTransform":
        m = np.asarray(m, dtype=np.float64)
        q = Rotation.from_matrix(m[:3, :3]).as_quat()
        return cls(q / np.linalg.norm(q), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = Rotation.from_quat(self.rotation).as_matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        m = self.matrix()
        return np.asarray(points, dtype=np.float64) @ m[:3, :3].T + m[:3, 3]


@dataclass(frozen=True)
class Pose:
    """Per-joint local rotations as unit quaternions (x, y, z, w), shape (k, 4)."""

    rotations: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
            raise ValueError("pose quaternions must have unit norm")
        object.__setattr__(self, "rotations", q)

    @classmethod
    def identity(cls, k: int) -> "Pose":
        q = np.zeros((k, 4))
        q[:, 3] = 1.0
        return cls(q)

    def __len__(self):
        return len(self.rotations)


def _about(rot: np.ndarray, pivot: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = pivot - rot @ pivot
    return m


def forward_kinematics(skel: Skeleton, pose: Pose) -> tuple[np.ndarray, list[JointTransform]]:
    """Posed joint positions and rest-relative world transforms per joint."""
    require_valid(skel)
    if len(pose) != skel.k:
        raise ValueError(f"pose has {len(pose)} rotations for {skel.k} joints")
    rots = Rotation.from_quat(pose.rotations).as_matrix()
    rest = skel.joints
    world = [None] * skel.k
    for j in traversal_order(skel):
        local = _about(rots[j], rest[j])
        p = skel.parents[j]
        world[j] = local if p == ROOT else world[p] @ local
    posed = np.array([w[:3, :3] @ rest[j] + w[:3, 3] for j, w in enumerate(world)])
    return posed, [JointTransform.from_matrix(w) for w in world]


def transform_stack(transforms) -> tuple[np.ndarray, np.ndarray]:
    """(k, 3, 3) rotations and (k, 3) translations."""
    mats = np.array([t.matrix() for t in transforms])
    return mats[:, :3, :3], mats[:, :3, 3]


def blend_vertices(vertices, weights, rotations, translations) -> np.ndarray:
    """``v' = sum_j w_vj (R_j v + t_j)`` for dense (n, k) weights."""
    v = np.asarray(vertices, dtype=np.float64)
    per_joint = np.einsum("kab,nb->nka", rotations, v) + translations[None]
    return np.einsum("nk,nka->na", np.asarray(weights), per_joint)


def linear_blend_skinning(mesh: Mesh, skin: SkinWeights, transforms) -> Mesh:
    if skin.n_vertices != mesh.n_vertices:
        raise ValueError(f"{skin.n_vertices} skin rows for {mesh.n_vertices} vertices")
    if len(transforms) != skin.n_joints:
        raise ValueError(f"{len(transforms)} transforms for {skin.n_joints} joints")
    rots, trans = transform_stack(transforms)
    return mesh.with_vertices(blend_vertices(mesh.vertices, skin.matrix, rots, trans))


def random_pose(k: int, rng: np.random.Generator, max_angle_deg: float) -> Pose:
    axes = rng.normal(size=(k, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.0, np.deg2rad(max_angle_deg), size=k)
    return Pose(Rotation.from_rotvec(axes * angles[:, None]).as_quat())


def augment_pose(asset: RigAsset, seed, max_angle: float = 30.0) -> RigAsset:
    """Randomly re-pose an asset with its own skin weights, then renormalize."""
    if asset.skin is None:
        raise ValueError("augmentation requires skinning")
    rng = np.random.default_rng(seed)
    skel = asset.skeleton
    pose = random_pose(skel.k, rng, max_angle)
    posed, world = forward_kinematics(skel, pose)
    mesh = linear_blend_skinning(asset.mesh, asset.skin, world)
    out, _ = normalize_rig(asset.replace(mesh=mesh, skeleton=skel.with_joints(posed)))
    # skeleton may poke slightly outside the mesh box after posing
    return out.replace(skeleton=out.skeleton.with_joints(np.clip(out.skeleton.joints, -1.0, 1.0)))
