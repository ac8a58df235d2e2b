import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import oracles
from autorig.deform import (JointTransform, Pose, augment_pose, forward_kinematics, linear_blend_skinning,
                            random_pose)
from autorig.skeleton import Mesh, Skeleton, SkinWeights, same_topology, validate_rig

CHAIN = Skeleton(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([-1, 0, 1]))


def z_pose(degrees):
    return Pose(Rotation.from_euler("z", degrees, degrees=True).as_quat())


def test_identity_pose():
    posed, world = forward_kinematics(CHAIN, Pose.identity(3))
    np.testing.assert_array_equal(posed, CHAIN.joints)
    for t in world:
        np.testing.assert_allclose(t.matrix(), np.eye(4), atol=1e-15)


def test_root_rotation_moves_child():
    two = Skeleton(CHAIN.joints[:2], np.array([-1, 0]))
    posed, _ = forward_kinematics(two, z_pose([90, 0]))
    np.testing.assert_allclose(posed[1], [0, 1, 0], atol=1e-12)


def test_two_successive_rotations():
    posed, _ = forward_kinematics(CHAIN, z_pose([90, 90, 0]))
    np.testing.assert_allclose(posed[2], [-1, 1, 0], atol=1e-12)


def test_pose_length_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(CHAIN, Pose.identity(2))
    with pytest.raises(ValueError):
        Pose(np.array([[0.0, 0, 0, 2]]))


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_fk_matches_recursive_oracle(k, seed):
    rng = np.random.default_rng(seed)
    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, k)]
    skel = Skeleton(rng.uniform(-1, 1, (k, 3)), np.array(parents))
    pose = random_pose(k, rng, 90.0)
    rots = Rotation.from_quat(pose.rotations).as_matrix().tolist()
    ref = oracles.fk_matrices(skel.joints.tolist(), parents, rots)
    posed, world = forward_kinematics(skel, pose)
    for j in range(k):
        np.testing.assert_allclose(world[j].matrix(), ref[j], atol=1e-12)
        np.testing.assert_allclose(posed[j], oracles.apply_h(ref[j], skel.joints[j].tolist()), atol=1e-12)


@given(st.integers(0, 2**31))
def test_fk_preserves_bone_lengths(seed):
    rng = np.random.default_rng(seed)
    posed, _ = forward_kinematics(CHAIN, random_pose(3, rng, 180.0))
    np.testing.assert_allclose(np.linalg.norm(np.diff(posed, axis=0), axis=1), [1, 1], atol=1e-12)


def _mesh():
    return Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2], [0, 1, 3]]))


def test_lbs_identity_and_rigid():
    mesh = _mesh()
    skin = SkinWeights(np.array([[1, 0], [0.3, 0.7], [0.5, 0.5], [0, 1.0]]))
    same = linear_blend_skinning(mesh, skin, [JointTransform.identity()] * 2)
    np.testing.assert_array_equal(same.vertices, mesh.vertices)
    T = JointTransform(Rotation.from_rotvec([0.3, -0.2, 1.0]).as_quat(), [0.5, -1, 2])
    moved = linear_blend_skinning(mesh, skin, [T, T])
    np.testing.assert_allclose(moved.vertices, T.apply(mesh.vertices), atol=1e-12)


def test_lbs_half_weights_average():
    mesh = _mesh()
    skin = SkinWeights(np.full((4, 2), 0.5))
    shift = JointTransform(np.array([0.0, 0, 0, 1]), [1, 0, 0])
    out = linear_blend_skinning(mesh, skin, [JointTransform.identity(), shift])
    np.testing.assert_allclose(out.vertices - mesh.vertices, np.tile([0.5, 0, 0], (4, 1)), atol=1e-15)
    with pytest.raises(ValueError):
        linear_blend_skinning(mesh, skin, [shift])


def test_augment_zero_angle_is_identity(chain_rig):
    out = augment_pose(chain_rig, 3, max_angle=0.0)
    np.testing.assert_allclose(out.skeleton.joints, chain_rig.skeleton.joints, atol=1e-12)
    np.testing.assert_allclose(out.mesh.vertices, chain_rig.mesh.vertices, atol=1e-12)


def test_augment_deterministic_and_valid(biped_rig):
    a = augment_pose(biped_rig, 11)
    b = augment_pose(biped_rig, 11)
    assert a.skeleton.joints.tobytes() == b.skeleton.joints.tobytes()
    assert a.mesh.vertices.tobytes() == b.mesh.vertices.tobytes()
    assert validate_rig(a) == []
    assert same_topology(a.skeleton, biped_rig.skeleton)
    assert not np.allclose(a.skeleton.joints, biped_rig.skeleton.joints)


def test_augment_requires_skin(chain_rig):
    with pytest.raises(ValueError, match="augmentation requires skinning"):
        augment_pose(chain_rig.replace(skin=None), 0)
