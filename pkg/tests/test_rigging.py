import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigsim.errors import InputError
from rigsim.rigging import (
    IDENTITY_6D,
    PoseParams,
    PoseTrajectory,
    Skeleton,
    axis_angle_matrix,
    deform,
    fk_backward,
    forward_kinematics,
    lbs_backward,
    lbs_deform,
    load_skeleton,
    load_trajectory,
    matrix_to_rot6d,
    normalize_weights,
    rot6d_backward,
    rot6d_to_matrix,
    save_skeleton,
    save_trajectory,
    to_homogeneous,
)


def _rest(positions):
    rest = np.zeros((len(positions), 3, 4))
    rest[:, :, :3] = np.eye(3)
    rest[:, :, 3] = positions
    return rest


def _random_skeleton(rng, n_joints=4, n_verts=12):
    parent = [-1] + [int(rng.integers(0, i)) for i in range(1, n_joints)]
    R = axis_angle_matrix(rng.normal(size=3), rng.uniform(0, np.pi, n_joints))
    rest = np.concatenate([R, rng.normal(size=(n_joints, 3, 1))], axis=2)
    W = normalize_weights(rng.uniform(size=(n_verts, n_joints)))
    return Skeleton(parent, rest, W)


def _random_pose(rng, n_joints, scale=0.3):
    return PoseParams(IDENTITY_6D + rng.normal(0, scale, (n_joints, 6)), rng.normal(0, scale, (n_joints, 3)))


# ---------------------------------------------------------------- 6D rotations

def test_rot6d_identity():
    np.testing.assert_allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_rot6d_scale_invariant():
    np.testing.assert_allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))


@pytest.mark.parametrize("r", [[1, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0]])
def test_rot6d_degenerate(r):
    with pytest.raises(InputError):
        rot6d_to_matrix(r)


def test_rot6d_round_trip():
    R = axis_angle_matrix([1, 2, 3], 0.7)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_rot6d_is_rotation(r):
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    assume(n1 > 1e-3 and np.linalg.norm(np.cross(a1, a2)) > 1e-3 * n1)
    R = rot6d_to_matrix(r)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1) < 1e-6


def test_rot6d_backward_matches_fd(rng):
    r = rng.normal(size=6)
    G = rng.normal(size=(3, 3))
    g = rot6d_backward(r, G)
    h = 1e-6
    fd = np.array([((rot6d_to_matrix(r + h * e) - rot6d_to_matrix(r - h * e)) * G).sum() / (2 * h)
                   for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- skeleton

def test_skeleton_validation():
    W = np.ones((3, 2)) / 2
    with pytest.raises(InputError, match="root"):
        Skeleton([-1, -1], _rest(np.zeros((2, 3))), W)
    with pytest.raises(InputError, match="tree"):
        Skeleton([-1, 2, 1], _rest(np.zeros((3, 3))), np.ones((3, 3)) / 3)
    with pytest.raises(InputError, match="sum to 1"):
        Skeleton([-1, 0], _rest(np.zeros((2, 3))), np.ones((3, 2)))


def test_normalize_weights_caps_influences():
    w = normalize_weights(np.arange(1, 11, dtype=float)[None], max_influences=8)
    assert (w > 0).sum() == 8 and w[0, 0] == 0 and w[0, 1] == 0
    assert abs(w.sum() - 1) < 1e-12


def test_skeleton_file_round_trip(tmp_path, rng):
    sk = _random_skeleton(rng)
    save_skeleton(tmp_path / "s.json", sk)
    back = load_skeleton(tmp_path / "s.json", 12)
    np.testing.assert_array_equal(back.parent, sk.parent)
    np.testing.assert_allclose(back.rest_global, sk.rest_global, atol=1e-15)
    np.testing.assert_allclose(back.weights, sk.weights, atol=1e-15)


def test_trajectory_file_round_trip(tmp_path, rng):
    traj = PoseTrajectory(rng.normal(size=(3, 2, 6)), rng.normal(size=(3, 2, 3)))
    save_trajectory(tmp_path / "t.csv", traj)
    back = load_trajectory(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.rot, traj.rot)
    np.testing.assert_array_equal(back.trans, traj.trans)


# ---------------------------------------------------------------- forward kinematics

def test_fk_identity_pose_gives_rest(rng):
    sk = _random_skeleton(rng)
    T = forward_kinematics(sk, PoseParams.identity(sk.n_joints))
    np.testing.assert_allclose(T, sk.rest_global, atol=1e-12)


def test_fk_two_joint_translation():
    sk = Skeleton([-1, 0], _rest(np.zeros((2, 3))), np.ones((1, 2)) / 2)
    pose = PoseParams.identity(2)
    pose.trans[0] = [1, 0, 0]
    pose.trans[1] = [0, 1, 0]
    T = forward_kinematics(sk, pose)
    np.testing.assert_allclose(T[1][:, 3], [1, 1, 0], atol=1e-12)


def test_fk_rotated_root_moves_child():
    sk = Skeleton([-1, 0], _rest(np.array([[0, 0, 0], [1, 0, 0]])), np.ones((1, 2)) / 2)
    pose = PoseParams.identity(2)
    pose.rot[0] = matrix_to_rot6d(axis_angle_matrix([0, 0, 1], np.pi / 2))
    T = forward_kinematics(sk, pose)
    np.testing.assert_allclose(T[1][:, 3], [0, 1, 0], atol=1e-12)


def test_fk_joint_count_mismatch(rng):
    sk = _random_skeleton(rng)
    with pytest.raises(InputError):
        forward_kinematics(sk, PoseParams.identity(sk.n_joints + 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fk_matches_explicit_chain(seed):
    rng = np.random.default_rng(seed)
    sk = _random_skeleton(rng, n_joints=5)
    pose = _random_pose(rng, 5)
    T = forward_kinematics(sk, pose)
    for i in range(5):
        chain = sk.chain(i)
        M = to_homogeneous(sk.rest_global[chain[0]])
        for k, j in enumerate(chain):
            if k > 0:
                M = M @ sk.rest_local[j]
            L = np.eye(4)
            L[:3, :3] = rot6d_to_matrix(pose.rot[j])
            L[:3, 3] = pose.trans[j]
            M = M @ L
        np.testing.assert_allclose(T[i], M[:3], atol=1e-9)
        R = T[i][:, :3]
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


# ---------------------------------------------------------------- skinning

def test_lbs_identity_pose(rng):
    sk = _random_skeleton(rng)
    X = rng.normal(size=(12, 3))
    np.testing.assert_allclose(deform(sk, X, PoseParams.identity(sk.n_joints)), X, atol=1e-9)


def test_lbs_rigid_attachment():
    sk = Skeleton([-1, 0], _rest(np.array([[0, 0, 0], [1, 0, 0]])), [[0.0, 1.0]])
    pose = PoseParams.identity(2)
    d = np.array([0.2, -0.3, 0.5])
    pose.trans[1] = d
    X = np.array([[1.5, 0.2, 0.1]])
    np.testing.assert_allclose(deform(sk, X, pose), X + d, atol=1e-12)


def test_lbs_half_half_blend():
    rest = _rest(np.array([[0, 0, 0], [1, 0, 0]]))
    W = np.array([[0.5, 0.5]])
    X = np.array([[0.5, 0.0, 0.0]])
    d1, d2 = np.array([1.0, 0, 0]), np.array([0, 2.0, 0])
    T = rest.copy()
    T[0, :, 3] += d1
    T[1, :, 3] += d2
    np.testing.assert_allclose(lbs_deform(X, W, T, rest), X + (d1 + d2) / 2, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lbs_global_rigid_equivariance(seed):
    rng = np.random.default_rng(seed)
    sk = _random_skeleton(rng)
    X = rng.normal(size=(12, 3))
    G = np.eye(4)
    G[:3, :3] = axis_angle_matrix(rng.normal(size=3), rng.uniform(-3, 3))
    G[:3, 3] = rng.normal(size=3)
    T = (G @ to_homogeneous(sk.rest_global))[:, :3]
    np.testing.assert_allclose(lbs_deform(X, sk.weights, T, sk.rest_global), X @ G[:3, :3].T + G[:3, 3], atol=1e-9)


def test_fk_lbs_gradient_matches_fd(rng):
    sk = _random_skeleton(rng)
    X = rng.normal(size=(12, 3))
    pose = _random_pose(rng, sk.n_joints)
    Wx = rng.normal(size=(12, 3))

    def loss(rot, trans):
        return float((deform(sk, X, (rot, trans)) * Wx).sum())

    gT = lbs_backward(X, sk.weights, sk.rest_global, Wx)
    g_rot, g_trans = fk_backward(sk, pose, gT)
    h = 1e-5
    for g, which in ((g_rot, 0), (g_trans, 1)):
        base = [pose.rot, pose.trans]
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[which][idx] += h
            minus[which][idx] -= h
            fd[idx] = (loss(*plus) - loss(*minus)) / (2 * h)
        big = np.abs(fd) > 1e-6
        assert np.max(np.abs(g - fd)[big] / np.abs(fd)[big]) < 1e-4


def test_trajectory_validation():
    with pytest.raises(InputError):
        PoseTrajectory(np.zeros((2, 3, 6)), np.zeros((2, 2, 3)))
    with pytest.raises(InputError):
        PoseParams(np.full((1, 6), np.nan), np.zeros((1, 3)))
