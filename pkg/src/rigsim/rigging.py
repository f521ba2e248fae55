"""Skeleton hierarchy, 6D rotations, forward kinematics and linear blend skinning.

Pose parameters are per joint a 6D rotation (two 3-vectors, orthonormalized
by Gram-Schmidt) and a translation. A joint's global transform is

    T_i = T_parent(i) @ L_i @ [R(r_i) | t_i]

where ``L_i`` is the rest transform of joint ``i`` relative to its parent, so
the identity pose (``r = (1,0,0,0,1,0)``, ``t = 0``) reproduces the rest
skeleton. Skinning is applied in rest-relative form,
``x = sum_k w_k T_k rest_k^{-1} X``.

All functions accept arbitrary leading batch dimensions (e.g. frames) and
come with explicit backward functions used by the pose optimizer.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
MAX_INFLUENCES = 8


@dataclass
class Skeleton:
    """Joint tree with rest transforms and per-vertex skinning weights.

    ``rest_global`` holds one rigid (3, 4) world transform per joint and
    ``weights`` is a dense (n_vertices, n_joints) matrix; rows sum to one.
    The rest pose is assumed to be the bind pose (identity local motion).
    """

    parent: np.ndarray
    rest_global: np.ndarray
    weights: np.ndarray
    names: list | None = None

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64).ravel()
        self.rest_global = np.asarray(self.rest_global, dtype=np.float64).reshape(-1, 3, 4)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        J = len(self.parent)
        if self.names is None:
            self.names = [f"joint{i}" for i in range(J)]
        if len(self.rest_global) != J or self.weights.ndim != 2 or self.weights.shape[1] != J:
            raise InputError("skeleton arrays disagree on joint count")
        roots = np.flatnonzero(self.parent < 0)
        if roots.tolist() != [0]:
            raise InputError("skeleton must have a single root at index 0")
        if np.any(self.parent >= J):
            raise InputError("parent index out of range")
        self.order = _topological_order(self.parent)
        R = self.rest_global[:, :, :3]
        if np.abs(np.einsum("jab,jac->jbc", R, R) - np.eye(3)).max() > 1e-6:
            raise InputError("rest transforms must be rigid")
        if self.weights.min() < 0 or np.abs(self.weights.sum(axis=1) - 1).max() > 1e-6:
            raise InputError("skinning weights must be nonnegative and sum to 1")
        rest4 = to_homogeneous(self.rest_global)
        self.rest_inv = np.linalg.inv(rest4)
        self.rest_local = rest4.copy()
        for i in range(1, J):
            self.rest_local[i] = self.rest_inv[self.parent[i]] @ rest4[i]

    @property
    def n_joints(self):
        return len(self.parent)

    @property
    def joint_positions(self):
        return self.rest_global[:, :, 3]

    def chain(self, i):
        """Joint indices from the root down to ``i``."""
        out = [i]
        while self.parent[out[-1]] >= 0:
            out.append(self.parent[out[-1]])
        return out[::-1]


def _topological_order(parent):
    J = len(parent)
    children = [[] for _ in range(J)]
    for i in range(1, J):
        children[parent[i]].append(i)
    order, stack = [], [0]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(reversed(children[i]))
    if len(order) != J:
        raise InputError("parent indices do not form a tree rooted at joint 0")
    return np.asarray(order)


def normalize_weights(weights, max_influences=MAX_INFLUENCES):
    """Keep the largest ``max_influences`` weights per vertex and renormalize."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    if w.shape[1] > max_influences:
        drop = np.argsort(-w, axis=1, kind="stable")[:, max_influences:]
        np.put_along_axis(w, drop, 0.0, axis=1)
    s = w.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise InputError("vertex without skinning influence")
    return w / s


@dataclass
class PoseParams:
    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 6)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(-1, 3)
        if len(self.rot) != len(self.trans):
            raise InputError("rotation and translation joint counts differ")
        if not (np.isfinite(self.rot).all() and np.isfinite(self.trans).all()):
            raise InputError("pose parameters must be finite")

    @classmethod
    def identity(cls, n_joints):
        return cls(np.tile(IDENTITY_6D, (n_joints, 1)), np.zeros((n_joints, 3)))


@dataclass
class PoseTrajectory:
    """Per-frame pose parameters stacked as ``rot (T, J, 6)`` and ``trans (T, J, 3)``."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.rot.ndim != 3 or self.rot.shape[2] != 6 or self.trans.shape != self.rot.shape[:2] + (3,):
            raise InputError("trajectory arrays must be (T, J, 6) and (T, J, 3)")

    @property
    def n_frames(self):
        return self.rot.shape[0]

    @property
    def frames(self):
        return [PoseParams(r, t) for r, t in zip(self.rot, self.trans)]

    @classmethod
    def identity(cls, n_frames, n_joints):
        return cls(np.tile(IDENTITY_6D, (n_frames, n_joints, 1)), np.zeros((n_frames, n_joints, 3)))

    def copy(self):
        return PoseTrajectory(self.rot.copy(), self.trans.copy())


def to_homogeneous(T):
    T = np.asarray(T)
    out = np.zeros(T.shape[:-2] + (4, 4))
    out[..., :3, :] = T
    out[..., 3, 3] = 1.0
    return out


def rot6d_to_matrix(r):
    """Map 6D vectors (..., 6) to rotation matrices (..., 3, 3).

    The first three entries give the first column after normalization; the
    last three are orthogonalized against it for the second column; the
    third column is their cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-9):
        raise InputError("degenerate 6D rotation: first vector is zero")
    b1 = a1 / n1
    u = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-9):
        raise InputError("degenerate 6D rotation: vectors are parallel or second is zero")
    b2 = u / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_backward(r, grad_R):
    """Gradient w.r.t. the 6D vector given the gradient w.r.t. the rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    d = (b1 * a2).sum(-1, keepdims=True)
    u = a2 - d * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    b2 = u / n2
    g1, g2, g3 = grad_R[..., :, 0], grad_R[..., :, 1], grad_R[..., :, 2]
    g1 = g1 + np.cross(b2, g3)
    g2 = g2 + np.cross(g3, b1)
    gu = (g2 - b2 * (b2 * g2).sum(-1, keepdims=True)) / n2
    ga2 = gu.copy()
    gd = -(gu * b1).sum(-1, keepdims=True)
    g1 = g1 - d * gu + gd * a2
    ga2 = ga2 + gd * b1
    ga1 = (g1 - b1 * (b1 * g1).sum(-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians (broadcasts over angle)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def geodesic_angle(R1, R2):
    """Rotation angle (radians) of ``R1^T R2``."""
    c = (np.einsum("...ab,...ab->...", R1, R2) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def _pose_arrays(pose):
    if isinstance(pose, (PoseParams, PoseTrajectory)):
        return pose.rot, pose.trans
    rot, trans = pose
    return np.asarray(rot, dtype=np.float64), np.asarray(trans, dtype=np.float64)


def _local_motion(rot, trans):
    P = np.zeros(rot.shape[:-1] + (4, 4))
    P[..., :3, :3] = rot6d_to_matrix(rot)
    P[..., :3, 3] = trans
    P[..., 3, 3] = 1.0
    return P


def forward_kinematics(skeleton, pose):
    """Global joint transforms (..., J, 3, 4) for pose parameters (..., J, 6) / (..., J, 3)."""
    rot, trans = _pose_arrays(pose)
    if rot.shape[-2] != skeleton.n_joints:
        raise InputError(f"pose has {rot.shape[-2]} joints, skeleton has {skeleton.n_joints}")
    G = _fk_homogeneous(skeleton, rot, trans)
    return G[..., :3, :]


def _fk_homogeneous(skeleton, rot, trans):
    P = _local_motion(rot, trans)
    G = np.empty_like(P)
    for i in skeleton.order:
        p = skeleton.parent[i]
        if p < 0:
            G[..., i, :, :] = to_homogeneous(skeleton.rest_global[i]) @ P[..., i, :, :]
        else:
            G[..., i, :, :] = G[..., p, :, :] @ (skeleton.rest_local[i] @ P[..., i, :, :])
    return G


def fk_backward(skeleton, pose, grad_T):
    """Gradients (rot, trans) of a scalar given its gradient w.r.t. global transforms (..., J, 3, 4)."""
    rot, trans = _pose_arrays(pose)
    P = _local_motion(rot, trans)
    G = _fk_homogeneous(skeleton, rot, trans)
    gG = np.zeros_like(G)
    gG[..., :3, :] = grad_T
    gP = np.zeros_like(P)
    for i in skeleton.order[::-1]:
        p = skeleton.parent[i]
        gi = gG[..., i, :, :]
        if p < 0:
            gP[..., i, :, :] = to_homogeneous(skeleton.rest_global[i]).T @ gi
        else:
            A = skeleton.rest_local[i] @ P[..., i, :, :]
            gG[..., p, :, :] += gi @ np.swapaxes(A, -1, -2)
            gA = np.swapaxes(G[..., p, :, :], -1, -2) @ gi
            gP[..., i, :, :] = skeleton.rest_local[i].T @ gA
    g_rot = rot6d_backward(rot, gP[..., :3, :3])
    g_trans = gP[..., :3, 3]
    return g_rot, g_trans


def _skin_matrices(joint_transforms, rest_global):
    rest_inv = np.linalg.inv(to_homogeneous(rest_global))
    return np.asarray(joint_transforms) @ rest_inv, rest_inv


def lbs_deform(rest_vertices, skin_weights, joint_transforms, rest_global):
    """Linear blend skinning in rest-relative form; returns (..., V, 3)."""
    X = np.asarray(rest_vertices, dtype=np.float64)
    M, _ = _skin_matrices(joint_transforms, rest_global)
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    return np.einsum("vk,...kab,vb->...va", skin_weights, M, Xh, optimize=True)


def lbs_backward(rest_vertices, skin_weights, rest_global, grad_x):
    """Gradient w.r.t. global joint transforms (..., J, 3, 4) given the gradient w.r.t. deformed vertices."""
    X = np.asarray(rest_vertices, dtype=np.float64)
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    rest_inv = np.linalg.inv(to_homogeneous(rest_global))
    gM = np.einsum("vk,...va,vb->...kab", skin_weights, grad_x, Xh, optimize=True)
    return gM @ np.swapaxes(rest_inv, -1, -2)


def deform(skeleton, rest_vertices, pose):
    """FK followed by LBS for a single pose or a stacked trajectory."""
    T = forward_kinematics(skeleton, pose)
    return lbs_deform(rest_vertices, skeleton.weights, T, skeleton.rest_global)


def save_skeleton(path, skeleton):
    """Write the skeleton document: ``joints`` (name, parent, rest 3x4) and sparse ``weights``."""
    joints = [{"name": n, "parent": int(p), "rest": skeleton.rest_global[i].ravel().tolist()}
              for i, (n, p) in enumerate(zip(skeleton.names, skeleton.parent))]
    weights = {}
    for v, row in enumerate(skeleton.weights):
        nz = np.flatnonzero(row)
        weights[str(v)] = [[int(k), float(row[k])] for k in nz]
    with open(path, "w") as fh:
        json.dump({"joints": joints, "weights": weights}, fh, indent=1)


def load_skeleton(path, n_vertices=None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
        joints = doc["joints"]
        parent = [j["parent"] for j in joints]
        rest = [np.asarray(j["rest"], dtype=np.float64).reshape(3, 4) for j in joints]
        names = [j.get("name", f"joint{i}") for i, j in enumerate(joints)]
        nv = n_vertices if n_vertices is not None else 1 + max(int(k) for k in doc["weights"])
        W = np.zeros((nv, len(joints)))
        for key, pairs in doc["weights"].items():
            for k, w in pairs:
                W[int(key), int(k)] = float(w)
    except (OSError, KeyError, ValueError, TypeError, IndexError) as exc:
        raise InputError(f"{path}: cannot parse skeleton ({exc})") from None
    return Skeleton(parent, rest, normalize_weights(W), names)


def save_trajectory(path, traj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "r0", "r1", "r2", "r3", "r4", "r5", "tx", "ty", "tz"])
        for f in range(traj.n_frames):
            for j in range(traj.rot.shape[1]):
                w.writerow([f, j] + [repr(float(c)) for c in traj.rot[f, j]]
                           + [repr(float(c)) for c in traj.trans[f, j]])


def load_trajectory(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                rows.append((int(row["frame"]), int(row["joint"]),
                             [float(row[f"r{i}"]) for i in range(6)],
                             [float(row[c]) for c in ("tx", "ty", "tz")]))
            except (KeyError, ValueError, TypeError):
                raise InputError(f"{path}:{lineno}: bad trajectory record") from None
    if not rows:
        raise InputError(f"{path}: empty trajectory")
    T = 1 + max(r[0] for r in rows)
    J = 1 + max(r[1] for r in rows)
    traj = PoseTrajectory.identity(T, J)
    for f, j, r, t in rows:
        traj.rot[f, j] = r
        traj.trans[f, j] = t
    return traj
