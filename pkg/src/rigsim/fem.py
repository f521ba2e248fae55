"""Implicit FEM soft-body simulation with the Fixed Corotated material.

Each step solves the optimization form of backward Euler,

    x_{n+1} = argmin_x  1/(2 dt^2) ||x - x_tilde||_M^2 + Psi(x),   x_tilde = x_n + dt v_n,

over the free vertices with Newton's method (per-element PSD-projected
Hessian) and a backtracking line search. Vertices flagged as Dirichlet are
held at their targets; the targets come from the skeleton: each joint drives
the four vertices of the tetrahedron nearest to it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, NumericalError
from .geometry import bary_eval
from .rigging import forward_kinematics, to_homogeneous

log = logging.getLogger(__name__)


def lame_from_young(E, nu):
    """Lame parameters ``(mu, lambda)`` from Young's modulus and Poisson ratio."""
    E = np.asarray(E, dtype=np.float64)
    if np.any(E <= 0):
        raise InputError("Young's modulus must be positive")
    if not 0 <= nu < 0.5:
        raise InputError(f"Poisson ratio {nu} outside [0, 0.5)")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass
class MaterialField:
    young: np.ndarray
    poisson: float = 0.4
    density: float = 1000.0
    cluster_of: np.ndarray | None = None

    def __post_init__(self):
        self.young = np.asarray(self.young, dtype=np.float64).ravel()
        if self.cluster_of is None:
            self.cluster_of = np.zeros(len(self.young), dtype=np.int64)
        self.cluster_of = np.asarray(self.cluster_of, dtype=np.int64).ravel()
        if np.any(self.young <= 0):
            raise InputError("Young's modulus must be positive")
        if not 0 <= self.poisson < 0.5:
            raise InputError("Poisson ratio must lie in [0, 0.5)")
        if self.density <= 0:
            raise InputError("density must be positive")
        if len(self.cluster_of) != len(self.young):
            raise InputError("one cluster index per tet required")
        if len(self.cluster_of) and set(np.unique(self.cluster_of)) != set(range(self.cluster_of.max() + 1)):
            raise InputError("cluster indices must be contiguous from 0")

    @classmethod
    def uniform(cls, n_tets, young=1e4, **kw):
        return cls(np.full(n_tets, float(young)), **kw)

    @property
    def n_clusters(self):
        return int(self.cluster_of.max()) + 1

    def with_young(self, young):
        return replace(self, young=np.asarray(young, dtype=np.float64).copy())


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    is_bc: np.ndarray
    bc_target: np.ndarray

    def copy(self):
        return SimState(self.x.copy(), self.v.copy(), self.is_bc.copy(), self.bc_target.copy())


@dataclass
class StepConfig:
    dt: float = 1.0 / 96.0
    newton_max_iters: int = 20
    newton_tol: float | None = None  # None -> 1e-6 * mean(E) * mean(V)^(1/3)
    ls_shrink: float = 0.5
    ls_max_backtracks: int = 20
    gravity: tuple | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if self.newton_tol is not None and not self.newton_tol > 0:
            raise InputError("newton_tol must be positive")
        if not 0 < self.ls_shrink < 1:
            raise InputError("line-search shrink factor must lie in (0, 1)")


def deformation_gradients(x, tet):
    """Deformation gradient of every tet, (n_tets, 3, 3)."""
    return tet.shape_matrices(np.asarray(x)) @ tet.rest_Dm_inv


def deformation_gradient(tet_index, x, tet):
    p = np.asarray(x)[tet.tets[tet_index]]
    Ds = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1)
    return Ds @ tet.rest_Dm_inv[tet_index]


def polar_svd(F):
    """SVD ``F = U diag(S) V^T`` with U, V proper rotations; S may have a negative last entry."""
    U, S, Vt = np.linalg.svd(F)
    flip = np.linalg.det(U) * np.linalg.det(Vt) < 0
    if np.any(flip):
        U = U.copy()
        S = S.copy()
        U[flip, :, 2] *= -1
        S[flip, 2] *= -1
    # make both factors proper rotations
    neg = np.linalg.det(U) < 0
    if np.any(neg):
        U[neg] *= -1
        Vt[neg] *= -1
    return U, S, Vt


def polar_rotation(F):
    U, _, Vt = polar_svd(np.asarray(F)[None] if np.ndim(F) == 2 else F)
    R = U @ Vt
    return R[0] if np.ndim(F) == 2 else R


def signed_singular_values(F):
    """Singular values with the smallest one negated when det F < 0."""
    S = np.linalg.svd(F, compute_uv=False)
    S[..., 2] *= np.where(np.linalg.det(F) < 0, -1.0, 1.0)
    return S


def cofactor(F):
    """``det(F) F^{-T}`` computed from column cross products (valid for singular F)."""
    c0, c1, c2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-1)


def energy_density_fc(F, mu, lam):
    """Fixed Corotated density ``mu ||F - R||_F^2 + lam/2 (det F - 1)^2``.

    Evaluated from signed singular values, ``||F - R||^2 = sum (s_i - 1)^2``,
    which avoids cancellation near the rest state.
    """
    S = signed_singular_values(np.asarray(F, dtype=np.float64))
    return mu * ((S - 1.0) ** 2).sum(axis=-1) + 0.5 * lam * (S.prod(axis=-1) - 1.0) ** 2


def first_piola(F, mu, lam):
    R = polar_rotation(F)
    J = np.linalg.det(F)
    mu = np.asarray(mu)[..., None, None]
    lam = np.asarray(lam)[..., None, None]
    return 2.0 * mu * (F - R) + lam * (J - 1.0)[..., None, None] * cofactor(F)


def _vec(A):
    """Column-major flattening of a batch of 3x3 matrices: vec(A)[3b + a] = A[a, b]."""
    return np.swapaxes(A, -1, -2).reshape(*A.shape[:-2], 9)


def _skew(f):
    z = np.zeros(f.shape[:-1])
    return np.stack([np.stack([z, -f[..., 2], f[..., 1]], -1),
                     np.stack([f[..., 2], z, -f[..., 0]], -1),
                     np.stack([-f[..., 1], f[..., 0], z], -1)], -2)


def _stress_derivative_vec(F, U, S, Vt, mu, lam):
    """dP/dF as (n, 9, 9) in column-major vec ordering.

    The rotation part uses the twist-mode form
    dR/dF = sum_{i<j} 2 / (s_i + s_j) t_ij t_ij^T, t_ij = vec(u_i v_j^T - u_j v_i^T) / sqrt 2.
    """
    n = len(F)
    J = S.prod(axis=1)
    D = 2.0 * mu[:, None, None] * np.eye(9)[None].repeat(n, 0)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        T = (np.einsum("ta,tb->tab", U[:, :, i], Vt[:, j]) - np.einsum("ta,tb->tab", U[:, :, j], Vt[:, i]))
        t = _vec(T) / np.sqrt(2.0)
        den = S[:, i] + S[:, j]
        den = np.where(np.abs(den) < 1e-12, np.where(den < 0, -1e-12, 1e-12), den)
        D -= (2.0 * mu * 2.0 / den)[:, None, None] * t[:, :, None] * t[:, None, :]
    c = _vec(cofactor(F))
    D += lam[:, None, None] * c[:, :, None] * c[:, None, :]
    # Hessian of det F: block (b, d) is d cof[:, b] / d F[:, d]
    HJ = np.zeros((n, 9, 9))
    cols = [F[:, :, 0], F[:, :, 1], F[:, :, 2]]
    for b, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        HJ[:, 3 * b:3 * b + 3, 3 * i:3 * i + 3] = -_skew(cols[j])
        HJ[:, 3 * b:3 * b + 3, 3 * j:3 * j + 3] = _skew(cols[i])
    D += (lam * (J - 1.0))[:, None, None] * HJ
    return D


def stress_derivative(F, mu, lam):
    """dP/dF of the Fixed Corotated model, (n, 3, 3, 3, 3) indexed [t, a, b, c, d] = dP_ab / dF_cd."""
    F = np.asarray(F, dtype=np.float64)
    U, S, Vt = polar_svd(F)
    D = _stress_derivative_vec(F, U, S, Vt, np.broadcast_to(mu, len(F)), np.broadcast_to(lam, len(F)))
    return D.reshape(-1, 3, 3, 3, 3).transpose(0, 2, 1, 4, 3)


class ElasticModel:
    """Fixed Corotated tet mesh with lumped mass; energy, forces and Hessians in x."""

    def __init__(self, tet, material):
        if len(material.young) != tet.n_tets:
            raise InputError("material has one entry per tet; counts differ")
        self.tet = tet
        self.material = material
        self.mu, self.lam = lame_from_young(material.young, material.poisson)
        nv = tet.n_vertices
        m = np.zeros(nv)
        np.add.at(m, tet.tets.ravel(), np.repeat(material.density * tet.rest_volumes / 4.0, 4))
        self.mass = m
        self.mass_dofs = np.repeat(m, 3)
        Dinv = tet.rest_Dm_inv
        self.Gm = np.concatenate([-Dinv.sum(axis=1, keepdims=True), Dinv], axis=1)  # (t, 4, 3)
        # dvec(F)/dx_e = kron(Gm^T, I3), (t, 9, 12)
        self._B = np.einsum("tkb,ac->tbakc", self.Gm, np.eye(3)).reshape(-1, 9, 12)
        dofs = (3 * tet.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self._dofs = dofs
        self._rows = np.repeat(dofs, 12, axis=1).ravel()
        self._cols = np.tile(dofs, (1, 12)).ravel()
        self._kin = None

    @property
    def n_params(self):
        return self.tet.n_tets

    @property
    def n_dofs(self):
        return 3 * self.tet.n_vertices

    def default_newton_tol(self):
        return 1e-6 * float(self.material.young.mean()) * float(np.mean(self.tet.rest_volumes)) ** (1.0 / 3.0)

    def _kinematics(self, x):
        """F and its rotation-corrected SVD, cached for the last configuration."""
        if self._kin is not None and np.array_equal(self._kin[0], x):
            return self._kin[1:]
        F = deformation_gradients(x, self.tet)
        U, S, Vt = polar_svd(F)
        n_inv = int((S[:, 2] <= 0).sum())
        if n_inv:
            log.debug("%d inverted elements", n_inv)
        self._kin = (np.array(x, copy=True), F, U, S, Vt)
        return self._kin[1:]

    def element_energy(self, x):
        F = deformation_gradients(x, self.tet)
        return energy_density_fc(F, self.mu, self.lam) * self.tet.rest_volumes

    def energy(self, x):
        return float(self.element_energy(x).sum())

    def element_gradients(self, x):
        """Per-tet energy gradient w.r.t. its 4 vertices, (n_tets, 4, 3)."""
        F, U, S, Vt = self._kinematics(x)
        J = S.prod(axis=1)
        P = 2.0 * self.mu[:, None, None] * (F - U @ Vt) + (self.lam * (J - 1.0))[:, None, None] * cofactor(F)
        return self.tet.rest_volumes[:, None, None] * (self.Gm @ np.swapaxes(P, 1, 2))

    def gradient(self, x):
        """dPsi/dx as (n_vertices, 3)."""
        ge = self.element_gradients(x)
        nv = self.tet.n_vertices
        idx = self.tet.tets.ravel()
        return np.stack([np.bincount(idx, ge[..., c].ravel(), nv) for c in range(3)], axis=1)

    def force(self, x):
        return -self.gradient(x)

    def element_hessians(self, x, project=False):
        """Per-tet 12x12 energy Hessians; ``project`` clamps negative eigenvalues of dP/dF at 0."""
        F, U, S, Vt = self._kinematics(x)
        D = _stress_derivative_vec(F, U, S, Vt, self.mu, self.lam)
        D = 0.5 * (D + np.swapaxes(D, 1, 2))
        if project:
            w, Q = np.linalg.eigh(D)
            D = (Q * np.clip(w, 0.0, None)[:, None, :]) @ np.swapaxes(Q, 1, 2)
        B = self._B
        return self.tet.rest_volumes[:, None, None] * (np.swapaxes(B, 1, 2) @ D @ B)

    def hessian(self, x, project=False):
        """Assembled energy Hessian (3V x 3V, CSR)."""
        K = self.element_hessians(x, project)
        n = self.n_dofs
        return sp.csr_matrix((K.ravel(), (self._rows, self._cols)), shape=(n, n))

    def param_jacobian(self, x):
        """d(dPsi/dx)/d(log E_i) for every tet i as a sparse (3V, n_tets) matrix.

        Psi_i is linear in E_i, so the column for tet i is that tet's gradient.
        """
        ge = self.element_gradients(x).reshape(-1, 12)
        rows = self._dofs.ravel()
        cols = np.repeat(np.arange(self.tet.n_tets), 12)
        return sp.csr_matrix((ge.ravel(), (rows, cols)), shape=(self.n_dofs, self.tet.n_tets))


def step_objective(model, x, x_tilde, dt):
    """Incremental potential in energy units; its gradient is the force residual."""
    d = x - x_tilde
    return 0.5 / dt**2 * float((model.mass[:, None] * d * d).sum()) + model.energy(x)


def step_residual(model, x, x_tilde, dt):
    return model.mass[:, None] * (x - x_tilde) / dt**2 + model.gradient(x)


def integrate_step(state, model, config=None, info=None):
    """Advance one backward-Euler step; returns the new :class:`SimState`.

    ``info`` (a dict) receives ``objectives`` per Newton iterate, ``iters``
    and the final free-DOF ``grad_norm``.
    """
    config = config or StepConfig()
    dt = config.dt
    x_n, v_n = state.x, state.v
    x_tilde = x_n + dt * v_n
    if config.gravity is not None:
        x_tilde = x_tilde + dt * dt * np.asarray(config.gravity)
    bc = state.is_bc
    free = np.repeat(~bc, 3)
    tol = config.newton_tol if config.newton_tol is not None else model.default_newton_tol()

    starts = []
    for cand in (x_n, x_tilde):
        c = cand.copy()
        c[bc] = state.bc_target[bc]
        starts.append((step_objective(model, c, x_tilde, dt), c))
    obj, x = min(starts, key=lambda s: s[0])
    objectives = [obj]
    gnorm = np.inf
    it = 0
    for it in range(config.newton_max_iters + 1):
        g = step_residual(model, x, x_tilde, dt).ravel()
        g[~free] = 0.0
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol or it == config.newton_max_iters or not free.any():
            break
        H = model.hessian(x, project=True) + sp.diags(model.mass_dofs / dt**2)
        Hff = H[free][:, free].tocsc()
        d = np.zeros(model.n_dofs)
        d[free] = spla.spsolve(Hff, -g[free])
        slope = float(g @ d)
        if not slope < 0:
            raise NumericalError(f"Newton iteration {it}: not a descent direction (g.d = {slope:.3g})")
        if abs(slope) < 1e-8 * max(abs(obj), 1e-300):
            # predicted decrease below round-off of the objective: judge by gradient norm only
            x_new = x + d.reshape(-1, 3)
            g_new = step_residual(model, x_new, x_tilde, dt).ravel()
            g_new[~free] = 0.0
            if not np.linalg.norm(g_new) < gnorm:
                log.debug("Newton stopped in round-off regime at iteration %d (|g| = %.3g)", it, gnorm)
                break
            obj_new = step_objective(model, x_new, x_tilde, dt)
        else:
            alpha = 1.0
            for _ in range(config.ls_max_backtracks + 1):
                x_new = x + alpha * d.reshape(-1, 3)
                obj_new = step_objective(model, x_new, x_tilde, dt)
                if obj_new <= obj + 1e-4 * alpha * slope:
                    break
                alpha *= config.ls_shrink
            else:
                raise NumericalError(
                    f"line search failed at Newton iteration {it}: objective {obj:.6g}, gradient norm {gnorm:.3g}")
        x, obj = x_new, obj_new
        objectives.append(obj_new)
    if info is not None:
        info.update(objectives=objectives, iters=it, grad_norm=gnorm, tol=tol)
    v = (x - x_n) / dt
    return SimState(x, v, bc.copy(), state.bc_target.copy())


def bc_assignment(tet, skeleton):
    """Owning joint per tet vertex (-1 = free).

    Each joint claims the 4 vertices of the tet whose rest centroid is nearest
    to the joint; a vertex claimed twice goes to the nearer joint (lower index
    on ties).
    """
    cent = tet.centroids()
    joints = skeleton.joint_positions
    owner = np.full(tet.n_vertices, -1, dtype=np.int64)
    best = np.full(tet.n_vertices, np.inf)
    for j, p in enumerate(joints):
        k = int(np.argmin(((cent - p) ** 2).sum(axis=1)))
        for v in tet.tets[k]:
            d = float(((tet.vertices[v] - p) ** 2).sum())
            if d < best[v]:
                best[v] = d
                owner[v] = j
    return owner


def bc_targets(tet, skeleton, owner, joint_transforms):
    """Dirichlet flags and targets ``T_j rest_j^{-1} X`` for the given joint transforms (J, 3, 4)."""
    is_bc = owner >= 0
    target = tet.vertices.copy()
    rel = np.asarray(joint_transforms) @ skeleton.rest_inv
    ids = np.flatnonzero(is_bc)
    j = owner[ids]
    X = tet.vertices[ids]
    target[ids] = np.einsum("nab,nb->na", rel[j, :, :3], X) + rel[j, :, 3]
    return is_bc, target


def build_bc_from_pose(tet, skeleton, joint_transforms):
    return bc_targets(tet, skeleton, bc_assignment(tet, skeleton), joint_transforms)


@dataclass
class BCTrajectory:
    is_bc: np.ndarray
    targets: np.ndarray  # (T, V, 3)

    @property
    def n_frames(self):
        return len(self.targets)


def bc_trajectory_from_pose(tet, skeleton, traj):
    owner = bc_assignment(tet, skeleton)
    G = forward_kinematics(skeleton, traj)
    targets = []
    is_bc = owner >= 0
    for t in range(len(G)):
        is_bc, tgt = bc_targets(tet, skeleton, owner, G[t])
        targets.append(tgt)
    return BCTrajectory(is_bc, np.asarray(targets))


def simulate(tet, material, bc, config=None, substeps=4, x0=None, v0=None, record=False, model=None):
    """Simulate across the frames of a boundary-condition trajectory.

    State 0 is the initial state (rest positions unless ``x0`` is given) with
    the frame-0 targets applied. Targets are linearly interpolated across the
    ``substeps`` steps of every frame interval. Returns the end-of-frame
    states, plus the adjoint tape when ``record`` is set.
    """
    config = config or StepConfig()
    if bc.n_frames < 1:
        raise InputError("boundary-condition trajectory needs at least one frame")
    model = model or ElasticModel(tet, material)
    x = tet.vertices.copy() if x0 is None else np.array(x0, dtype=np.float64)
    v = np.zeros_like(x) if v0 is None else np.array(v0, dtype=np.float64)
    x[bc.is_bc] = bc.targets[0][bc.is_bc]
    state = SimState(x, v, bc.is_bc.copy(), bc.targets[0].copy())
    states = [state.copy()]
    tape = None
    if record:
        from .fem_adjoint import AdjointTape

        tape = AdjointTape(model, config, substeps)
    for f in range(1, bc.n_frames):
        for s in range(1, substeps + 1):
            a = s / substeps
            target = (1.0 - a) * bc.targets[f - 1] + a * bc.targets[f]
            prev = state
            state = integrate_step(SimState(prev.x, prev.v, bc.is_bc, target), model, config)
            if tape is not None:
                tape.record(prev, state)
        states.append(state.copy())
    return (states, tape) if record else states


def surface_positions(states, embedding, tet):
    """Surface vertex positions per frame, (T, Vs, 3)."""
    return np.stack([bary_eval(embedding, s.x, tet.tets) for s in states])


def rest_state(tet):
    n = tet.n_vertices
    return SimState(tet.vertices.copy(), np.zeros((n, 3)), np.zeros(n, dtype=bool), tet.vertices.copy())
