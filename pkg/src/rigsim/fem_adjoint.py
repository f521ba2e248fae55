"""Reverse-mode gradients through the implicit integrator.

Each converged step satisfies, on the free degrees of freedom,

    G = M (x' - x - dt v) / dt^2 + dPsi/dx(x'; theta) = 0,   v' = (x' - x) / dt.

Given upstream ``gx = dL/dx'`` and ``gv = dL/dv'``, one linear solve with the
exact (unprojected) system matrix gives the adjoint

    lam = (M / dt^2 + H)_ff^{-1} (gx + gv / dt)_f

and from it

    dL/dx       = M lam / dt^2 - gv / dt
    dL/dv       = M lam / dt
    dL/dtheta  -= lam . dG/dtheta.

Dirichlet DOFs carry no adjoint: their values are prescribed targets that do
not depend on the optimized quantities.

Any model exposing ``mass`` (per vertex), ``n_params``, ``hessian(x, project=False)`` and
``param_jacobian(x)`` (sparse ``dG/dtheta``) can be differentiated, so a
hand-written 1-DOF spring serves as a closed-form oracle in the tests.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, NumericalError


@dataclass
class TapeStep:
    x_prev: np.ndarray
    v_prev: np.ndarray
    x_next: np.ndarray
    is_bc: np.ndarray


@dataclass
class AdjointTape:
    """Forward states of a simulation, recorded for the backward pass."""

    model: object
    config: object
    substeps: int
    steps: list = field(default_factory=list)

    def record(self, prev, new):
        self.steps.append(TapeStep(prev.x.copy(), prev.v.copy(), new.x.copy(), prev.is_bc.copy()))

    @property
    def n_frames(self):
        return len(self.steps) // self.substeps + 1


def adjoint_solve(model, x_next, is_bc, rhs, dt):
    """Solve ``(M / dt^2 + H(x_next))_ff lam_f = rhs_f``; returns lam (n_vertices, 3), zero on BC rows."""
    free = np.repeat(~np.asarray(is_bc), 3)
    lam = np.zeros(free.size)
    if not free.any():
        return lam.reshape(-1, 3)
    A = model.hessian(x_next, project=False) + sp.diags(np.repeat(model.mass, 3) / dt**2)
    Aff = A[free][:, free].tocsc()
    lam[free] = spla.spsolve(Aff, np.asarray(rhs).ravel()[free])
    if not np.all(np.isfinite(lam)):
        raise NumericalError("adjoint solve produced non-finite values (singular system)")
    return lam.reshape(-1, 3)


def backprop_step(model, step, dt, gx, gv):
    """Pull ``(dL/dx', dL/dv')`` back through one step.

    Returns ``(dL/dx, dL/dv, dL/dtheta)``; ``dL/dtheta`` has one entry per
    column of ``model.param_jacobian``.
    """
    rhs = gx + gv / dt
    lam = adjoint_solve(model, step.x_next, step.is_bc, rhs, dt)
    Mlam = model.mass[:, None] * lam / dt
    g_theta = -(model.param_jacobian(step.x_next).T @ lam.ravel())
    return Mlam / dt - gv / dt, Mlam, np.asarray(g_theta).ravel()


def backprop_trajectory(tape, grad_x, grad_v=None):
    """Gradient of a loss on the per-frame states of a recorded simulation.

    ``grad_x``/``grad_v`` are (T, V, 3) upstream gradients w.r.t. the frame
    positions/velocities. Returns ``(dL/dtheta, dL/dx0, dL/dv0)`` where
    ``dL/dx0`` is zero on Dirichlet vertices (overwritten by their targets).
    """
    grad_x = np.asarray(grad_x, dtype=np.float64)
    T = tape.n_frames
    if grad_x.shape[0] != T:
        raise InputError(f"gradient covers {grad_x.shape[0]} frames, tape has {T}")
    grad_v = np.zeros_like(grad_x) if grad_v is None else np.asarray(grad_v, dtype=np.float64)
    S = tape.substeps
    dt = tape.config.dt
    gx = grad_x[-1].copy()
    gv = grad_v[-1].copy()
    g_theta = np.zeros(tape.model.n_params)
    for k in range(len(tape.steps) - 1, -1, -1):
        gx, gv, gth = backprop_step(tape.model, tape.steps[k], dt, gx, gv)
        g_theta = g_theta + gth
        if k % S == 0:
            f = k // S
            gx += grad_x[f]
            gv += grad_v[f]
    if tape.steps:
        gx[tape.steps[0].is_bc] = 0.0
    return g_theta, gx, gv


def cluster_gradient(g_tet, cluster_of):
    """Sum per-tet ``dL/dlogE`` into per-cluster gradients (tets of a cluster share log E)."""
    cluster_of = np.asarray(cluster_of)
    return np.bincount(cluster_of, np.asarray(g_tet), int(cluster_of.max()) + 1)


def write_gradient_dump(path, g_cluster):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "dL_dlogE"])
        for c, g in enumerate(np.asarray(g_cluster)):
            w.writerow([c, repr(float(g))])
