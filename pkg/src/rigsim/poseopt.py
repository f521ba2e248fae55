"""Stage 1: fit per-frame joint parameters to image-space references.

All frames are optimized jointly with Adam. One objective evaluation runs
FK -> LBS -> (render, track, depth) per frame plus the cross-frame
smoothness and the pose regularizer, and returns the exact gradient via the
backward functions of each stage.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError
from .geometry import ProjectionError
from .loss import (TERMS, LossWeights, loss_depth, loss_mask, loss_reg, loss_rgb, loss_smooth,
                   loss_track, total_loss)
from .rigging import PoseTrajectory, fk_backward, forward_kinematics, lbs_backward, lbs_deform
from .softrender import RenderParams, rasterize, rasterize_backward

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 2000
    convergence_tol: float = 1e-6
    patience: int = 50
    log_every: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise InputError("gradient shape does not match parameters")
    if not np.isfinite(grads).all():
        raise NumericalError("non-finite gradient passed to Adam")
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads**2
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new, AdamState(m, v, step)


@dataclass
class PoseProblem:
    """Everything needed to evaluate the Stage-1 objective for a trajectory."""

    mesh: object
    skeleton: object
    camera: object
    refs: object
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderParams = field(default_factory=RenderParams)
    rot_threshold: float = 0.8
    trans_threshold: float | None = None

    def __post_init__(self):
        if self.trans_threshold is None:
            self.trans_threshold = 0.1 * self.mesh.bbox_diagonal()
        if self.skeleton.weights.shape[0] != self.mesh.n_vertices:
            raise InputError("skinning weights do not match mesh vertex count")

    def evaluate(self, traj, grad=True):
        """Total loss, per-term values and (optionally) gradients w.r.t. ``traj``."""
        rot, trans = traj.rot, traj.trans
        sk, mesh, w = self.skeleton, self.mesh, self.weights
        G = forward_kinematics(sk, (rot, trans))
        verts = lbs_deform(mesh.vertices, sk.weights, G, sk.rest_global)
        acc, g_verts = frame_losses(verts, mesh, self.camera, self.refs, w, self.render, grad=grad)
        l_reg, (g_rr, g_rt) = loss_reg(rot, trans, self.rot_threshold, self.trans_threshold, grad=True)
        total, terms = total_loss({**acc, "reg": l_reg}, w)
        if not grad:
            return total, terms
        gT = lbs_backward(mesh.vertices, sk.weights, sk.rest_global, g_verts)
        g_rot, g_trans = fk_backward(sk, (rot, trans), gT)
        g_rot += w.reg * g_rr
        g_trans += w.reg * g_rt
        return total, terms, PoseTrajectory(g_rot, g_trans)


def frame_losses(verts, mesh, camera, refs, weights, render, grad=True):
    """Image-space terms plus smoothness for per-frame surface vertices (T, V, 3).

    Returns ``(terms, g_verts)`` where ``terms`` holds the frame-averaged
    rgb/mask/track/depth values and the smoothness value, and ``g_verts`` is
    the gradient of their weighted sum (None unless ``grad``).
    """
    w = weights
    T = len(verts)
    if T != refs.n_frames:
        raise InputError(f"trajectory has {T} frames, references have {refs.n_frames}")
    g_verts = np.zeros_like(verts) if grad else None
    acc = dict.fromkeys(("rgb", "mask", "track", "depth"), 0.0)
    for t in range(T):
        if w.rgb > 0 or w.mask > 0:
            out = rasterize(verts[t], mesh, camera, render)
            l_rgb, g_rgb = loss_rgb(out.rgb, refs.images[t], grad=True)
            l_mask, g_sil = loss_mask(out.silhouette, refs.masks[t], grad=True)
            acc["rgb"] += l_rgb / T
            acc["mask"] += l_mask / T
            if grad:
                g_verts[t] += rasterize_backward(out, w.rgb / T * g_rgb, w.mask / T * g_sil)
        if w.track > 0:
            l, g = loss_track(verts[t], refs.embedding, mesh.faces, camera, refs.tracks[t], grad=True)
            acc["track"] += l / T
            if grad:
                g_verts[t] += w.track / T * g
        if w.depth > 0:
            l, g = loss_depth(verts[t], refs.embedding, mesh.faces, camera, refs.depths[t], grad=True)
            acc["depth"] += l / T
            if grad:
                g_verts[t] += w.depth / T * g
    acc["smooth"] = 0.0
    if w.smooth > 0 and T >= 2:
        acc["smooth"], g_smooth = loss_smooth(verts, grad=True)
        if grad:
            g_verts += w.smooth * g_smooth
    return acc, g_verts


def _pack(traj):
    return np.concatenate([traj.rot.ravel(), traj.trans.ravel()])


def _unpack(vec, shape):
    T, J = shape
    n = T * J * 6
    return PoseTrajectory(vec[:n].reshape(T, J, 6), vec[n:].reshape(T, J, 3))


def optimize_pose(problem, config=None, init=None, callback=None):
    """Minimize the Stage-1 objective with Adam.

    Returns ``(best_trajectory, history)``; ``history`` holds one record per
    iteration with the current terms and the best-so-far total (``best``).
    """
    config = config or OptimConfig()
    T = problem.refs.n_frames
    J = problem.skeleton.n_joints
    traj = init.copy() if init is not None else PoseTrajectory.identity(T, J)
    if traj.n_frames != T:
        raise InputError(f"initial trajectory has {traj.n_frames} frames, references have {T}")
    x = _pack(traj)
    state = AdamState.zeros_like(x)
    best_x, best = x.copy(), np.inf
    history = []
    last_improve = 0
    for it in range(config.max_iters + 1):
        try:
            total, terms, g = problem.evaluate(_unpack(x, (T, J)))
        except ProjectionError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        if not np.isfinite(total):
            raise NumericalError(f"iteration {it}: loss diverged ({total})")
        if total < best:
            if best - total > config.convergence_tol * abs(best if np.isfinite(best) else total):
                last_improve = it
            best, best_x = total, x.copy()
        history.append({"iter": it, "total": total, **terms, "best": best})
        if callback is not None:
            callback(it, total, terms)
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d total %.6g best %.6g %s", it, total, best,
                     " ".join(f"{k}={terms[k]:.4g}" for k in TERMS))
        if it == config.max_iters or it - last_improve > config.patience:
            break
        x, state = adam_step(x, _pack(g), state, config)
    return _unpack(best_x, (T, J)), history


def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "total", *TERMS])
        for rec in history:
            w.writerow([rec["iter"], repr(float(rec["total"]))] + [repr(float(rec.get(k, 0.0))) for k in TERMS])
