"""Finite-difference checks of the analytic gradients.

Each target builds a small seeded problem, evaluates the hand-written
backward pass and compares it against central differences. Relative errors
are ``|a - f| / max(|a|, |f|)`` over entries whose magnitude exceeds a
floor, so that entries that are zero up to round-off do not dominate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

TOLERANCE = 1e-3


@dataclass
class GradcheckReport:
    target: str
    max_rel_error: float
    mean_rel_error: float
    n_entries: int
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.n_entries > 0 and self.max_rel_error < self.tolerance

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.target}: max rel error {self.max_rel_error:.3e}, mean {self.mean_rel_error:.3e} "
                f"over {self.n_entries} entries [{status}, tol {self.tolerance:g}]")


def relative_errors(analytic, fd, floor):
    a = np.ravel(analytic)
    f = np.ravel(fd)
    scale = np.maximum(np.abs(a), np.abs(f))
    keep = np.abs(np.nan_to_num(f)) > floor
    return np.abs(a - f)[keep] / scale[keep]


def central_difference(fun, x, h, entries=None):
    """Gradient of scalar ``fun`` at array ``x`` by central differences.

    With ``entries`` (flat indices) only those components are differenced;
    the others are returned as NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.full(x.size, np.nan)
    for i in (range(x.size) if entries is None else entries):
        d = np.zeros(x.size)
        d[i] = h
        d = d.reshape(x.shape)
        g[i] = (fun(x + d) - fun(x - d)) / (2.0 * h)
    return g.reshape(x.shape)


def _report(target, errs, tol=TOLERANCE):
    errs = np.concatenate([np.ravel(e) for e in errs]) if errs else np.zeros(0)
    if errs.size == 0:
        return GradcheckReport(target, np.inf, np.inf, 0, tol)
    return GradcheckReport(target, float(errs.max()), float(errs.mean()), int(errs.size), tol)


def check_rasterizer(seed=0, n_scenes=20, size=32, max_faces=4, h=1e-6):
    """Random triangle soups rendered at ``size`` x ``size``; loss = random linear image functional."""
    from .geometry import Camera, SurfaceMesh
    from .softrender import RenderParams, rasterize, rasterize_backward

    cam = Camera.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0, 1, 0], 1.25 * size, size, size)
    params = RenderParams(sigma=0.05 * size)
    errs = []
    for k in range(n_scenes):
        rng = np.random.default_rng([seed, k])
        nf = int(rng.integers(1, max_faces + 1))
        V = rng.uniform([-0.6, -0.6, -0.3], [0.6, 0.6, 0.3], (3 * nf, 3))
        mesh = SurfaceMesh(V, np.arange(3 * nf).reshape(nf, 3), rng.uniform(0.0, 1.0, (nf, 3)))
        w_rgb = rng.normal(size=(size, size, 3))
        w_sil = rng.normal(size=(size, size))

        def loss(v):
            out = rasterize(v, mesh, cam, params)
            return float((out.rgb * w_rgb).sum() + (out.silhouette * w_sil).sum())

        g = rasterize_backward(rasterize(V, mesh, cam, params), w_rgb, w_sil)
        fd = central_difference(loss, V, h)
        errs.append(relative_errors(g, fd, 1e-6 * max(1.0, np.abs(fd).max())))
    return _report("rasterizer", errs)


def check_pose_pipeline(seed=0, h=1e-6, n_frames=None):
    """Total Stage-1 loss on scene A at a perturbed pose, all pose entries."""
    from .poseopt import PoseProblem, _pack, _unpack
    from .rigging import PoseTrajectory
    from .scenes import gen_synthetic, scene_a

    overrides = {"seed": seed}
    if n_frames is not None:
        overrides["n_frames"] = n_frames
    scene = scene_a(**overrides)
    refs, gt, _ = gen_synthetic(scene)
    problem = PoseProblem(scene.mesh, scene.skeleton, scene.camera, refs)
    rng = np.random.default_rng(seed)
    T, J = gt.rot.shape[:2]
    init = PoseTrajectory(gt.rot + rng.normal(0.0, 0.05, gt.rot.shape), gt.trans + rng.normal(0.0, 0.02, gt.trans.shape))
    x0 = _pack(init)
    _, _, g = problem.evaluate(init)
    fd = central_difference(lambda x: problem.evaluate(_unpack(x, (T, J)), grad=False)[0], x0, h)
    return _report("pose-pipeline", [relative_errors(_pack(g), fd, 1e-6)])


def _beam(size):
    from .geometry import build_lattice_tet

    return build_lattice_tet([0.0, -0.1, -0.1], [0.2 * size, 0.1, 0.1], (size, 1, 1), scheme="five")


def check_fem_force(seed=0, size=1, n_states=20, h=1e-7):
    """Force against -dPsi/dx by central differences on random deformed states.

    ``size`` is the number of lattice cells (5 tets each).
    """
    from .fem import ElasticModel, MaterialField

    tet = _beam(size)
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(n_states):
        young = np.exp(rng.uniform(np.log(1e3), np.log(1e6), tet.n_tets))
        model = ElasticModel(tet, MaterialField(young))
        x = tet.vertices + rng.normal(0.0, 0.03, tet.vertices.shape)
        f = model.force(x)
        fd = -central_difference(model.energy, x, h * max(1.0, np.abs(x).max()))
        errs.append(relative_errors(f, fd, 1e-6 * np.abs(fd).max()))
    return _report("fem-force", errs, tol=1e-4)


def adjoint_problem(seed=0, size=10, n_frames=3, substeps=4):
    """Small driven beam and a random linear loss on all frame states.

    Returns ``(loss_fn, (logE, x0, v0))`` where ``loss_fn(logE, x0, v0, grad)``
    returns the loss and, with ``grad``, the adjoint gradients.
    """
    from .fem import BCTrajectory, MaterialField, StepConfig, simulate
    from .fem_adjoint import backprop_trajectory

    tet = _beam(size)
    rng = np.random.default_rng(seed)
    is_bc = tet.vertices[:, 0] < 1e-9
    targets = np.repeat(tet.vertices[None], n_frames, axis=0)
    for t in range(n_frames):
        targets[t, is_bc, 1] += 0.03 * np.sin(1.3 * t)
    bc = BCTrajectory(is_bc, targets)
    logE = np.log(2e4) + rng.normal(0.0, 0.3, tet.n_tets)
    x0 = tet.vertices + rng.normal(0.0, 0.005, tet.vertices.shape)
    v0 = rng.normal(0.0, 0.05, x0.shape)
    wx = rng.normal(size=(n_frames,) + x0.shape)
    wv = rng.normal(size=(n_frames,) + x0.shape) * 0.01
    config = StepConfig(newton_tol=1e-9, newton_max_iters=50)

    def loss(logE, x0, v0, grad=False):
        mat = MaterialField(np.exp(logE))
        out = simulate(tet, mat, bc, config, substeps, x0=x0, v0=v0, record=grad)
        states = out[0] if grad else out
        val = sum(float((wx[t] * s.x).sum() + (wv[t] * s.v).sum()) for t, s in enumerate(states))
        if not grad:
            return val
        return val, backprop_trajectory(out[1], wx, wv)

    return loss, (logE, x0, v0)


def check_fem_adjoint(seed=0, size=10, h=1e-5, n_state_entries=30):
    """dL/dlogE, dL/dx0 and dL/dv0 through 8 implicit steps (2 frames x 4 substeps).

    Every log E entry is checked; for x0 and v0 a seeded subset of
    ``n_state_entries`` free components keeps the cost bounded.
    """
    loss, (logE, x0, v0) = adjoint_problem(seed, size)
    _, (g_logE, g_x0, g_v0) = loss(logE, x0, v0, grad=True)
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(np.repeat(g_x0.any(axis=1) | g_v0.any(axis=1), 3))
    pick = np.sort(rng.choice(free, size=min(n_state_entries, free.size), replace=False))
    errs = []
    for an, fun, base, entries in ((g_logE, lambda p: loss(p, x0, v0), logE, None),
                                   (g_x0, lambda p: loss(logE, p, v0), x0, pick),
                                   (g_v0, lambda p: loss(logE, x0, p), v0, pick)):
        fd = central_difference(fun, base, h, entries)
        errs.append(relative_errors(an, fd, 1e-6 * np.nanmax(np.abs(fd))))
    return _report("fem-adjoint", errs)


TARGETS = {
    "rasterizer": check_rasterizer,
    "pose-pipeline": check_pose_pipeline,
    "fem-force": check_fem_force,
    "fem-adjoint": check_fem_adjoint,
}


def gradcheck(target, seed=0, size=None):
    """Run one named check; ``size`` is target specific (image size, lattice cells)."""
    try:
        fn = TARGETS[target]
    except KeyError:
        raise InputError(f"unknown gradcheck target {target!r}; choose from {sorted(TARGETS)}") from None
    kwargs = {"seed": seed}
    if size is not None:
        if target == "pose-pipeline":
            kwargs["n_frames"] = size
        else:
            kwargs["size"] = size
    return fn(**kwargs)
