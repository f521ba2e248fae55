"""Stage 2: recover per-cluster Young's moduli from image-space references.

The pose trajectory from Stage 1 drives the simulation through skeleton
boundary conditions. Each iteration simulates the clip, renders the embedded
surface, evaluates the image losses and pulls their gradient back through the
integrator with the adjoint method. Parameters are log E per cluster
(tets of one cluster share a modulus), optimized with Adam.

Clusters start as one per joint (tets nearest to it) and are refined in
rounds: every cluster is split with k-means on tet centroids and children
inherit the parent's modulus.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import InputError, NumericalError
from .fem import ElasticModel, MaterialField, StepConfig, bc_trajectory_from_pose, simulate
from .fem_adjoint import backprop_trajectory, cluster_gradient
from .geometry import embed_surface_in_tet
from .loss import LossWeights, total_loss
from .poseopt import AdamState, OptimConfig, adam_step, frame_losses
from .softrender import RenderParams

log = logging.getLogger(__name__)


def material_loss_weights():
    """Stage-2 defaults: the Stage-1 weights without the pose regularizer."""
    return LossWeights(reg=0.0)


@dataclass
class ClusterSchedule:
    rounds: int = 2
    iters_per_round: int = 100
    split_factor: int = 2
    initial_young: float = 1e4
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.iters_per_round < 0:
            raise InputError("schedule needs at least one round and non-negative iterations")
        if self.split_factor < 1:
            raise InputError("split factor must be >= 1")
        if not self.initial_young > 0:
            raise InputError("initial Young's modulus must be positive")


def cluster_by_joint(tet, skeleton):
    """Cluster index per tet: the joint nearest to the tet centroid (lower index on ties)."""
    cent = tet.centroids()
    d2 = ((cent[:, None, :] - skeleton.joint_positions[None]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    # renumber so that indices are contiguous (a joint may own no tet)
    _, labels = np.unique(labels, return_inverse=True)
    return labels.astype(np.int64)


def subdivide_clusters(tet, cluster_of, factor, seed=0):
    """Split every cluster into up to ``factor`` spatial children with k-means on centroids.

    Returns ``(new_cluster_of, parent_of_new_cluster)``.
    """
    cluster_of = np.asarray(cluster_of)
    cent = tet.centroids()
    rng = np.random.default_rng(seed)
    new = np.empty_like(cluster_of)
    parents = []
    for c in range(int(cluster_of.max()) + 1):
        ids = np.flatnonzero(cluster_of == c)
        k = min(factor, len(ids))
        labels = np.zeros(len(ids), dtype=np.int64)
        if k > 1:
            _, labels = kmeans2(cent[ids], k, minit="++", seed=rng)
        for lab in np.unique(labels):
            new[ids[labels == lab]] = len(parents)
            parents.append(c)
    return new, np.asarray(parents)


@dataclass
class MaterialProblem:
    """Simulation + rendering objective as a function of per-tet log moduli."""

    tet: object
    mesh: object
    skeleton: object
    camera: object
    refs: object
    trajectory: object
    weights: LossWeights = field(default_factory=material_loss_weights)
    render: RenderParams = field(default_factory=RenderParams)
    step: StepConfig = field(default_factory=StepConfig)
    substeps: int = 4
    poisson: float = 0.4
    density: float = 1000.0

    def __post_init__(self):
        if self.trajectory.n_frames != self.refs.n_frames:
            raise InputError("pose trajectory and references differ in frame count")
        self.bc = bc_trajectory_from_pose(self.tet, self.skeleton, self.trajectory)
        self.embedding = embed_surface_in_tet(self.mesh, self.tet)
        self.B = self.embedding.matrix(self.tet.tets, self.tet.n_vertices)

    def material(self, young, cluster_of=None):
        return MaterialField(young, self.poisson, self.density, cluster_of)

    def evaluate(self, young, grad=True):
        """Loss terms for per-tet moduli; with ``grad`` also ``dL/dlogE`` per tet."""
        mat = self.material(young)
        model = ElasticModel(self.tet, mat)
        out = simulate(self.tet, mat, self.bc, self.step, self.substeps, record=grad, model=model)
        states, tape = out if grad else (out, None)
        X = np.stack([s.x for s in states])
        verts = np.stack([self.B @ x for x in X])
        terms, g_verts = frame_losses(verts, self.mesh, self.camera, self.refs, self.weights, self.render, grad)
        total, terms = total_loss({**terms, "reg": 0.0}, self.weights)
        if not grad:
            return total, terms, states
        g_x = np.stack([self.B.T @ g for g in g_verts])
        g_logE, _, _ = backprop_trajectory(tape, g_x)
        return total, terms, states, g_logE


def optimize_material(problem, schedule=None, cluster_of=None, callback=None):
    """Coarse-to-fine Adam on per-cluster log E.

    Returns ``(material, history)``: the best material found (with its final
    cluster assignment) and one record per iteration.
    """
    schedule = schedule or ClusterSchedule()
    tet = problem.tet
    if cluster_of is None:
        cluster_of = cluster_by_joint(tet, problem.skeleton)
    cluster_of = np.asarray(cluster_of, dtype=np.int64)
    theta = np.full(int(cluster_of.max()) + 1, np.log(schedule.initial_young))
    config = OptimConfig(learning_rate=schedule.learning_rate)
    history = []
    best = (np.inf, None, None)  # (loss, per-tet E, clusters)
    it = 0
    for rnd in range(schedule.rounds):
        if rnd > 0:
            cluster_of, parents = subdivide_clusters(tet, cluster_of, schedule.split_factor, schedule.seed + rnd)
            theta = theta[parents]
            log.info("round %d: %d clusters", rnd, len(theta))
        state = AdamState.zeros_like(theta)
        for k in range(schedule.iters_per_round + (1 if rnd == schedule.rounds - 1 else 0)):
            young = np.exp(theta[cluster_of])
            try:
                total, terms, _, g_tet = problem.evaluate(young, grad=True)
            except NumericalError as exc:
                raise NumericalError(f"material iteration {it}: {exc}") from exc
            if total < best[0]:
                best = (total, young.copy(), cluster_of.copy())
            g = cluster_gradient(g_tet, cluster_of)
            history.append({"iter": it, "round": rnd, "total": total, **terms, "best": best[0],
                            "young": np.exp(theta).tolist()})
            if callback is not None:
                callback(it, total, terms, np.exp(theta))
            log.info("material iter %d round %d total %.6g E %s", it, rnd, total,
                     np.array2string(np.exp(theta), precision=4))
            it += 1
            if k == schedule.iters_per_round:
                break
            theta, state = adam_step(theta, g, state, config)
    return problem.material(best[1], best[2]), history


def cluster_moduli(material):
    """Per-cluster Young's modulus (clusters share one value)."""
    out = np.zeros(material.n_clusters)
    out[material.cluster_of] = material.young
    return out


def write_material_csv(path, material):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tet", "cluster", "E"])
        for i, (c, E) in enumerate(zip(material.cluster_of, material.young)):
            w.writerow([i, int(c), repr(float(E))])


def read_material_csv(path, n_tets, poisson=0.4, density=1000.0):
    young = np.full(n_tets, np.nan)
    cluster = np.zeros(n_tets, dtype=np.int64)
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), 2):
                try:
                    i = int(row["tet"])
                    young[i] = float(row["E"])
                    cluster[i] = int(row["cluster"])
                except (KeyError, ValueError, IndexError):
                    raise InputError(f"{path}:{lineno}: bad material record") from None
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    if np.isnan(young).any():
        raise InputError(f"{path}: missing tets in material file")
    return MaterialField(young, poisson, density, cluster)
