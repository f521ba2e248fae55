"""Recover two stiffness values of a driven beam from rendered references.

A short version of scene C: the beam's left half is ten times softer than
its right half. The pose trajectory is held at ground truth, the loss
gradient flows back through every implicit step with the adjoint method,
and Adam updates log E per cluster. Clusters split once halfway through.
"""
import numpy as np

from rigsim.fem_adjoint import cluster_gradient
from rigsim.matopt import ClusterSchedule, MaterialProblem, cluster_moduli, optimize_material
from rigsim.scenes import gen_synthetic, scene_c

scene = scene_c(n_frames=6)
refs, gt, _ = gen_synthetic(scene)
problem = MaterialProblem(scene.tet, scene.mesh, scene.skeleton, scene.camera, refs, gt)
truth = cluster_moduli(scene.material)
print(f"ground truth E per cluster: {truth}")

start = np.sqrt(truth.prod())
total, _, _, g = problem.evaluate(np.full(scene.tet.n_tets, start))
print(f"start E = {start:.4g}: loss {total:.4f}, dL/dlogE per cluster "
      f"{cluster_gradient(g, scene.material.cluster_of)}")

mat, history = optimize_material(problem, ClusterSchedule(iters_per_round=40, initial_young=start))
for h in history[::10] + [history[-1]]:
    print(f"iter {h['iter']:3d} round {h['round']}  loss {h['total']:.4f}  E " +
          " ".join(f"{e:.4g}" for e in h["young"]))
for c, E in enumerate(truth):
    got = mat.young[scene.material.cluster_of == c]
    print(f"cluster {c}: truth {E:.4g}, recovered {got.min():.4g} to {got.max():.4g}")
