"""Fit the single-joint paddle (scene A) from its synthetic references.

The references come from the same forward model that the optimizer uses, so
this checks that the optimizer finds the motion, not that the model is
realistic. Run with ``python demos/pose_recovery.py [iterations]``.
"""
import sys

import numpy as np

from rigsim.poseopt import OptimConfig, PoseProblem, optimize_pose
from rigsim.rigging import PoseTrajectory, geodesic_angle, rot6d_to_matrix
from rigsim.scenes import gen_synthetic, scene_a

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200

scene = scene_a()
refs, gt, _ = gen_synthetic(scene)
print(f"scene A: {refs.n_frames} frames, {len(refs.embedding)} tracked points, "
      f"{scene.camera.width}x{scene.camera.height} px")

problem = PoseProblem(scene.mesh, scene.skeleton, scene.camera, refs)
init = PoseTrajectory.identity(refs.n_frames, scene.skeleton.n_joints)
best, history = optimize_pose(problem, OptimConfig(max_iters=iters), init)

for h in history[:: max(1, len(history) // 8)] + [history[-1]]:
    print(f"iter {h['iter']:4d}  total {h['total']:.5f}  track {h['track']:.3f} px  mask {h['mask']:.4f}")

err = np.rad2deg(geodesic_angle(rot6d_to_matrix(best.rot), rot6d_to_matrix(gt.rot)))[:, 0]
gt_angle = np.rad2deg(geodesic_angle(rot6d_to_matrix(gt.rot), np.eye(3)))[:, 0]
print("frame  gt angle  error (deg)")
for t, (a, e) in enumerate(zip(gt_angle, err)):
    print(f"{t:5d}  {a:8.2f}  {e:8.3f}")
