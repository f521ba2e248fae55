"""Built-in synthetic scenes with known ground truth.

References are produced by the same forward operators that the optimizers
invert (FK + LBS + rasterizer for scenes A and B, the FEM simulator for
scene C). They therefore test optimization correctness, not how well the
forward model matches real footage.

* A: single-joint paddle rotating in the image plane (T=8).
* B: three-joint tail with sinusoidal joint angles (T=16).
* C: beam driven at two joints whose halves have different stiffness (T=16),
  used for material recovery.

:func:`oscillating_base` is a simulation-only beam clamped at one end whose
base rotates and translates; it is used for time-refinement studies.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError
from .geometry import Camera, SurfaceMesh, box_surface, build_lattice_tet, embed_pixels, bary_eval, project
from .loss import ReferenceBundle
from .rigging import PoseTrajectory, Skeleton, axis_angle_matrix, deform, matrix_to_rot6d, normalize_weights
from .softrender import RenderParams, rasterize


@dataclass
class JointMotion:
    """Sinusoidal angle ``amplitude * sin(2 pi frequency s + phase)`` about ``axis``, s in [0, 1]."""

    axis: tuple = (0.0, 0.0, 1.0)
    amplitude_deg: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)  # per-axis amplitude of a sinusoidal root offset


@dataclass
class SceneSpec:
    scene_id: str
    n_frames: int
    seed: int = 0
    image_size: int = 64
    focal: float = 100.0
    n_tracks: int = 200
    track_noise_px: float = 0.0
    depth_noise_rel: float = 0.0
    depth_scale: float = 2.0
    depth_shift: float = 0.5
    motions: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_frames < 2:
            raise InputError("scene needs at least 2 frames")
        self.motions = [m if isinstance(m, JointMotion) else JointMotion(**m) for m in self.motions]

    def to_dict(self):
        return asdict(self)


@dataclass
class Scene:
    spec: SceneSpec
    mesh: SurfaceMesh
    skeleton: Skeleton
    camera: Camera
    render: RenderParams
    tet: object = None
    material: object = None


def _colors_by_position(mesh):
    c = mesh.vertices[mesh.faces].mean(axis=1)
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return 0.15 + 0.7 * (c - lo) / span


def _rest_frames(positions):
    rest = np.zeros((len(positions), 3, 4))
    rest[:, :, :3] = np.eye(3)
    rest[:, :, 3] = positions
    return rest


def scene_a(**overrides):
    spec = SceneSpec("A", n_frames=8, image_size=64, focal=90.0,
                     motions=[JointMotion((0, 0, 1), 20.0, 0.25, 0.0)])
    spec = _override(spec, overrides)
    mesh = box_surface([0.0, -0.15, -0.05], [1.0, 0.15, 0.05], (8, 3, 1))
    mesh.face_colors = _colors_by_position(mesh)
    sk = Skeleton([-1], _rest_frames(np.zeros((1, 3))), np.ones((mesh.n_vertices, 1)), ["pivot"])
    cam = Camera.look_at([-0.6, -0.9, 2.8], [0.5, 0.0, 0.0], [0, 1, 0], spec.focal, spec.image_size, spec.image_size)
    return Scene(spec, mesh, sk, cam, RenderParams())


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def chain_weights(x, joints_x, blend):
    """Weights along a chain: segment k owns [joints_x[k], joints_x[k+1]); linear blend across joints."""
    J = len(joints_x)
    W = np.zeros((len(x), J))
    for k in range(J):
        lo = -np.inf if k == 0 else joints_x[k]
        hi = np.inf if k == J - 1 else joints_x[k + 1]
        up = 1.0 if k == 0 else _smoothstep((x - (lo - blend)) / (2 * blend))
        down = 1.0 if k == J - 1 else 1.0 - _smoothstep((x - (hi - blend)) / (2 * blend))
        W[:, k] = up * down
    return normalize_weights(W)


def scene_b(**overrides):
    spec = SceneSpec("B", n_frames=16, image_size=64, focal=100.0, motions=[
        JointMotion((0, 0, 1), 10.0, 0.5, 0.0),
        JointMotion((0, 0, 1), 25.0, 1.0, 0.5),
        JointMotion((0, 0, 1), 30.0, 1.0, 1.5),
    ])
    spec = _override(spec, overrides)
    mesh = box_surface([0.0, -0.1, -0.1], [1.5, 0.1, 0.1], (12, 1, 1))
    mesh.face_colors = _colors_by_position(mesh)
    jx = np.array([0.0, 0.5, 1.0])
    W = chain_weights(mesh.vertices[:, 0], jx, 0.1)
    sk = Skeleton([-1, 0, 1], _rest_frames(np.stack([jx, np.zeros(3), np.zeros(3)], axis=1)), W,
                  ["base", "mid", "tip"])
    cam = Camera.look_at([0.2, -1.2, 3.8], [0.75, 0.0, 0.0], [0, 1, 0], spec.focal, spec.image_size, spec.image_size)
    return Scene(spec, mesh, sk, cam, RenderParams())


def scene_c(**overrides):
    from .fem import MaterialField

    spec = SceneSpec("C", n_frames=16, image_size=64, focal=90.0, n_tracks=300, motions=[
        JointMotion((0, 0, 1), 8.0, 1.5, 0.0, translation=(0.0, 0.08, 0.0)),
        JointMotion((0, 0, 1), 0.0, 1.0, 0.0),
    ])
    spec = _override(spec, overrides)
    lo, hi = np.array([0.0, -0.06, -0.06]), np.array([1.2, 0.06, 0.06])
    tet = build_lattice_tet(lo, hi, (12, 2, 2))
    mesh = box_surface(lo, hi, (16, 2, 2))
    mesh.face_colors = _colors_by_position(mesh)
    jx = np.array([0.3, 0.9])
    rest = _rest_frames(np.stack([jx, np.zeros(2), np.zeros(2)], axis=1))
    W = chain_weights(mesh.vertices[:, 0], jx, 0.1)
    sk = Skeleton([-1, 0], rest, W, ["left", "right"])
    cam = Camera.look_at([0.2, -0.6, 2.4], [0.6, 0.0, 0.0], [0, 1, 0], spec.focal, spec.image_size, spec.image_size)
    from .matopt import cluster_by_joint

    clusters = cluster_by_joint(tet, sk)
    young = np.where(clusters == 0, 1e4, 1e5)
    material = MaterialField(young, cluster_of=clusters)
    return Scene(spec, mesh, sk, cam, RenderParams(), tet=tet, material=material)


SCENES = {"A": scene_a, "B": scene_b, "C": scene_c}


def oscillating_base(n_frames=9, young=1e5, frequency=3.0, cells=(10, 1, 1)):
    """Beam on [0,1]x[-.05,.05]^2 driven by a single root joint at the origin.

    Returns ``(tet, material, skeleton, trajectory)``. The base rotates about
    z by 0.2 rad and translates along y by 0.05 sinusoidally at ``frequency``
    Hz (frames at 24 fps).
    """
    from .fem import MaterialField

    tet = build_lattice_tet([0.0, -0.05, -0.05], [1.0, 0.05, 0.05], cells)
    sk = Skeleton([-1], _rest_frames(np.zeros((1, 3))), np.ones((1, 1)), ["base"])
    s = np.arange(n_frames) / 24.0
    wave = np.sin(2 * np.pi * frequency * s)
    traj = PoseTrajectory.identity(n_frames, 1)
    traj.rot[:, 0] = matrix_to_rot6d(axis_angle_matrix([0, 0, 1], 0.2 * wave))
    traj.trans[:, 0, 1] = 0.05 * wave
    return tet, MaterialField.uniform(tet.n_tets, young), sk, traj


def builtin_scene(scene_id, **overrides):
    try:
        return SCENES[scene_id.upper()](**overrides)
    except KeyError:
        raise InputError(f"unknown scene {scene_id!r}; choose from {sorted(SCENES)}") from None


def _override(spec, overrides):
    for k, v in overrides.items():
        if not hasattr(spec, k):
            raise InputError(f"unknown scene field {k!r}")
        setattr(spec, k, v)
    spec.__post_init__()
    return spec


def gt_trajectory(spec, n_joints):
    """Ground-truth pose trajectory from the per-joint sinusoid generator."""
    T = spec.n_frames
    s = np.arange(T) / (T - 1)
    traj = PoseTrajectory.identity(T, n_joints)
    for j, m in enumerate(spec.motions[:n_joints]):
        wave = np.sin(2 * np.pi * m.frequency * s + m.phase)
        R = axis_angle_matrix(m.axis, np.deg2rad(m.amplitude_deg) * wave)
        traj.rot[:, j] = matrix_to_rot6d(R)
        traj.trans[:, j] = np.outer(np.sin(2 * np.pi * m.frequency * s), m.translation)
    return traj


def sample_foreground(silhouette, n, rng):
    """Uniform random foreground pixel centers (silhouette > 0.5), without replacement."""
    ys, xs = np.nonzero(silhouette > 0.5)
    if len(xs) == 0:
        raise InputError("empty foreground; cannot sample tracking pixels")
    pick = np.sort(rng.choice(len(xs), size=min(n, len(xs)), replace=False))
    return np.stack([xs[pick] + 0.5, ys[pick] + 0.5], axis=1)


def make_references(scene, frame_verts, rng):
    """Render/track/depth references for per-frame surface vertices (T, V, 3)."""
    spec, mesh, cam = scene.spec, scene.mesh, scene.camera
    rest_out = rasterize(mesh.vertices, mesh, cam, scene.render)
    pixels = sample_foreground(rest_out.silhouette, spec.n_tracks, rng)
    emb, kept, _ = embed_pixels(cam, pixels, mesh, mesh.vertices)
    pixels = pixels[kept]
    images, masks, tracks, depths = [], [], [], []
    for t, verts in enumerate(frame_verts):
        out = rasterize(verts, mesh, cam, scene.render)
        images.append(out.rgb)
        masks.append((out.silhouette > 0.5).astype(np.float64))
        uv, z = project(cam, bary_eval(emb, verts, mesh.faces))
        tracks.append(uv)
        depths.append(z)
    tracks = np.asarray(tracks)
    depths = np.asarray(depths)
    if spec.track_noise_px > 0:
        tracks = tracks + rng.normal(0.0, spec.track_noise_px, tracks.shape)
    if spec.depth_noise_rel > 0:
        depths = depths * (1.0 + rng.normal(0.0, spec.depth_noise_rel, depths.shape))
    depths = spec.depth_scale * depths + spec.depth_shift
    return ReferenceBundle(np.asarray(images), np.asarray(masks), pixels, tracks, depths, emb)


def gen_synthetic(scene, step_config=None):
    """Synthesize references and ground truth for a scene.

    Returns ``(refs, gt_trajectory, sim_states)``; ``sim_states`` is None
    unless the scene carries a tet mesh and material (scene C), in which case
    references come from simulating the ground-truth material.
    """
    spec = scene.spec
    rng = np.random.default_rng(spec.seed)
    traj = gt_trajectory(spec, scene.skeleton.n_joints)
    states = None
    if scene.tet is None:
        frame_verts = deform(scene.skeleton, scene.mesh.vertices, traj)
    else:
        from .fem import StepConfig, bc_trajectory_from_pose, simulate, surface_positions
        from .geometry import embed_surface_in_tet

        cfg = step_config or StepConfig()
        bc = bc_trajectory_from_pose(scene.tet, scene.skeleton, traj)
        states = simulate(scene.tet, scene.material, bc, cfg)
        emb = embed_surface_in_tet(scene.mesh, scene.tet)
        frame_verts = surface_positions(states, emb, scene.tet)
    return make_references(scene, frame_verts, rng), traj, states
