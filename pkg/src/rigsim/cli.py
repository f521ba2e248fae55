"""Command-line harness: synthetic scenes, both optimization stages, simulation, rendering, gradient checks.

Every command reads an optional JSON config (``--config``), applies flag
overrides (flags > file > defaults), writes its outputs under ``--out`` and
finishes by atomically writing ``manifest.json`` there.

Working directory layout (as written by ``gen-synthetic`` and read by the
other commands via ``--input``)::

    mesh.obj  face_colors.csv  skeleton.json  camera.json  scene.json
    refs/                       reference bundle (frames, masks, tracks)
    gt_trajectory.csv           ground-truth pose trajectory
    tet.tetmesh  gt_material.csv    (scenes with a simulation mesh)

Config keys (all optional): ``scene`` (SceneSpec fields), ``optim``
(OptimConfig fields), ``weights`` (LossWeights fields), ``render``
(sigma, gamma, background_color), ``step`` (StepConfig fields),
``substeps``, ``schedule`` (ClusterSchedule fields), ``young`` (uniform
modulus for ``simulate`` without a material file).

Exit codes: 0 success, 1 usage error, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalError

log = logging.getLogger("rigsim")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Run:
    """Collects config, inputs, outputs and stage timings for the manifest."""

    def __init__(self, command, config, out):
        self.command = command
        self.config = config
        self.out = Path(out)
        self.inputs = []
        self.outputs = []
        self.times = {}

    def input(self, path):
        p = Path(path)
        if not p.exists():
            raise InputError(f"{p}: file not found")
        self.inputs.append(str(p))
        return p

    def output(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(Path(name).as_posix())  # relative to the output dir
        return p

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0

    def manifest(self):
        return {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "tool_version": __version__,
            "inputs": sorted(set(self.inputs)),
            "outputs": sorted(set(self.outputs)),
            "wall_time_s": {k: round(v, 6) for k, v in self.times.items()},
        }

    def write_manifest(self):
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_json(self.out / "manifest.json", self.manifest())


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def atomic_write_json(path, doc):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return cfg


def build(cls, section, **overrides):
    """Instantiate a config dataclass from a dict section, rejecting unknown keys."""
    section = dict(section or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise InputError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise InputError(f"bad {cls.__name__} config: {exc}") from None


# ---------------------------------------------------------------- asset IO

def save_camera(path, camera):
    with open(path, "w") as fh:
        json.dump(camera.to_config(), fh, indent=1)


def load_camera(path):
    from .geometry import Camera

    try:
        with open(path) as fh:
            return Camera.from_config(json.load(fh))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad camera record ({exc})") from None


class Assets:
    """Lazy loader for the files of a working directory."""

    def __init__(self, run, root):
        self.run = run
        self.root = Path(root)

    def path(self, name):
        return self.run.input(self.root / name)

    def mesh(self):
        from .geometry import load_surface_mesh

        colors = self.root / "face_colors.csv"
        if colors.exists():
            self.run.input(colors)
        return load_surface_mesh(self.path("mesh.obj"), colors)

    def skeleton(self, n_vertices):
        from .rigging import load_skeleton

        return load_skeleton(self.path("skeleton.json"), n_vertices)

    def camera(self):
        return load_camera(self.path("camera.json"))

    def refs(self):
        from .loss import load_bundle

        return load_bundle(self.path("refs"))

    def tet(self):
        from .geometry import load_tet_mesh

        return load_tet_mesh(self.path("tet.tetmesh"))

    def trajectory(self, explicit=None):
        from .rigging import load_trajectory

        if explicit is not None:
            return load_trajectory(self.run.input(explicit))
        for name in ("trajectory.csv", "gt_trajectory.csv"):
            if (self.root / name).exists():
                return load_trajectory(self.path(name))
        raise InputError(f"{self.root}: no trajectory.csv or gt_trajectory.csv")


def render_params(cfg):
    from .softrender import RenderParams

    sec = dict(cfg.get("render", {}))
    if "background_color" in sec:
        sec["background_color"] = tuple(sec["background_color"])
    return build(RenderParams, sec)


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(args, cfg, run):
    from .geometry import write_face_colors, write_obj, write_tetmesh
    from .loss import save_bundle
    from .matopt import write_material_csv
    from .rigging import save_skeleton, save_trajectory
    from .scenes import builtin_scene, gen_synthetic

    scene_cfg = dict(cfg.get("scene", {}))
    scene_id = args.scene or scene_cfg.pop("scene_id", "A")
    scene_cfg.pop("scene_id", None)
    if args.seed is not None:
        scene_cfg["seed"] = args.seed
    if args.frames is not None:
        scene_cfg["n_frames"] = args.frames
    with run.stage("setup"):
        scene = builtin_scene(scene_id, **scene_cfg)
        scene.render = render_params(cfg)
    step = build(_step_cls(), cfg.get("step"))
    with run.stage("synthesize"):
        refs, gt, _ = gen_synthetic(scene, step)
    with run.stage("write"):
        save_bundle(run.output("refs"), refs)
        write_obj(run.output("mesh.obj"), scene.mesh.vertices, scene.mesh.faces)
        write_face_colors(run.output("face_colors.csv"), scene.mesh.face_colors)
        save_skeleton(run.output("skeleton.json"), scene.skeleton)
        save_camera(run.output("camera.json"), scene.camera)
        save_trajectory(run.output("gt_trajectory.csv"), gt)
        with open(run.output("scene.json"), "w") as fh:
            json.dump(scene.spec.to_dict(), fh, indent=1, sort_keys=True)
        if scene.tet is not None:
            write_tetmesh(run.output("tet.tetmesh"), scene.tet.vertices, scene.tet.tets)
            write_material_csv(run.output("gt_material.csv"), scene.material)
    print(f"scene {scene.spec.scene_id}: {refs.n_frames} frames, {len(refs.embedding)} tracks -> {run.out}")


def _step_cls():
    from .fem import StepConfig

    return StepConfig


def cmd_optimize_pose(args, cfg, run):
    from .loss import LossWeights
    from .poseopt import OptimConfig, PoseProblem, optimize_pose, write_loss_log
    from .rigging import load_trajectory, save_trajectory

    assets = Assets(run, args.input)
    with run.stage("load"):
        mesh = assets.mesh()
        skeleton = assets.skeleton(mesh.n_vertices)
        camera = assets.camera()
        refs = assets.refs()
        init = load_trajectory(run.input(args.init)) if args.init else None
    optim = build(OptimConfig, cfg.get("optim"), max_iters=args.iters)
    problem = PoseProblem(mesh, skeleton, camera, refs, build(LossWeights, cfg.get("weights")), render_params(cfg))
    with run.stage("optimize"):
        traj, history = optimize_pose(problem, optim, init)
    with run.stage("write"):
        save_trajectory(run.output("trajectory.csv"), traj)
        write_loss_log(run.output("loss_log.csv"), history)
    last = history[-1]
    print(f"pose: {len(history) - 1} iterations, best total {last['best']:.6g}, track {last['track']:.4g} px")


def cmd_simulate(args, cfg, run):
    from .fem import MaterialField, StepConfig, bc_trajectory_from_pose, simulate, surface_positions
    from .geometry import embed_surface_in_tet, write_obj, write_tetmesh
    from .matopt import read_material_csv

    assets = Assets(run, args.input)
    with run.stage("load"):
        tet = assets.tet()
        mesh = None
        if (assets.root / "mesh.obj").exists():
            mesh = assets.mesh()
        skeleton = assets.skeleton(mesh.n_vertices if mesh is not None else None)
        traj = assets.trajectory(args.trajectory)
        if args.material:
            material = read_material_csv(run.input(args.material), tet.n_tets)
        else:
            material = MaterialField.uniform(tet.n_tets, float(cfg.get("young", 1e4)))
    step = build(StepConfig, cfg.get("step"))
    substeps = int(cfg.get("substeps", 4))
    with run.stage("simulate"):
        bc = bc_trajectory_from_pose(tet, skeleton, traj)
        states = simulate(tet, material, bc, step, substeps)
    with run.stage("write"):
        for t, s in enumerate(states):
            write_tetmesh(run.output(f"sim/frame_{t:03d}.tetmesh"), s.x, n_tets=tet.n_tets)
        if mesh is not None:
            emb = embed_surface_in_tet(mesh, tet)
            for t, verts in enumerate(surface_positions(states, emb, tet)):
                write_obj(run.output(f"sim/surface_{t:03d}.obj"), verts, mesh.faces)
    print(f"simulate: {len(states)} frames x {substeps} substeps -> {run.out / 'sim'}")


def cmd_optimize_material(args, cfg, run):
    from .fem import StepConfig
    from .fem_adjoint import cluster_gradient, write_gradient_dump
    from .loss import LossWeights
    from .matopt import ClusterSchedule, MaterialProblem, cluster_moduli, optimize_material, write_material_csv

    assets = Assets(run, args.input)
    with run.stage("load"):
        mesh = assets.mesh()
        skeleton = assets.skeleton(mesh.n_vertices)
        camera = assets.camera()
        refs = assets.refs()
        tet = assets.tet()
        traj = assets.trajectory(args.trajectory)
    weights = build(LossWeights, {"reg": 0.0, **cfg.get("weights", {})})
    schedule = build(ClusterSchedule, cfg.get("schedule"), seed=args.seed, iters_per_round=args.iters)
    problem = MaterialProblem(tet, mesh, skeleton, camera, refs, traj, weights, render_params(cfg),
                              build(StepConfig, cfg.get("step")), int(cfg.get("substeps", 4)))
    with run.stage("optimize"):
        material, history = optimize_material(problem, schedule)
        _, _, _, g = problem.evaluate(material.young, grad=True)
    with run.stage("write"):
        write_material_csv(run.output("material.csv"), material)
        write_gradient_dump(run.output("gradient.csv"), cluster_gradient(g, material.cluster_of))
        with open(run.output("material_log.csv"), "w") as fh:
            fh.write("iter,round,total,rgb,mask,track,depth,smooth\n")
            for h in history:
                fh.write(",".join(repr(float(h[k])) if k not in ("iter", "round") else str(h[k])
                                  for k in ("iter", "round", "total", "rgb", "mask", "track", "depth", "smooth")) + "\n")
    E = ", ".join(f"{e:.4g}" for e in cluster_moduli(material))
    print(f"material: {material.n_clusters} clusters, E = [{E}]")


def cmd_render(args, cfg, run):
    from .geometry import read_obj
    from .rigging import deform
    from .softrender import rasterize, write_pgm, write_ppm

    assets = Assets(run, args.input)
    with run.stage("load"):
        mesh = assets.mesh()
        camera = assets.camera()
        if args.sim:
            frames = sorted(Path(args.sim).glob("surface_*.obj"))
            if not frames:
                raise InputError(f"{args.sim}: no surface_*.obj frames")
            verts = np.stack([read_obj(run.input(p))[0] for p in frames])
        else:
            skeleton = assets.skeleton(mesh.n_vertices)
            verts = deform(skeleton, mesh.vertices, assets.trajectory(args.trajectory))
    params = render_params(cfg)
    coverage = []
    with run.stage("render"):
        for t, v in enumerate(verts):
            out = rasterize(v, mesh, camera, params)
            write_ppm(run.output(f"render/frame_{t:03d}.ppm"), out.rgb)
            write_pgm(run.output(f"render/silhouette_{t:03d}.pgm"), out.silhouette)
            coverage.append(float(out.silhouette.sum()))
    print(f"render: {len(verts)} frames, mean silhouette coverage {np.mean(coverage):.1f} px -> {run.out / 'render'}")


def cmd_gradcheck(args, cfg, run):
    from .gradcheck import gradcheck

    with run.stage(args.target):
        report = gradcheck(args.target, seed=args.seed or 0, size=args.size)
    print(report.summary())
    with open(run.output(f"gradcheck_{args.target}.json"), "w") as fh:
        json.dump(asdict(report) | {"passed": report.passed}, fh, indent=1)
    if not report.passed:
        print(f"numerical failure: gradient check {args.target} exceeds tolerance", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "optimize-pose": cmd_optimize_pose,
    "simulate": cmd_simulate,
    "optimize-material": cmd_optimize_material,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
}


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="rigsim", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"rigsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synthetic", parents=[common], help="write a builtin scene and its references")
    s.add_argument("--scene", choices=["A", "B", "C", "a", "b", "c"], help="builtin scene id")
    s.add_argument("--frames", type=int, help="frame count override")

    s = sub.add_parser("optimize-pose", parents=[common], help="Stage 1: fit joint trajectories")
    s.add_argument("--input", required=True, help="working directory with mesh, skeleton, camera, refs/")
    s.add_argument("--init", help="initial trajectory CSV (default: rest pose)")
    s.add_argument("--iters", type=int, help="maximum Adam iterations")

    s = sub.add_parser("simulate", parents=[common], help="simulate the tet mesh driven by a trajectory")
    s.add_argument("--input", required=True)
    s.add_argument("--trajectory", help="trajectory CSV (default: input/trajectory.csv or gt_trajectory.csv)")
    s.add_argument("--material", help="material CSV (tet,cluster,E); default uniform 'young' from config")

    s = sub.add_parser("optimize-material", parents=[common], help="Stage 2: fit cluster stiffness")
    s.add_argument("--input", required=True)
    s.add_argument("--trajectory")
    s.add_argument("--iters", type=int, help="Adam iterations per refinement round")

    s = sub.add_parser("render", parents=[common], help="render frames of a trajectory or simulation")
    s.add_argument("--input", required=True)
    s.add_argument("--trajectory")
    s.add_argument("--sim", help="directory with surface_*.obj frames (instead of skinning)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("target", choices=["rasterizer", "pose-pipeline", "fem-force", "fem-adjoint"])
    s.add_argument("--size", type=int, help="target-specific problem size")
    return p


# paths are listed in the manifest inputs; the hash covers settings only
_UNHASHED = ("config", "out", "verbose", "command", "input", "init", "trajectory", "material", "sim")


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        run = Run(args.command, {"command": args.command, "config": cfg,
                                 "flags": {k: v for k, v in sorted(vars(args).items())
                                           if k not in _UNHASHED}}, args.out)
        if args.config:
            run.input(args.config)
        code = COMMANDS[args.command](args, cfg, run) or EXIT_OK
        run.write_manifest()
        return code
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
