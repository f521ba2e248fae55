"""Loss terms for fitting animated meshes to image-space references.

Every term returns a scalar; with ``grad=True`` it returns ``(value, grad)``
where ``grad`` is taken w.r.t. the term's differentiable input (rendered
image, deformed vertices, or pose parameters). Per-frame terms are averaged
over frames by the caller.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .geometry import Embedding, bary_eval, project, project_backward
from .rigging import IDENTITY_6D
from .softrender import read_pnm, write_pgm, write_ppm

TERMS = ("rgb", "mask", "track", "depth", "smooth", "reg")


@dataclass
class LossWeights:
    rgb: float = 1.0
    mask: float = 1.0
    track: float = 10.0
    depth: float = 1.0
    smooth: float = 0.1
    reg: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise InputError(f"loss weight {k} must be >= 0")

    def as_dict(self):
        return asdict(self)


@dataclass
class ReferenceBundle:
    """Optimization targets.

    ``pixels`` are the frame-0 sample locations whose surface attachment is
    ``embedding`` (triangle index + barycentrics); ``tracks[t]`` are their
    image positions in frame t and ``depths[t]`` their depths up to an
    unknown per-frame scale and shift.
    """

    images: np.ndarray
    masks: np.ndarray
    pixels: np.ndarray
    tracks: np.ndarray
    depths: np.ndarray
    embedding: Embedding

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.tracks = np.asarray(self.tracks, dtype=np.float64)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        T = len(self.images)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise InputError("images must be (T, H, W, 3)")
        if self.masks.shape != self.images.shape[:3]:
            raise InputError("mask resolution must match images")
        N = len(self.embedding)
        if self.tracks.shape != (T, N, 2) or self.depths.shape != (T, N) or len(self.pixels) != N:
            raise InputError("track count must be identical across frames and match the embedding")

    @property
    def n_frames(self):
        return len(self.images)


def save_bundle(directory, refs):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(refs.n_frames):
        write_ppm(d / f"frame_{t:03d}.ppm", refs.images[t])
        write_pgm(d / f"mask_{t:03d}.pgm", refs.masks[t])
    with open(d / "tracks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "point", "u", "v", "depth"])
        for t in range(refs.n_frames):
            for i in range(refs.tracks.shape[1]):
                w.writerow([t, i, repr(float(refs.tracks[t, i, 0])), repr(float(refs.tracks[t, i, 1])),
                            repr(float(refs.depths[t, i]))])
    with open(d / "embedding.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "u", "v", "face", "b0", "b1", "b2"])
        for i in range(len(refs.embedding)):
            b = refs.embedding.bary[i]
            w.writerow([i, repr(float(refs.pixels[i, 0])), repr(float(refs.pixels[i, 1])),
                        int(refs.embedding.host_index[i]), repr(float(b[0])), repr(float(b[1])), repr(float(b[2]))])


def load_bundle(directory):
    d = Path(directory)
    frames = sorted(d.glob("frame_*.ppm"))
    if not frames:
        raise InputError(f"{d}: no reference frames (frame_*.ppm)")
    images = np.stack([read_pnm(p) for p in frames])
    masks = []
    for t in range(len(frames)):
        p = d / f"mask_{t:03d}.pgm"
        if not p.exists():
            raise InputError(f"{p}: missing mask")
        masks.append(read_pnm(p))
    masks = np.stack(masks)
    emb_rows = _read_csv(d / "embedding.csv", ("point", "u", "v", "face", "b0", "b1", "b2"))
    N = len(emb_rows)
    pixels = np.array([[r["u"], r["v"]] for r in emb_rows])
    emb = Embedding(np.array([int(r["face"]) for r in emb_rows]),
                    np.array([[r["b0"], r["b1"], r["b2"]] for r in emb_rows]))
    tracks = np.full((len(frames), N, 2), np.nan)
    depths = np.full((len(frames), N), np.nan)
    for r in _read_csv(d / "tracks.csv", ("frame", "point", "u", "v", "depth")):
        t, i = int(r["frame"]), int(r["point"])
        if not (0 <= t < len(frames) and 0 <= i < N):
            raise InputError(f"{d / 'tracks.csv'}: record (frame {t}, point {i}) out of range")
        tracks[t, i] = r["u"], r["v"]
        depths[t, i] = r["depth"]
    if np.isnan(tracks).any():
        raise InputError(f"{d / 'tracks.csv'}: missing track records")
    return ReferenceBundle(images, (masks > 0.5).astype(np.float64), pixels, tracks, depths, emb)


def _read_csv(path, fields):
    if not Path(path).exists():
        raise InputError(f"{path}: file not found")
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                rows.append({k: float(row[k]) for k in fields})
            except (KeyError, ValueError, TypeError):
                raise InputError(f"{path}:{lineno}: bad record") from None
    return rows


def _l1(pred, ref, grad):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {ref.shape}")
    diff = pred - ref
    val = float(np.abs(diff).mean())
    if grad:
        return val, np.sign(diff) / diff.size
    return val


def loss_rgb(rgb, ref_image, grad=False):
    """Mean absolute difference over pixels and channels."""
    return _l1(rgb, ref_image, grad)


def loss_mask(silhouette, ref_mask, grad=False):
    """Mean absolute difference between soft silhouette and binary mask."""
    return _l1(silhouette, ref_mask, grad)


def loss_track(verts, embedding, faces, camera, ref_pixels, grad=False):
    """Mean pixel distance between projected embedded surface points and tracks."""
    pts = bary_eval(embedding, verts, faces)
    uv, _ = project(camera, pts)
    diff = uv - ref_pixels
    dist = np.linalg.norm(diff, axis=1)
    val = float(dist.mean())
    if not grad:
        return val
    with np.errstate(invalid="ignore", divide="ignore"):
        g_uv = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0) / len(dist)
    g_pts = project_backward(camera, pts, g_uv)
    return val, _bary_backward(embedding, faces, g_pts, len(verts))


def _bary_backward(embedding, topology, g_pts, n_host):
    idx = np.asarray(topology)[embedding.host_index]
    contrib = embedding.bary[..., None] * g_pts[:, None, :]
    return np.stack([np.bincount(idx.ravel(), contrib[..., c].ravel(), n_host) for c in range(3)], axis=1)


def standardize(x):
    """Zero mean, unit (population) standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if not sd > 1e-12 * max(1.0, abs(mu)):
        raise NumericalError("zero depth variance; cannot normalize")
    return (x - mu) / sd, sd


def loss_depth(verts, embedding, faces, camera, ref_depths, grad=False):
    """Mean absolute difference of standardized predicted and reference depths."""
    if len(embedding) < 2:
        raise InputError("depth loss needs at least 2 tracked points")
    pts = bary_eval(embedding, verts, faces)
    _, z = project(camera, pts)
    nz, sd = standardize(z)
    nd, _ = standardize(ref_depths)
    diff = nz - nd
    val = float(np.abs(diff).mean())
    if not grad:
        return val
    g = np.sign(diff) / len(diff)
    gz = (g - g.mean() - nz * (g * nz).mean()) / sd
    g_pts = project_backward(camera, pts, np.zeros((len(pts), 2)), gz)
    return val, _bary_backward(embedding, faces, g_pts, len(verts))


def loss_smooth(traj, grad=False):
    """Mean squared first differences plus mean squared second differences over frames."""
    x = np.asarray(traj, dtype=np.float64)
    T = len(x)
    g = np.zeros_like(x)
    val = 0.0
    if T >= 2:
        d1 = x[1:] - x[:-1]
        n1 = d1.shape[0] * d1.shape[1]
        val += float((d1**2).sum() / n1)
        gd1 = 2.0 * d1 / n1
        g[1:] += gd1
        g[:-1] -= gd1
    if T >= 3:
        d2 = x[2:] - 2.0 * x[1:-1] + x[:-2]
        n2 = d2.shape[0] * d2.shape[1]
        val += float((d2**2).sum() / n2)
        gd2 = 2.0 * d2 / n2
        g[2:] += gd2
        g[1:-1] -= 2.0 * gd2
        g[:-2] += gd2
    else:
        warnings.warn("fewer than 3 frames: second-order smoothness term omitted", stacklevel=2)
    return (val, g) if grad else val


def loss_reg(rot, trans, rot_threshold, trans_threshold, grad=False):
    """Frame-averaged L2 norm of the out-of-range part of non-root pose parameters.

    ``rot`` is (T, J, 6) and is measured relative to the identity 6D vector;
    ``trans`` is (T, J, 3). Joint 0 (the root) is excluded.
    """
    rot = np.asarray(rot, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    if np.any(np.asarray(rot_threshold) <= 0) or np.any(np.asarray(trans_threshold) <= 0):
        raise InputError("regularization thresholds must be positive")
    dr = rot[:, 1:] - IDENTITY_6D
    dt = trans[:, 1:]
    er = dr - np.clip(dr, -rot_threshold, rot_threshold)
    et = dt - np.clip(dt, -trans_threshold, trans_threshold)
    T = len(rot)
    norms = np.sqrt((er**2).sum(axis=(1, 2)) + (et**2).sum(axis=(1, 2)))
    val = float(norms.mean()) if T else 0.0
    if not grad:
        return val
    scale = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0) / max(T, 1)
    g_rot = np.zeros_like(rot)
    g_trans = np.zeros_like(trans)
    g_rot[:, 1:] = er * scale[:, None, None]
    g_trans[:, 1:] = et * scale[:, None, None]
    return val, (g_rot, g_trans)


def total_loss(components, weights):
    """Weighted sum of loss terms; returns ``(total, per-term values)``."""
    w = weights.as_dict() if isinstance(weights, LossWeights) else dict(weights)
    terms = {}
    total = 0.0
    for name, value in components.items():
        value = float(value)
        if not np.isfinite(value):
            raise NumericalError(f"loss term {name!r} is not finite ({value})")
        terms[name] = value
        total += w.get(name, 0.0) * value
    return total, terms
