"""Differentiable flat-shaded soft rasterizer.

Each face covers a pixel with probability ``sigmoid(s * dist^2 / sigma)``
where ``dist`` is the pixel-space distance from the pixel center to the
projected triangle boundary and ``s`` is +1 inside, -1 outside. The
silhouette is ``1 - prod_f (1 - d_f)``. Colors are a softmax blend of flat
face colors with logits ``log d_f - z_f / gamma`` (``z_f`` the perspective
interpolated depth of face f at the pixel), composited over the background
with the silhouette as alpha.

Only pixel/face pairs whose coverage can exceed ~1e-16 are evaluated, so the
cost scales with the projected face area rather than faces x pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InputError, RigSimError
from .geometry import Z_MIN, project_backward

CUTOFF = 36.0


class StaleCacheError(RigSimError):
    """Backward pass requested on an output whose forward cache was released."""


@dataclass
class RenderParams:
    sigma: float | None = None  # px^2; None -> 1e-4 * image diagonal^2
    gamma: float = 1e-2
    background_color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise InputError("sigma must be positive")
        if self.gamma <= 0:
            raise InputError("gamma must be positive")

    def sigma_for(self, camera):
        if self.sigma is not None:
            return float(self.sigma)
        return 1e-4 * float(camera.width**2 + camera.height**2)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    silhouette: np.ndarray
    cache: dict | None = field(default=None, repr=False)

    def release(self):
        self.cache = None


def _cross2(x, y):
    return x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]


def _pairs(uv_faces, margin, width, height):
    lo = np.floor(uv_faces.min(axis=1) - margin - 0.5).astype(np.int64) + 1
    hi = np.floor(uv_faces.max(axis=1) + margin - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    ext = np.maximum(hi - lo + 1, 0)
    count = ext[:, 0] * ext[:, 1]
    total = int(count.sum())
    face = np.repeat(np.arange(len(uv_faces)), count)
    start = np.repeat(np.cumsum(count) - count, count)
    local = np.arange(total) - start
    wx = ext[face, 0]
    px = lo[face, 0] + local % np.maximum(wx, 1)
    py = lo[face, 1] + local // np.maximum(wx, 1)
    return face, px, py


def rasterize(verts, mesh, camera, params=None):
    """Render flat-colored RGB (H, W, 3) and soft silhouette (H, W) of deformed vertices."""
    params = params or RenderParams()
    H, W = camera.height, camera.width
    bg = np.asarray(params.background_color, dtype=np.float64)
    sigma = params.sigma_for(camera)
    verts = np.asarray(verts, dtype=np.float64)

    pc = camera.to_camera(verts)
    z = pc[:, 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    uv = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)

    faces = mesh.faces
    tri_uv = uv[faces]
    area = _cross2(tri_uv[:, 1] - tri_uv[:, 0], tri_uv[:, 2] - tri_uv[:, 0])
    valid = np.all(z[faces] > Z_MIN, axis=1) & (np.abs(area) > 1e-12)
    fids = np.flatnonzero(valid)

    sil = np.zeros(H * W)
    rgb = np.tile(bg, (H * W, 1))
    cache = {"verts": verts, "camera": camera, "params": params, "mesh": mesh, "n_pairs": 0}
    if fids.size:
        margin = np.sqrt(CUTOFF * sigma)
        fl, px, py = _pairs(tri_uv[fids], margin, W, H)
        f = fids[fl]
        pix = py * W + px
        order = np.argsort(pix, kind="stable")
        f, pix = f[order], pix[order]
        c = _pair_forward(px[order] + 0.5, py[order] + 0.5, f, uv, z, faces, area, sigma, params.gamma)
        keep = c.pop("keep")
        f, pix = f[keep], pix[keep]
        cache.update(c)
        if len(pix):
            starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
            upix = pix[starts]
            seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(pix)]))
            S = np.add.reduceat(c["log1m_d"], starts)
            s_val = -np.expm1(S)
            m = np.maximum.reduceat(c["logit"], starts)
            e = np.exp(c["logit"] - m[seg])
            Z = np.add.reduceat(e, starts)
            w = e / Z[seg]
            col = mesh.face_colors[f]
            C = np.add.reduceat(w[:, None] * col, starts)
            sil[upix] = s_val
            rgb[upix] = s_val[:, None] * C + (1.0 - s_val[:, None]) * bg
            cache.update(face=f, pix=pix, starts=starts, seg=seg, upix=upix, sil=s_val, w=w, C=C,
                         n_pairs=len(pix), sigma=sigma)
    return RenderOutput(rgb.reshape(H, W, 3), sil.reshape(H, W), cache)


def _pair_forward(px, py, f, uv, z, faces, area, sigma, gamma):
    """Per pixel/face quantities; pairs beyond the coverage cutoff are dropped (``keep``)."""
    tri = faces[f].T  # (3, P)
    rx = uv[tri, 0] - px
    ry = uv[tri, 1] - py
    A = area[f]
    E = np.stack([rx[1] * ry[2] - ry[1] * rx[2], rx[2] * ry[0] - ry[2] * rx[0], rx[0] * ry[1] - ry[0] * rx[1]])
    inside = ((E * A) >= 0).all(axis=0)

    # squared distance to each edge segment (v_k -> v_{k+1}); ap = p - v_k = -r_k
    dx = np.roll(rx, -1, axis=0) - rx
    dy = np.roll(ry, -1, axis=0) - ry
    dd = dx * dx + dy * dy
    t = np.clip(-(rx * dx + ry * dy) / dd, 0.0, 1.0)
    ex = -rx - t * dx
    ey = -ry - t * dy
    d2 = ex * ex + ey * ey
    edge = d2.argmin(axis=0)
    cols = np.arange(len(f))
    dist2 = d2[edge, cols]
    keep = inside | (dist2 <= CUTOFF * sigma)

    edge, cols = edge[keep], cols[keep]
    rx, ry, E, A = rx[:, keep], ry[:, keep], E[:, keep], A[keep]
    sign = np.where(inside[keep], 1.0, -1.0)
    D = sign * dist2[keep] / sigma
    zf = z[tri[:, keep]]
    b = E / A
    bt = np.clip(b, 0.0, None)
    s = bt.sum(axis=0)
    bh = bt / s
    zp = 1.0 / (bh / zf).sum(axis=0)
    log_d = -np.logaddexp(0.0, -D)
    log1m_d = -np.logaddexp(0.0, D)
    return {"keep": keep, "rx": rx, "ry": ry, "E": E, "A": A, "b": b, "bh": bh, "s": s, "zf": zf, "zp": zp,
            "D": D, "sign": sign, "edge": edge, "t": t[edge, cols], "ex": ex[edge, cols], "ey": ey[edge, cols],
            "log1m_d": log1m_d, "logit": log_d - zp / gamma}


def rasterize_backward(output, grad_rgb=None, grad_sil=None):
    """Gradient w.r.t. the rendered vertices given upstream image gradients."""
    c = output.cache
    if c is None:
        raise StaleCacheError("render cache was released; rerun the forward pass")
    verts, camera, mesh, params = c["verts"], c["camera"], c["mesh"], c["params"]
    H, W = camera.height, camera.width
    grad = np.zeros_like(verts)
    if c["n_pairs"] == 0:
        return grad
    g_rgb = np.zeros((H * W, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=np.float64).reshape(H * W, 3)
    g_sil = np.zeros(H * W) if grad_sil is None else np.asarray(grad_sil, dtype=np.float64).reshape(H * W)
    if not (g_rgb.any() or g_sil.any()):
        return grad

    bg = np.asarray(params.background_color, dtype=np.float64)
    upix, seg, f = c["upix"], c["seg"], c["face"]
    sil, C, w = c["sil"], c["C"], c["w"]
    gr = g_rgb[upix]
    gsil = g_sil[upix] + (gr * (C - bg)).sum(axis=1)
    gC = gr * sil[:, None]

    col = mesh.face_colors[f]
    g_logit = w * ((col - C[seg]) * gC[seg]).sum(axis=1)
    d = expit(c["D"])
    gD = gsil[seg] * (1.0 - sil[seg]) * d + g_logit * (1.0 - d)
    g_zp = -g_logit / params.gamma

    # distance branch: dist2 = |p - v_e - t (v_e1 - v_e)|^2
    g_dist2 = gD * c["sign"] / c["sigma"]
    P = len(f)
    cols = np.arange(P)
    gx = np.zeros((3, P))
    gy = np.zeros((3, P))
    e = c["edge"]
    e1 = (e + 1) % 3
    t = c["t"]
    bx = -2.0 * g_dist2 * c["ex"]
    by = -2.0 * g_dist2 * c["ey"]
    gx[e, cols] += bx * (1.0 - t)
    gy[e, cols] += by * (1.0 - t)
    gx[e1, cols] += bx * t
    gy[e1, cols] += by * t

    # depth branch
    zp, zf, bh = c["zp"], c["zf"], c["bh"]
    g_iz = -g_zp * zp**2
    g_z = -g_iz * bh / zf**2
    g_bh = g_iz / zf
    g_bt = (g_bh - (g_bh * bh).sum(axis=0)) / c["s"]
    g_b = np.where(c["b"] > 0, g_bt, 0.0)
    E, A = c["E"], c["A"]
    g_E = g_b / A - (g_b * E).sum(axis=0) / A**2
    rx, ry = c["rx"], c["ry"]
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        # E_k = rx_i ry_j - ry_i rx_j
        gx[i] += g_E[k] * ry[j]
        gy[i] -= g_E[k] * rx[j]
        gx[j] -= g_E[k] * ry[i]
        gy[j] += g_E[k] * rx[i]

    nv = len(verts)
    idx = mesh.faces[f].T.ravel()
    gu = np.stack([np.bincount(idx, gx.ravel(), nv), np.bincount(idx, gy.ravel(), nv)], axis=1)
    gz = np.bincount(idx, g_z.ravel(), nv)
    touched = np.unique(idx)
    grad[touched] = project_backward(camera, verts[touched], gu[touched], gz[touched])
    return grad


def _project_uv(camera, verts):
    pc = camera.to_camera(verts)
    zs = np.where(pc[:, 2] > Z_MIN, pc[:, 2], 1.0)
    return np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)


def _to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    img = _to_u8(rgb)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, gray):
    img = _to_u8(gray)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pnm(path):
    """Read binary PPM (P6) or PGM (P5) into floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii", "replace"))
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    ch = {"P6": 3, "P5": 1}.get(magic)
    if ch is None or maxval != 255:
        raise InputError(f"{path}: unsupported image format {magic!r}")
    arr = np.frombuffer(data[pos:pos + w * h * ch], dtype=np.uint8)
    if arr.size != w * h * ch:
        raise InputError(f"{path}: truncated image data")
    arr = arr.reshape(h, w, ch).astype(np.float64) / 255.0
    return arr[..., 0] if ch == 1 else arr
