"""Z-buffered software rasterizer producing the background/patch buffer split.

Rendering is deferred: triangles are first rasterized into per-pixel
(triangle id, barycentric) records, then shading is evaluated once per
pixel. The pixel-triangle candidate pairs are generated and depth-resolved
in a single vectorized pass; ties in depth go to the lower triangle index,
which makes every render bit-reproducible.

Image conventions: pixel (row y, column x) has its centre at
(x + 0.5, y + 0.5); the optical axis hits the continuous point (W/2, H/2);
x grows to the right and y grows downwards.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateViewError, InvalidParameterError
from .scene import IDENTITY, CameraSpec, PointLight, Scene, TransformSample, apply_transform, camera_inside

NEAR = 0.01  # metres
SHADOW_BIAS = 1e-4


@dataclass(frozen=True, eq=False)
class ViewBuffers:
    background: np.ndarray  # (H, W, 3) in [0, 1], scene without the patch
    uv: np.ndarray  # (H, W, 2) patch chart coordinates, zero where mask is 0
    light: np.ndarray  # (H, W, 3) >= 0, patch shading with unit albedo
    mask: np.ndarray  # (H, W) bool, patch is the nearest surface
    meta: TransformSample = IDENTITY

    @property
    def shape(self):
        return self.mask.shape


def _resolution(camera: CameraSpec, resolution):
    w, h = camera.resolution if resolution is None else resolution
    w, h = int(w), int(h)
    if w < 16 or h < 16:
        raise InvalidParameterError(f"resolution must be at least 16x16, got {w}x{h}")
    return w, h


def _focal(camera: CameraSpec, h: int) -> float:
    return (h / 2.0) / np.tan(camera.vertical_fov / 2.0)


def project(camera: CameraSpec, point, resolution=None, near=NEAR):
    """Perspective projection of world point(s).

    Returns ``(x, y, depth, clipped)`` where (x, y) are continuous pixel
    coordinates, ``depth`` is the distance along the optical axis and
    ``clipped`` flags points in front of the near plane (including points
    behind the camera).
    """
    w, h = _resolution(camera, resolution)
    p = np.asarray(point, dtype=np.float64)
    rel = p - camera.position
    if np.any(np.all(rel == 0, axis=-1)):
        raise InvalidParameterError("cannot project the camera position itself")
    r, u, f = camera.basis()
    x, y, z = rel @ r, rel @ u, rel @ f
    fpx = _focal(camera, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = w / 2.0 + fpx * x / z
        py = h / 2.0 - fpx * y / z
    return px, py, z, z < near


def lambert(normal, surface_point, light: PointLight, shadowed=None):
    """Shading multiplier ``ambient + color * max(0, n . l)`` (unit albedo)."""
    to_light = light.position - surface_point
    to_light = to_light / np.linalg.norm(to_light, axis=-1, keepdims=True)
    cos = np.maximum(np.sum(normal * to_light, axis=-1), 0.0)
    if shadowed is not None:
        cos = np.where(shadowed, 0.0, cos)
    return light.ambient + light.color * cos[..., None]


def shade(normal, surface_point, albedo, light: PointLight):
    """Lambertian colour: ``albedo * (ambient + color * max(0, n . l))``, never below 0."""
    out = np.asarray(albedo, dtype=np.float64) * lambert(np.asarray(normal, float), np.asarray(surface_point, float), light)
    return np.maximum(out, 0.0)


def ray_hits(origins, directions, tris, tmax, eps=1e-9, chunk=512):
    """Number of triangles hit by each ray with parameter t in (eps, tmax).

    Moller-Trumbore, vectorized over rays x triangles in chunks of rays.
    """
    origins = np.asarray(origins, float)
    directions = np.asarray(directions, float)
    tmax = np.broadcast_to(np.asarray(tmax, float), (len(origins),))
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    counts = np.zeros(len(origins), dtype=np.int64)
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk, None, :]
        d = directions[s:s + chunk, None, :]
        pvec = np.cross(d, e2)
        det = np.sum(e1 * pvec, axis=-1)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0
        uu = np.sum(tvec * pvec, axis=-1) * inv
        qvec = np.cross(tvec, e1)
        vv = np.sum(d * qvec, axis=-1) * inv
        t = np.sum(e2 * qvec, axis=-1) * inv
        hit = ok & (uu >= 0) & (vv >= 0) & (uu + vv <= 1) & (t > eps) & (t < tmax[s:s + chunk, None])
        counts[s:s + chunk] = hit.sum(axis=1)
    return counts


# --------------------------------------------------------------------------
# triangle soup

@dataclass(frozen=True, eq=False)
class _Soup:
    verts: np.ndarray  # (T, 3, 3) world
    vnormals: np.ndarray  # (T, 3, 3)
    fnormals: np.ndarray  # (T, 3)
    flat: np.ndarray  # (T,) bool
    albedo: np.ndarray  # (T, 3)
    uv: np.ndarray  # (T, 3, 2)
    is_patch: np.ndarray  # (T,) bool


def _soup(scene: Scene, include_patch=True) -> _Soup:
    verts, vn, flat, alb, uv, isp = [], [], [], [], [], []
    for obj in scene.objects:
        v, n = obj.world_geometry()
        f = obj.mesh.faces
        verts.append(v[f])
        vn.append(n[f])
        flat.append(np.full(len(f), obj.mesh.flat))
        alb.append(np.tile(obj.albedo, (len(f), 1)))
        uv.append(np.zeros((len(f), 3, 2)))
        isp.append(np.zeros(len(f), bool))
    if include_patch:
        v, n, f, t = scene.patch.world_geometry()
        verts.append(v[f])
        vn.append(n[f])
        flat.append(np.zeros(len(f), bool))
        alb.append(np.ones((len(f), 3)))
        uv.append(t[f])
        isp.append(np.ones(len(f), bool))
    verts = np.concatenate(verts)
    fn = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
    fn = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    return _Soup(verts, np.concatenate(vn), fn, np.concatenate(flat), np.concatenate(alb),
                 np.concatenate(uv), np.concatenate(isp))


def _clip_near(view_tri, near):
    """Clip one view-space triangle against z >= near; returns a list of
    (view vertices (3,3), barycentric rows (3,3)) sub-triangles."""
    poly = [(view_tri[k], np.eye(3)[k]) for k in range(3)]
    out = []
    for k in range(3):
        (pa, ba), (pb, bb) = poly[k], poly[(k + 1) % 3]
        ina, inb = pa[2] >= near, pb[2] >= near
        if ina:
            out.append((pa, ba))
        if ina != inb:
            t = (near - pa[2]) / (pb[2] - pa[2])
            out.append((pa + t * (pb - pa), ba + t * (bb - ba)))
    tris = []
    for k in range(1, len(out) - 1):
        sel = (out[0], out[k], out[k + 1])
        tris.append((np.array([s[0] for s in sel]), np.array([s[1] for s in sel])))
    return tris


def _rasterize(camera: CameraSpec, w, h, soup: _Soup, near=NEAR):
    """Resolve visibility. Returns (tri_bg, bary_bg, tri_full, bary_full):
    per-pixel winning triangle ids (-1 for none) and barycentrics with respect
    to the original triangle, once without and once with patch triangles."""
    r, u, f = camera.basis()
    rel = soup.verts - camera.position
    view = np.stack([rel @ r, rel @ u, rel @ f], axis=-1)  # (T, 3, 3)
    front = np.einsum("ij,ij->i", soup.fnormals, rel[:, 0]) < 0
    z = view[..., 2]
    all_in = front & np.all(z >= near, axis=1)
    partial = front & np.any(z >= near, axis=1) & ~all_in

    ids = [np.nonzero(all_in)[0]]
    vtri = [view[all_in]]
    bm = [np.broadcast_to(np.eye(3), (int(all_in.sum()), 3, 3))]
    for t in np.nonzero(partial)[0]:
        for tv, tb in _clip_near(view[t], near):
            ids.append(np.array([t]))
            vtri.append(tv[None])
            bm.append(tb[None])
    ids = np.concatenate(ids)
    order = np.argsort(ids, kind="stable")
    ids, vtri, bm = ids[order], np.concatenate(vtri)[order], np.concatenate(bm)[order]

    fpx = _focal(camera, h)
    invw = 1.0 / vtri[..., 2]
    sx = w / 2.0 + fpx * vtri[..., 0] * invw
    sy = h / 2.0 - fpx * vtri[..., 1] * invw
    area = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - (sx[:, 2] - sx[:, 0]) * (sy[:, 1] - sy[:, 0])

    x0 = np.clip(np.ceil(sx.min(1) - 0.5), 0, w)
    x1 = np.clip(np.floor(sx.max(1) - 0.5), -1, w - 1)
    y0 = np.clip(np.ceil(sy.min(1) - 0.5), 0, h)
    y1 = np.clip(np.floor(sy.max(1) - 0.5), -1, h - 1)
    nx = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    ny = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    cnt = np.where(np.abs(area) > 1e-12, nx * ny, 0)

    tri = np.repeat(np.arange(len(ids)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(cnt.sum()) - start
    nxt = nx[tri]
    px = x0[tri].astype(np.int64) + local % np.maximum(nxt, 1)
    py = y0[tri].astype(np.int64) + local // np.maximum(nxt, 1)
    cx, cy = px + 0.5, py + 0.5

    X, Y = sx[tri], sy[tri]
    e0 = (X[:, 1] - cx) * (Y[:, 2] - cy) - (X[:, 2] - cx) * (Y[:, 1] - cy)
    e1 = (X[:, 2] - cx) * (Y[:, 0] - cy) - (X[:, 0] - cx) * (Y[:, 2] - cy)
    e2 = (X[:, 0] - cx) * (Y[:, 1] - cy) - (X[:, 1] - cx) * (Y[:, 0] - cy)
    lam = np.stack([e0, e1, e2], axis=1) / area[tri, None]
    inside = np.all(lam >= 0, axis=1)

    tri, px, py, lam = tri[inside], px[inside], py[inside], lam[inside]
    q = lam * invw[tri]
    depth_key = q.sum(axis=1)  # interpolated 1/z, larger is nearer
    bary = np.einsum("nk,nkj->nj", q / depth_key[:, None], bm[tri])
    pix = py * w + px
    orig = ids[tri]

    def resolve(sel):
        p, d, t = pix[sel], depth_key[sel], tri[sel]
        idx = np.nonzero(sel)[0]
        order = np.lexsort((t, -d, p))
        _, first = np.unique(p[order], return_index=True)
        win = idx[order[first]]
        tri_map = np.full(h * w, -1, dtype=np.int64)
        bary_map = np.zeros((h * w, 3))
        tri_map[pix[win]] = orig[win]
        bary_map[pix[win]] = bary[win]
        return tri_map.reshape(h, w), bary_map.reshape(h, w, 3)

    tri_bg, bary_bg = resolve(~soup.is_patch[orig])
    tri_full, bary_full = resolve(np.ones(len(orig), bool))
    return tri_bg, bary_bg, tri_full, bary_full


def _surface(soup: _Soup, tri_ids, bary):
    pos = np.einsum("nk,nkj->nj", bary, soup.verts[tri_ids])
    smooth = np.einsum("nk,nkj->nj", bary, soup.vnormals[tri_ids])
    smooth = smooth / np.maximum(np.linalg.norm(smooth, axis=1, keepdims=True), 1e-300)
    normal = np.where(soup.flat[tri_ids, None], soup.fnormals[tri_ids], smooth)
    return pos, normal


def _shadowed(scene: Scene, soup: _Soup, pos, normal):
    occluders = soup.verts[~soup.is_patch]
    to_light = scene.light.position - pos
    dist = np.linalg.norm(to_light, axis=1)
    d = to_light / dist[:, None]
    return ray_hits(pos + SHADOW_BIAS * normal, d, occluders, dist) > 0


def render_buffers(scene: Scene, sample: TransformSample | None = None, resolution=None,
                   shadows: bool = False) -> ViewBuffers:
    """Render the background image and the patch property buffers of one view."""
    sample = IDENTITY if sample is None else sample
    s = apply_transform(sample, scene)
    w, h = _resolution(s.camera, resolution)
    if camera_inside(s):
        raise DegenerateViewError("camera is inside scene geometry")
    soup = _soup(s)
    tri_bg, bary_bg, tri_full, bary_full = _rasterize(s.camera, w, h, soup)

    background = np.tile(s.background_color, (h, w, 1)).astype(np.float64)
    covered = tri_bg >= 0
    if covered.any():
        t = tri_bg[covered]
        pos, normal = _surface(soup, t, bary_bg[covered])
        shadow = _shadowed(s, soup, pos, normal) if shadows else None
        color = soup.albedo[t] * lambert(normal, pos, s.light, shadow)
        background[covered] = np.clip(color, 0.0, 1.0)

    mask = np.zeros((h, w), bool)
    ok = tri_full >= 0
    mask[ok] = soup.is_patch[tri_full[ok]]
    uv = np.zeros((h, w, 2))
    light = np.zeros((h, w, 3))
    if mask.any():
        t = tri_full[mask]
        b = bary_full[mask]
        uv[mask] = np.clip(np.einsum("nk,nkj->nj", b, soup.uv[t]), 0.0, 1.0)
        pos, normal = _surface(soup, t, b)
        shadow = _shadowed(s, soup, pos, normal) if shadows else None
        light[mask] = lambert(normal, pos, s.light, shadow)
    return ViewBuffers(background, uv, light, mask, sample)


def render_full(scene: Scene, patch, sample: TransformSample | None = None, resolution=None,
                shadows: bool = False) -> np.ndarray:
    """Textured render of the scene with the patch applied.

    Shares the sampling path with :func:`patchforge.compose.compose`, so the
    result is bit-identical to compositing the buffers.
    """
    from .compose import compose

    return compose(patch, render_buffers(scene, sample, resolution, shadows))


def render_many(scene: Scene, samples, resolution=None, shadows=False, threads: int = 1) -> list[ViewBuffers]:
    """Render several views; order of the result follows ``samples``."""
    samples = list(samples)
    if threads <= 1 or len(samples) < 2:
        return [render_buffers(scene, s, resolution, shadows) for s in samples]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda s: render_buffers(scene, s, resolution, shadows), samples))


def object_mask(scene: Scene, class_tag: str, sample: TransformSample | None = None, resolution=None) -> np.ndarray:
    """Pixels where an object tagged ``class_tag`` is the nearest surface (patch included as occluder)."""
    s = apply_transform(IDENTITY if sample is None else sample, scene)
    w, h = _resolution(s.camera, resolution)
    soup = _soup(s)
    owner = np.concatenate([np.full(len(o.mesh.faces), o.class_tag == class_tag) for o in s.objects]
                           + [np.ones(len(s.patch.local_mesh().faces), bool)])
    _, _, tri_full, _ = _rasterize(s.camera, w, h, soup)
    hit = tri_full >= 0
    out = np.zeros((h, w), bool)
    out[hit] = owner[tri_full[hit]]
    return out
