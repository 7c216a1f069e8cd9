"""Triangle meshes and the parametric primitives used to build scenes.

All primitives are built in a local frame with z up. Cylinders, cones and
strips stand on the z=0 plane; cubes, spheres and tori are centred on the
origin. Winding is counter-clockwise when seen from outside, so the face
normal ``(v1 - v0) x (v2 - v0)`` always points away from the solid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

PRIMITIVE_KINDS = ("cube", "cylinder", "cylinder_strip", "cone", "sphere", "torus_segment")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (N, 3) metres
    normals: np.ndarray  # (N, 3) unit
    faces: np.ndarray  # (M, 3) int
    uv: np.ndarray | None = None  # (N, 2), only for the patch strip
    flat: bool = False  # shade with face normals instead of vertex normals

    def __post_init__(self):
        faces = np.asarray(self.faces)
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise InvalidParameterError("triangle index out of range")
        lengths = np.linalg.norm(self.normals, axis=1)
        if lengths.size and np.max(np.abs(lengths - 1.0)) > 1e-6:
            raise InvalidParameterError("vertex normals must be unit length")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _make(vertices, normals, faces, uv=None, flat=False) -> Mesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    normals = _unit(np.asarray(normals, dtype=np.float64))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    # orient every face so its geometric normal agrees with its vertex normals
    v = vertices[faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", fn, normals[faces].sum(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    return Mesh(vertices, normals, faces, None if uv is None else np.asarray(uv, dtype=np.float64), flat)


def _positive(**dims):
    for name, value in dims.items():
        if not np.all(np.asarray(value, dtype=float) > 0):
            raise InvalidParameterError(f"{name} must be positive, got {value!r}")


def _segments(segments):
    if int(segments) < 3:
        raise InvalidParameterError(f"segment count must be >= 3, got {segments}")
    return int(segments)


def cube(size=1.0) -> Mesh:
    """Axis-aligned box centred on the origin; ``size`` is a scalar edge or (sx, sy, sz)."""
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
    _positive(size=size)
    corners = np.array([[x, y, z] for z in (-0.5, 0.5) for y in (-0.5, 0.5) for x in (-0.5, 0.5)])
    faces = [
        [0, 2, 1], [1, 2, 3],  # bottom
        [4, 5, 6], [5, 7, 6],  # top
        [0, 1, 4], [1, 5, 4],  # front (-y)
        [2, 6, 3], [3, 6, 7],  # back (+y)
        [0, 4, 2], [2, 4, 6],  # left (-x)
        [1, 3, 5], [3, 7, 5],  # right (+x)
    ]
    return _make(corners * size, corners, faces, flat=True)


def cylinder(radius=1.0, height=1.0, segments=32, capped=True) -> Mesh:
    _positive(radius=radius, height=height)
    n = _segments(segments)
    phi = 2 * np.pi * np.arange(n) / n
    ring = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
    verts = [ring * [radius, radius, 0], ring * [radius, radius, 0] + [0, 0, height]]
    norms = [ring, ring]
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i]]
    if capped:
        for z, nz in ((0.0, -1.0), (height, 1.0)):
            base = sum(len(v) for v in verts)
            verts.append(np.vstack([[0, 0, z], ring * [radius, radius, 0] + [0, 0, z]]))
            norms.append(np.tile([0, 0, nz], (n + 1, 1)))
            faces += [[base, base + 1 + i, base + 1 + (i + 1) % n] for i in range(n)]
    return _make(np.vstack(verts), np.vstack(norms), faces)


def cone(radius=1.0, height=1.0, segments=32, top_radius=0.0) -> Mesh:
    """Capped cone, or a frustum when ``top_radius`` > 0."""
    _positive(radius=radius, height=height)
    if top_radius < 0:
        raise InvalidParameterError("top_radius must be >= 0")
    n = _segments(segments)
    phi = 2 * np.pi * np.arange(n) / n
    ring = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
    slope = radius - top_radius

    def side_normal(p):
        return np.stack([height * np.cos(p), height * np.sin(p), np.full_like(p, slope)], axis=1)

    verts = [ring * [radius, radius, 0]]
    norms = [side_normal(phi)]
    faces = []
    if top_radius > 0:
        verts.append(ring * [top_radius, top_radius, 0] + [0, 0, height])
        norms.append(side_normal(phi))
        for i in range(n):
            j = (i + 1) % n
            faces += [[i, j, n + j], [i, n + j, n + i]]
    else:
        mid = phi + np.pi / n
        verts.append(np.tile([0.0, 0.0, height], (n, 1)))
        norms.append(side_normal(mid))
        faces += [[i, (i + 1) % n, n + i] for i in range(n)]
    caps = [(0.0, -1.0, radius)] + ([(height, 1.0, top_radius)] if top_radius > 0 else [])
    for z, nz, r in caps:
        base = sum(len(v) for v in verts)
        verts.append(np.vstack([[0, 0, z], ring * [r, r, 0] + [0, 0, z]]))
        norms.append(np.tile([0, 0, nz], (n + 1, 1)))
        faces += [[base, base + 1 + i, base + 1 + (i + 1) % n] for i in range(n)]
    return _make(np.vstack(verts), np.vstack(norms), faces)


def sphere(radius=1.0, segments=24) -> Mesh:
    _positive(radius=radius)
    n = _segments(segments)
    rings = max(2, n // 2)
    theta = np.pi * np.arange(1, rings) / rings  # polar angle, poles excluded
    phi = 2 * np.pi * np.arange(n) / n
    t, p = np.meshgrid(theta, phi, indexing="ij")
    body = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
    unit = np.vstack([[0, 0, 1], body, [0, 0, -1]])
    south = len(unit) - 1
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces.append([0, 1 + i, 1 + j])
        last = 1 + (rings - 2) * n
        faces.append([south, last + j, last + i])
    for r in range(rings - 2):
        for i in range(n):
            j = (i + 1) % n
            a, b = 1 + r * n + i, 1 + r * n + j
            c, d = a + n, b + n
            faces += [[a, c, d], [a, d, b]]
    return _make(unit * radius, unit, faces)


def torus_segment(major_radius=1.0, minor_radius=0.25, arc=np.pi, segments=16, tube_segments=8) -> Mesh:
    """Capped arc of a torus lying in the x-z plane, centred on the +x axis.

    Used as a mug handle: the arc bulges toward +x and its two capped ends
    point back toward the origin.
    """
    _positive(major_radius=major_radius, minor_radius=minor_radius, arc=arc)
    if arc >= 2 * np.pi:
        raise InvalidParameterError("arc must be < 2*pi")
    n = _segments(segments)
    m = _segments(tube_segments)
    psi = -arc / 2 + arc * np.arange(n + 1) / n
    tau = 2 * np.pi * np.arange(m) / m
    er = np.stack([np.cos(psi), np.zeros_like(psi), np.sin(psi)], axis=1)
    ey = np.array([0.0, 1.0, 0.0])
    normal = np.cos(tau)[None, :, None] * er[:, None, :] + np.sin(tau)[None, :, None] * ey
    pos = major_radius * er[:, None, :] + minor_radius * normal
    verts = [pos.reshape(-1, 3)]
    norms = [normal.reshape(-1, 3)]
    faces = []
    for i in range(n):
        for k in range(m):
            kk = (k + 1) % m
            a, b = i * m + k, i * m + kk
            c, d = a + m, b + m
            faces += [[a, c, d], [a, d, b]]
    for idx, sign in ((0, -1.0), (n, 1.0)):
        tangent = sign * np.array([-np.sin(psi[idx]), 0.0, np.cos(psi[idx])])
        base = sum(len(v) for v in verts)
        verts.append(np.vstack([major_radius * er[idx], pos[idx]]))
        norms.append(np.tile(tangent, (m + 1, 1)))
        faces += [[base, base + 1 + k, base + 1 + (k + 1) % m] for k in range(m)]
    return _make(np.vstack(verts), np.vstack(norms), faces)


def cylinder_strip(radius=1.0, z_lo=0.0, z_hi=1.0, phi_center=0.0, phi_span=np.pi, segments=32) -> Mesh:
    """Open azimuthal band of a cylinder with outward normals and a [0,1]^2 uv chart.

    ``u`` runs with increasing azimuth (left to right seen from outside),
    ``v`` runs from the top edge (0) to the bottom edge (1).
    """
    _positive(radius=radius, height=z_hi - z_lo)
    if not 0 < phi_span < 2 * np.pi:
        raise InvalidParameterError("azimuth span must lie in (0, 2*pi)")
    n = _segments(segments)
    u = np.arange(n + 1) / n
    phi = phi_center - phi_span / 2 + phi_span * u
    radial = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
    top = radial * [radius, radius, 0] + [0, 0, z_hi]
    bottom = radial * [radius, radius, 0] + [0, 0, z_lo]
    verts = np.vstack([top, bottom])
    uv = np.vstack([np.stack([u, np.zeros_like(u)], 1), np.stack([u, np.ones_like(u)], 1)])
    faces = []
    for i in range(n):
        a, b, c, d = i, i + 1, n + 1 + i, n + 2 + i
        faces += [[a, c, d], [a, d, b]]
    return _make(verts, np.vstack([radial, radial]), faces, uv=uv)


_BUILDERS = {
    "cube": cube,
    "cylinder": cylinder,
    "cylinder_strip": cylinder_strip,
    "cone": cone,
    "sphere": sphere,
    "torus_segment": torus_segment,
}


def build_primitive(kind: str, **params) -> Mesh:
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise InvalidParameterError(f"unknown primitive kind {kind!r}; expected one of {PRIMITIVE_KINDS}") from None
    try:
        return builder(**params)
    except TypeError as exc:
        raise InvalidParameterError(f"bad parameters for {kind}: {exc}") from None


def is_watertight(mesh: Mesh, decimals=9) -> bool:
    """True when, after welding coincident vertices, every edge borders exactly two
    faces traversed in opposite directions."""
    key = np.round(mesh.vertices, decimals)
    _, welded = np.unique(key, axis=0, return_inverse=True)
    f = welded.reshape(-1)[mesh.faces]
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    directed = directed[directed[:, 0] != directed[:, 1]]
    fwd = {tuple(e) for e in directed.tolist()}
    if len(fwd) != len(directed):
        return False
    return all((b, a) in fwd for a, b in fwd)
