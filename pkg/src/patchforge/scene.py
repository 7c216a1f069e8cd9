"""Scene description, scene/camera transformations and their samplers.

A :class:`Scene` is an immutable value. Transformations are expressed as a
:class:`TransformSample`, a mapping from dimension id to a real parameter,
and :func:`apply_transform` returns a transformed copy. Angles in samples
are degrees, distances metres, light shifts are fractional per-channel
gains (``0.2`` means +20 %).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import mesh as _mesh
from .errors import ConfigurationError, InvalidParameterError

DIMENSIONS = (
    "scene_rot_x",
    "scene_rot_y",
    "scene_rot_z",
    "scene_trans_x",
    "scene_trans_y",
    "light_shift_r",
    "light_shift_g",
    "light_shift_b",
    "camera_azimuth",
    "camera_elevation",
    "camera_distance",
)
CAMERA_DIMENSIONS = ("camera_azimuth", "camera_elevation", "camera_distance")


# --------------------------------------------------------------------------
# affine helpers

def rotation_matrix(rx=0.0, ry=0.0, rz=0.0) -> np.ndarray:
    """3x3 rotation ``Rz @ Ry @ Rx`` for angles in degrees."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def affine(translate=(0.0, 0.0, 0.0), rotate_deg=(0.0, 0.0, 0.0), scale=1.0) -> np.ndarray:
    """4x4 matrix ``T @ R @ S``."""
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(*rotate_deg) @ np.diag(np.broadcast_to(np.asarray(scale, float), (3,)))
    m[:3, 3] = translate
    return m


def transform_points(matrix, points):
    return points @ matrix[:3, :3].T + matrix[:3, 3]


def transform_normals(matrix, normals):
    n = normals @ np.linalg.inv(matrix[:3, :3])
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _rgb(value, name, lo=0.0, hi=None):
    arr = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)) or np.any(arr < lo) or (hi is not None and np.any(arr > hi)):
        raise InvalidParameterError(f"{name} out of range: {value!r}")
    return arr


# --------------------------------------------------------------------------
# scene types

@dataclass(frozen=True, eq=False)
class ObjectInstance:
    mesh: _mesh.Mesh
    albedo: np.ndarray
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    class_tag: str = "scenery"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "albedo", _rgb(self.albedo, "albedo", 0.0, 1.0))
        t = np.asarray(self.transform, dtype=np.float64)
        if t.shape != (4, 4) or not np.all(np.isfinite(t)) or not np.allclose(t[3], [0, 0, 0, 1]):
            raise InvalidParameterError("object transform must be a finite 4x4 affine matrix")
        object.__setattr__(self, "transform", t)

    def world_geometry(self):
        """World-space vertices and unit normals."""
        return (transform_points(self.transform, self.mesh.vertices),
                transform_normals(self.transform, self.mesh.normals))


@dataclass(frozen=True, eq=False)
class PatchPlacement:
    """Azimuthal strip of a cylinder hosting the patch.

    The strip lives in a host frame (``frame`` maps host-local to world)
    whose z axis is the cylinder axis. The uv chart is

        u = (phi - phi_center + phi_span / 2) / phi_span
        v = (z_hi - z) / (z_hi - z_lo)

    which maps the strip bijectively onto [0, 1]^2.
    """
    radius: float
    z_lo: float
    z_hi: float
    phi_center: float  # radians, host frame
    phi_span: float  # radians
    frame: np.ndarray = field(default_factory=lambda: np.eye(4))
    segments: int = 32
    host_height: float | None = None

    def __post_init__(self):
        if not 0 < self.phi_span < 2 * math.pi:
            raise InvalidParameterError("azimuth span must lie in (0, 2*pi)")
        if self.radius <= 0 or self.z_hi <= self.z_lo:
            raise InvalidParameterError("patch strip needs positive radius and height")
        object.__setattr__(self, "frame", np.asarray(self.frame, dtype=np.float64))

    def uv_of(self, phi, z):
        u = (np.asarray(phi) - self.phi_center + self.phi_span / 2) / self.phi_span
        v = (self.z_hi - np.asarray(z)) / (self.z_hi - self.z_lo)
        return u, v

    def surface_point(self, u, v):
        """World position of the strip point with chart coordinates (u, v)."""
        phi = self.phi_center - self.phi_span / 2 + self.phi_span * np.asarray(u, float)
        z = self.z_hi - (self.z_hi - self.z_lo) * np.asarray(v, float)
        local = np.stack([self.radius * np.cos(phi), self.radius * np.sin(phi), z], axis=-1)
        return transform_points(self.frame, local)

    def local_mesh(self) -> _mesh.Mesh:
        return _mesh.cylinder_strip(self.radius, self.z_lo, self.z_hi, self.phi_center, self.phi_span, self.segments)

    def world_geometry(self):
        m = self.local_mesh()
        return (transform_points(self.frame, m.vertices), transform_normals(self.frame, m.normals), m.faces, m.uv)


@dataclass(frozen=True, eq=False)
class PointLight:
    position: np.ndarray
    color: np.ndarray
    ambient: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "color", _rgb(self.color, "light color"))
        object.__setattr__(self, "ambient", _rgb(self.ambient, "ambient"))


@dataclass(frozen=True, eq=False)
class CameraSpec:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    vertical_fov: float = math.radians(40.0)
    resolution: tuple = (64, 64)  # (width, height)

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))
        if not 0 < self.vertical_fov < math.pi:
            raise InvalidParameterError("vertical fov must lie in (0, pi)")
        view = self.look_at - self.position
        if np.linalg.norm(view) == 0:
            raise InvalidParameterError("camera position equals look_at")
        if np.linalg.norm(np.cross(view / np.linalg.norm(view), self.up)) < 1e-9:
            raise InvalidParameterError("camera up vector is parallel to the view direction")

    def basis(self):
        """Right, up and forward unit vectors of the camera frame."""
        f = self.look_at - self.position
        f = f / np.linalg.norm(f)
        r = np.cross(f, self.up)
        r = r / np.linalg.norm(r)
        return r, np.cross(r, f), f


@dataclass(frozen=True, eq=False)
class Scene:
    objects: tuple
    light: PointLight
    camera: CameraSpec
    patch: PatchPlacement
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not isinstance(self.patch, PatchPlacement):
            raise InvalidParameterError("a scene needs exactly one PatchPlacement")
        object.__setattr__(self, "background_color", _rgb(self.background_color, "background", 0.0, 1.0))

    def with_camera(self, camera):
        return replace(self, camera=camera)


# --------------------------------------------------------------------------
# transformations

@dataclass(frozen=True)
class TransformDistribution:
    """Uniform distribution U(lo, hi) over one transformation dimension."""
    dim: str
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise InvalidParameterError(f"{self.dim}: need finite lo <= hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True, eq=False)
class TransformSample:
    values: Mapping[str, float] = field(default_factory=dict)
    provenance: str = "manual"  # "random" | "systematic" | "manual"
    index: object = None  # draw number (random) or grid index tuple (systematic)

    def get(self, dim, default=0.0):
        return self.values.get(dim, default)

    def __eq__(self, other):
        if not isinstance(other, TransformSample):
            return NotImplemented
        return (dict(self.values) == dict(other.values) and self.provenance == other.provenance
                and self.index == other.index)

    def to_dict(self):
        return {"values": dict(self.values), "provenance": self.provenance,
                "index": list(self.index) if isinstance(self.index, tuple) else self.index}


IDENTITY = TransformSample({})


def apply_transform(sample: TransformSample, scene: Scene) -> Scene:
    """Return a copy of ``scene`` with the sample's transformations applied.

    Scene rotation (``Rz Ry Rx``, about the world origin) and translation act
    on every object and the patch host; light shifts scale the light colour;
    camera dimensions orbit the camera around its look-at point.
    """
    values = dict(sample.values)
    unknown = sorted(set(values) - set(DIMENSIONS))
    if unknown:
        raise ConfigurationError(f"unknown transformation dimension(s): {', '.join(unknown)}")
    g = lambda k: float(values.get(k, 0.0))  # noqa: E731

    objects, patch = scene.objects, scene.patch
    rot = (g("scene_rot_x"), g("scene_rot_y"), g("scene_rot_z"))
    trans = (g("scene_trans_x"), g("scene_trans_y"), 0.0)
    if any(rot) or any(trans):
        m = affine(trans, rot)
        objects = tuple(replace(o, transform=m @ o.transform) for o in objects)
        patch = replace(patch, frame=m @ patch.frame)

    light = scene.light
    shift = np.array([g("light_shift_r"), g("light_shift_g"), g("light_shift_b")])
    if np.any(shift):
        light = replace(light, color=np.maximum(light.color * (1.0 + shift), 0.0))

    camera = scene.camera
    az, el, dd = g("camera_azimuth"), g("camera_elevation"), g("camera_distance")
    if az or el or dd:
        camera = orbit_camera(camera, az, el, dd)

    return replace(scene, objects=objects, light=light, camera=camera, patch=patch)


def orbit_camera(camera: CameraSpec, azimuth=0.0, elevation=0.0, distance=0.0) -> CameraSpec:
    """Move the camera on a sphere around ``look_at``: azimuth about world z,
    elevation toward +z (both degrees), distance added to the radius."""
    d = camera.position - camera.look_at
    r = float(np.linalg.norm(d))
    az0 = math.atan2(d[1], d[0])
    el0 = math.atan2(d[2], math.hypot(d[0], d[1]))
    az1 = az0 + math.radians(azimuth)
    el1 = el0 + math.radians(elevation)
    if abs(el1) >= math.radians(89.0):
        raise ConfigurationError("camera elevation leaves the (-89, 89) degree band")
    r1 = r + distance
    if r1 <= 0:
        raise ConfigurationError("camera distance offset places the camera at or past its look-at point")
    offset = r1 * np.array([math.cos(el1) * math.cos(az1), math.cos(el1) * math.sin(az1), math.sin(el1)])
    return replace(camera, position=camera.look_at + offset)


def sample_random(dists: Sequence[TransformDistribution], n: int, seed: int) -> list[TransformSample]:
    """Draw ``n`` i.i.d. samples, each dimension uniform on its [lo, hi]."""
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.array([d.lo for d in dists], dtype=np.float64)
    hi = np.array([d.hi for d in dists], dtype=np.float64)
    u = rng.random((n, len(dists)))
    vals = np.clip(lo + (hi - lo) * u, lo, hi)
    return [TransformSample({d.dim: float(v) for d, v in zip(dists, row)}, "random", i)
            for i, row in enumerate(vals)]


def systematic_values(dist: TransformDistribution, l: int) -> list[float]:
    """theta_j = lo + j * (hi - lo) / l for j = 1..l."""
    if int(l) < 1:
        raise InvalidParameterError("systematic sampling needs l >= 1")
    l = int(l)
    return [dist.lo + j * (dist.hi - dist.lo) / l for j in range(1, l + 1)]


def sample_systematic(dist: TransformDistribution, l: int) -> list[TransformSample]:
    return [TransformSample({dist.dim: v}, "systematic", (j,))
            for j, v in enumerate(systematic_values(dist, l), start=1)]


def enumerate_grid(dists: Sequence[TransformDistribution], per_dim_counts: Sequence[int]) -> list[TransformSample]:
    """Cartesian product of per-dimension systematic samples; the first
    dimension varies slowest."""
    if len(dists) != len(per_dim_counts):
        raise InvalidParameterError("one count per distribution is required")
    axes = [systematic_values(d, c) for d, c in zip(dists, per_dim_counts)]
    out = []
    for idx in itertools.product(*(range(len(a)) for a in axes)):
        values = {d.dim: axes[k][i] for k, (d, i) in enumerate(zip(dists, idx))}
        out.append(TransformSample(values, "systematic", tuple(i + 1 for i in idx)))
    return out


# --------------------------------------------------------------------------
# JSON description

def mug_parts(radius=0.04, height=0.1, top_radius=None, handle_major=0.028, handle_minor=0.007,
              handle_arc_deg=200.0, handle_z=None, handle_offset=0.002, segments=32):
    """Mesh/transform pairs of a mug: capped body plus a torus-segment handle on +x.

    With ``top_radius`` the body becomes a frustum (a tapered mug).
    """
    if top_radius is None or top_radius == radius:
        body = _mesh.cylinder(radius, height, segments)
        rim = radius
    else:
        body = _mesh.cone(radius, height, segments, top_radius=top_radius)
        rim = None
    hz = height / 2 if handle_z is None else handle_z
    r_at = rim if rim is not None else radius + (top_radius - radius) * hz / height
    handle = _mesh.torus_segment(handle_major, handle_minor, math.radians(handle_arc_deg),
                                 max(segments // 2, 8), 8)
    return [(body, np.eye(4)), (handle, affine((r_at + handle_offset, 0.0, hz)))]


def _object_meshes(spec):
    kind = spec["kind"]
    params = dict(spec.get("params", {}))
    if kind == "mug":
        return mug_parts(**params)
    if "arc_deg" in params:
        params["arc"] = math.radians(params.pop("arc_deg"))
    return [(_mesh.build_primitive(kind, **params), np.eye(4))]


def objects_from_spec(spec) -> list[ObjectInstance]:
    """Expand one JSON object description (possibly composite) to instances."""
    base = affine(spec.get("translate", (0, 0, 0)), spec.get("rotate_deg", (0, 0, 0)), spec.get("scale", 1.0))
    name = spec.get("name", spec["kind"])
    parts = _object_meshes(spec)
    out = []
    for k, (m, local) in enumerate(parts):
        out.append(ObjectInstance(m, spec.get("albedo", (0.8, 0.8, 0.8)), base @ local,
                                  spec.get("class_tag", "scenery"), name if len(parts) == 1 else f"{name}.{k}"))
    return out


def patch_from_spec(spec) -> PatchPlacement:
    frame = affine(spec.get("translate", (0, 0, 0)), spec.get("rotate_deg", (0, 0, 0)))
    return PatchPlacement(
        radius=float(spec["radius"]),
        z_lo=float(spec["z_lo"]),
        z_hi=float(spec["z_hi"]),
        phi_center=math.radians(float(spec.get("phi_center_deg", -90.0))),
        phi_span=math.radians(float(spec["phi_span_deg"])),
        frame=frame,
        segments=int(spec.get("segments", 32)),
        host_height=spec.get("host_height"),
    )


def scene_from_dict(d) -> Scene:
    objects = []
    for spec in d["objects"]:
        objects.extend(objects_from_spec(spec))
    lt, cam = d["light"], d["camera"]
    light = PointLight(lt["position"], lt["color"], lt.get("ambient", (0.0, 0.0, 0.0)))
    camera = CameraSpec(cam["position"], cam["look_at"], cam.get("up", (0, 0, 1)),
                        math.radians(float(cam.get("vertical_fov_deg", 40.0))),
                        tuple(cam.get("resolution", (64, 64))))
    return Scene(tuple(objects), light, camera, patch_from_spec(d["patch"]), d.get("background_color", (0, 0, 0)))


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def distributions_from_dict(d: Mapping[str, Iterable[float]]) -> list[TransformDistribution]:
    out = []
    for dim, bounds in d.items():
        lo, hi = bounds
        out.append(TransformDistribution(dim, float(lo), float(hi)))
    return out


def replace_objects(scene: Scene, tag: str, new_objects: Iterable[ObjectInstance]) -> Scene:
    """Swap every object carrying ``tag`` for ``new_objects``."""
    kept = [o for o in scene.objects if o.class_tag != tag]
    return replace(scene, objects=tuple(kept) + tuple(new_objects))


def camera_inside(scene: Scene) -> bool:
    """Whether the camera lies inside any closed object (ray-parity test)."""
    from .raster import ray_hits  # local import: raster depends on this module

    origin = scene.camera.position
    direction = np.array([0.5773, 0.5774, 0.5775])
    direction = direction / np.linalg.norm(direction)
    for obj in scene.objects:
        v, _ = obj.world_geometry()
        tri = v[obj.mesh.faces]
        lo, hi = tri.min(axis=(0, 1)), tri.max(axis=(0, 1))
        if np.any(origin < lo) or np.any(origin > hi):
            continue
        hits = ray_hits(origin[None, :], direction[None, :], tri, np.inf)
        if hits[0] % 2 == 1:
            return True
    return False
