"""Digital evaluation: pose grids, Og/Tg/Ot rate tables, holdout mutations."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .compose import compose
from .errors import ConfigurationError, DegenerateViewError
from .model import Model, softmax
from .raster import object_mask, project, render_many
from .scene import (
    CAMERA_DIMENSIONS, Scene, TransformDistribution, affine, apply_transform, camera_inside,
    enumerate_grid, objects_from_spec,
)

log = logging.getLogger(__name__)

# 16 * 15 * 14 = 3360 poses over (azimuth, elevation, distance)
PAPER_SCALE_COUNTS = (16, 15, 14)
HOLDOUT_SUITE = ("patch_up", "patch_down", "mat_red", "mat_wood", "object_color", "object_shape", "flipped")


@dataclass(frozen=True, eq=False)
class EvalGrid:
    poses: tuple
    dims: tuple
    counts: tuple
    dropped: tuple = ()

    def __len__(self):
        return len(self.poses)

    def values(self) -> np.ndarray:
        return np.array([[p.get(d) for d in self.dims] for p in self.poses], dtype=np.float64)


def _host_objects(scene: Scene, host_tag):
    objs = [o for o in scene.objects if o.class_tag == host_tag]
    if not objs:
        raise ConfigurationError(f"scene has no object tagged {host_tag!r}")
    return objs


def host_in_frame(scene: Scene, sample, host_tag, min_inside=0.9) -> bool:
    """Visibility pre-pass: the host is drawn and most of its vertices project into the image."""
    s = apply_transform(sample, scene)
    if camera_inside(s):
        return False
    w, h = s.camera.resolution
    pts = np.concatenate([o.world_geometry()[0] for o in _host_objects(s, host_tag)])
    px, py, _, clipped = project(s.camera, pts)
    inside = ~clipped & (px >= 0) & (px <= w) & (py >= 0) & (py <= h)
    if inside.mean() < min_inside:
        return False
    return bool(object_mask(scene, host_tag, sample).any())


def build_eval_grid(scene: Scene, ranges, counts, host_tag="mug", min_inside=0.9) -> EvalGrid:
    """Cartesian pose grid (systematic points per dimension), filtered for host visibility.

    ``ranges`` maps dimension ids to ``(lo, hi)``; ``counts`` follows the
    same order.
    """
    dims = tuple(ranges)
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(dims):
        raise ConfigurationError("one count per eval dimension is required")
    if any(c < 1 for c in counts):
        raise ConfigurationError("eval counts must be >= 1")
    dists = [TransformDistribution(d, *map(float, ranges[d])) for d in dims]
    kept, dropped = [], []
    for s in enumerate_grid(dists, counts):
        try:
            ok = host_in_frame(scene, s, host_tag, min_inside)
        except (ConfigurationError, DegenerateViewError):
            ok = False
        (kept if ok else dropped).append(s)
    if dropped:
        log.warning("eval grid: dropped %d of %d poses (host object not in frame): %s",
                    len(dropped), len(kept) + len(dropped), [p.index for p in dropped])
    if not kept:
        raise ConfigurationError("no pose of the eval grid keeps the host object in frame")
    return EvalGrid(tuple(kept), dims, counts, tuple(p.index for p in dropped))


def paper_scale_grid(scene: Scene, ranges, host_tag="mug") -> EvalGrid:
    if tuple(ranges) != CAMERA_DIMENSIONS:
        ranges = {d: ranges[d] for d in CAMERA_DIMENSIONS}
    return build_eval_grid(scene, ranges, PAPER_SCALE_COUNTS, host_tag)


@dataclass
class RateReport:
    variant: str
    target_class: str
    class_names: tuple
    y_og: int
    y_tg: int | None
    predictions: np.ndarray
    confidences: np.ndarray
    patch_visible: np.ndarray
    poses: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.predictions)

    @property
    def og(self):
        return int(np.sum(self.predictions == self.y_og))

    @property
    def tg(self):
        return 0 if self.y_tg is None else int(np.sum(self.predictions == self.y_tg))

    @property
    def ot(self):
        return self.n - self.og - self.tg

    def pct(self, count):
        return 100.0 * count / self.n

    @property
    def og_pct(self):
        return self.pct(self.og)

    @property
    def tg_pct(self):
        return self.pct(self.tg)

    @property
    def ot_pct(self):
        return self.pct(self.ot)

    @property
    def visible_fraction(self):
        return float(np.mean(self.patch_visible))

    def row(self):
        return {"variant": self.variant, "target_class": self.target_class, "og_pct": f"{self.og_pct:.1f}",
                "tg_pct": f"{self.tg_pct:.1f}", "ot_pct": f"{self.ot_pct:.1f}", "n_poses": str(self.n)}

    def pose_log(self):
        for i, pose in enumerate(self.poses):
            yield {"variant": self.variant, "target_class": self.target_class, "pose": pose,
                   "predicted": self.class_names[int(self.predictions[i])],
                   "predicted_index": int(self.predictions[i]),
                   "confidence": float(self.confidences[i]), "patch_visible": bool(self.patch_visible[i])}


def classify(model: Model, images, chunk=64):
    preds, conf = [], []
    for s in range(0, len(images), chunk):
        p = softmax(model.logits(images[s:s + chunk]))
        preds.append(np.argmax(p, axis=1))
        conf.append(np.max(p, axis=1))
    return np.concatenate(preds), np.concatenate(conf)


def evaluate_patch(scene: Scene, patch, grid: EvalGrid, model: Model, y_og: int, y_tg: int | None,
                   variant="patch", threads=1) -> RateReport:
    """Classify ``render_full`` at every grid pose. ``patch=None`` evaluates the clean scene."""
    views = render_many(scene, grid.poses, threads=threads)
    if patch is None:
        images = np.stack([v.background for v in views])
        visible = np.zeros(len(views), bool)
    else:
        images = np.stack([compose(patch, v) for v in views])
        visible = np.array([v.mask.any() for v in views])
    preds, conf = classify(model, images)
    names = tuple(model.class_names)
    return RateReport(variant, "-" if y_tg is None else names[y_tg], names, y_og, y_tg, preds, conf, visible,
                      [p.to_dict() for p in grid.poses])


# --------------------------------------------------------------------------
# holdout mutations

def _host_center(scene: Scene, host_tag):
    return _host_objects(scene, host_tag)[0].transform[:3, 3].copy()


def _retint(scene: Scene, tag, albedo):
    objs = [replace(o, albedo=np.asarray(albedo, np.float64)) if o.class_tag == tag else o for o in scene.objects]
    if all(o.class_tag != tag for o in scene.objects):
        raise ConfigurationError(f"scene has no object tagged {tag!r}")
    return replace(scene, objects=tuple(objs))


def check_holdout_disjoint(dists, suite=HOLDOUT_SUITE):
    """Holdout mutations must lie outside the crafting distributions."""
    for d in dists:
        if "flipped" in suite and d.dim == "scene_rot_z" and (d.hi - d.lo >= 360 or
                                                           any(d.lo <= a <= d.hi for a in (-180.0, 180.0))):
            raise ConfigurationError("crafting rotations cover the flipped holdout (180 degrees)")


def mutate(scene: Scene, name: str, hcfg: dict, host_tag="mug", mat_tag="desk", host_spec=None) -> Scene:
    """Apply one named holdout mutation to the scene (never to the crafting setup)."""
    patch = scene.patch
    if name == "identity":
        return scene
    if name in ("patch_up", "patch_down"):
        shift = float(hcfg.get("patch_shift", 0.015)) * (1 if name == "patch_up" else -1)
        lo, hi = patch.z_lo + shift, patch.z_hi + shift
        top = patch.host_height
        if top is None:
            raise ConfigurationError("patch shifts need the host height")
        if hi > top + 1e-12 or lo < -1e-12:
            raise ConfigurationError(f"{name}: shifted patch [{lo:.3f}, {hi:.3f}] leaves the host (height {top})")
        return replace(scene, patch=replace(patch, z_lo=lo, z_hi=hi))
    if name == "mat_red":
        return _retint(scene, mat_tag, hcfg["red_albedo"])
    if name == "mat_wood":
        return _retint(scene, mat_tag, hcfg["wood_albedo"])
    if name == "object_color":
        return _retint(scene, host_tag, hcfg["object_albedo"])
    if name == "object_shape":
        shape = dict(hcfg["shape_mug"])
        spec = {k: v for k, v in (host_spec or {}).items() if k in ("translate", "rotate_deg")}
        spec.update(kind="mug", params=shape, albedo=hcfg.get("shape_albedo", [0.8, 0.8, 0.8]),
                    class_tag=host_tag, name=f"{host_tag}_shape")
        new = objects_from_spec(spec)
        r0 = float(shape.get("radius", 0.04))
        r1 = float(shape.get("top_radius") or r0)
        height = float(shape.get("height", 0.1))
        if patch.z_hi > height:
            raise ConfigurationError("object_shape: patch extends above the replacement object")
        widest = max(r0 + (r1 - r0) * z / height for z in (patch.z_lo, patch.z_hi))
        new_patch = replace(patch, radius=widest + (patch.radius - r0 if patch.radius > r0 else 0.001),
                            host_height=height)
        others = [o for o in scene.objects if o.class_tag != host_tag]
        return replace(scene, objects=tuple(others) + tuple(new), patch=new_patch)
    if name == "flipped":
        c = _host_center(scene, host_tag)
        m = affine(c) @ affine(rotate_deg=(0.0, 0.0, 180.0)) @ affine(-c)
        objs = [replace(o, transform=m @ o.transform) if o.class_tag == host_tag else o for o in scene.objects]
        return replace(scene, objects=tuple(objs), patch=replace(patch, frame=m @ patch.frame))
    raise ConfigurationError(f"unknown holdout mutation {name!r}")


def run_holdout(scene: Scene, patch, suite, grid: EvalGrid, model: Model, hcfg: dict, y_og: int, y_tg: int,
                host_tag="mug", mat_tag="desk", host_spec=None, threads=1) -> list[RateReport]:
    """One report per mutation, evaluated on the unchanged pose grid."""
    scenes = [(name, mutate(scene, name, hcfg, host_tag, mat_tag, host_spec)) for name in suite]
    return [evaluate_patch(s, patch, grid, model, y_og, y_tg, variant=name, threads=threads)
            for name, s in scenes]


# --------------------------------------------------------------------------
# reports

COLUMNS = ("variant", "target_class", "og_pct", "tg_pct", "ot_pct", "n_poses")


def format_report(reports, fmt="csv") -> str:
    reports = list(reports)
    if not reports:
        raise ConfigurationError("nothing to report")
    rows = [r.row() for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    if fmt in ("markdown", "md"):
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        lines += ["| " + " | ".join(r[c] for c in COLUMNS) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ConfigurationError(f"unknown report format {fmt!r}")


def write_report(reports, path, fmt="csv") -> Path:
    path = Path(path)
    text = format_report(reports, fmt)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def write_pose_log(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for r in reports:
            for entry in r.pose_log():
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
