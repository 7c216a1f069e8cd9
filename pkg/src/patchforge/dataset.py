"""Labelled shape-class datasets rendered from the scene replica."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError
from .raster import render_buffers
from .scene import Scene, objects_from_spec, replace_objects, sample_random


@dataclass(eq=False)
class LabeledDataset:
    images: np.ndarray  # (N, H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    is_val: np.ndarray  # (N,) bool
    class_names: list
    meta: dict = field(default_factory=dict)

    def split_arrays(self, split: str):
        sel = self.is_val if split == "val" else ~self.is_val
        return self.images[sel], self.labels[sel]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images.astype("<f8"), self.labels.astype("<i8"), self.is_val.astype("u1")):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(self.class_names).encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        counts = {name: int(np.sum(self.labels == k)) for k, name in enumerate(self.class_names)}
        return {
            "class_names": list(self.class_names),
            "counts": counts,
            "n_images": int(len(self.labels)),
            "n_val": int(self.is_val.sum()),
            "hash": self.content_hash(),
            **self.meta,
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "images.npy", self.images.astype("<f8"))
        np.save(d / "labels.npy", self.labels.astype("<i8"))
        np.save(d / "is_val.npy", self.is_val.astype(bool))
        with open(d / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        with open(d / "manifest.json") as fh:
            man = json.load(fh)
        meta = {k: v for k, v in man.items() if k in ("seed", "n_per_class", "resolution")}
        return cls(np.load(d / "images.npy"), np.load(d / "labels.npy"), np.load(d / "is_val.npy"),
                   man["class_names"], meta)


def class_scene(scene: Scene, original_tag: str, prototype: dict) -> Scene:
    """The scene with its central (original-class) object swapped for ``prototype``."""
    spec = dict(prototype)
    spec.setdefault("class_tag", original_tag)
    return replace_objects(scene, original_tag, objects_from_spec(spec))


def generate_dataset(scene: Scene, prototypes: list, original_tag: str, n_per_class: int, dists, seed: int,
                     val_fraction: float = 0.2, resolution=None) -> LabeledDataset:
    """Render ``n_per_class`` jittered, patch-free views of every class prototype.

    ``prototypes`` is a list of object descriptions (see
    :func:`patchforge.scene.objects_from_spec`) with a ``name`` each; class
    indices follow the list order.
    """
    k = len(prototypes)
    if k < 3:
        raise InvalidParameterError("need at least 3 classes")
    if n_per_class < 50:
        raise InvalidParameterError("need at least 50 images per class")
    names = [p["name"] for p in prototypes]
    samples = sample_random(dists, k * n_per_class, seed)
    images, labels = [], []
    for c, proto in enumerate(prototypes):
        sc = class_scene(scene, original_tag, proto)
        for s in samples[c * n_per_class:(c + 1) * n_per_class]:
            images.append(render_buffers(sc, s, resolution).background)
            labels.append(c)
    rng = np.random.default_rng([seed, 1])
    is_val = np.zeros(k * n_per_class, bool)
    n_val = int(round(val_fraction * n_per_class))
    for c in range(k):
        pick = rng.permutation(n_per_class)[:n_val]
        is_val[c * n_per_class + pick] = True
    res = list(resolution) if resolution is not None else list(scene.camera.resolution)
    return LabeledDataset(np.stack(images), np.asarray(labels, np.int64), is_val, names,
                          {"seed": int(seed), "n_per_class": int(n_per_class), "resolution": res})
