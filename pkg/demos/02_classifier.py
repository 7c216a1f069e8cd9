"""Train the small shape classifier that the patches are meant to fool.

Five shape prototypes (mug, pyramid, cone, sphere, can) are dropped in
turn into the desk scene and rendered under random scene, camera and light
jitter.  A three-block CNN learns to tell them apart.

    python demos/02_classifier.py [outdir]
"""
import sys
from pathlib import Path

import numpy as np

from patchforge.config import default_config
from patchforge.dataset import generate_dataset
from patchforge.imageio import write_ppm
from patchforge.model import build_model, save_model, train
from patchforge.scene import distributions_from_dict, scene_from_dict

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

cfg = default_config()
scene = scene_from_dict(cfg["scene"])
dists = distributions_from_dict(cfg["distributions"])
protos = cfg["classes"]["prototypes"]

ds = generate_dataset(scene, protos, cfg["classes"]["original"], 100, dists, seed=0)
print(f"{len(ds.labels)} renders, {int(ds.is_val.sum())} held out for validation")

# one example image per class, side by side
strip = np.concatenate([ds.images[np.nonzero(ds.labels == k)[0][0]] for k in range(len(protos))], axis=1)
write_ppm(out / "classes.ppm", strip)

c = cfg["classifier"]
model = build_model(ds.class_names, channels=tuple(c["channels"]), seed=0)
model, report = train(model, ds, epochs=c["epochs"], lr=c["lr"], batch=c["batch"], seed=0,
                      weight_decay=c["weight_decay"], log=print)
print(f"train acc {report.train_accuracy:.3f}  val acc {report.val_accuracy:.3f}")
save_model(model, out / "model.bin")
print(f"saved {out / 'model.bin'}")
