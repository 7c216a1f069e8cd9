"""Craft a patch that turns the mug into a cone.

Needs the checkpoint from 02_classifier.py.  The attack samples 64 random
views of the scene, composites the current texture into each and follows
the exact texture gradient of

    mean CE(target) - kappa * mean CE(mug) + lambda * TV(P)

with Adam, projecting back into [0, 1] after every step.

    python demos/03_craft.py [outdir] [target]
"""
import sys
from pathlib import Path

from patchforge.attack import AttackConfig, craft
from patchforge.config import default_config
from patchforge.imageio import write_ppm
from patchforge.model import load_model
from patchforge.scene import distributions_from_dict, scene_from_dict

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
target = sys.argv[2] if len(sys.argv) > 2 else "cone"

cfg = default_config()
scene = scene_from_dict(cfg["scene"])
dists = distributions_from_dict(cfg["distributions"])
model = load_model(out / "model.bin")
names = model.class_names

a = cfg["attack"]
config = AttackConfig(names.index("mug"), names.index(target), mode="random", iterations=a["iterations"],
                      lr=a["lr"], n_views=a["n_views"], batch_size=a["batch_size"], seed=0)

res = craft(scene, model, dists, config, progress=print)
print(f"best validation fooling rate {res.best_val_rate:.3f} at iteration {res.best_iteration}")
write_ppm(out / f"patch_{target}.ppm", res.patch)
print(f"wrote {out / f'patch_{target}.ppm'}")
