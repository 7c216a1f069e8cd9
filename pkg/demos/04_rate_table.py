"""Score clean, noise and adversarial patches over a camera pose grid.

Each row counts how often the classifier still says mug (Og), says the
target class (Tg), or says something else (Ot).  Uses the outputs of the
two previous demos.

    python demos/04_rate_table.py [outdir] [target]
"""
import sys
from pathlib import Path

from patchforge.attack import make_control_patch
from patchforge.config import default_config
from patchforge.evaluate import build_eval_grid, evaluate_patch, format_report
from patchforge.imageio import read_pnm
from patchforge.model import load_model
from patchforge.scene import scene_from_dict

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
target = sys.argv[2] if len(sys.argv) > 2 else "cone"

cfg = default_config()
scene = scene_from_dict(cfg["scene"])
model = load_model(out / "model.bin")
y_og, y_tg = model.class_names.index("mug"), model.class_names.index(target)

e = cfg["eval"]
grid = build_eval_grid(scene, e["ranges"], e["counts"])
print(f"{len(grid)} poses over {grid.dims}")

patches = {
    "clean": None,
    "noise": make_control_patch("noise", (64, 128), seed=[0, 101]),
    "gray": make_control_patch("gray", (64, 128)),
    "adversarial": read_pnm(out / f"patch_{target}.ppm"),
}
reports = [evaluate_patch(scene, P, grid, model, y_og, y_tg, name) for name, P in patches.items()]
print(format_report(reports, "markdown"))
