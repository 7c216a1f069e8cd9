"""Command-line pipeline: gen-data, train, craft, eval, holdout, compare, report, all.

Every stage reads one JSON config (``--config``, shipped default otherwise),
writes into the output root and records itself in ``manifest.json``.
Exit codes: 0 ok, 1 internal error, 2 config error, 3 missing artifact,
4 corrupt input.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, craft, make_control_patch
from .config import config_hash, load_config
from .dataset import LabeledDataset, generate_dataset
from .errors import ConfigurationError, CorruptInputError, MissingArtifactError, PatchforgeError
from .evaluate import (
    HOLDOUT_SUITE, build_eval_grid, check_holdout_disjoint, evaluate_patch, read_report, run_holdout,
    write_pose_log, write_report,
)
from .imageio import read_pnm, write_ppm
from .model import build_model, load_model, save_model, train
from .scene import distributions_from_dict, scene_from_dict
from .stats import paired_t_test

log = logging.getLogger("patchforge")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_CORRUPT = 0, 1, 2, 3, 4
MODES = ("systematic", "random")


class Run:
    """Resolved config plus output layout for one invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config)
        if args.seed is not None:
            self.cfg["seed"] = int(args.seed)
        self.seed = int(self.cfg.get("seed", 0))
        out = args.out or os.environ.get("PATCHFORGE_OUT") or self.cfg.get("out", "runs/default")
        self.out = Path(out)
        self.threads = max(int(args.threads), 1)
        self.hash = config_hash(self.cfg)
        self._scene = None
        self._grid = None

    # layout
    @property
    def dataset_dir(self):
        return self.out / "dataset"

    @property
    def model_path(self):
        return self.out / "model.bin"

    @property
    def patch_dir(self):
        return self.out / "patches"

    @property
    def report_dir(self):
        return self.out / "reports"

    def patch_path(self, mode, target):
        return self.patch_dir / f"adv_{mode}_{target}.ppm"

    # shared objects
    @property
    def scene(self):
        if self._scene is None:
            try:
                self._scene = scene_from_dict(self.cfg["scene"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigurationError(f"config field scene: {exc}") from None
        return self._scene

    @property
    def dists(self):
        return distributions_from_dict(self.cfg["distributions"])

    @property
    def class_names(self):
        return [p["name"] for p in self.cfg["classes"]["prototypes"]]

    @property
    def host_tag(self):
        return self.cfg["eval"].get("host_tag", self.cfg["classes"]["original"])

    def class_index(self, name):
        if name not in self.class_names:
            raise ConfigurationError(f"unknown class {name!r}; known: {self.class_names}")
        return self.class_names.index(name)

    @property
    def grid(self):
        if self._grid is None:
            e = self.cfg["eval"]
            self._grid = build_eval_grid(self.scene, e["ranges"], e["counts"], self.host_tag)
        return self._grid

    def load_dataset(self):
        if not (self.dataset_dir / "manifest.json").exists():
            raise MissingArtifactError(f"dataset not found in {self.dataset_dir}; run gen-data first")
        try:
            return LabeledDataset.load(self.dataset_dir)
        except (OSError, ValueError, KeyError) as exc:
            raise CorruptInputError(f"{self.dataset_dir}: unreadable dataset ({exc})") from None

    def load_model(self):
        if not self.model_path.exists():
            raise MissingArtifactError(f"model checkpoint not found: {self.model_path}; run train first")
        return load_model(self.model_path)

    def targets(self):
        t = self.args.target if getattr(self.args, "target", None) else None
        targets = [t] if t else list(self.cfg["attack"]["targets"])
        for name in targets:
            if self.class_index(name) == self.class_index(self.cfg["classes"]["original"]):
                raise ConfigurationError("the target class must differ from the original class")
        return targets

    def modes(self):
        m = getattr(self.args, "mode", None)
        return [m] if m else list(MODES)

    def say(self, msg):
        print(msg, flush=True)

    # manifest
    def record(self, stage, seconds, artifacts, extra=None):
        path = self.out / "manifest.json"
        man = {}
        if path.exists():
            try:
                man = json.loads(path.read_text())
            except json.JSONDecodeError:
                man = {}
        man.update(tool="patchforge", tool_version=__version__, config_hash=self.hash, seed=self.seed,
                   threads=self.threads)
        arts = {k: str(v) for k, v in artifacts.items()}
        missing = [v for v in arts.values() if not Path(v).exists()]
        if missing:
            raise PatchforgeError(f"manifest would reference missing files: {missing}")
        entry = {"seconds": round(seconds, 3), "artifacts": arts}
        if extra:
            entry.update(extra)
        man.setdefault("stages", {})[stage] = entry
        man.setdefault("artifacts", {}).update(arts)
        path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages

def cmd_gen_data(run: Run):
    t0 = time.perf_counter()
    d = run.cfg.get("dataset", {})
    ds = generate_dataset(run.scene, run.cfg["classes"]["prototypes"], run.cfg["classes"]["original"],
                          int(d.get("n_per_class", 100)), run.dists, run.seed,
                          val_fraction=float(d.get("val_fraction", 0.2)))
    ds.save(run.dataset_dir)
    run.say(f"dataset: {len(ds.labels)} images, hash {ds.content_hash()}")
    run.record("gen-data", time.perf_counter() - t0, {"dataset": run.dataset_dir},
               {"dataset_hash": ds.content_hash(), "n_images": int(len(ds.labels))})


def cmd_train(run: Run):
    t0 = time.perf_counter()
    ds = run.load_dataset()
    c = run.cfg.get("classifier", {})
    h, w = ds.images.shape[1:3]
    model = build_model(ds.class_names, input_shape=(h, w, 3), channels=tuple(c.get("channels", (8, 16, 32))),
                        seed=run.seed)
    model, report = train(model, ds, epochs=int(c.get("epochs", 30)), lr=float(c.get("lr", 0.02)),
                          batch=int(c.get("batch", 32)), seed=run.seed, momentum=float(c.get("momentum", 0.9)),
                          weight_decay=float(c.get("weight_decay", 1e-4)), log=run.say)
    run.out.mkdir(parents=True, exist_ok=True)
    save_model(model, run.model_path)
    _dump(run.out / "train_report.json", report.to_dict())
    run.say(f"classifier: train acc {report.train_accuracy:.3f}, val acc {report.val_accuracy:.3f}")
    run.record("train", time.perf_counter() - t0,
               {"model": run.model_path, "train_report": run.out / "train_report.json"},
               {"val_accuracy": report.val_accuracy})


def attack_config(run: Run, target, mode) -> AttackConfig:
    a = dict(run.cfg["attack"])
    if getattr(run.args, "iterations", None) is not None:
        a["iterations"] = int(run.args.iterations)
    keys = ("kappa", "lambda_tv", "n_views", "systematic_counts", "batch_size", "iterations", "lr", "beta1",
            "beta2", "eps", "patch_shape", "init", "n_val_views", "eval_every", "fool_threshold")
    kw = {k: a[k] for k in keys if k in a}
    return AttackConfig(y_og=run.class_index(run.cfg["classes"]["original"]), y_tg=run.class_index(target),
                        mode=mode, seed=run.seed, **kw)


def _write_trace(path, trace):
    cols = ("iteration", "loss", "ce_target", "ce_original", "tv", "val_fool_rate")
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in trace:
            fh.write(",".join("" if row.get(c) is None else (str(row[c]) if c == "iteration" else f"{row[c]:.10g}")
                              for c in cols) + "\n")


def cmd_craft(run: Run):
    model = run.load_model()
    run.patch_dir.mkdir(parents=True, exist_ok=True)
    arts = {}
    t0 = time.perf_counter()
    for target in run.targets():
        for mode in run.modes():
            cfg = attack_config(run, target, mode)
            t1 = time.perf_counter()
            res = craft(run.scene, model, run.dists, cfg, threads=run.threads)
            path = run.patch_path(mode, target)
            write_ppm(path, res.patch)
            side = {
                "variant": f"adv_{mode}", "target_class": target, "target_index": cfg.y_tg,
                "original_class": run.cfg["classes"]["original"], "mode": mode, "seed": run.seed,
                "config_hash": run.hash, "iterations": cfg.iterations, "iterations_run": res.iterations_run,
                "best_iteration": res.best_iteration, "best_val_fool_rate": res.best_val_rate,
                "final_losses": res.final_losses(), "patch_shape": list(cfg.patch_shape),
                "n_views": res.n_views, "grid_dimensions": res.grid_dims, "warnings": res.warnings,
            }
            _dump(path.with_suffix(".json"), side)
            _write_trace(path.with_name(path.stem + "_trace.csv"), res.trace)
            arts[path.stem] = path
            run.say(f"craft {target}/{mode}: val fooling {res.best_val_rate:.3f} at iteration "
                    f"{res.best_iteration} ({time.perf_counter() - t1:.0f}s)")
    run.record("craft", time.perf_counter() - t0, arts)


def read_patch(path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"patch file not found: {p}")
    img = read_pnm(p)
    if img.ndim != 3:
        raise CorruptInputError(f"{p}: patch must be an RGB (P6) image")
    side = p.with_suffix(".json")
    meta = {}
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError:
            raise CorruptInputError(f"{side}: invalid sidecar JSON") from None
    return img, meta


def benign_patch(run: Run, target, ds=None):
    """Benign control: a clean training render of the target class stretched over the patch."""
    ds = ds or run.load_dataset()
    k = ds.class_names.index(target)
    idx = int(np.nonzero(ds.labels == k)[0][0])
    shape = tuple(run.cfg["attack"].get("patch_shape", (64, 128)))
    return make_control_patch("benign_image", shape, source=ds.images[idx])


def noise_patch(run: Run):
    shape = tuple(run.cfg["attack"].get("patch_shape", (64, 128)))
    return make_control_patch("noise", shape, seed=[run.seed, 101])


def cmd_eval(run: Run):
    a = run.args
    model = run.load_model()
    y_og = run.class_index(run.cfg["classes"]["original"])
    t0 = time.perf_counter()
    if a.patch:
        patch, meta = read_patch(a.patch)
        variant = meta.get("variant", Path(a.patch).stem)
        target = a.target or meta.get("target_class")
        if target is None:
            raise ConfigurationError("--target is required for a patch without sidecar")
        targets = [target]
    elif a.benign:
        patch, _ = read_patch(a.benign)
        shape = tuple(run.cfg["attack"].get("patch_shape", (64, 128)))
        patch = make_control_patch("benign_image", shape, source=patch)
        variant, targets = "benign", run.targets()
    elif a.noise:
        patch, variant, targets = noise_patch(run), "noise", run.targets()
    else:
        patch, variant, targets = None, "clean", run.targets()
    if a.holdout and patch is None:
        raise ConfigurationError("--holdout needs a patch")
    run.report_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    base = None
    for target in targets:
        y_tg = run.class_index(target)
        if base is None or patch is not None:
            base = evaluate_patch(run.scene, patch, run.grid, model, y_og, y_tg, variant, run.threads)
        else:  # the clean scene does not depend on the target; retally
            base = _retarget(base, y_tg, target)
        reports.append(base)
    stem = f"eval_{variant}" + (f"_{targets[0]}" if len(targets) == 1 else "")
    csv_path = write_report(reports, run.report_dir / f"{stem}.csv")
    log_path = write_pose_log(reports, run.report_dir / f"{stem}_poses.jsonl")
    arts = {stem: csv_path, stem + "_poses": log_path}
    for r in reports:
        run.say(f"{r.variant} vs {r.target_class}: Og {r.og_pct:.1f}% Tg {r.tg_pct:.1f}% Ot {r.ot_pct:.1f}% "
                f"({r.n} poses)")
    if a.holdout:
        hreps = _holdout(run, patch, model, y_og, run.class_index(targets[0]))
        hstem = f"holdout_{variant}_{targets[0]}"
        arts[hstem] = write_report([reports[0]] + hreps, run.report_dir / f"{hstem}.csv")
        arts[hstem + "_poses"] = write_pose_log(hreps, run.report_dir / f"{hstem}_poses.jsonl")
        for r in hreps:
            run.say(f"  {r.variant}: Og {r.og_pct:.1f}% Tg {r.tg_pct:.1f}% Ot {r.ot_pct:.1f}%")
    run.record(f"eval:{stem}", time.perf_counter() - t0, arts)


def _retarget(report, y_tg, target):
    from dataclasses import replace
    return replace(report, y_tg=y_tg, target_class=target)


def _holdout(run: Run, patch, model, y_og, y_tg):
    h = run.cfg.get("holdout", {})
    suite = h.get("suite", list(HOLDOUT_SUITE))
    check_holdout_disjoint(run.dists, suite)
    host_spec = next((o for o in run.cfg["scene"]["objects"] if o.get("class_tag") == run.host_tag), None)
    return run_holdout(run.scene, patch, suite, run.grid, model, h, y_og, y_tg, run.host_tag,
                       h.get("mat_tag", "desk"), host_spec, run.threads)


def _crafted(run: Run):
    out = []
    for target in run.targets():
        for mode in run.modes():
            p = run.patch_path(mode, target)
            if not p.exists():
                raise MissingArtifactError(f"patch not found: {p}; run craft first")
            out.append((target, mode, read_patch(p)[0]))
    return out


def cmd_holdout(run: Run):
    model = run.load_model()
    y_og = run.class_index(run.cfg["classes"]["original"])
    run.report_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    reports = []
    clean = None
    for target, mode, patch in _crafted(run):
        y_tg = run.class_index(target)
        if clean is None:
            clean = evaluate_patch(run.scene, None, run.grid, model, y_og, y_tg, "clean", run.threads)
        reps = _holdout(run, patch, model, y_og, y_tg)
        for r in reps:
            r.variant = f"adv_{mode}:{r.variant}"
        reports += [_retarget(clean, y_tg, target)] + reps
    arts = {"holdout": write_report(reports, run.report_dir / "holdout.csv"),
            "holdout_md": write_report(reports, run.report_dir / "holdout.md", "markdown"),
            "holdout_poses": write_pose_log(reports, run.report_dir / "holdout_poses.jsonl")}
    run.say(Path(arts["holdout_md"]).read_text())
    run.record("holdout", time.perf_counter() - t0, arts)


def cmd_report(run: Run):
    """Rate table over clean, noise, benign and adversarial patches for every target."""
    model = run.load_model()
    ds = run.load_dataset()
    y_og = run.class_index(run.cfg["classes"]["original"])
    run.report_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    crafted = _crafted(run)
    clean = noise = None
    reports = []
    for target in run.targets():
        y_tg = run.class_index(target)
        if clean is None:
            clean = evaluate_patch(run.scene, None, run.grid, model, y_og, y_tg, "clean", run.threads)
            noise = evaluate_patch(run.scene, noise_patch(run), run.grid, model, y_og, y_tg, "noise", run.threads)
        reports.append(_retarget(clean, y_tg, target))
        reports.append(_retarget(noise, y_tg, target))
        reports.append(evaluate_patch(run.scene, benign_patch(run, target, ds), run.grid, model, y_og, y_tg,
                                      "benign", run.threads))
        for t, mode, patch in crafted:
            if t == target:
                reports.append(evaluate_patch(run.scene, patch, run.grid, model, y_og, y_tg, f"adv_{mode}",
                                              run.threads))
    arts = {"table": write_report(reports, run.report_dir / "table.csv"),
            "table_md": write_report(reports, run.report_dir / "table.md", "markdown"),
            "table_poses": write_pose_log(reports, run.report_dir / "table_poses.jsonl")}
    run.say(Path(arts["table_md"]).read_text())
    run.record("report", time.perf_counter() - t0, arts, {"n_poses": len(run.grid),
                                                           "dropped_poses": len(run.grid.dropped)})


def compare_rows(rows, a_variant="adv_systematic", b_variant="adv_random"):
    tg = {}
    for r in rows:
        tg[(r["variant"], r["target_class"])] = float(r["tg_pct"])
    targets = sorted({t for (v, t) in tg if v == a_variant} & {t for (v, t) in tg if v == b_variant})
    if len(targets) < 2:
        raise MissingArtifactError(f"need {a_variant} and {b_variant} rows for at least two target classes")
    a = [tg[(a_variant, t)] for t in targets]
    b = [tg[(b_variant, t)] for t in targets]
    t_stat, p = paired_t_test(a, b)
    return {"targets": targets, a_variant: a, b_variant: b, "t": t_stat, "p": p, "df": len(targets) - 1}


def cmd_compare(run: Run):
    t0 = time.perf_counter()
    path = run.report_dir / "table.csv"
    if not path.exists():
        raise MissingArtifactError(f"rate table not found: {path}; run report first")
    try:
        rows = read_report(path)
    except (OSError, ValueError) as exc:
        raise CorruptInputError(f"{path}: {exc}") from None
    res = compare_rows(rows)
    out = run.report_dir / "compare.json"
    _dump(out, res)
    p_text = f"{res['p']:.4f}" if math.isfinite(res["p"]) else "nan"
    run.say(f"paired t-test systematic vs random Tg% over {res['targets']}: t = {res['t']:.4f}, "
            f"df = {res['df']}, p = {p_text}")
    run.record("compare", time.perf_counter() - t0, {"compare": out})


def cmd_all(run: Run):
    for stage in (cmd_gen_data, cmd_train, cmd_craft, cmd_report, cmd_holdout, cmd_compare):
        t0 = time.perf_counter()
        stage(run)
        run.say(f"[{stage.__name__[4:]}] {time.perf_counter() - t0:.1f}s")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "craft": cmd_craft, "eval": cmd_eval,
            "holdout": cmd_holdout, "compare": cmd_compare, "report": cmd_report, "all": cmd_all}


def parser():
    p = argparse.ArgumentParser(prog="patchforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: shipped desk config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="render threads (results do not depend on it)")
    common.add_argument("--out", help="output root (overrides PATCHFORGE_OUT and the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name in ("craft", "eval", "holdout", "report", "all"):
            s.add_argument("--target", help="target class (default: all configured targets)")
        if name in ("craft", "holdout", "all"):
            s.add_argument("--mode", choices=MODES, help="sampling mode (default: both)")
        if name in ("craft", "all"):
            s.add_argument("--iterations", type=int, help="override attack iterations")
        if name == "eval":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--patch", help="patch PPM to evaluate")
            g.add_argument("--clean", action="store_true", help="evaluate the scene without a patch")
            g.add_argument("--noise", action="store_true", help="evaluate a uniform-noise patch")
            g.add_argument("--benign", help="image (PPM) used as a benign patch")
            s.add_argument("--holdout", action="store_true", help="also run the holdout mutation suite")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        COMMANDS[args.command](run)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CorruptInputError as exc:
        print(f"corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
