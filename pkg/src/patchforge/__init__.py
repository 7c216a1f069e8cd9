"""patchforge: render-aware adversarial patches for small 3D desk scenes.

A deferred rasterizer splits every view into patch-independent buffers
(background, uv, lighting, mask), so a patch texture can be composited and
differentiated cheaply across many sampled views.
"""
from .attack import AdamState, AttackConfig, CraftResult, ViewSet, adam_step, attack_loss, build_view_set, craft, \
    make_control_patch, total_variation
from .compose import backprop_compose, compose, sample_bilinear
from .errors import *  # noqa: F401,F403
from .evaluate import EvalGrid, RateReport, build_eval_grid, evaluate_patch, run_holdout, write_report
from .model import Model, build_model, load_model, save_model, train
from .raster import ViewBuffers, project, render_buffers, render_full, render_many
from .scene import Scene, TransformDistribution, TransformSample, apply_transform, enumerate_grid, \
    sample_random, sample_systematic
from .stats import paired_t_test

__version__ = "0.1.0"
