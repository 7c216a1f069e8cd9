"""EOT patch crafting: view sets, attack loss, projected Adam.

The loss on a batch of composited views X~ is

    L = mean CE(X~, y_tg) - kappa * mean CE(X~, y_og) + lambda * TV(P)

and its gradient with respect to the texture ``P`` flows through the model
(:meth:`Model.backward_input`) and the compositing step
(:func:`backprop_compose`). Every random stream is derived from the config
seed, so a craft run is bit-reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .compose import backprop_compose, compose, sample_bilinear
from .errors import ConfigurationError, NumericalFailureError, RangeMisconfigurationError
from .imageio import read_pnm
from .model import PROB_FLOOR, Model, onehot, softmax
from .raster import ViewBuffers, render_many
from .scene import Scene, TransformDistribution, enumerate_grid, sample_random

log = logging.getLogger(__name__)

TV_EPS = 1e-8


@dataclass
class AttackConfig:
    y_og: int
    y_tg: int
    kappa: float = 1.0
    lambda_tv: float = 1e-3
    mode: str = "random"  # "random" | "systematic"
    n_views: int = 64
    systematic_counts: dict | None = None  # dimension id -> l
    batch_size: int = 16
    iterations: int = 300
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch_shape: tuple = (64, 128)  # (H_p, W_p)
    init: str = "gray"  # "gray" | "noise"
    n_val_views: int = 48
    eval_every: int = 25
    fool_threshold: float = 1.0
    max_resample_rounds: int = 50

    def __post_init__(self):
        if self.y_og == self.y_tg:
            raise ConfigurationError("target class must differ from the original class")
        if self.mode not in ("random", "systematic"):
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch size >= 1")
        if self.kappa < 0 or self.lambda_tv < 0:
            raise ConfigurationError("kappa and lambda must be nonnegative")
        if self.mode == "systematic" and not self.systematic_counts:
            raise ConfigurationError("systematic mode needs per-dimension counts")
        self.patch_shape = tuple(int(v) for v in self.patch_shape)


@dataclass(frozen=True, eq=False)
class ViewSet:
    """Rendered views X = {(b_i, p_i)}, stacked for batched compositing."""
    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ConfigurationError("a view set needs at least one view")
        if any(not v.mask.any() for v in views):
            raise ConfigurationError("every view must show the patch")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "background", np.stack([v.background for v in views]))
        object.__setattr__(self, "uv", np.stack([v.uv for v in views]))
        object.__setattr__(self, "light", np.stack([v.light for v in views]))
        object.__setattr__(self, "mask", np.stack([v.mask for v in views]))

    def __len__(self):
        return len(self.views)

    def batch(self, idx) -> "ViewSet":
        idx = np.asarray(idx)
        return ViewSet(tuple(self.views[i] for i in idx))

    @property
    def samples(self):
        return [v.meta for v in self.views]


def _visible(views):
    return [v for v in views if v.mask.any()]


def random_views(scene: Scene, dists, n: int, seed, threads=1, max_rounds=50) -> ViewSet:
    """``n`` i.i.d. views; views hiding the patch are redrawn from a fresh stream."""
    kept, rounds = [], 0
    while len(kept) < n:
        if rounds >= max_rounds:
            raise RangeMisconfigurationError(
                f"could not find {n} views showing the patch after {rounds} sampling rounds")
        need = n - len(kept)
        samples = sample_random(dists, need, [*np.atleast_1d(seed).tolist(), rounds])
        views = render_many(scene, samples, threads=threads)
        good = _visible(views)
        if len(good) < len(views):
            log.info("random views: rejected %d of %d views without visible patch", len(views) - len(good), len(views))
        kept.extend(good)
        rounds += 1
    return ViewSet(tuple(kept))


def systematic_dists(dists, counts):
    by_dim = {d.dim: d for d in dists}
    missing = [k for k in counts if k not in by_dim]
    if missing:
        raise ConfigurationError(f"systematic counts name unknown dimension(s): {missing}")
    chosen = [d for d in dists if d.dim in counts]
    return chosen, [int(counts[d.dim]) for d in chosen]


def systematic_views(scene: Scene, dists, counts, threads=1) -> ViewSet:
    chosen, per_dim = systematic_dists(dists, counts)
    samples = enumerate_grid(chosen, per_dim)
    views = render_many(scene, samples, threads=threads)
    good = _visible(views)
    dropped = len(views) - len(good)
    if dropped:
        log.warning("systematic grid: dropped %d of %d views without visible patch", dropped, len(views))
    if dropped * 2 > len(views):
        raise RangeMisconfigurationError(
            f"{dropped} of {len(views)} systematic views hide the patch; check the transformation ranges")
    return ViewSet(tuple(good))


def build_view_set(scene: Scene, dists, config: AttackConfig, threads=1, seed=None) -> ViewSet:
    seed = config.seed if seed is None else seed
    if config.mode == "random":
        return random_views(scene, dists, config.n_views, [seed, 11], threads, config.max_resample_rounds)
    return systematic_views(scene, dists, config.systematic_counts, threads)


def total_variation(P, eps=TV_EPS):
    """Smoothed isotropic total variation and its gradient.

    TV = sum over texels and channels of sqrt(dx^2 + dy^2 + eps) with forward
    differences that are zero past the last row / column. Accepts
    (H, W) or (H, W, C) arrays.
    """
    P = np.asarray(P, dtype=np.float64)
    dx = np.zeros_like(P)
    dy = np.zeros_like(P)
    dx[:, :-1] = P[:, 1:] - P[:, :-1]
    dy[:-1] = P[1:] - P[:-1]
    s = np.sqrt(dx * dx + dy * dy + eps)
    gx, gy = dx / s, dy / s
    grad = -(gx + gy)
    grad[:, 1:] += gx[:, :-1]
    grad[1:] += gy[:-1]
    return float(s.sum()), grad


def attack_loss(P, views, model: Model, config: AttackConfig):
    """Loss and gradient with respect to ``P`` on a batch of views.

    Returns ``(loss, grad, parts)`` where ``parts`` holds the separate
    ``ce_target``, ``ce_original`` and ``tv`` values and the batch predictions.
    """
    images = compose(P, views)
    n = images.shape[0]
    logits = model.logits(images)
    probs = softmax(logits)
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    # target term: exact log-softmax, so views the model is sure about still get a gradient.
    # original term: capped at -log(PROB_FLOOR) so fooled views stop pushing
    ce_tg_each = -logp[:, config.y_tg]
    ce_og_each = np.minimum(-logp[:, config.y_og], -np.log(PROB_FLOOR))
    ce_tg = float(np.mean(ce_tg_each))
    ce_og = float(np.mean(ce_og_each))
    tv, tv_grad = total_variation(P)
    loss = ce_tg - config.kappa * ce_og + config.lambda_tv * tv
    if not np.isfinite(loss):
        raise NumericalFailureError(f"attack loss is not finite ({loss})")
    k = model.n_classes
    # d(-log p_y)/dlogits = p - onehot(y); zero where the cap is active
    live_og = (-logp[:, config.y_og] < -np.log(PROB_FLOOR))[:, None]
    dlogits = ((probs - onehot(np.full(n, config.y_tg), k))
               - config.kappa * live_og * (probs - onehot(np.full(n, config.y_og), k))) / n
    d_images = model.backward_input(images, dlogits=dlogits)
    grad = backprop_compose(d_images, P, views) + config.lambda_tv * tv_grad
    if not np.all(np.isfinite(grad)):
        raise NumericalFailureError("attack gradient is not finite")
    parts = {"ce_target": ce_tg, "ce_original": ce_og, "tv": tv, "pred": np.argmax(logits, axis=1)}
    return loss, grad, parts


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(P, grad, state: AdamState, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step followed by projection onto [0, 1]."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    P_new = np.clip(P - lr * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)
    return P_new, AdamState(m, v, t)


def make_control_patch(kind: str, shape=(64, 128), seed=0, source=None) -> np.ndarray:
    """Non-adversarial comparison patches.

    ``noise``: i.i.d. uniform texels. ``benign_image``: ``source`` (an image
    array or a PPM path) resampled bilinearly to ``shape``, stretching it if
    the aspect ratio differs. ``gray``: uniform 0.5.
    """
    h, w = shape
    if kind == "noise":
        return np.random.default_rng(seed).random((h, w, 3))
    if kind == "gray":
        return np.full((h, w, 3), 0.5)
    if kind == "benign_image":
        if source is None:
            raise ConfigurationError("benign_image patches need a source image")
        img = read_pnm(source) if not isinstance(source, np.ndarray) else np.asarray(source, np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        u = (np.arange(w) + 0.5) / w
        v = (np.arange(h) + 0.5) / h
        uv = np.stack(np.meshgrid(u, v), axis=-1)
        return np.clip(sample_bilinear(img, uv), 0.0, 1.0)
    raise ConfigurationError(f"unknown control patch kind {kind!r}")


def init_patch(config: AttackConfig) -> np.ndarray:
    if config.init == "noise":
        return make_control_patch("noise", config.patch_shape, seed=[config.seed, 3])
    return make_control_patch("gray", config.patch_shape)


def fooling_rate(P, views: ViewSet, model: Model, y_tg: int) -> float:
    return float(np.mean(model.predict(compose(P, views)) == y_tg))


@dataclass
class CraftResult:
    patch: np.ndarray
    trace: list
    best_iteration: int
    best_val_rate: float
    iterations_run: int
    warnings: list = field(default_factory=list)
    grid_dims: dict | None = None
    n_views: int = 0

    def final_losses(self):
        last = next((r for r in reversed(self.trace) if "loss" in r), None)  # last batch loss
        return {k: last[k] for k in ("loss", "ce_target", "ce_original", "tv")} if last else {}


def craft(scene: Scene, model: Model, dists, config: AttackConfig, threads=1, progress=None) -> CraftResult:
    """Optimise a patch texture against ``model`` over EOT-sampled views.

    Random mode draws a fresh view set every epoch; systematic mode reuses
    the fixed grid and shuffles the batch order each epoch. Every
    ``eval_every`` iterations the patch is scored on held-out random views;
    the best scoring patch is returned, and crafting stops early once the
    fooling rate reaches ``fool_threshold``.
    """
    P = init_patch(config)
    rng = np.random.default_rng([config.seed, 5])
    val = random_views(scene, dists, config.n_val_views, [config.seed, 7], threads, config.max_resample_rounds)
    best_rate = fooling_rate(P, val, model, config.y_tg)
    best_patch, best_iter = P.copy(), 0
    # row t holds the batch loss at the patch after t steps (and its val rate when scored)
    trace = []
    pending = {"iteration": 0, "val_fool_rate": best_rate}
    result_warnings = []
    grid_dims = None
    fixed = None
    if config.mode == "systematic":
        fixed = systematic_views(scene, dists, config.systematic_counts, threads)
        chosen, per_dim = systematic_dists(dists, config.systematic_counts)
        grid_dims = {d.dim: c for d, c in zip(chosen, per_dim)}

    state = AdamState.zeros(P.shape)
    it, epoch = 0, 0
    done = config.iterations == 0 or best_rate >= config.fool_threshold
    while not done:
        if fixed is None:
            views = random_views(scene, dists, config.n_views, [config.seed, 11, epoch], threads,
                                 config.max_resample_rounds)
            order = np.arange(len(views))
        else:
            views = fixed
            order = rng.permutation(len(views))
        for s in range(0, len(order), config.batch_size):
            batch = views.batch(order[s:s + config.batch_size])
            try:
                loss, grad, parts = attack_loss(P, batch, model, config)
            except NumericalFailureError as exc:
                raise NumericalFailureError(f"iteration {it}: {exc}") from None
            row = pending or {"iteration": it}
            row.update(loss=loss, ce_target=parts["ce_target"], ce_original=parts["ce_original"], tv=parts["tv"])
            trace.append(row)
            pending = None
            P, state = adam_step(P, grad, state, config.lr, config.beta1, config.beta2, config.eps)
            it += 1
            if it % config.eval_every == 0 or it == config.iterations:
                rate = fooling_rate(P, val, model, config.y_tg)
                pending = {"iteration": it, "val_fool_rate": rate}
                if rate > best_rate:
                    best_rate, best_patch, best_iter = rate, P.copy(), it
                if progress:
                    progress(f"iter {it}: loss {loss:.4f} val fooling {rate:.3f}")
                if rate >= config.fool_threshold:
                    done = True
            if it >= config.iterations:
                done = True
            if done:
                break
        epoch += 1
    if pending:
        trace.append(pending)

    if config.iterations > 0 and best_iter == 0:
        msg = "crafting never improved the validation fooling rate; returning the initial patch"
        log.warning(msg)
        result_warnings.append(msg)
    return CraftResult(best_patch, trace, best_iter, best_rate, it, result_warnings, grid_dims,
                       len(fixed) if fixed is not None else config.n_views)
