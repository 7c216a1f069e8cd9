import numpy as np
import pytest
from hypothesis import given, strategies as st

import patchforge.attack as attack_mod
from patchforge.attack import (
    AdamState, AttackConfig, adam_step, attack_loss, build_view_set, craft, make_control_patch, random_views,
    total_variation,
)
from patchforge.compose import compose
from patchforge.errors import ConfigurationError, NumericalFailureError, RangeMisconfigurationError
from patchforge.imageio import write_ppm
from patchforge.model import Dense, Flatten, Model, build_model, cross_entropy, softmax
from patchforge.scene import TransformDistribution, distributions_from_dict, scene_from_dict

from conftest import small_cfg

NAMES = ["mug", "box", "cone", "sphere", "can"]


@pytest.fixture(scope="module")
def scene16():
    return scene_from_dict(small_cfg((16, 16))["scene"])


@pytest.fixture(scope="module")
def scene32():
    return scene_from_dict(small_cfg((32, 32))["scene"])


def dense_model(rng, shape):
    d = int(np.prod(shape))
    return Model([Flatten(), Dense(rng.normal(0, 0.05, (d, 5)), rng.normal(size=5))], NAMES, shape)


# -- total variation -----------------------------------------------------------

def test_tv_constant_patch():
    val, grad = total_variation(np.full((4, 6, 3), 0.3))
    assert val == pytest.approx(4 * 6 * 3 * 1e-4, rel=1e-12)
    assert not np.any(grad)


def test_tv_single_difference():
    val, _ = total_variation(np.array([[0.0, 1.0]]))
    assert val == pytest.approx(np.sqrt(1 + 1e-8) + np.sqrt(1e-8), rel=1e-15)
    assert abs(val - 1.0) < 2e-4


def test_tv_gradient_matches_central_differences(rng):
    P = rng.random((6, 6, 3))
    _, g = total_variation(P)
    h = 1e-6
    fd = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += h
        Pm[idx] -= h
        fd[idx] = (total_variation(Pp)[0] - total_variation(Pm)[0]) / (2 * h)
    # floor at unit scale: entries with tiny slopes only carry rounding noise
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)) <= 1e-6


def test_tv_direct_sum(rng):
    P = rng.random((3, 4))
    ref = 0.0
    for i in range(3):
        for j in range(4):
            dx = P[i, j + 1] - P[i, j] if j < 3 else 0.0
            dy = P[i + 1, j] - P[i, j] if i < 2 else 0.0
            ref += np.sqrt(dx * dx + dy * dy + 1e-8)
    assert total_variation(P)[0] == pytest.approx(ref, rel=1e-13)


# -- adam --------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop(rng):
    P = rng.random((4, 4, 3))
    P2, st_ = adam_step(P, np.zeros_like(P), AdamState.zeros(P.shape))
    assert np.array_equal(P2, P) and st_.t == 1


def test_adam_first_step_moves_lr_against_sign(rng):
    P = np.full((4, 4, 3), 0.5)
    g = rng.choice([-2.0, 3.0], size=P.shape)
    P2, _ = adam_step(P, g, AdamState.zeros(P.shape), lr=0.01)
    assert np.allclose(P2 - P, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_projection_keeps_upper_bound():
    P = np.ones((2, 2, 3))
    P2, _ = adam_step(P, -np.ones_like(P), AdamState.zeros(P.shape), lr=0.5)
    assert P2.max() <= 1.0


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 1.0))
def test_adam_keeps_box(seed, lr):
    r = np.random.default_rng(seed)
    P = r.random((3, 3, 3))
    state = AdamState.zeros(P.shape)
    for _ in range(5):
        P, state = adam_step(P, r.normal(size=P.shape) * 10, state, lr=lr)
        assert P.min() >= 0.0 and P.max() <= 1.0
        assert np.all(state.v >= 0) and np.all(np.isfinite(state.m))


# -- loss ---------------------------------------------------------------------------

def test_end_to_end_gradient_matches_central_differences(scene16, dists, rng):
    """8x8 patch, 16x16 render, dense-softmax model, 2 views, 50 texels, step 1e-5."""
    views = random_views(scene16, dists, 2, [3, 1])
    model = dense_model(rng, (16, 16, 3))
    cfg = AttackConfig(0, 2, kappa=1.0, lambda_tv=1e-3)
    P = rng.uniform(0.1, 0.7, (8, 8, 3))
    _, g, _ = attack_loss(P, views, model, cfg)
    h = 1e-5
    worst = 0.0
    for f in rng.choice(P.size, 50, replace=False):
        idx = np.unravel_index(f, P.shape)
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += h
        Pm[idx] -= h
        fd = (attack_loss(Pp, views, model, cfg)[0] - attack_loss(Pm, views, model, cfg)[0]) / (2 * h)
        worst = max(worst, abs(g[idx] - fd) / max(abs(fd), 1e-6))
    assert worst <= 1e-4


def test_loss_term_isolation(scene16, dists, rng):
    views = random_views(scene16, dists, 3, [3, 2])
    model = dense_model(rng, (16, 16, 3))
    P = rng.random((8, 8, 3))
    loss, _, parts = attack_loss(P, views, model, AttackConfig(0, 2, kappa=0.0, lambda_tv=0.0))
    probs = softmax(model.logits(compose(P, views)))
    ref = np.mean([cross_entropy(p, 2) for p in probs])
    assert loss == pytest.approx(ref, rel=1e-13)
    full, _, parts = attack_loss(P, views, model, AttackConfig(0, 2, kappa=0.5, lambda_tv=0.1))
    assert full == pytest.approx(parts["ce_target"] - 0.5 * parts["ce_original"] + 0.1 * parts["tv"], rel=1e-13)


def saturated_model(rng, shape, y_hi, gap):
    """Dense model whose logits favour ``y_hi`` by roughly ``gap`` on any input."""
    m = dense_model(rng, shape)
    m.layers[-1].params["b"] = np.zeros(5)
    m.layers[-1].params["b"][y_hi] = gap
    return m


def test_target_gradient_survives_confident_model(scene16, dists, rng):
    # p_target far below 1e-12: the target term must still pull
    views = random_views(scene16, dists, 2, [3, 1])
    model = saturated_model(rng, (16, 16, 3), 0, 60.0)
    P = rng.uniform(0.1, 0.7, (8, 8, 3))
    loss, g, parts = attack_loss(P, views, model, AttackConfig(0, 2, kappa=0.0, lambda_tv=0.0))
    assert parts["ce_target"] > 50 and np.abs(g).max() > 0
    idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
    Pp, Pm = P.copy(), P.copy()
    Pp[idx] += 1e-5
    Pm[idx] -= 1e-5
    cfg = AttackConfig(0, 2, kappa=0.0, lambda_tv=0.0)
    fd = (attack_loss(Pp, views, model, cfg)[0] - attack_loss(Pm, views, model, cfg)[0]) / 2e-5
    assert g[idx] == pytest.approx(fd, rel=1e-4)


def test_original_term_capped_when_fooled(scene16, dists, rng):
    views = random_views(scene16, dists, 2, [3, 1])
    model = saturated_model(rng, (16, 16, 3), 2, 60.0)
    P = rng.uniform(0.1, 0.7, (8, 8, 3))
    _, g0, p0 = attack_loss(P, views, model, AttackConfig(0, 2, kappa=0.0, lambda_tv=0.0))
    _, g1, p1 = attack_loss(P, views, model, AttackConfig(0, 2, kappa=1.0, lambda_tv=0.0))
    assert p1["ce_original"] == pytest.approx(-np.log(1e-12))
    assert np.array_equal(g0, g1)


def test_tv_term_smooths_noise(scene16, dists, rng):
    views = random_views(scene16, dists, 2, [3, 3])
    model = dense_model(rng, (16, 16, 3))
    cfg = AttackConfig(0, 2, kappa=0.0, lambda_tv=10.0)
    P = make_control_patch("noise", (8, 8), seed=5)
    tv0 = total_variation(P)[0]
    state = AdamState.zeros(P.shape)
    for _ in range(100):
        _, g, _ = attack_loss(P, views, model, cfg)
        P, state = adam_step(P, g, state)
    assert total_variation(P)[0] < tv0


def test_nan_loss_raises(scene16, dists, rng):
    views = random_views(scene16, dists, 1, [3, 4])
    P = np.full((8, 8, 3), np.nan)
    with pytest.raises(NumericalFailureError):
        attack_loss(P, views, dense_model(rng, (16, 16, 3)), AttackConfig(0, 1))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AttackConfig(1, 1)
    with pytest.raises(ConfigurationError):
        AttackConfig(0, 1, mode="grid")
    with pytest.raises(ConfigurationError):
        AttackConfig(0, 1, mode="systematic")
    with pytest.raises(ConfigurationError):
        AttackConfig(0, 1, kappa=-1)


# -- view sets ----------------------------------------------------------------------

def test_systematic_view_set_bound_and_determinism(scene32, dists):
    cfg = AttackConfig(0, 1, mode="systematic",
                       systematic_counts={"camera_azimuth": 2, "camera_elevation": 2, "camera_distance": 2})
    a = build_view_set(scene32, dists, cfg)
    b = build_view_set(scene32, dists, cfg)
    assert 1 <= len(a) <= 8
    assert np.array_equal(a.background, b.background) and np.array_equal(a.uv, b.uv)
    assert all(v.mask.any() for v in a.views)


def test_random_view_set_64_views_reproducible(scene32, dists):
    cfg = AttackConfig(0, 1, n_views=64, seed=9)
    a = build_view_set(scene32, dists, cfg)
    b = build_view_set(scene32, dists, cfg)
    assert len(a) == 64
    assert np.array_equal(a.background, b.background) and np.array_equal(a.light, b.light)
    assert [s.to_dict() for s in a.samples] == [s.to_dict() for s in b.samples]


def test_random_views_resample_hidden_patch(scene32):
    # wide orbit: many views see the back of the mug (the far side is walled in)
    dists = [TransformDistribution("camera_azimuth", -160.0, 160.0)]
    views = random_views(scene32, dists, 12, [1])
    assert len(views) == 12 and all(v.mask.any() for v in views.views)


def test_camera_behind_wall_is_range_error():
    cfg = small_cfg((32, 32))
    cfg["scene"]["objects"].append({"name": "screen", "kind": "cube", "params": {"size": [1.0, 0.02, 0.6]},
                                    "translate": [0.0, -0.2, 0.2], "albedo": [0.5, 0.5, 0.5],
                                    "class_tag": "screen"})
    scene = scene_from_dict(cfg["scene"])
    dists = distributions_from_dict({"camera_distance": [0.0, 0.2]})
    ac = AttackConfig(0, 1, mode="systematic", systematic_counts={"camera_distance": 4})
    with pytest.raises(RangeMisconfigurationError):
        build_view_set(scene, dists, ac)


# -- crafting --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    return build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2), seed=0)


def tiny_cfg(**kw):
    base = dict(y_og=0, y_tg=2, iterations=6, n_views=4, batch_size=2, n_val_views=4, eval_every=2,
                patch_shape=(8, 16), seed=3, lr=0.05)
    base.update(kw)
    return AttackConfig(**base)


def test_zero_iterations_returns_gray(scene16, dists, tiny_model):
    res = craft(scene16, tiny_model, dists, tiny_cfg(iterations=0))
    assert np.array_equal(res.patch, np.full((8, 16, 3), 0.5))
    assert res.iterations_run == 0


def test_craft_is_bit_reproducible(scene16, dists, tiny_model):
    for mode in ("random", "systematic"):
        kw = {"mode": mode, "systematic_counts": {"camera_azimuth": 2, "scene_rot_z": 2}}
        a = craft(scene16, tiny_model, dists, tiny_cfg(**kw))
        b = craft(scene16, tiny_model, dists, tiny_cfg(**kw))
        assert np.array_equal(a.patch, b.patch)
        assert a.trace == b.trace


def test_craft_returns_best_by_validation(scene16, dists, tiny_model):
    res = craft(scene16, tiny_model, dists, tiny_cfg(fool_threshold=1.1))
    scored = [r for r in res.trace if "val_fool_rate" in r]
    assert res.best_val_rate == max(r["val_fool_rate"] for r in scored)
    assert all(0.0 <= r["val_fool_rate"] <= 1.0 for r in scored)
    assert res.patch.min() >= 0 and res.patch.max() <= 1
    assert [r["iteration"] for r in res.trace] == list(range(res.iterations_run + 1))


def test_non_improving_run_warns(scene16, dists, tiny_model, caplog):
    res = craft(scene16, tiny_model, dists, tiny_cfg(lr=1e-9, iterations=2, eval_every=1, fool_threshold=1.1))
    if res.best_iteration == 0:
        assert res.warnings
        assert np.array_equal(res.patch, np.full((8, 16, 3), 0.5))


def test_systematic_epoch_touches_each_view_once(scene16, dists, tiny_model, monkeypatch):
    seen = []
    real = attack_mod.attack_loss

    def spy(P, views, model, config):
        seen.extend(tuple(sorted(s.to_dict().items())) for s in views.samples)
        return real(P, views, model, config)

    monkeypatch.setattr(attack_mod, "attack_loss", spy)
    counts = {"camera_azimuth": 3, "scene_rot_z": 2}
    cfg = tiny_cfg(mode="systematic", systematic_counts=counts, batch_size=4, iterations=4, fool_threshold=1.1,
                   eval_every=100)
    craft(scene16, tiny_model, dists, cfg)
    grid = attack_mod.systematic_views(scene16, dists, counts)
    keys = sorted(tuple(sorted(s.to_dict().items())) for s in grid.samples)
    epoch_views = len(keys)
    # 4 iterations of batch 4 over a 6-view grid: first epoch is 2 batches (4 + 2)
    assert sorted(seen[:epoch_views]) == keys


# -- control patches ------------------------------------------------------------------

def test_noise_patch_deterministic():
    a = make_control_patch("noise", (8, 12), seed=4)
    b = make_control_patch("noise", (8, 12), seed=4)
    assert np.array_equal(a, b) and a.shape == (8, 12, 3) and a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, make_control_patch("noise", (8, 12), seed=5))


def test_benign_from_gray_source_is_gray(tmp_path):
    path = tmp_path / "gray.ppm"
    write_ppm(path, np.full((10, 30, 3), 128 / 255))
    p = make_control_patch("benign_image", (8, 12), source=path)
    assert p.shape == (8, 12, 3)
    assert np.allclose(p, 128 / 255, atol=1e-15)


def test_benign_aspect_mismatch_is_stretched():
    src = np.zeros((4, 4, 3))
    src[:, 2:] = 1.0  # right half white
    p = make_control_patch("benign_image", (6, 20), source=src)
    assert p.shape == (6, 20, 3)
    assert np.allclose(p[:, :8], 0.0, atol=1e-12) and np.allclose(p[:, 12:], 1.0, atol=1e-12)


def test_unknown_control_kind():
    with pytest.raises(ConfigurationError):
        make_control_patch("checkerboard")
