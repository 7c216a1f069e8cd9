"""Differentiable merge of a patch texture with rendered view buffers.

    out = mask * clamp01(bilinear(P, uv) * light) + (1 - mask) * background

The texture is addressed with texel centres at ((j + 0.5) / W_p, (i + 0.5) / H_p)
and clamped at the borders. Everything here accepts either a single view
(arrays shaped (H, W, ...)) or a stacked batch (shaped (N, H, W, ...)).
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolationError


def _texture(P):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 3 or P.shape[2] != 3:
        raise ContractViolationError(f"patch texture must be H_p x W_p x 3, got {P.shape}")
    return P


def bilinear_taps(uv, tex_h, tex_w):
    """Flat texel indices (..., 4) and weights (..., 4) for bilinear lookups."""
    uv = np.asarray(uv, dtype=np.float64)
    x = uv[..., 0] * tex_w - 0.5
    y = uv[..., 1] * tex_h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, tex_w - 1), np.clip(x0 + 1, 0, tex_w - 1)
    ya, yb = np.clip(y0, 0, tex_h - 1), np.clip(y0 + 1, 0, tex_h - 1)
    idx = np.stack([ya * tex_w + xa, ya * tex_w + xb, yb * tex_w + xa, yb * tex_w + xb], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, wts


def _check_uv(uv):
    if uv.size and (not np.all(np.isfinite(uv)) or uv.min() < 0.0 or uv.max() > 1.0):
        raise ContractViolationError("uv coordinates must lie in [0, 1]^2")


def sample_bilinear(P, uv):
    """Bilinearly interpolated RGB of texture ``P`` at chart point(s) ``uv``."""
    P = _texture(P)
    uv = np.asarray(uv, dtype=np.float64)
    _check_uv(uv)
    idx, wts = bilinear_taps(uv, P.shape[0], P.shape[1])
    flat = P.reshape(-1, 3)
    return np.einsum("...k,...kc->...c", wts, flat[idx])


def _unpack(buffers):
    bg = np.asarray(buffers.background, dtype=np.float64)
    uv = np.asarray(buffers.uv, dtype=np.float64)
    light = np.asarray(buffers.light, dtype=np.float64)
    mask = np.asarray(buffers.mask).astype(bool)
    if (bg.shape[-1] != 3 or uv.shape[-1] != 2 or light.shape != bg.shape
            or uv.shape[:-1] != mask.shape or bg.shape[:-1] != mask.shape):
        raise ContractViolationError(
            f"buffer shapes disagree: background {bg.shape}, uv {uv.shape}, light {light.shape}, mask {mask.shape}")
    return bg, uv, light, mask


def _masked_terms(P, uv, light, mask):
    uvm = uv[mask]
    _check_uv(uvm)
    idx, wts = bilinear_taps(uvm, P.shape[0], P.shape[1])
    color = np.einsum("nk,nkc->nc", wts, P.reshape(-1, 3)[idx])
    return idx, wts, color * light[mask]


def compose(P, buffers, check: bool = True) -> np.ndarray:
    """Composite texture ``P`` into the view(s) described by ``buffers``."""
    P = _texture(P)
    bg, uv, light, mask = _unpack(buffers)
    out = bg.copy()
    if mask.any():
        _, _, value = _masked_terms(P, uv, light, mask)
        out[mask] = np.clip(value, 0.0, 1.0)
    return out


def backprop_compose(d_out, P, buffers) -> np.ndarray:
    """Gradient of a scalar loss with respect to ``P`` given ``d_out = dL/d compose(P, buffers)``.

    For a batch of views the per-view gradients are summed. Pixels outside
    the mask and channels where the clamp saturated contribute nothing.
    Accumulation runs in row-major pixel order, so the result is
    reproducible bit for bit.
    """
    P = _texture(P)
    bg, uv, light, mask = _unpack(buffers)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != bg.shape:
        raise ContractViolationError(f"upstream gradient shape {d_out.shape} != image shape {bg.shape}")
    hp, wp = P.shape[:2]
    if not mask.any():
        return np.zeros_like(P)
    idx, wts, value = _masked_terms(P, uv, light, mask)
    live = (value >= 0.0) & (value <= 1.0)
    g = np.where(live, d_out[mask] * light[mask], 0.0)  # (n, 3)
    contrib = wts[:, :, None] * g[:, None, :]  # (n, 4, 3)
    slots = idx[:, :, None] * 3 + np.arange(3)
    grad = np.bincount(slots.reshape(-1), weights=contrib.reshape(-1), minlength=hp * wp * 3)
    return grad.reshape(hp, wp, 3)
