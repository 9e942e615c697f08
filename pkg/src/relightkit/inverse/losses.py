"""Decomposition loss terms, each returning (value, analytic gradient).

All losses are masked and normalized by the masked element count so their
magnitudes stay comparable across resolutions. Gradients are with respect to
the map argument and share its shape.
"""

from __future__ import annotations

import numpy as np

from ..imgcore import ImageBuffer, Mask, NormalMap

__all__ = ["tv_loss", "parsimony_loss", "residual_l1", "reconstruction_loss"]


def _as_array(buf) -> np.ndarray:
    return buf.data if isinstance(buf, ImageBuffer) else np.asarray(buf, dtype=np.float64)


def tv_loss(map_, mask: Mask) -> tuple[float, np.ndarray]:
    """Squared forward-difference total variation over masked neighbor pairs.

    A pair contributes only when both pixels are masked-in; the sum is
    normalized by the pair count. Gradient has the map's shape.
    """
    raw = _as_array(map_)
    target_shape = raw.shape
    a = raw[:, :, None] if raw.ndim == 2 else raw
    h, w, _ = a.shape
    if h < 2 or w < 2:
        raise ValueError("tv_loss needs at least a 2x2 map")
    inside = mask.binary()
    px = inside[:, 1:] & inside[:, :-1]  # horizontal pairs
    py = inside[1:, :] & inside[:-1, :]  # vertical pairs
    n_pairs = int(px.sum() + py.sum())
    grad = np.zeros_like(a)
    if n_pairs == 0:
        return 0.0, grad.reshape(target_shape)
    dx = (a[:, 1:] - a[:, :-1]) * px[:, :, None]
    dy = (a[1:, :] - a[:-1, :]) * py[:, :, None]
    value = (np.sum(dx * dx) + np.sum(dy * dy)) / n_pairs
    grad[:, 1:] += 2.0 * dx
    grad[:, :-1] -= 2.0 * dx
    grad[1:, :] += 2.0 * dy
    grad[:-1, :] -= 2.0 * dy
    grad /= n_pairs
    return float(value), grad.reshape(target_shape)


# Large pixel counts drop the histogram internals to float32 (error ~1e-6,
# negligible against the 0.001 loss weight); small gradient-check scenes stay
# in float64.
_F32_PIXELS = 16384


def _soft_histogram_channel(
    values: np.ndarray, bins: int, sigma_bins: float
) -> tuple[float, np.ndarray]:
    """Entropy estimate of one channel's masked values; returns (loss, dloss/dvalues).

    Gaussian weights are truncated at 8 sigma (relative contribution < 1e-13),
    so each pixel only touches a window of nearby bins.
    """
    n = len(values)
    dt = np.float32 if n >= _F32_PIXELS else np.float64
    width = 1.0 / bins
    sigma = sigma_bins * width
    # 8 sigma keeps the float64 gradient checks clean; 6 sigma truncation
    # error (~1e-8) is already below float32 roundoff
    radius = int(np.ceil((6.0 if dt is np.float32 else 8.0) * sigma_bins))
    centers = ((np.arange(bins) + 0.5) * width).astype(dt)
    vals = values.astype(dt, copy=False)

    if 2 * radius + 1 >= bins:  # window covers everything: dense path
        idx = np.broadcast_to(np.arange(bins), (n, bins))
        diff = vals[:, None] - centers[None, :]
        u = np.exp(-(diff * diff) / dt(2.0 * sigma * sigma))
    else:
        nearest = np.clip(np.round(values / width - 0.5).astype(np.int64), 0, bins - 1)
        idx = nearest[:, None] + np.arange(-radius, radius + 1)[None, :]  # (P, K)
        valid = (idx >= 0) & (idx < bins)
        idx = np.clip(idx, 0, bins - 1)
        diff = vals[:, None] - centers[idx]
        u = np.exp(-(diff * diff) / dt(2.0 * sigma * sigma))
        u *= valid

    z = np.maximum(u.sum(axis=1, keepdims=True), dt(1e-300 if dt is np.float64 else 1e-30))
    w = u / z  # per-pixel soft assignment, rows sum to 1
    density = (np.bincount(idx.ravel(), weights=w.ravel().astype(np.float64),
                           minlength=bins) / n).astype(dt)  # (B,)
    d_at = density[idx]  # (P, K)
    q = (w * d_at).sum(axis=1) / dt(width)  # per-pixel interpolated density
    loss = float(-np.log(q.astype(np.float64)).mean())

    # dw/dvalue feeds both the per-pixel interpolation and the shared density.
    g = -diff / dt(sigma * sigma)  # d(log u)/dvalue
    wg = w * (g - (w * g).sum(axis=1, keepdims=True))  # dw/dvalue rows
    per_bin = np.bincount(
        idx.ravel(), weights=(w / q[:, None]).ravel().astype(np.float64), minlength=bins
    ).astype(dt)
    grad = -((wg * d_at).sum(axis=1) / q + (wg * per_bin[idx]).sum(axis=1) / n) / (n * width)
    return loss, grad.astype(np.float64)


def parsimony_loss(
    albedo, mask: Mask, bins: int = 64, sigma_bins: float = 1.0,
    max_samples: int = 16384, seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Entropy of the albedo palette via a soft Gaussian histogram on [0, 1].

    Bin centers sit mid-bin; sigma is given in bin widths. Channels are
    evaluated independently and averaged. When the masked pixel count exceeds
    ``max_samples`` a seeded uniform subsample estimates the density (the
    gradient is then nonzero only on the subsample).
    """
    if bins < 2:
        raise ValueError("parsimony needs at least 2 bins")
    if sigma_bins <= 0:
        raise ValueError("sigma must be positive")
    raw = _as_array(albedo)
    target_shape = raw.shape
    a = raw[:, :, None] if raw.ndim == 2 else raw
    inside = mask.binary()
    grad = np.zeros_like(a)
    idx = np.flatnonzero(inside.ravel())
    if idx.size == 0:
        return 0.0, grad.reshape(target_shape)
    if idx.size > max_samples:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(idx, size=max_samples, replace=False))
    channels = a.shape[2]
    flat = a.reshape(-1, channels)
    total = 0.0
    for c in range(channels):
        loss_c, grad_c = _soft_histogram_channel(flat[idx, c], bins, sigma_bins)
        total += loss_c / channels
        grad.reshape(-1, channels)[idx, c] = grad_c / channels
    return total, grad.reshape(target_shape)


def residual_l1(delta_n: NormalMap) -> tuple[float, np.ndarray]:
    """Mean absolute value of the masked residual components; subgradient 0 at 0."""
    inside = delta_n.mask.binary()
    grad = np.zeros_like(delta_n.vectors)
    count = int(inside.sum()) * 3
    if count == 0:
        return 0.0, grad
    v = delta_n.vectors[inside]
    value = np.abs(v).sum() / count
    grad[inside] = np.sign(v) / count
    return float(value), grad


def reconstruction_loss(render, target, mask: Mask) -> tuple[float, np.ndarray]:
    """Masked mean squared error; gradient 2 (render - target) * mask / count."""
    r = _as_array(render)
    t = _as_array(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    m = mask.values[:, :, None]
    count = float(mask.binary().sum()) * r.shape[2]
    if count == 0:
        return 0.0, np.zeros_like(r)
    diff = r - t
    value = float(np.sum(m * diff * diff) / count)
    grad = 2.0 * diff * m / count
    return value, grad
