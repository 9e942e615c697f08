"""Illumination-insensitive embedding and the identity-consistency loss.

The embedder is the classical self-quotient image: luminance divided by its
own heavy Gaussian blur, pooled to 16x16, zero-meaned and unit-normalized.
Dividing out the blur cancels smooth illumination while keeping reflectance
edges, which is exactly the signal identity consistency needs. The class is
an interface seam: any embedder exposing forward/vjp can replace it.

Every stage of the pipeline is linear or smoothly differentiable, so the
vector-Jacobian product is exact (zero-padded Gaussian convolution is
self-adjoint for a symmetric kernel).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..imgcore import ImageBuffer, Mask
from ..sh import ShLighting, sample_random_lighting

__all__ = ["SelfQuotientEmbedder", "self_quotient_embedding", "identity_consistency_loss"]

_LUMA = np.array([0.2126, 0.7152, 0.0722])
_EMBED_SIDE = 16
_EPS = 1e-4
_MIN_SIDE = 8


class SelfQuotientEmbedder:
    """Self-quotient embedding with exact forward/backward evaluation."""

    length = _EMBED_SIDE * _EMBED_SIDE

    def forward(self, img: np.ndarray, mask: Mask | None = None):
        """(H, W, C) image -> (embedding (256,), cache for vjp)."""
        h, w = img.shape[:2]
        if min(h, w) < _MIN_SIDE:
            raise ValueError(f"embedding needs at least {_MIN_SIDE}x{_MIN_SIDE} input")
        mask_values = None if mask is None else mask.values
        lum = img @ _LUMA if img.shape[2] == 3 else img[:, :, 0]
        if mask_values is not None:
            lum = lum * mask_values
        # Integer upsample so the blur and pooling scales stay meaningful on
        # tiny inputs (gradient-check scenes are 8x8).
        rep = max(1, int(np.ceil(32.0 / min(h, w))))
        big = np.repeat(np.repeat(lum, rep, axis=0), rep, axis=1)
        sigma = 0.08 * min(big.shape)
        blur = gaussian_filter(big, sigma=sigma, mode="constant", cval=0.0)
        # relative guard keeps the quotient exactly scale invariant
        eps = _EPS * float(big.mean()) + 1e-12
        denom = blur + eps
        quot = big / denom
        # Gaussian-antialiased downsample: smooth adjoint, so gradients fed
        # back through the embedding carry no pooling-grid artifacts.
        cell = (big.shape[0] / _EMBED_SIDE, big.shape[1] / _EMBED_SIDE)
        sigma_d = (0.5 * cell[0], 0.5 * cell[1])
        smooth = gaussian_filter(quot, sigma=sigma_d, mode="constant", cval=0.0)
        rows = np.clip((np.arange(_EMBED_SIDE) + 0.5) * cell[0] - 0.5, 0,
                       big.shape[0] - 1).round().astype(int)
        cols = np.clip((np.arange(_EMBED_SIDE) + 0.5) * cell[1] - 0.5, 0,
                       big.shape[1] - 1).round().astype(int)
        pooled = smooth[np.ix_(rows, cols)]
        flat = pooled.reshape(-1)
        centered = flat - flat.mean()
        norm = np.linalg.norm(centered)
        if norm < 1e-12:
            raise ValueError("degenerate (all-dark) image: embedding undefined")
        emb = centered / norm
        cache = (img.shape, mask_values, rep, sigma, sigma_d, denom, quot,
                 rows, cols, norm, emb)
        return emb, cache

    def vjp(self, cache, d_emb: np.ndarray) -> np.ndarray:
        """Backpropagate d(loss)/d(embedding) to d(loss)/d(image)."""
        (shape, mask_values, rep, sigma, sigma_d, denom, quot,
         rows, cols, norm, emb) = cache
        # unit-normalization: (I - e e^T) / |v|
        g = (d_emb - emb * float(emb @ d_emb)) / norm
        # zero-mean: I - 11^T/n is symmetric
        g = g - g.mean()
        g_pool = g.reshape(_EMBED_SIDE, _EMBED_SIDE)
        # sampling adjoint: scatter, then the (self-adjoint) Gaussian
        g_smooth = np.zeros_like(quot)
        g_smooth[np.ix_(rows, cols)] = g_pool
        g_quot = gaussian_filter(g_smooth, sigma=sigma_d, mode="constant", cval=0.0)
        # quotient q = big / (blur(big) + eps(mean))
        g_big = g_quot / denom
        g_denom = -(g_quot * quot) / denom
        g_big = g_big + gaussian_filter(g_denom, sigma=sigma, mode="constant", cval=0.0)
        g_big += float(g_denom.sum()) * _EPS / g_denom.size  # mean-coupled guard
        # nearest-upsample adjoint: block sum
        h, w = shape[:2]
        g_lum = g_big.reshape(h, rep, w, rep).sum(axis=(1, 3))
        if mask_values is not None:
            g_lum = g_lum * mask_values
        if len(shape) == 3 and shape[2] == 3:
            return g_lum[:, :, None] * _LUMA[None, None, :]
        return g_lum[:, :, None]


def self_quotient_embedding(img, mask: Mask | None = None) -> np.ndarray:
    """Length-256, zero-mean, unit-norm illumination-insensitive descriptor."""
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    emb, _ = SelfQuotientEmbedder().forward(data, mask)
    return emb


class QuotientChromaEmbedder:
    """Chromaticity-dominant identity embedding (the ICS default).

    The luminance self-quotient alone measures pattern correlation, which a
    decomposition can satisfy by baking image structure into the normals
    (shading is rectified, so a baked pattern rarely flips sign under new
    lights). Chromaticity closes that hole: lights are white, so geometry
    cannot fake a chromatic pattern - only albedo can. Both branches are
    unit-normalized before concatenation so neither scale dominates, with
    the chroma branch weighted up.
    """

    length = 3 * _EMBED_SIDE * _EMBED_SIDE
    lum_weight = 0.3
    chroma_weight = 1.0

    def __init__(self):
        self._lum = SelfQuotientEmbedder()

    def forward(self, img: np.ndarray, mask: Mask | None = None):
        if img.shape[2] != 3:
            raise ValueError("chroma embedding needs an RGB image")
        h, w = img.shape[:2]
        if min(h, w) < _MIN_SIDE:
            raise ValueError(f"embedding needs at least {_MIN_SIDE}x{_MIN_SIDE} input")
        lum_emb, lum_cache = self._lum.forward(img, mask)
        total = img.sum(axis=2)
        eps = _EPS * float(total.mean()) + 1e-12
        denom = total + eps
        quotient = img[:, :, :2] / denom[:, :, None]  # r, g planes (b is redundant)
        mask_values = None if mask is None else mask.values
        chroma = quotient if mask_values is None else quotient * mask_values[:, :, None]
        rep = max(1, int(np.ceil(32.0 / min(h, w))))
        big = np.repeat(np.repeat(chroma, rep, axis=0), rep, axis=1)
        cell = (big.shape[0] / _EMBED_SIDE, big.shape[1] / _EMBED_SIDE)
        sigma_d = (0.5 * cell[0], 0.5 * cell[1], 0.0)
        smooth = gaussian_filter(big, sigma=sigma_d, mode="constant", cval=0.0)
        rows = np.clip((np.arange(_EMBED_SIDE) + 0.5) * cell[0] - 0.5, 0,
                       big.shape[0] - 1).round().astype(int)
        cols = np.clip((np.arange(_EMBED_SIDE) + 0.5) * cell[1] - 0.5, 0,
                       big.shape[1] - 1).round().astype(int)
        pooled = smooth[np.ix_(rows, cols)]  # (16, 16, 2)
        flat_c = pooled.transpose(2, 0, 1).reshape(-1)
        centered_c = flat_c - flat_c.mean()
        norm_c = np.linalg.norm(centered_c)
        if norm_c < 1e-12:
            raise ValueError("degenerate image: chroma embedding undefined")
        chroma_emb = centered_c / norm_c
        scale = np.sqrt(self.lum_weight**2 + self.chroma_weight**2)
        emb = np.concatenate(
            [self.lum_weight * lum_emb, self.chroma_weight * chroma_emb]
        ) / scale
        cache = (img.shape, mask_values, lum_cache, denom, quotient, rep,
                 sigma_d, rows, cols, chroma_emb, norm_c, scale)
        return emb, cache

    def vjp(self, cache, d_emb: np.ndarray) -> np.ndarray:
        (shape, mask_values, lum_cache, denom, quotient, rep,
         sigma_d, rows, cols, chroma_emb, norm_c, scale) = cache
        n_lum = _EMBED_SIDE * _EMBED_SIDE
        d_lum = d_emb[:n_lum] * (self.lum_weight / scale)
        d_img = self._lum.vjp(lum_cache, d_lum)
        g = d_emb[n_lum:] * (self.chroma_weight / scale)
        # chroma branch unit-normalization and zero-mean
        g = (g - chroma_emb * float(chroma_emb @ g)) / norm_c
        g = g - g.mean()
        g_pool = g.reshape(2, _EMBED_SIDE, _EMBED_SIDE).transpose(1, 2, 0)
        h, w = shape[:2]
        g_smooth = np.zeros((h * rep, w * rep, 2))
        g_smooth[np.ix_(rows, cols)] = g_pool
        g_big = gaussian_filter(g_smooth, sigma=sigma_d, mode="constant", cval=0.0)
        g_quot = g_big.reshape(h, rep, w, rep, 2).sum(axis=(1, 3))
        if mask_values is not None:
            g_quot = g_quot * mask_values[:, :, None]
        # quotient_c = I_c / (sum_k I_k + eps(mean)) for c in {r, g}
        dot = (g_quot * quotient).sum(axis=2)
        d_img2 = np.zeros_like(d_img)
        d_img2[:, :, :2] = g_quot / denom[:, :, None]
        d_img2 -= (dot / denom)[:, :, None]
        d_img2 += float((-dot / denom).sum()) * _EPS / denom.size  # mean-coupled guard
        return d_img + d_img2


def identity_consistency_loss(
    albedo: np.ndarray,
    normals: np.ndarray,
    cspec: np.ndarray,
    phong_s: float,
    mask: Mask,
    target_embedding: np.ndarray,
    seed: int,
    embedder: SelfQuotientEmbedder | None = None,
    light: ShLighting | None = None,
    n_samples: int = 128,
):
    """Squared embedding distance between a relit render and the target frame.

    Samples a random light (deterministic in ``seed``; ``light`` overrides),
    renders A * (S_shad + C_spec * S_spec) from the given maps and returns
    (loss, dA, dN, dCspec, light). Gradients flow through the render and the
    embedder chain.
    """
    from .optimize import _render_masked  # local import avoids a cycle

    embedder = embedder or SelfQuotientEmbedder()
    relight_light = light if light is not None else sample_random_lighting(seed)
    render, back = _render_masked(albedo, normals, cspec, phong_s, mask, relight_light,
                                  n_samples=n_samples)
    emb, cache = embedder.forward(render, mask)
    diff = emb - target_embedding
    loss = float(diff @ diff)
    d_render = embedder.vjp(cache, 2.0 * diff)
    d_albedo, d_normals, d_cspec = back(d_render)
    return loss, d_albedo, d_normals, d_cspec, relight_light
