"""Synthetic ground-truth scenes and quality metrics (PSNR, SSIM, PSNR_grad).

Scenes pair an analytic sphere (or an OBJ mesh) with a procedural albedo
pattern, an SH light, and Blinn-Phong specular parameters; rendering them
through the same composition used by the decomposition gives exact
ground-truth bundles for round-trip tests.

PSNR_grad is PSNR computed over the forward-difference gradient maps of both
images with the mask eroded by one pixel, which makes it blind to constant
offsets and sensitive to surface structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from .geometry import MeshScene, load_obj, rasterize_normals
from .imgcore import ImageBuffer, Mask, NormalMap, spatial_gradients
from .sh import ShLighting, front_light_init, sample_random_lighting
from .shading import compose_render, shading_map, specular_map

__all__ = [
    "SyntheticScene",
    "SceneBundle",
    "sphere_normal_map",
    "render_synthetic",
    "psnr",
    "ssim",
    "psnr_grad",
]

PSNR_CAP = 100.0


# ---------------------------------------------------------------------------
# Scene specification
# ---------------------------------------------------------------------------


def sphere_normal_map(resolution: int, radius_frac: float = 0.45) -> tuple[NormalMap, Mask]:
    """Analytic front-facing sphere: exact normals, coverage mask."""
    r = radius_frac * resolution
    cy = cx = (resolution - 1) / 2.0
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    dx = (xs - cx) / r
    dy = (cy - ys) / r  # image rows grow downward; world y is up
    rho2 = dx * dx + dy * dy
    inside = rho2 <= 1.0
    nz = np.sqrt(np.maximum(0.0, 1.0 - rho2))
    vectors = np.stack([dx, dy, nz], axis=-1)
    mask = Mask(inside.astype(np.float64))
    return NormalMap.from_raw(vectors, mask), mask


def _stripe_albedo(shape: tuple[int, int], values, stripe_count: int, axis: int) -> np.ndarray:
    h, w = shape
    lo, hi = (np.asarray(v, dtype=np.float64) for v in values)
    coord = np.arange(w if axis == 1 else h)
    band = (coord * stripe_count // max(1, (w if axis == 1 else h))) % 2
    pattern = np.where(band == 0, 0.0, 1.0)
    img = np.empty((h, w, 3))
    if axis == 1:
        img[:] = (lo[None, None, :] * (1 - pattern[None, :, None])
                  + hi[None, None, :] * pattern[None, :, None])
    else:
        img[:] = (lo[None, None, :] * (1 - pattern[:, None, None])
                  + hi[None, None, :] * pattern[:, None, None])
    return img


def _checker_albedo(shape: tuple[int, int], values, cells: int) -> np.ndarray:
    h, w = shape
    lo, hi = (np.asarray(v, dtype=np.float64) for v in values)
    ys, xs = np.mgrid[0:h, 0:w]
    grid = ((ys * cells // h) + (xs * cells // w)) % 2
    return np.where(grid[..., None] == 0, lo[None, None, :], hi[None, None, :])


@dataclass
class SyntheticScene:
    """Reproducible ground-truth scene description (JSON round-trippable)."""

    kind: str = "sphere"  # "sphere" | "mesh"
    resolution: int = 256
    radius_frac: float = 0.45
    mesh_path: str | None = None
    albedo_pattern: str = "constant"  # constant | stripes | checker
    albedo_values: tuple = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    pattern_cells: int = 4
    pattern_axis: int = 1
    light: dict = field(default_factory=lambda: {"front": True})
    phong_s: float = 32.0
    cspec: float = 0.0
    n_specular_samples: int = 128
    seed: int = 0

    def resolve_light(self) -> ShLighting:
        if "sh" in self.light:
            return ShLighting.from_json_dict(self.light)
        if self.light.get("front"):
            return front_light_init()
        if "seed" in self.light:
            return sample_random_lighting(int(self.light["seed"]))
        raise ValueError(f"cannot resolve light spec {self.light}")

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "resolution": self.resolution,
            "radius_frac": self.radius_frac,
            "mesh_path": self.mesh_path,
            "albedo_pattern": self.albedo_pattern,
            "albedo_values": [list(v) for v in self.albedo_values],
            "pattern_cells": self.pattern_cells,
            "pattern_axis": self.pattern_axis,
            "light": self.light,
            "phong_s": self.phong_s,
            "cspec": self.cspec,
            "n_specular_samples": self.n_specular_samples,
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(payload: dict) -> "SyntheticScene":
        payload = dict(payload)
        if "albedo_values" in payload:
            payload["albedo_values"] = tuple(tuple(v) for v in payload["albedo_values"])
        known = set(SyntheticScene.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return SyntheticScene(**payload)

    @staticmethod
    def load(path) -> "SyntheticScene":
        return SyntheticScene.from_json_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


@dataclass
class SceneBundle:
    image: ImageBuffer
    albedo: ImageBuffer
    normals: NormalMap
    mask: Mask
    light: ShLighting
    shading: ImageBuffer
    specular: ImageBuffer
    cspec: ImageBuffer


def render_synthetic(scene: SyntheticScene) -> SceneBundle:
    """Forward-render a scene spec into a complete ground-truth bundle."""
    if scene.kind == "sphere":
        normals, mask = sphere_normal_map(scene.resolution, scene.radius_frac)
    elif scene.kind == "mesh":
        if not scene.mesh_path:
            raise ValueError("mesh scene needs mesh_path")
        mesh = load_obj(scene.mesh_path)
        normals, mask = rasterize_normals(mesh, scene.resolution, scene.resolution)
    else:
        raise ValueError(f"unknown scene kind {scene.kind!r}")

    shape = (scene.resolution, scene.resolution)
    if scene.albedo_pattern == "constant":
        alb = np.empty(shape + (3,))
        alb[:] = np.asarray(scene.albedo_values[0], dtype=np.float64)
    elif scene.albedo_pattern == "stripes":
        alb = _stripe_albedo(shape, scene.albedo_values, scene.pattern_cells, scene.pattern_axis)
    elif scene.albedo_pattern == "checker":
        alb = _checker_albedo(shape, scene.albedo_values, scene.pattern_cells)
    else:
        raise ValueError(f"unknown albedo pattern {scene.albedo_pattern!r}")
    alb = alb * mask.values[:, :, None]

    light = scene.resolve_light()
    shading = shading_map(normals, light)
    specular = specular_map(normals, light, scene.phong_s, scene.n_specular_samples)
    cspec = ImageBuffer(np.full(shape + (1,), scene.cspec) * mask.values[:, :, None])
    albedo = ImageBuffer(alb)
    image = compose_render(albedo, shading, cspec, specular)
    return SceneBundle(
        image=image, albedo=albedo, normals=normals, mask=mask,
        light=light, shading=shading, specular=specular, cspec=cspec,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _masked_mse(a: np.ndarray, b: np.ndarray, mask: Mask | None) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        return float(np.mean((a - b) ** 2))
    inside = mask.binary()
    if not inside.any():
        raise ValueError("empty mask")
    diff = a[inside] - b[inside]
    return float(np.mean(diff * diff))


def psnr(a: ImageBuffer, b: ImageBuffer, mask: Mask | None = None, peak: float = 1.0) -> float:
    """10 log10(peak^2 / masked MSE), capped at 100 dB."""
    mse = _masked_mse(a.data, b.data, mask)
    if mse <= peak * peak * 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
_SSIM_PAD = 5


def ssim(a: ImageBuffer, b: ImageBuffer, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1/K2 = .01/.03.

    Filter moments, mean over windows fully inside the image, channels
    averaged.
    """
    if min(a.height, a.width) < 2 * _SSIM_PAD + 1:
        raise ValueError("ssim needs images of at least 11x11")
    if a.data.shape != b.data.shape:
        raise ValueError("ssim inputs must share dimensions")
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.channels):
        x = a.data[:, :, ch]
        y = b.data[:, :, ch]
        f = lambda img: gaussian_filter(img, sigma=_SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(np.mean(s[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD]))
    return float(np.mean(scores))


def psnr_grad(a: ImageBuffer, b: ImageBuffer, mask: Mask | None = None) -> float:
    """PSNR over concatenated forward-difference gradients, mask eroded by 1."""
    ax, ay = spatial_gradients(a)
    bx, by = spatial_gradients(b)
    ga = ImageBuffer(np.concatenate([ax.data, ay.data], axis=0))
    gb = ImageBuffer(np.concatenate([bx.data, by.data], axis=0))
    if mask is not None:
        eroded = binary_erosion(mask.binary()).astype(np.float64)
        mask = Mask(np.concatenate([eroded, eroded], axis=0))
    return psnr(ga, gb, mask, peak=1.0)
