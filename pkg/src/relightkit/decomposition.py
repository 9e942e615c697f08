"""Decomposition result bundle and its on-disk layout.

A decomposition directory holds:

  albedo.pfm, normal.pfm, cspec.pfm, sshad.pfm, sspec.pfm, light.json,
  meta.json                              (the core set)
  mask.png, normal_preview.png, recon.pfm, recon.png   (companions)

normal.pfm stores raw unit vectors; normal_preview.png uses (n+1)/2.
meta.json records the Phong exponent, stage schedule, seeds, final losses
and reconstruction metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgcore import (
    ImageBuffer,
    Mask,
    NormalMap,
    load_image,
    load_mask,
    save_image,
    save_mask,
    save_normal_preview,
)
from .sh import ShLighting

__all__ = ["DecompositionSet", "CORE_FILES"]

CORE_FILES = (
    "albedo.pfm",
    "normal.pfm",
    "cspec.pfm",
    "sshad.pfm",
    "sspec.pfm",
    "light.json",
    "meta.json",
)


@dataclass
class DecompositionSet:
    """Full output of one decomposition run.

    Invariants: masked albedo in [0, 1], cspec in [0, 2], refined normals
    are the renormalized sum of the initial normals and the residual.
    """

    normals: NormalMap
    initial_normals: NormalMap
    delta_normals: NormalMap  # residual field, unit=False
    albedo: ImageBuffer
    shading: ImageBuffer
    specular: ImageBuffer
    cspec: ImageBuffer  # single channel
    light: ShLighting
    phong_s: float
    mask: Mask
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        inside = self.mask.binary()
        a = self.albedo.data[inside]
        if a.size and (a.min() < -1e-9 or a.max() > 1.0 + 1e-9):
            raise ValueError("albedo samples must lie in [0, 1]")
        c = self.cspec.data[inside]
        if c.size and (c.min() < -1e-9 or c.max() > 2.0 + 1e-9):
            raise ValueError("cspec samples must lie in [0, 2]")
        if not (self.phong_s > 0 and np.isfinite(self.phong_s)):
            raise ValueError("Phong exponent must be positive and finite")
        combined = self.initial_normals.vectors + self.delta_normals.vectors
        norms = np.linalg.norm(combined, axis=-1, keepdims=True)
        renorm = combined / np.maximum(norms, 1e-12)
        err = np.abs(renorm[inside] - self.normals.vectors[inside])
        if err.size and err.max() > 1e-6:
            raise ValueError("normals != normalize(initial + delta)")

    def reconstruction(self) -> ImageBuffer:
        """Re-render from the stored maps (same formula as compose_render)."""
        c = self.cspec.data
        return ImageBuffer(
            self.albedo.data * (self.shading.data + c * self.specular.data)
        )

    def save_dir(self, path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        save_image(self.albedo, out / "albedo.pfm")
        save_image(ImageBuffer(self.normals.vectors), out / "normal.pfm")
        save_image(self.cspec, out / "cspec.pfm")
        save_image(self.shading, out / "sshad.pfm")
        save_image(self.specular, out / "sspec.pfm")
        self.light.save(out / "light.json")
        save_mask(self.mask, out / "mask.png")
        save_normal_preview(self.normals, out / "normal_preview.png")
        recon = self.reconstruction()
        save_image(recon, out / "recon.pfm")
        save_image(recon, out / "recon.png", transfer="srgb")
        meta = dict(self.meta)
        meta["phong_s"] = float(self.phong_s)
        (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @staticmethod
    def load_dir(path) -> "DecompositionSet":
        src = Path(path)
        missing = [f for f in CORE_FILES if not (src / f).exists()]
        if missing:
            raise FileNotFoundError(f"decomposition at {src} is missing {missing}")
        mask = load_mask(src / "mask.png")
        normals = NormalMap.from_raw(load_image(src / "normal.pfm").data, mask)
        meta = json.loads((src / "meta.json").read_text())
        zero = NormalMap(
            np.zeros_like(normals.vectors), mask, unit=False
        )
        return DecompositionSet(
            normals=normals,
            initial_normals=normals,
            delta_normals=zero,
            albedo=load_image(src / "albedo.pfm"),
            shading=load_image(src / "sshad.pfm"),
            specular=load_image(src / "sspec.pfm"),
            cspec=load_image(src / "cspec.pfm"),
            light=ShLighting.load(src / "light.json"),
            phong_s=float(meta.get("phong_s", 32.0)),
            mask=mask,
            meta=meta,
        )
