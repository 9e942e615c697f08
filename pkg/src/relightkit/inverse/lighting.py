"""Least-squares lighting bootstrap from the Lambertian term.

Per color channel, solves I_p = A_p * (1/pi) (gains . Y(N_p)) . L over masked
pixels with a small ridge. Valid when shading is positive over the mask
(no clamping in the linear model), which holds for the bootstrap's use:
re-estimating a light that already roughly explains the image.
"""

from __future__ import annotations

import numpy as np

from ..imgcore import ImageBuffer, Mask, NormalMap
from ..sh import BAND_GAINS, N_COEFFS, ShLighting, sh_basis_array

__all__ = ["estimate_lighting_ls"]

_RIDGE = 1e-6


def estimate_lighting_ls(
    image: ImageBuffer, albedo: ImageBuffer, normals: NormalMap, mask: Mask
) -> ShLighting:
    """Recover SH lighting given image, albedo and normals by linear least squares."""
    inside = mask.binary() & normals.mask.binary()
    if not inside.any():
        raise ValueError("empty mask: no pixels to fit lighting from")
    phi = sh_basis_array(normals.vectors[inside]) * (BAND_GAINS[None, :] / np.pi)
    img = image.data[inside]
    alb = albedo.data[inside]
    if alb.shape[1] == 1:
        alb = np.repeat(alb, 3, axis=1)
    if img.shape[1] == 1:
        img = np.repeat(img, 3, axis=1)

    coeffs = np.zeros((3, N_COEFFS))
    for c in range(3):
        keep = alb[:, c] > 0.0
        if keep.sum() < N_COEFFS:
            raise ValueError(
                f"channel {c}: need at least {N_COEFFS} masked pixels with positive albedo"
            )
        m = phi[keep] * alb[keep, c : c + 1]
        if np.linalg.matrix_rank(m) < N_COEFFS:
            raise ValueError(
                f"channel {c}: rank-deficient lighting system "
                "(normals do not span the 9 basis functions; flat geometry?)"
            )
        lhs = m.T @ m + _RIDGE * np.eye(N_COEFFS)
        rhs = m.T @ img[keep, c]
        coeffs[c] = np.linalg.solve(lhs, rhs)
    return ShLighting(coeffs)
