"""Order-2 real spherical harmonics lighting.

Convention: real basis without the Condon-Shortley phase (the usual graphics
irradiance convention), coefficient ordering
(0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
Coordinates: x right, y up, z toward the camera (the "front").

Environment maps are equirectangular: u in [0,1) -> azimuth phi = 2*pi*u,
v in [0,1] -> polar theta = pi*v measured from +y, with phi = 0 facing +z.

Diffuse shading uses the clamped-cosine convolution with per-band gains
(pi, 2pi/3, pi/4) divided by pi, so a constant unit-radiance environment
produces shading exactly 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgcore import ImageBuffer

__all__ = [
    "N_COEFFS",
    "BAND_GAINS",
    "ShLighting",
    "EnvironmentMap",
    "eval_sh_basis",
    "sh_basis_array",
    "sh_basis_gradients",
    "project_env_to_sh",
    "sh_irradiance",
    "irradiance_of",
    "eval_sh_radiance",
    "radiance_of",
    "front_light_init",
    "sample_random_lighting",
    "cosine_lobe_light",
    "fibonacci_directions",
    "normalize_direction",
]

N_COEFFS = 9

# Basis normalization constants.
_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
_C2 = 1.0925484305920792  # sqrt(15 / (4 pi))
_C20 = 0.31539156525252005  # (1/4) sqrt(5 / pi)
_C22 = 0.5462742152960396  # (1/4) sqrt(15 / pi)

# Clamped-cosine convolution gains per coefficient (band 0, 1, 2).
BAND_GAINS = np.array(
    [np.pi] + [2.0 * np.pi / 3.0] * 3 + [np.pi / 4.0] * 5, dtype=np.float64
)

# Zonal coefficients of max(0, cos)^p about +z, as functions of p:
# f0 = sqrt(pi)/(p+1), f1 = sqrt(3 pi)/(p+2), f2 = pi sqrt(5/pi) p/((p+1)(p+3))


def normalize_direction(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise ValueError("zero-length direction")
    return d / n


def _check_unit(d: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3,):
        raise ValueError(f"direction must be a 3-vector, got shape {d.shape}")
    n = np.linalg.norm(d)
    if abs(n - 1.0) > tol:
        raise ValueError(f"direction must be unit length (|d| = {n:.8f})")
    return d


def sh_basis_array(dirs: np.ndarray) -> np.ndarray:
    """Vectorized basis evaluation: (..., 3) -> (..., 9). No norm check."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (N_COEFFS,), dtype=np.float64)
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2 * x * y
    out[..., 5] = _C2 * y * z
    out[..., 6] = _C20 * (3.0 * z * z - 1.0)
    out[..., 7] = _C2 * x * z
    out[..., 8] = _C22 * (x * x - y * y)
    return out


def sh_basis_gradients(dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction) of the R^3 polynomial extension: (...,3)->(...,9,3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.empty(dirs.shape[:-1] + (N_COEFFS, 3), dtype=np.float64)
    g[..., 0, :] = 0.0
    g[..., 1, 0], g[..., 1, 1], g[..., 1, 2] = zero, zero + _C1, zero
    g[..., 2, 0], g[..., 2, 1], g[..., 2, 2] = zero, zero, zero + _C1
    g[..., 3, 0], g[..., 3, 1], g[..., 3, 2] = zero + _C1, zero, zero
    g[..., 4, 0], g[..., 4, 1], g[..., 4, 2] = _C2 * y, _C2 * x, zero
    g[..., 5, 0], g[..., 5, 1], g[..., 5, 2] = zero, _C2 * z, _C2 * y
    g[..., 6, 0], g[..., 6, 1], g[..., 6, 2] = zero, zero, _C20 * 6.0 * z
    g[..., 7, 0], g[..., 7, 1], g[..., 7, 2] = _C2 * z, zero, _C2 * x
    g[..., 8, 0], g[..., 8, 1], g[..., 8, 2] = _C22 * 2.0 * x, -_C22 * 2.0 * y, zero
    return g


def sh_basis_gradient_dot(dirs: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum_k coef[..., k] * d(Y_k)/d(direction), without the (..., 9, 3) tensor."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    c = np.moveaxis(coef, -1, 0)
    out = np.empty(dirs.shape, dtype=np.float64)
    out[..., 0] = _C1 * c[3] + _C2 * (y * c[4] + z * c[7]) + 2.0 * _C22 * x * c[8]
    out[..., 1] = _C1 * c[1] + _C2 * (x * c[4] + z * c[5]) - 2.0 * _C22 * y * c[8]
    out[..., 2] = _C1 * c[2] + _C2 * (y * c[5] + x * c[7]) + 6.0 * _C20 * z * c[6]
    return out


def eval_sh_basis(d) -> np.ndarray:
    """Basis values Y_k(d) for a unit direction d. Rejects non-unit inputs."""
    return sh_basis_array(_check_unit(d))


@dataclass(frozen=True)
class ShLighting:
    """9 coefficients per RGB channel, stored as a (3, 9) array."""

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (3, N_COEFFS):
            raise ValueError(f"ShLighting coefficients must be (3, 9), got {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("ShLighting coefficients must be finite")
        object.__setattr__(self, "coeffs", c.copy())

    def scaled(self, k: float) -> "ShLighting":
        return ShLighting(self.coeffs * k)

    def __add__(self, other: "ShLighting") -> "ShLighting":
        return ShLighting(self.coeffs + other.coeffs)

    @staticmethod
    def zeros() -> "ShLighting":
        return ShLighting(np.zeros((3, N_COEFFS)))

    def to_json_dict(self) -> dict:
        return {"sh": [[float(v) for v in row] for row in self.coeffs]}

    @staticmethod
    def from_json_dict(payload: dict) -> "ShLighting":
        if not isinstance(payload, dict) or "sh" not in payload:
            raise ValueError('lighting JSON must carry an "sh" key')
        arr = np.asarray(payload["sh"], dtype=np.float64)
        if arr.shape != (3, N_COEFFS):
            raise ValueError(f'"sh" must be 3 channels x 9 coefficients, got {arr.shape}')
        return ShLighting(arr)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @staticmethod
    def load(path) -> "ShLighting":
        return ShLighting.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class EnvironmentMap:
    """Equirectangular HDR radiance map, 3 channels, nonnegative samples."""

    image: ImageBuffer

    def __post_init__(self) -> None:
        if self.image.channels != 3:
            raise ValueError("environment map must have 3 channels")
        if (self.image.data < 0).any():
            raise ValueError("environment map radiance must be nonnegative")

    def directions_and_solid_angles(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel unit direction (H, W, 3) and solid angle (H, W)."""
        h, w = self.image.height, self.image.width
        v = (np.arange(h) + 0.5) / h
        u = (np.arange(w) + 0.5) / w
        theta = np.pi * v[:, None]
        phi = 2.0 * np.pi * u[None, :]
        st = np.sin(theta)
        dirs = np.empty((h, w, 3), dtype=np.float64)
        dirs[..., 0] = st * np.sin(phi)
        dirs[..., 1] = np.cos(theta) * np.ones_like(phi)
        dirs[..., 2] = st * np.cos(phi)
        omega = (2.0 * np.pi / w) * (np.pi / h) * st * np.ones_like(phi)
        return dirs, omega


def project_env_to_sh(env: EnvironmentMap) -> ShLighting:
    """Riemann-sum projection of an environment map onto the 9 basis functions."""
    dirs, omega = env.directions_and_solid_angles()
    basis = sh_basis_array(dirs)  # (H, W, 9)
    weighted = basis * omega[..., None]  # (H, W, 9)
    coeffs = np.einsum("hwc,hwk->ck", env.image.data, weighted)
    return ShLighting(coeffs)


def irradiance_of(normals: np.ndarray, light: ShLighting) -> np.ndarray:
    """Diffuse shading for an array of unit normals: (..., 3) -> (..., 3) rgb.

    Unclamped; callers that render clamp at zero.
    """
    basis = sh_basis_array(normals)
    gains = light.coeffs * BAND_GAINS[None, :] / np.pi  # (3, 9)
    return basis @ gains.T


def sh_irradiance(n, light: ShLighting) -> np.ndarray:
    """Diffuse irradiance (divided by pi) at a single unit normal."""
    return irradiance_of(_check_unit(n, tol=1e-3)[None, :], light)[0]


def radiance_of(dirs: np.ndarray, light: ShLighting) -> np.ndarray:
    """Band-limited radiance at directions (..., 3) -> (..., 3), clamped at 0."""
    basis = sh_basis_array(dirs)
    return np.maximum(basis @ light.coeffs.T, 0.0)


def eval_sh_radiance(d, light: ShLighting) -> np.ndarray:
    """Radiance of the order-2 reconstruction in direction d (negative lobes -> 0)."""
    return radiance_of(_check_unit(d, tol=1e-3)[None, :], light)[0]


def _zonal_cos_power(p: float) -> np.ndarray:
    """Zonal SH coefficients (f0, f1, f2) of max(0, cos theta)^p about +z."""
    f0 = np.sqrt(np.pi) / (p + 1.0)
    f1 = np.sqrt(3.0 * np.pi) / (p + 2.0)
    f2 = np.pi * np.sqrt(5.0 / np.pi) * p / ((p + 1.0) * (p + 3.0))
    return np.array([f0, f1, f2])


def _rotate_zonal(f: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Coefficients of a zonal function re-oriented from +z to ``axis``.

    c_lm = sqrt(4 pi / (2l + 1)) * f_l * Y_lm(axis); one row, 9 values.
    """
    y = sh_basis_array(axis)
    conv = np.concatenate(
        [
            np.full(1, np.sqrt(4.0 * np.pi / 1.0) * f[0]),
            np.full(3, np.sqrt(4.0 * np.pi / 3.0) * f[1]),
            np.full(5, np.sqrt(4.0 * np.pi / 5.0) * f[2]),
        ]
    )
    return conv * y


def cosine_lobe_light(direction, exponent: float = 1.0, intensity: float = 1.0,
                      ambient: float = 0.0) -> ShLighting:
    """White light from a clamped-cosine-power lobe about ``direction``.

    Scaled so peak diffuse shading (at n = direction) equals ``intensity``;
    ``ambient`` adds a uniform term contributing that much shading everywhere.
    """
    axis = normalize_direction(direction)
    row = _rotate_zonal(_zonal_cos_power(exponent), axis)
    light = ShLighting(np.tile(row, (3, 1)))
    peak = float(sh_irradiance(axis, light)[0])
    if peak <= 0:
        raise ValueError("degenerate lobe: nonpositive peak shading")
    coeffs = light.coeffs * (intensity / peak)
    coeffs = coeffs + ambient * 2.0 * np.sqrt(np.pi) * _dc_only()
    return ShLighting(coeffs)


def _dc_only() -> np.ndarray:
    out = np.zeros((3, N_COEFFS))
    out[:, 0] = 1.0
    return out


def front_light_init() -> ShLighting:
    """Clamped-cosine white light about +z, scaled to unit shading at n = +z."""
    return cosine_lobe_light(np.array([0.0, 0.0, 1.0]), exponent=1.0, intensity=1.0)


def fibonacci_directions(count: int) -> np.ndarray:
    """Deterministic, near-uniform unit directions on the sphere: (count, 3)."""
    i = np.arange(count, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


_PEAK_PROBES = fibonacci_directions(2562)


def sample_random_lighting(seed: int) -> ShLighting:
    """White directional-dominant light, deterministic in ``seed``.

    A random axis and a cosine-power lobe with exponent uniform in [1, 8],
    normalized so the peak diffuse shading over a dense probe set is 1.0.
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    p = rng.uniform(1.0, 8.0)
    row = _rotate_zonal(_zonal_cos_power(p), axis)
    light = ShLighting(np.tile(row, (3, 1)))
    peak = irradiance_of(_PEAK_PROBES, light)[:, 0].max()
    return ShLighting(light.coeffs / peak)
