"""Initial-normal provider: OBJ meshes, blendshapes, software rasterizer.

The rasterizer is a deterministic z-buffer scan over triangles with
back-face culling and barycentric normal interpolation. Camera defaults to
orthographic looking down -z; portrait crops are near-orthographic, and an
orthographic default avoids committing to unspecified intrinsics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imgcore import Mask, NormalMap

__all__ = [
    "Camera",
    "MeshScene",
    "load_obj",
    "load_blendshapes",
    "apply_blendshapes",
    "rasterize_normals",
]


@dataclass
class Camera:
    """Orthographic or pinhole camera. ``ortho_height`` is the world-space
    height visible at the image; ``fov_deg`` is the vertical field of view."""

    kind: str = "ortho"
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 4.0]))
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    ortho_height: float = 2.2
    fov_deg: float = 40.0

    def __post_init__(self) -> None:
        if self.kind not in ("ortho", "pinhole"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)

    def view_rotation(self) -> np.ndarray:
        """World-to-camera rotation; camera looks down its local -z."""
        fwd = self.target - self.position
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("camera position and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("camera up is parallel to the view direction")
        right = right / rn
        up = np.cross(right, fwd)
        return np.stack([right, up, -fwd], axis=0)


def _vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of face normals (unnormalized cross products)."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    face = np.cross(b - a, c - a)  # length = 2 * area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lengths, 1e-12)


@dataclass
class MeshScene:
    """Triangle mesh with optional blendshape deltas and a camera."""

    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    blendshapes: np.ndarray | None = None  # (S, V, 3)
    camera: Camera = field(default_factory=Camera)
    vertex_normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3 or len(self.triangles) == 0:
            raise ValueError("mesh needs at least one triangle")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle indices out of range")
        if self.blendshapes is not None:
            bs = np.asarray(self.blendshapes, dtype=np.float64)
            if bs.ndim != 3 or bs.shape[1:] != self.vertices.shape:
                raise ValueError("blendshape deltas must be (S, V, 3) matching vertices")
            self.blendshapes = bs
        if self.vertex_normals is None:
            self.vertex_normals = _vertex_normals(self.vertices, self.triangles)

    @property
    def blendshape_count(self) -> int:
        return 0 if self.blendshapes is None else len(self.blendshapes)


def _parse_obj_vertices_faces(path: Path) -> tuple[np.ndarray, np.ndarray]:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line.startswith("v "):
            parts = line.split()
            vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif line.startswith("f "):
            idx = []
            for token in line.split()[1:]:
                raw = token.split("/")[0]
                i = int(raw)
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            if len(idx) < 3:
                raise ValueError(f"{path}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):  # fan triangulation
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices or not faces:
        raise ValueError(f"{path}: no usable geometry")
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def load_obj(path, camera: Camera | None = None) -> MeshScene:
    """Load a Wavefront OBJ; polygons are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mesh: {path}")
    vertices, triangles = _parse_obj_vertices_faces(path)
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if areas.max() < 1e-14:
        raise ValueError(f"{path}: all triangles are degenerate")
    return MeshScene(vertices, triangles, camera=camera or Camera())


def load_blendshapes(base: MeshScene, manifest_path) -> MeshScene:
    """Attach blendshapes listed in a JSON manifest {"shapes": [obj, ...]}.

    Each shape OBJ must share the base topology; deltas are shape - base.
    """
    manifest_path = Path(manifest_path)
    payload = json.loads(manifest_path.read_text())
    shapes = payload.get("shapes")
    if not isinstance(shapes, list) or not shapes:
        raise ValueError(f'{manifest_path}: manifest needs a non-empty "shapes" list')
    deltas = []
    for rel in shapes:
        shape_path = (manifest_path.parent / rel).resolve()
        verts, tris = _parse_obj_vertices_faces(shape_path)
        if verts.shape != base.vertices.shape or not np.array_equal(tris, base.triangles):
            raise ValueError(f"{shape_path}: topology differs from base mesh")
        deltas.append(verts - base.vertices)
    return replace(base, blendshapes=np.stack(deltas), vertex_normals=None)


def apply_blendshapes(m: MeshScene, coefficients) -> MeshScene:
    """vertices + sum_k c_k * delta_k, with normals recomputed."""
    c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if len(c) != m.blendshape_count:
        raise ValueError(
            f"expected {m.blendshape_count} blend coefficients, got {len(c)}"
        )
    vertices = m.vertices
    if len(c):
        vertices = vertices + np.einsum("s,svd->vd", c, m.blendshapes)
    return replace(m, vertices=vertices, vertex_normals=None)


def rasterize_normals(m: MeshScene, width: int, height: int) -> tuple[NormalMap, Mask]:
    """Z-buffered rasterization of camera-space normals plus a coverage mask.

    Pixels sample at their centers; x maps left-to-right, y top-to-bottom
    (row 0 is the top). Depth is distance along the view axis, strict-less
    test, ties kept by the first-drawn triangle.
    """
    if width < 1 or height < 1:
        raise ValueError("raster target must be at least 1x1")
    rot = m.camera.view_rotation()
    cam_pts = (m.vertices - m.camera.position) @ rot.T
    cam_nrm = m.vertex_normals @ rot.T

    aspect = width / height
    if m.camera.kind == "ortho":
        half_h = m.camera.ortho_height / 2.0
        sx = cam_pts[:, 0] / (half_h * aspect)
        sy = cam_pts[:, 1] / half_h
    else:
        depth_axis = -cam_pts[:, 2]
        if (depth_axis <= 1e-9).any():
            raise ValueError("pinhole camera: mesh crosses the camera plane")
        half_h = np.tan(np.radians(m.camera.fov_deg) / 2.0)
        sx = cam_pts[:, 0] / (depth_axis * half_h * aspect)
        sy = cam_pts[:, 1] / (depth_axis * half_h)
    px = (sx + 1.0) * 0.5 * width - 0.5
    py = (1.0 - sy) * 0.5 * height - 0.5
    depth = -cam_pts[:, 2]

    zbuf = np.full((height, width), np.inf)
    normals = np.zeros((height, width, 3), dtype=np.float64)
    covered = np.zeros((height, width), dtype=bool)

    tris = m.triangles
    p2 = np.stack([px, py], axis=1)
    for t in range(len(tris)):
        i0, i1, i2 = tris[t]
        a, b, c = p2[i0], p2[i1], p2[i2]
        # Signed area in screen space; y grows downward, so counter-clockwise
        # world triangles facing the camera come out negative.
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area >= -1e-12:  # back-facing or degenerate
            continue
        x0 = max(int(np.ceil(min(a[0], b[0], c[0]))), 0)
        x1 = min(int(np.floor(max(a[0], b[0], c[0]))), width - 1)
        y0 = max(int(np.ceil(min(a[1], b[1], c[1]))), 0)
        y1 = min(int(np.floor(max(a[1], b[1], c[1]))), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        w0 = ((b[0] - gx) * (c[1] - gy) - (b[1] - gy) * (c[0] - gx)) / area
        w1 = ((c[0] - gx) * (a[1] - gy) - (c[1] - gy) * (a[0] - gx)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        sub_z = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (z < sub_z)
        if not win.any():
            continue
        n = (
            w0[..., None] * cam_nrm[i0]
            + w1[..., None] * cam_nrm[i1]
            + w2[..., None] * cam_nrm[i2]
        )
        sub_n = normals[y0 : y1 + 1, x0 : x1 + 1]
        sub_c = covered[y0 : y1 + 1, x0 : x1 + 1]
        sub_z[win] = z[win]
        sub_n[win] = n[win]
        sub_c[win] = True

    mask = Mask(covered.astype(np.float64))
    return NormalMap.from_raw(normals, mask), mask
