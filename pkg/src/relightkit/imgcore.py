"""Core raster types and image IO.

Everything downstream works on linear-radiance float buffers; sRGB encoding
happens only at the PNG boundary. Supported interchange formats:

  - PNG, 8 or 16 bit, gray or RGB (via OpenCV; 16-bit RGB included)
  - PFM, little-endian (scale line -1.0), rows stored bottom-to-top
  - Radiance .hdr, RGBE with RLE scanlines (read) / flat scanlines (write)

Masks are single-channel PNGs where byte 255 maps to weight 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

__all__ = [
    "ImageBuffer",
    "Mask",
    "NormalMap",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "load_normal_map",
    "save_normal_preview",
    "spatial_gradients",
    "srgb_to_linear",
    "linear_to_srgb",
]


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    """sRGB electro-optical transfer function (decode), piecewise exact."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    """Inverse sRGB transfer (encode). Input clipped to [0, 1] first."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1.0 / 2.4) - 0.055)


def _validate_raster(data: np.ndarray, what: str) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"{what} data must be (H, W, C), got shape {data.shape}")
    h, w, c = data.shape
    if h < 1 or w < 1:
        raise ValueError(f"{what} has degenerate dimensions {h}x{w}")
    if not np.isfinite(data).all():
        raise ValueError(f"{what} contains NaN or infinite samples")
    return data


@dataclass
class ImageBuffer:
    """H x W x C raster of linear-radiance floats (C is 1 or 3).

    The constructor copies and validates, so instances can be treated as
    values: no public operation mutates its inputs.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = _validate_raster(self.data, "ImageBuffer")
        if data.shape[2] not in (1, 3):
            raise ValueError(f"ImageBuffer needs 1 or 3 channels, got {data.shape[2]}")
        self.data = data.copy()

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data)

    @staticmethod
    def full(height: int, width: int, channels: int, value: float = 0.0) -> "ImageBuffer":
        return ImageBuffer(np.full((height, width, channels), value, dtype=np.float64))


@dataclass
class Mask:
    """Per-pixel weights in [0, 1]; values are clamped on construction."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"Mask must be (H, W), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("Mask contains NaN or infinite samples")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binary(self) -> np.ndarray:
        """Boolean in/out view used wherever a hard selection is needed."""
        return self.values > 0.5

    @staticmethod
    def full(height: int, width: int, value: float = 1.0) -> "Mask":
        return Mask(np.full((height, width), value, dtype=np.float64))


_PLACEHOLDER_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass
class NormalMap:
    """Per-pixel 3-vectors plus a validity mask.

    Masked-in vectors are unit length (checked to 1e-4); masked-out pixels
    hold the (0, 0, 1) placeholder. Residual fields (delta-normal maps) use
    ``unit=False`` and skip the norm check.
    """

    vectors: np.ndarray
    mask: Mask
    unit: bool = field(default=True)

    def __post_init__(self) -> None:
        v = _validate_raster(self.vectors, "NormalMap")
        if v.shape[2] != 3:
            raise ValueError("NormalMap vectors must have 3 components")
        if (v.shape[0], v.shape[1]) != (self.mask.height, self.mask.width):
            raise ValueError("NormalMap mask dimensions do not match vectors")
        v = v.copy()
        inside = self.mask.binary()
        if self.unit:
            norms = np.linalg.norm(v[inside], axis=-1)
            if inside.any() and np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("masked-in normals must be unit length (tol 1e-4)")
            v[~inside] = _PLACEHOLDER_NORMAL
        self.vectors = v

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @staticmethod
    def from_raw(vectors: np.ndarray, mask: Mask) -> "NormalMap":
        """Renormalize masked-in vectors and build a valid NormalMap."""
        v = np.asarray(vectors, dtype=np.float64).copy()
        inside = mask.binary()
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.maximum(norms, 1e-12)
        v = v / safe
        v[~inside] = _PLACEHOLDER_NORMAL
        return NormalMap(v, mask)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def _read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().decode("ascii").strip()
        if tag not in ("PF", "Pf"):
            raise ValueError(f"{path}: not a PFM file (tag {tag!r})")
        dims = f.readline().decode("ascii").split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        channels = 3 if tag == "PF" else 1
        count = width * height * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError(f"{path}: truncated PFM payload")
    endian = "<f" if scale < 0 else ">f"
    img = np.frombuffer(raw, dtype=np.dtype(endian)).astype(np.float64)
    img = img.reshape(height, width, channels)
    return np.flipud(img).copy()


def _write_pfm(path: Path, data: np.ndarray) -> None:
    h, w, c = data.shape
    if c not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    tag = "PF" if c == 3 else "Pf"
    payload = np.flipud(data).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(payload)


# ---------------------------------------------------------------------------
# Radiance HDR (RGBE)
# ---------------------------------------------------------------------------

def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """(..., 4) uint8 -> (..., 3) float. Zero exponent means black."""
    rgbe = rgbe.astype(np.float64)
    e = rgbe[..., 3]
    scale = np.where(e > 0, np.exp2(e - 136.0), 0.0)
    return rgbe[..., :3] * scale[..., None]


def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.maximum(rgb, 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    maxc = rgb.max(axis=-1)
    nonzero = maxc >= 1e-32
    if nonzero.any():
        m, e = np.frexp(maxc[nonzero])
        scale = m * 256.0 / maxc[nonzero]
        mant = np.clip(np.round(rgb[nonzero] * scale[..., None]), 0, 255)
        out[nonzero, :3] = mant.astype(np.uint8)
        out[nonzero, 3] = (e + 128).astype(np.uint8)
    return out


def _read_hdr(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline()
        if not (magic.startswith(b"#?RADIANCE") or magic.startswith(b"#?RGBE")):
            raise ValueError(f"{path}: missing Radiance signature")
        while True:
            line = f.readline()
            if line in (b"", b"\n"):
                break
        dims = f.readline().decode("ascii").split()
        if len(dims) != 4 or dims[0] != "-Y" or dims[2] != "+X":
            raise ValueError(f"{path}: unsupported HDR orientation {dims}")
        height, width = int(dims[1]), int(dims[3])
        data = f.read()

    img = np.zeros((height, width, 4), dtype=np.uint8)
    pos = 0
    for row in range(height):
        if pos + 4 > len(data):
            raise ValueError(f"{path}: truncated HDR data at row {row}")
        head = data[pos : pos + 4]
        if head[0] == 2 and head[1] == 2 and (head[2] << 8 | head[3]) == width and width >= 8:
            pos += 4
            scan = np.zeros((4, width), dtype=np.uint8)
            for comp in range(4):
                col = 0
                while col < width:
                    run = data[pos]
                    pos += 1
                    if run > 128:  # run of one repeated byte
                        count = run - 128
                        scan[comp, col : col + count] = data[pos]
                        pos += 1
                    else:  # literal bytes
                        count = run
                        scan[comp, col : col + count] = np.frombuffer(
                            data[pos : pos + count], dtype=np.uint8
                        )
                        pos += count
                    col += count
            img[row] = scan.T
        else:  # flat (possibly old-style RLE) scanline
            col = 0
            while col < width:
                px = data[pos : pos + 4]
                pos += 4
                if px[0] == 1 and px[1] == 1 and px[2] == 1:
                    count = px[3]
                    img[row, col : col + count] = img[row, col - 1]
                    col += count
                else:
                    img[row, col] = np.frombuffer(px, dtype=np.uint8)
                    col += 1
    return _rgbe_to_float(img)


def _write_hdr(path: Path, data: np.ndarray) -> None:
    h, w, c = data.shape
    if c == 1:
        data = np.repeat(data, 3, axis=2)
    rgbe = _float_to_rgbe(data)
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {h} +X {w}\n".encode("ascii"))
        f.write(rgbe.tobytes())


# ---------------------------------------------------------------------------
# Public IO
# ---------------------------------------------------------------------------

def load_image(path, transfer: str = "linear") -> ImageBuffer:
    """Load PNG/PFM/HDR into a linear-radiance buffer.

    ``transfer`` applies to PNG only: "srgb" decodes with the sRGB EOTF,
    "linear" divides by the integer full-scale. PFM and HDR are linear by
    definition and ignore the flag.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return ImageBuffer(_read_pfm(path))
    if suffix == ".hdr":
        return ImageBuffer(_read_hdr(path))
    if suffix == ".png":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise ValueError(f"unreadable PNG: {path}")
        if raw.ndim == 2:
            raw = raw[:, :, None]
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        if raw.shape[2] == 3:
            raw = raw[:, :, ::-1]  # BGR -> RGB
        full_scale = 65535.0 if raw.dtype == np.uint16 else 255.0
        v = raw.astype(np.float64) / full_scale
        if transfer == "srgb":
            v = srgb_to_linear(v)
        elif transfer != "linear":
            raise ValueError(f"unknown transfer {transfer!r}")
        return ImageBuffer(v)
    raise ValueError(f"unsupported image format: {path}")


def save_image(buffer: ImageBuffer, path, transfer: str = "linear", bit_depth: int = 8) -> None:
    """Write a buffer; format chosen by extension (.png/.pfm/.hdr).

    PNG quantizes after the chosen transfer (values outside [0,1] clip);
    PFM stores float32 bit-exactly; HDR stores RGBE.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        _write_pfm(path, buffer.data)
        return
    if suffix == ".hdr":
        _write_hdr(path, buffer.data)
        return
    if suffix == ".png":
        v = buffer.data
        if transfer == "srgb":
            v = linear_to_srgb(v)
        elif transfer == "linear":
            v = np.clip(v, 0.0, 1.0)
        else:
            raise ValueError(f"unknown transfer {transfer!r}")
        if bit_depth == 8:
            q = np.round(v * 255.0).astype(np.uint8)
        elif bit_depth == 16:
            q = np.round(v * 65535.0).astype(np.uint16)
        else:
            raise ValueError("PNG bit depth must be 8 or 16")
        if q.shape[2] == 3:
            q = q[:, :, ::-1]
        else:
            q = q[:, :, 0]
        if not cv2.imwrite(str(path), q):
            raise OSError(f"cannot write PNG: {path}")
        return
    raise ValueError(f"unsupported image format: {path}")


def encode_png_bytes(buffer: ImageBuffer, transfer: str = "srgb") -> bytes:
    """Deterministic in-memory 8-bit PNG encoding (shared by CLI and HTTP)."""
    v = buffer.data
    if transfer == "srgb":
        v = linear_to_srgb(v)
    else:
        v = np.clip(v, 0.0, 1.0)
    q = np.round(v * 255.0).astype(np.uint8)
    q = q[:, :, ::-1] if q.shape[2] == 3 else q[:, :, 0]
    ok, payload = cv2.imencode(".png", q)
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return payload.tobytes()


def load_mask(path) -> Mask:
    """Single-channel PNG, byte 255 -> weight 1.0."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mask: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"unreadable mask: {path}")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    full_scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return Mask(raw.astype(np.float64) / full_scale)


def save_mask(mask: Mask, path) -> None:
    q = np.round(np.clip(mask.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(Path(path)), q):
        raise OSError(f"cannot write mask: {path}")


def load_normal_map(path, mask: Mask) -> NormalMap:
    """Load a normal map: PFM holds raw vectors, PNG holds (n+1)/2."""
    buf = load_image(path, transfer="linear")
    v = buf.data
    if v.shape[2] != 3:
        raise ValueError("normal map must have 3 channels")
    if Path(path).suffix.lower() == ".png":
        v = v * 2.0 - 1.0
    return NormalMap.from_raw(v, mask)


def save_normal_preview(n: NormalMap, path) -> None:
    """PNG preview with the (n+1)/2 encoding."""
    save_image(ImageBuffer((n.vectors + 1.0) * 0.5), path, transfer="linear")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def spatial_gradients(buffer: ImageBuffer) -> tuple[ImageBuffer, ImageBuffer]:
    """Forward differences along x and y; last column/row are zero."""
    if buffer.width < 2 or buffer.height < 2:
        raise ValueError("spatial_gradients needs at least a 2x2 buffer")
    d = buffer.data
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, :-1] = d[:, 1:] - d[:, :-1]
    gy[:-1, :] = d[1:] - d[:-1]
    return ImageBuffer(gx), ImageBuffer(gy)
