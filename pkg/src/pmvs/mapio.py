"""Bit-exact map formats, image loading and pyramid construction.

Binary map format ``PMVSMAP1``: 8-byte magic, u8 kind, u32 height, u32
width, u32 channels, little-endian float32 row-major payload, trailing
CRC32 over everything before it.  Geometry maps store 5 channels
(depth, nx, ny, nz, valid), coplanarity maps 9, score fields 1+N.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import FormatError, ImageTooSmall
from .geometry import CameraView, propagate_hypothesis  # noqa: F401 (re-intersection path)

MAGIC = b"PMVSMAP1"
KIND_GEOMETRY = 1
KIND_COPLANARITY = 2
KIND_SCORE = 3
KIND_RASTER = 4

PYRAMID_SCALES = (3, 2, 1)


@dataclass
class GeometryMap:
    """Per-pixel plane hypotheses (depth + unit normal) with a validity mask."""

    depth: np.ndarray   # (H, W) float32
    normal: np.ndarray  # (H, W, 3) float32
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.normal = np.asarray(self.normal, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def shape(self):
        return self.depth.shape

    def copy(self):
        return GeometryMap(self.depth.copy(), self.normal.copy(), self.valid.copy())

    def to_channels(self) -> np.ndarray:
        h, w = self.depth.shape
        out = np.empty((h, w, 5), dtype=np.float32)
        out[..., 0] = self.depth
        out[..., 1:4] = self.normal
        out[..., 4] = self.valid.astype(np.float32)
        return out

    @classmethod
    def from_channels(cls, data: np.ndarray):
        return cls(data[..., 0], data[..., 1:4], data[..., 4] > 0.5)


@dataclass
class CoplanarityMap:
    """(H, W, 9) supporting-pixel weights over the 3x3 dilation-3 neighborhood.

    Index k in 0..8 addresses offsets {-3, 0, +3}^2 row-major; center is 4.
    """

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 3 or self.weights.shape[2] != 9:
            raise ValueError("coplanarity map must be (H, W, 9)")


SUPPORT_OFFSETS = np.array([(dx, dy) for dy in (-3, 0, 3) for dx in (-3, 0, 3)], dtype=np.int64)
CENTER_INDEX = 4


@dataclass
class ScoreField:
    """Per-pixel log-disbelief score plus per-view visibility weights."""

    score: np.ndarray       # (H, W) float32
    visibility: np.ndarray  # (H, W, N) float32 in [0, 1]

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float32)
        self.visibility = np.asarray(self.visibility, dtype=np.float32)

    def to_channels(self) -> np.ndarray:
        return np.concatenate([self.score[..., None], self.visibility], axis=2).astype(np.float32)

    @classmethod
    def from_channels(cls, data: np.ndarray):
        return cls(data[..., 0], data[..., 1:])


@dataclass
class FeaturePyramid:
    """Per-scale feature grids; levels for s in {3, 2, 1} plus optional 0."""

    levels: dict  # s -> (H/2^s, W/2^s, C) float32
    channels: int
    provenance: str = "raw-intensity"

    def __getitem__(self, s):
        return self.levels[s]


# --- map persistence ------------------------------------------------------

def _write_raw(path, kind: int, data: np.ndarray):
    data = np.ascontiguousarray(data, dtype="<f4")
    h, w, c = data.shape
    header = MAGIC + struct.pack("<BIII", kind, h, w, c)
    payload = data.tobytes()
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def _read_raw(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 25:
        raise FormatError("file too short for PMVSMAP1 header", offset=len(blob))
    if blob[:8] != MAGIC:
        raise FormatError("bad magic", offset=0)
    kind, h, w, c = struct.unpack("<BIII", blob[8:21])
    expect = 21 + 4 * h * w * c + 4
    if len(blob) != expect:
        raise FormatError(f"truncated payload (want {expect} bytes, have {len(blob)})",
                          offset=min(len(blob), expect))
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if crc != crc_stored:
        raise FormatError("CRC mismatch", offset=len(blob) - 4)
    data = np.frombuffer(blob[21:-4], dtype="<f4").reshape(h, w, c).copy()
    return kind, data


def save_map(path, m):
    if isinstance(m, GeometryMap):
        _write_raw(path, KIND_GEOMETRY, m.to_channels())
    elif isinstance(m, CoplanarityMap):
        _write_raw(path, KIND_COPLANARITY, m.weights)
    elif isinstance(m, ScoreField):
        _write_raw(path, KIND_SCORE, m.to_channels())
    else:
        arr = np.asarray(m, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        _write_raw(path, KIND_RASTER, arr)


def load_map(path):
    kind, data = _read_raw(path)
    if kind == KIND_GEOMETRY:
        if data.shape[2] != 5:
            raise FormatError(f"geometry map needs 5 channels, got {data.shape[2]}")
        return GeometryMap.from_channels(data)
    if kind == KIND_COPLANARITY:
        if data.shape[2] != 9:
            raise FormatError(f"coplanarity map needs 9 channels, got {data.shape[2]}")
        return CoplanarityMap(data)
    if kind == KIND_SCORE:
        return ScoreField.from_channels(data)
    if kind == KIND_RASTER:
        return data[..., 0] if data.shape[2] == 1 else data
    raise FormatError(f"unknown map kind {kind}", offset=8)


# --- images ---------------------------------------------------------------

LOSSLESS_FORMATS = {"PNG", "PPM", "PGM"}


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG/PGM/PPM as float grayscale in [0, 1].

    Lossy formats are rejected: compression artifacts corrupt texture-light
    regions and measurably hurt reconstruction.
    """
    with Image.open(path) as im:
        if im.format not in LOSSLESS_FORMATS:
            raise FormatError(f"unsupported image format {im.format!r} for {path}; "
                              "use PNG, PGM or PPM")
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr


def save_image(path, image: np.ndarray):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_pfm(path, depth: np.ndarray):
    """Export a depth map as little-endian grayscale PFM (`Pf`, scale -1)."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(depth).tobytes())  # PFM rows run bottom-to-top


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise FormatError(f"not a grayscale PFM: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w)).copy()


# --- pyramids -------------------------------------------------------------

def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsample by an integer factor (trailing remainder cropped)."""
    h, w = image.shape[:2]
    hh, ww = h // factor, w // factor
    img = image[: hh * factor, : ww * factor]
    if img.ndim == 2:
        return img.reshape(hh, factor, ww, factor).mean(axis=(1, 3))
    return img.reshape(hh, factor, ww, factor, -1).mean(axis=(1, 3))


def _gradients(gray: np.ndarray):
    gx = np.gradient(gray, axis=1)
    gy = np.gradient(gray, axis=0)
    return gx, gy


def build_pyramid(image: np.ndarray, mode: str = "gradient",
                  include_full: bool = False) -> FeaturePyramid:
    """Feature pyramid at scales {3, 2, 1} (plus 0 when requested).

    ``raw-intensity`` emits a single intensity channel; ``gradient`` appends
    x/y central-difference channels (C = 3).  Downsampling is area averaging.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ImageTooSmall(f"need at least 8x8, got {image.shape}")
    if mode not in ("raw-intensity", "gradient"):
        raise ValueError(f"unknown pyramid mode {mode!r}")

    levels = {}
    scales = PYRAMID_SCALES + ((0,) if include_full else ())
    for s in scales:
        lvl = image if s == 0 else area_downsample(image, 2 ** s)
        if mode == "gradient":
            gx, gy = _gradients(lvl)
            feat = np.stack([lvl, gx, gy], axis=-1)
        else:
            feat = lvl[..., None]
        levels[s] = np.ascontiguousarray(feat, dtype=np.float32)
    channels = 3 if mode == "gradient" else 1
    return FeaturePyramid(levels, channels, mode)


def external_pyramid(levels: dict) -> FeaturePyramid:
    """Wrap externally loaded feature maps (e.g. from PMVSMAP1 files)."""
    channels = next(iter(levels.values())).shape[2]
    return FeaturePyramid({s: np.asarray(v, dtype=np.float32) for s, v in levels.items()},
                          channels, "external-file")


# --- upsampling -----------------------------------------------------------

def upsample_nearest(gmap: GeometryMap, coarse_view: CameraView,
                     fine_view: CameraView) -> GeometryMap:
    """Nearest-neighbor upscale by 2: normals copied, depth re-intersected.

    Each fine pixel copies its floor-half source hypothesis and the depth is
    re-evaluated by intersecting the copied plane with the fine pixel's ray.
    """
    h, w = gmap.shape
    fh, fw = fine_view.height, fine_view.width
    src_y = np.minimum(np.arange(fh) // 2, h - 1)
    src_x = np.minimum(np.arange(fw) // 2, w - 1)
    sy, sx = np.meshgrid(src_y, src_x, indexing="ij")

    depth = gmap.depth[sy, sx].astype(np.float64)
    normal = gmap.normal[sy, sx].astype(np.float64)
    valid = gmap.valid[sy, sx].copy()

    # plane offset c = n . X with X = depth * ray(coarse pixel)
    coarse_rays = coarse_view.ray_grid()[sy, sx]
    c = depth * np.einsum("hwk,hwk->hw", normal, coarse_rays)
    fine_rays = fine_view.ray_grid()
    denom = np.einsum("hwk,hwk->hw", normal, fine_rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        new_depth = c / denom
    bad = ~np.isfinite(new_depth) | (new_depth <= 0)
    new_depth[bad] = depth[bad]  # keep a value in place, but mark degenerate
    valid &= ~bad
    return GeometryMap(new_depth, normal, valid)


def median_upsample(depth: np.ndarray, target_shape, valid=None) -> np.ndarray:
    """Nearest-neighbor upsample to target dims, then a mask-aware 5x5 median.

    The median is the lower median over valid contributing inputs only, so the
    result never leaves the multiset of inputs.  Pixels with no valid
    neighbors come out as NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    th, tw = target_shape
    if th % h or tw % w or (th // h) != (tw // w):
        raise ValueError(f"target {target_shape} not an integer multiple of {depth.shape}")
    fy, fx = th // h, tw // w
    if fy & (fy - 1):
        raise ValueError(f"upsample factor {fy} is not a power of two")
    if valid is None:
        valid = np.isfinite(depth)
    up = np.repeat(np.repeat(depth, fy, axis=0), fx, axis=1)
    upv = np.repeat(np.repeat(valid, fy, axis=0), fx, axis=1)

    pad = 2
    padded = np.full((th + 2 * pad, tw + 2 * pad), np.nan)
    padded[pad:-pad, pad:-pad] = np.where(upv, up, np.nan)
    stack = np.empty((25, th, tw))
    k = 0
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            stack[k] = padded[pad + dy: pad + dy + th, pad + dx: pad + dx + tw]
            k += 1
    count = np.sum(np.isfinite(stack), axis=0)
    order = np.sort(stack, axis=0)  # NaNs sort to the end
    idx = np.maximum(count - 1, 0) // 2
    result = np.take_along_axis(order, idx[None, ...], axis=0)[0]
    result[count == 0] = np.nan
    return result
