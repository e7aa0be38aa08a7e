"""Raster ingestion: netpbm parsing, shorter-side resize, crops, pooling.

Images are float arrays of shape (height, width, channels) with intensities
in [0, 1]. Only P2/P3/P5/P6 containers are supported.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import BadFeatureDim, ImageTooSmall, MalformedHeader, TruncatedPixelData, UnsupportedMagic

LUMA = np.array([0.299, 0.587, 0.114])
VARIANCE_FLOOR = 1e-8

_CHANNELS = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray  # (height, width, channels)

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3 or p.shape[2] not in (1, 3) or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"bad raster shape {p.shape}")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class PreprocessConfig:
    short_side: int
    crop: int
    mode: str = "center"
    seed: int = 0

    def __post_init__(self):
        if self.short_side < 1 or self.crop < 1:
            raise ValueError("short_side and crop must be positive")
        if self.crop > self.short_side:
            raise ValueError("crop cannot exceed short_side")
        if self.mode not in ("random", "center"):
            raise ValueError(f"mode must be 'random' or 'center', got {self.mode!r}")

    @classmethod
    def square(cls, side: int, mode: str = "center", seed: int = 0) -> "PreprocessConfig":
        return cls(side, side, mode, seed)


TEACHER_RESOLUTION = 448
STUDENT_RESOLUTION = 352
INFERENCE_RESOLUTION = 288


# -- netpbm -----------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, offset of the raster)."""
    magic = data[:2]
    if len(magic) < 2 or magic[:1] != b"P":
        raise MalformedHeader("missing netpbm magic number")
    if magic not in _CHANNELS:
        raise UnsupportedMagic(f"unsupported netpbm magic {magic.decode('latin-1')!r}")
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeader("header ends before width/height/maxval")
        tok = m.group(1)
        if not tok.isdigit():
            raise MalformedHeader(f"non-numeric header field {tok[:16]!r}")
        values.append(int(tok))
        pos = m.end()
    width, height, maxval = values
    if width < 1 or height < 1:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise MalformedHeader(f"maxval {maxval} outside 1..65535")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c"):
        if magic in (b"P5", b"P6"):
            raise MalformedHeader("missing whitespace after maxval")
    return magic, width, height, maxval, pos + 1


def parse_pixmap(data: bytes) -> RasterImage:
    magic, width, height, maxval, offset = _header(data)
    channels = _CHANNELS[magic]
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        raw = data[offset : offset + need]
        if len(raw) < need:
            raise TruncatedPixelData(f"expected {need} raster bytes, got {len(raw)}")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        toks = data[offset:].split()
        if len(toks) < count:
            raise TruncatedPixelData(f"expected {count} samples, got {len(toks)}")
        try:
            values = np.array([int(t) for t in toks[:count]], dtype=np.float64)
        except ValueError as exc:
            raise MalformedHeader(f"non-numeric sample in ASCII raster: {exc}") from exc
    if values.max(initial=0) > maxval:
        raise MalformedHeader("sample value exceeds maxval")
    return RasterImage((values / maxval).reshape(height, width, channels))


def encode_pixmap(img: RasterImage, binary: bool = True, maxval: int = 255) -> bytes:
    """Quantize to ``maxval`` levels and serialize as P5/P6 (binary) or P2/P3."""
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    gray = img.channels == 1
    magic = (b"P5" if gray else b"P6") if binary else (b"P2" if gray else b"P3")
    q = np.rint(np.clip(img.pixels, 0.0, 1.0) * maxval).astype(np.int64)
    header = b"%s\n%d %d\n%d\n" % (magic, img.width, img.height, maxval)
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        return header + q.astype(dtype).tobytes()
    rows = q.reshape(img.height, -1)
    return header + b"".join(b" ".join(b"%d" % v for v in row) + b"\n" for row in rows)


def read_pixmap(path: str | Path) -> RasterImage:
    return parse_pixmap(Path(path).read_bytes())


def write_pixmap(img: RasterImage, path: str | Path, binary: bool = True, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pixmap(img, binary, maxval))


# -- geometry -----------------------------------------------------------------

def short_side_dims(height: int, width: int, target: int) -> tuple[int, int]:
    if target < 1:
        raise ValueError("target must be >= 1")
    short, long = min(height, width), max(height, width)
    # round half away from zero of long*target/short, in exact integer arithmetic
    new_long = max(1, (2 * long * target + short) // (2 * short))
    return (target, new_long) if height <= width else (new_long, target)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: RasterImage, height: int, width: int) -> RasterImage:
    p = img.pixels
    r0, r1, fr = _axis_weights(img.height, height)
    c0, c1, fc = _axis_weights(img.width, width)
    rows = p[r0] * (1.0 - fr)[:, None, None] + p[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return RasterImage(out)


def resize_short_side(img: RasterImage, target: int) -> RasterImage:
    h, w = short_side_dims(img.height, img.width, target)
    return resize_bilinear(img, h, w)


def _keyed_rng(seed: int, sample_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x00{sample_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def crop_offsets(height: int, width: int, cfg: PreprocessConfig, sample_id: str = "") -> tuple[int, int]:
    if height < cfg.crop or width < cfg.crop:
        raise ImageTooSmall(f"{height}x{width} image cannot yield a {cfg.crop}x{cfg.crop} crop")
    if cfg.mode == "center":
        return (height - cfg.crop) // 2, (width - cfg.crop) // 2
    rng = _keyed_rng(cfg.seed, sample_id)
    top = int(rng.integers(0, height - cfg.crop + 1))
    left = int(rng.integers(0, width - cfg.crop + 1))
    return top, left


def crop(img: RasterImage, cfg: PreprocessConfig, sample_id: str = "") -> RasterImage:
    top, left = crop_offsets(img.height, img.width, cfg, sample_id)
    return RasterImage(img.pixels[top : top + cfg.crop, left : left + cfg.crop].copy())


def to_features(img: RasterImage, feature_dim: int) -> np.ndarray:
    """Average-pool the luma plane onto a sqrt(d) x sqrt(d) grid and
    standardize the flattened vector."""
    k = math.isqrt(feature_dim) if feature_dim > 0 else 0
    if k < 1 or k * k != feature_dim:
        raise BadFeatureDim(f"feature_dim {feature_dim} is not a positive perfect square")
    if img.height < k or img.width < k:
        raise BadFeatureDim(f"{img.height}x{img.width} image is smaller than the {k}x{k} pooling grid")
    plane = img.pixels[:, :, 0] if img.channels == 1 else img.pixels @ LUMA
    re_ = (np.arange(k + 1) * img.height) // k
    ce = (np.arange(k + 1) * img.width) // k
    sums = np.add.reduceat(np.add.reduceat(plane, re_[:-1], axis=0), ce[:-1], axis=1)
    pooled = sums / np.outer(np.diff(re_), np.diff(ce))
    v = pooled.ravel()
    v = v - v.mean()
    return v / np.sqrt(max(float(v.var()), VARIANCE_FLOOR))


def preprocess(img: RasterImage, cfg: PreprocessConfig, feature_dim: int, sample_id: str = "") -> np.ndarray:
    return to_features(crop(resize_short_side(img, cfg.short_side), cfg, sample_id), feature_dim)


@lru_cache(maxsize=4096)
def _cached_image(path: str) -> RasterImage:
    return read_pixmap(path)


def load_image(path: str | Path) -> RasterImage:
    return _cached_image(str(Path(path).resolve()))
