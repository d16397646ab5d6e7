"""Property image decoding, preprocessing, and multi-crop augmentation.

Supported formats are PPM (P6, maxval 255) and PNG restricted to 8-bit
RGB/RGBA (color types 2 and 6, no interlacing); alpha is dropped. Decoders
are self-contained so the byte-level behavior is pinned down and testable
against an independent reference decoder.

Backbone inputs are normalized with the usual (0.485, 0.456, 0.406) /
(0.229, 0.224, 0.225) channel statistics.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng, check_finite

NORM_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
NORM_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageDecodeError(ValueError):
    """The byte stream is not a decodable image in a supported format."""


@dataclass
class RasterImage:
    """8-bit RGB raster, row-major, channels interleaved."""

    pixels: np.ndarray  # uint8, shape (height, width, 3)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixel array, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3


def load_image(path) -> RasterImage:
    """Decode a PPM (P6) or PNG (8-bit RGB/RGBA) file."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[: len(_PNG_SIGNATURE)] == _PNG_SIGNATURE:
        return decode_png(data)
    raise ImageDecodeError(f"{path}: not a PPM (P6) or PNG file")


def decode_ppm(data: bytes) -> RasterImage:
    """Parse a binary PPM: 'P6', ASCII width/height/maxval, one whitespace, raw bytes."""
    if data[:2] != b"P6":
        raise ImageDecodeError("missing P6 magic")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated PPM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise ImageDecodeError("malformed PPM header") from exc
    pos += 1  # the single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageDecodeError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise ImageDecodeError(f"unsupported PPM maxval {maxval} (must be 255)")
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise ImageDecodeError(f"truncated PPM payload: need {need} bytes, have {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return RasterImage(pixels)


def save_ppm(img: RasterImage, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def decode_png(data: bytes) -> RasterImage:
    """Minimal PNG decoder for 8-bit color types 2 (RGB) and 6 (RGBA)."""
    if data[: len(_PNG_SIGNATURE)] != _PNG_SIGNATURE:
        raise ImageDecodeError("missing PNG signature")
    pos = len(_PNG_SIGNATURE)
    header = None
    idat = bytearray()
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageDecodeError("truncated PNG chunk header")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise ImageDecodeError("truncated PNG chunk")
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise ImageDecodeError(f"PNG chunk {ctype!r} fails CRC")
        pos += 12 + length
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.extend(body)
        elif ctype == b"IEND":
            break
    if header is None:
        raise ImageDecodeError("PNG missing IHDR")
    width, height, depth, color, comp, filt, interlace = header
    if depth != 8:
        raise ImageDecodeError(f"unsupported PNG bit depth {depth}")
    if color not in (2, 6):
        raise ImageDecodeError(f"unsupported PNG color type {color} (need RGB or RGBA)")
    if comp != 0 or filt != 0 or interlace != 0:
        raise ImageDecodeError("unsupported PNG compression/filter/interlace mode")
    nchan = 3 if color == 2 else 4
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise ImageDecodeError("corrupt PNG pixel stream") from exc
    stride = width * nchan
    if len(raw) != height * (stride + 1):
        raise ImageDecodeError("PNG pixel stream has wrong length")
    pixels = _unfilter_scanlines(raw, height, stride, nchan)
    pixels = pixels.reshape(height, width, nchan)
    return RasterImage(pixels[:, :, :3])


def _unfilter_scanlines(raw: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for row in range(height):
        offset = row * (stride + 1)
        ftype = raw[offset]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1).copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (int(line[i]) + int(line[i - bpp])) & 0xFF
        elif ftype == 2:  # Up
            line = (line.astype(np.int16) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                line[i] = (int(line[i]) + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = int(line[i - bpp]) if i >= bpp else 0
                up = int(prev[i])
                ul = int(prev[i - bpp]) if i >= bpp else 0
                p = left + up - ul
                pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
                if pa <= pb and pa <= pc:
                    pred = left
                elif pb <= pc:
                    pred = up
                else:
                    pred = ul
                line[i] = (int(line[i]) + pred) & 0xFF
        else:
            raise ImageDecodeError(f"unknown PNG filter type {ftype}")
        out[row] = line
        prev = line
    return out


def resize_bilinear(img: RasterImage, out_h: int, out_w: int) -> RasterImage:
    """Bilinear resampling with half-pixel-center alignment."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h == img.height and out_w == img.width:
        return RasterImage(img.pixels.copy())
    src = img.pixels.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (img.height / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (img.width / out_w) - 0.5
    ys = np.clip(ys, 0.0, img.height - 1)
    xs = np.clip(xs, 0.0, img.width - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def center_crop(img: RasterImage, size: int) -> RasterImage:
    """Centered size x size window; odd margins round down."""
    if size > min(img.height, img.width):
        raise ValueError(f"crop {size} exceeds image {img.height}x{img.width}")
    top = (img.height - size) // 2
    left = (img.width - size) // 2
    return RasterImage(img.pixels[top : top + size, left : left + size].copy())


def normalize(img: RasterImage) -> np.ndarray:
    """Scale to [0,1] and z-score per channel; returns a float32 (3, H, W) tensor."""
    chw = img.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0
    out = (chw - NORM_MEAN[:, None, None]) / NORM_STD[:, None, None]
    return check_finite(out, "normalized image")


def denormalize(t: np.ndarray) -> RasterImage:
    """Inverse of normalize, rounding back to 8-bit samples."""
    chw = t * NORM_STD[:, None, None] + NORM_MEAN[:, None, None]
    pixels = np.clip(np.rint(chw * 255.0), 0, 255).astype(np.uint8)
    return RasterImage(pixels.transpose(1, 2, 0))


@dataclass(frozen=True)
class CropSpec:
    """Multi-crop augmentation parameters (two global views plus local views)."""

    global_size: int = 224
    local_size: int = 96
    local_count: int = 8
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_probability: float = 0.5
    brightness_jitter: float = 0.4


def _random_resized_crop(img: RasterImage, rng: Rng, scale, aspect, out_size: int) -> RasterImage:
    area = img.height * img.width
    s = rng.uniform(scale[0], scale[1])
    log_a = rng.uniform(np.log(aspect[0]), np.log(aspect[1]))
    a = float(np.exp(log_a))
    w = max(1, min(img.width, int(round(np.sqrt(area * s * a)))))
    h = max(1, min(img.height, int(round(np.sqrt(area * s / a)))))
    top = int(rng.integers(0, img.height - h + 1))
    left = int(rng.integers(0, img.width - w + 1))
    window = RasterImage(img.pixels[top : top + h, left : left + w].copy())
    return resize_bilinear(window, out_size, out_size)


def _augment_view(img: RasterImage, rng: Rng, spec: CropSpec, scale, out_size: int) -> np.ndarray:
    view = _random_resized_crop(img, rng, scale, spec.aspect_range, out_size)
    pixels = view.pixels
    if rng.uniform() < spec.flip_probability:
        pixels = pixels[:, ::-1, :]
    factor = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    pixels = np.clip(np.rint(pixels.astype(np.float64) * factor), 0, 255).astype(np.uint8)
    return normalize(RasterImage(pixels))


def multi_crop(img: RasterImage, rng: Rng, spec: CropSpec) -> list[np.ndarray]:
    """Two global views plus spec.local_count local views, in that order.

    Each view gets an independent flip and multiplicative brightness jitter.
    The draw order (scale, aspect, position, flip, brightness per view) is
    fixed, so a fixed rng seed reproduces the view list bit for bit.
    """
    views = [
        _augment_view(img, rng, spec, spec.global_scale, spec.global_size)
        for _ in range(2)
    ]
    views.extend(
        _augment_view(img, rng, spec, spec.local_scale, spec.local_size)
        for _ in range(spec.local_count)
    )
    return views
