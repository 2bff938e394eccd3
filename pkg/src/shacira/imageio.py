"""8-bit RGB image files: binary PPM always, PNG when Pillow is installed."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

__all__ = ["ImageFormatError", "from_uint8", "read_image", "to_uint8", "write_image"]


class ImageFormatError(ValueError):
    pass


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half to even onto 0..255."""
    return np.rint(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def _parse_ppm(data: bytes) -> np.ndarray:
    fields = []
    pos = 0
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0][:8]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field") from None
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError("PPM has an empty dimension")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ImageFormatError("missing separator after PPM header")
    pos += 1
    n = width * height * 3
    body = data[pos:pos + n]
    if len(body) != n:
        raise ImageFormatError(f"PPM pixel data has {len(body)} bytes, expected {n}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def read_image(path) -> np.ndarray:
    """Load an RGB image as ``(H, W, 3)`` floats ``v / 255``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return from_uint8(_parse_ppm(data))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise ImageFormatError("PNG input needs Pillow (pip install artifact[png])") from None
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    raise ImageFormatError(f"{path}: unrecognized image format (expected binary PPM or PNG)")


def write_image(path, pixels: np.ndarray) -> None:
    """Write ``(H, W, 3)`` floats as 8-bit PPM, or PNG when the suffix is ``.png``."""
    path = Path(path)
    raw = to_uint8(pixels)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise ImageFormatError("PNG output needs Pillow (pip install artifact[png])") from None
        Image.fromarray(raw, "RGB").save(path)
        return
    h, w, _ = raw.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes())
