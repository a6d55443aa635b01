"""Binary PPM (P6) and PGM (P5) reading and writing.

Colour images are stored 8-bit.  Depth maps can be written as 16-bit PGM
after scaling by a caller-chosen ``max_depth``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed image file; carries the path and the offending byte offset."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


def _quantize(img: np.ndarray, maxval: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return np.rint(np.clip(img, 0.0, 1.0) * maxval)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` image with values in [0, 1] as 8-bit P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = _quantize(img, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path: str | Path, img: np.ndarray, maxval: int = 65535) -> None:
    """Write an ``(H, W)`` array with values in [0, 1] as P5 (16-bit when ``maxval > 255``)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in [1, 65535]")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else np.uint8
    data = _quantize(img, maxval).astype(dtype)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + data.tobytes())


def _parse_header(path, buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return ``(width, height, maxval, data_offset)``."""
    if buf[:2] != magic:
        raise ImageFormatError(path, 0, f"expected magic {magic.decode()}, found {buf[:2]!r}")
    pos, fields = 2, []
    while len(fields) < 3:
        # whitespace and comments
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                    pos += 1
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageFormatError(path, pos, "expected a decimal header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(path, pos, "header must end with a single whitespace byte")
    w, h, maxval = fields
    if w == 0 or h == 0:
        raise ImageFormatError(path, 3, f"empty image {w}x{h}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(path, pos - 1, f"maxval {maxval} out of range")
    return w, h, maxval, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, off = _parse_header(path, buf, magic)
    bpp = 2 if maxval > 255 else 1
    need = w * h * channels * bpp
    if len(buf) - off < need:
        raise ImageFormatError(path, len(buf), f"truncated pixel data: need {need} bytes after "
                                                f"offset {off}, have {len(buf) - off}")
    raw = np.frombuffer(buf, dtype=">u2" if bpp == 2 else np.uint8, count=w * h * channels, offset=off)
    if raw.max(initial=0) > maxval:
        bad = int(np.argmax(raw > maxval))
        raise ImageFormatError(path, off + bad * bpp, f"sample exceeds maxval {maxval}")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return raw.reshape(shape).astype(np.float64) / maxval


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file into an ``(H, W, 3)`` float array in [0, 1]."""
    return _read(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 file into an ``(H, W)`` float array in [0, 1]."""
    return _read(path, b"P5", 1)
