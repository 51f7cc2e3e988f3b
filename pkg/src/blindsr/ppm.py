"""Minimal netpbm reader/writer: binary PPM (P6) and PGM (P5), 8-bit only.

Images cross this boundary as float arrays in [0, 1]; quantization to the
0..255 byte range happens here and nowhere else.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageIOError(IOError):
    """A netpbm file is missing, malformed or uses an unsupported variant."""


def _tokens(buf: bytes):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    while i < len(buf):
        c = buf[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace():
                j += 1
            yield buf[i:j], j
            i = j


def read_image(path) -> np.ndarray:
    """Read a P5/P6 file into a float array in [0, 1].

    Returns:
        (H, W) for grayscale, (H, W, 3) for color.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ImageIOError(f"cannot read image file {path}: {e}") from e
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
        if magic not in (b"P5", b"P6"):
            raise ImageIOError(f"{path}: unsupported netpbm magic {magic!r} (want P5/P6)")
        (w, _), (h, _), (maxval, end) = next(toks), next(toks), next(toks)
        w, h, maxval = int(w), int(h), int(maxval)
    except (StopIteration, ValueError) as e:
        raise ImageIOError(f"{path}: malformed netpbm header") from e
    if maxval != 255:
        raise ImageIOError(f"{path}: only 8-bit images supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    start = end + 1  # single whitespace byte after maxval
    count = w * h * channels
    raster = buf[start : start + count]
    if len(raster) != count:
        raise ImageIOError(f"{path}: expected {count} raster bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return arr.reshape(h, w, 3)
    return arr.reshape(h, w)


def write_image(path, img: np.ndarray):
    """Write a [0,1] float array as P6 (H,W,3) or P5 (H,W), clamping first."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ImageIOError(f"cannot write image of shape {img.shape} (want HxW or HxWx3)")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = magic + b"\n%d %d\n255\n" % (img.shape[1], img.shape[0])
    try:
        path.write_bytes(header + data.tobytes())
    except OSError as e:
        raise ImageIOError(f"cannot write image file {path}: {e}") from e
