"""Binary PPM (P6) and PGM (P5) images, 8-bit, mapped to [-1, 1] floats.

A byte v reads as v/255*2 - 1; writing rounds and clips the inverse map.
Emitted bytes are a pure function of the array, so equal arrays give
byte-identical files.
"""

from __future__ import annotations

import numpy as np


def _encode(values: np.ndarray) -> np.ndarray:
    v = (np.clip(values, -1.0, 1.0) + 1.0) * 0.5 * 255.0
    return np.rint(v).astype(np.uint8)


def _decode(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0 * 2.0 - 1.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write (H, W, 3) floats in [-1, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_ppm: need (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_encode(image).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write (H, W) floats in [-1, 1] as binary P5."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm: need (H, W), got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_encode(image).tobytes())


def _read_header_token(f) -> bytes:
    """Next whitespace-delimited token, skipping # comments to end of line."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated image header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_image(path) -> np.ndarray:
    """Read P6 to (H, W, 3) or P5 to (H, W), floats in [-1, 1]."""
    with open(path, "rb") as f:
        magic = _read_header_token(f)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported image magic {magic!r} in {path}")
        w = int(_read_header_token(f))
        h = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ValueError(f"only 8-bit images supported, maxval={maxval} in {path}")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise ValueError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    arr = arr.reshape((h, w, 3)) if channels == 3 else arr.reshape((h, w))
    return _decode(arr)
