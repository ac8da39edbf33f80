"""Binary portable graymap / pixmap encoders (deterministic bytes)."""

import numpy as np


def encode_pgm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def encode_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"PPM needs an (h, w, 3) uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Inverse of the two encoders above (only the exact header form they emit)."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255":
        raise ValueError("only maxval 255 is supported")
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"unsupported magic {magic!r}")

