"""Binary 8-bit portable graymap (P5) files."""

import numpy as np

from .errors import InvalidInputError


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise InvalidInputError(f"expected a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise InvalidInputError("pixel values outside [0, 255]")
        image = image.astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


def _tokens(data):
    """Yield (token, end_offset) for the three header fields after the magic."""
    pos = 2
    for _ in range(3):
        while True:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
                continue
            break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError("truncated PGM header")
        yield int(data[start:pos]), pos


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM (P5) file")
    (w, _), (h, _), (maxval, end) = list(_tokens(data))
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = data[end + 1:end + 1 + w * h]
    if len(pixels) != w * h:
        raise InvalidInputError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()
