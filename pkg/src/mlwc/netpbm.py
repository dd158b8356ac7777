"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit samples only."""
from __future__ import annotations

import numpy as np

_WHITESPACE = b" \t\r\n\v\f"
_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


class NetpbmError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos >= n:
            raise NetpbmError("truncated header")
        if data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def parse_netpbm(data: bytes) -> np.ndarray:
    """Decode a P5/P6 image to a float64 array (C, H, W) with values in [0, 1]."""
    if data[:2] not in _MAGIC_CHANNELS:
        raise NetpbmError(f"bad magic {data[:2]!r}; expected b'P5' or b'P6'")
    channels = _MAGIC_CHANNELS[data[:2]]
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"non-integer header field in {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid image size {width}x{height}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"maxval {maxval} unsupported; must be in 1..255")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after maxval")
    pos += 1
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise NetpbmError(f"truncated pixel payload: expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


def emit_netpbm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Encode a (C, H, W) array with values in [0, 1] as P5 (C=1) or P6 (C=3)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise NetpbmError(f"expected (1|3, H, W) image, got shape {image.shape}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"maxval {maxval} unsupported; must be in 1..255")
    c, h, w = image.shape
    magic = b"P5" if c == 1 else b"P6"
    raster = np.clip(np.rint(image * maxval), 0, maxval).astype(np.uint8)
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + raster.transpose(1, 2, 0).tobytes()


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read())


def write_netpbm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(emit_netpbm(image))
