"""Binary PPM (P6) / PGM (P5) frames, 8-bit, row-major."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    v = np.floor(np.clip(np.asarray(values, dtype=float), 0.0, 1.0) * 255.0 + 0.5)
    return v.astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    arr = rgb if rgb.dtype == np.uint8 else quantize(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    arr = gray if gray.dtype == np.uint8 else quantize(gray)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    body = raw[pos + 1:]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
