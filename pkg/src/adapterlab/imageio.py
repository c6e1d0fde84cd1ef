"""Binary PPM/PGM writers and readers for images in [-1, 1] and heatmaps."""

import json

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255], clipped."""
    return np.clip((img + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """img: (3, H, W) in [-1, 1], written as binary P6."""
    c, h, w = img.shape
    assert c == 3, "PPM expects an RGB image"
    data = to_uint8(img).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm up to 8-bit quantization; returns (3, H, W) in [-1, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        assert magic == b"P6", f"not a binary PPM: {magic!r}"
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
    return img / maxval * 2.0 - 1.0


def write_pgm(path, heatmap: np.ndarray, sidecar: bool = True) -> None:
    """heatmap: (H, W) arbitrary range; normalized to 8 bits with the original
    min/max recorded in a JSON sidecar next to the image."""
    h, w = heatmap.shape
    lo, hi = float(heatmap.min()), float(heatmap.max())
    span = hi - lo if hi > lo else 1.0
    data = np.clip((heatmap - lo) / span * 255.0, 0.0, 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())
    if sidecar:
        with open(f"{path}.json", "w") as fh:
            json.dump({"min": lo, "max": hi}, fh)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        assert magic == b"P5", f"not a binary PGM: {magic!r}"
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()
        raw = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return raw.reshape(h, w).astype(np.float64)
