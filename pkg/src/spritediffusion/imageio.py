"""Image file I/O: 8-bit PNG via Pillow plus an uncompressed PPM fallback
writer so fixture tests never depend on a compression codec."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def write_png(path, img01_chw: np.ndarray) -> None:
    arr = to_uint8(img01_chw).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_uint8(arr.transpose(2, 0, 1))


def write_ppm(path, img01_chw: np.ndarray) -> None:
    arr = to_uint8(img01_chw).transpose(1, 2, 0)
    h, w, _ = arr.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        parts.append(raw[start:pos])
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace after header
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3).transpose(2, 0, 1))


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    return read_png(path)


def write_image(path, img01_chw: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img01_chw)
    else:
        write_png(path, img01_chw)
