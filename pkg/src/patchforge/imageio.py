"""Byte-exact image and buffer exports.

* PPM (P6) and PGM (P5): header ``P6\\n<W> <H>\\n255\\n`` (resp. ``P5``)
  followed by 8-bit samples, row-major from the top-left pixel. A real value
  ``x`` in [0, 1] is stored as ``floor(clip(x, 0, 1) * 255 + 0.5)``.
* UV CSV: header ``row,col,u,v`` then one line per masked pixel in row-major
  order, coordinates printed with ``%.9f``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CorruptInputError


def to_bytes(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _write_pnm(path, magic, data):
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_ppm(path, img):
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got {img.shape}")
    _write_pnm(path, "P6", to_bytes(img))


def write_pgm(path, img):
    """Write an (H, W) image as binary PGM; booleans map to 0 / 255."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs an H x W image, got {img.shape}")
    _write_pnm(path, "P5", to_bytes(img.astype(np.float64)))


def _tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptInputError("truncated header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PPM/PGM with maxval 255 as floats in [0, 1]."""
    data = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _tokens(data, 4)
        channels = {b"P6": 3, b"P5": 1}[magic]
        w, h, maxval = int(w), int(h), int(maxval)
    except (KeyError, ValueError, CorruptInputError) as exc:
        raise CorruptInputError(f"{path}: not a binary PPM/PGM file ({exc})") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise CorruptInputError(f"{path}: unsupported size or maxval")
    need = w * h * channels
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise CorruptInputError(f"{path}: expected {need} pixel bytes, found {len(raw)}")
    arr = np.frombuffer(raw, np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_uv_csv(path, uv, mask):
    rows, cols = np.nonzero(np.asarray(mask, bool))
    with open(path, "w", newline="\n") as fh:
        fh.write("row,col,u,v\n")
        for r, c in zip(rows.tolist(), cols.tolist()):
            fh.write(f"{r},{c},{uv[r, c, 0]:.9f},{uv[r, c, 1]:.9f}\n")


def export_buffers(buffers, directory, stem="view"):
    """Write background/light (PPM), mask (PGM) and uv (CSV) of one view."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{stem}_background.ppm", buffers.background)
    write_ppm(d / f"{stem}_light.ppm", buffers.light)
    write_pgm(d / f"{stem}_mask.pgm", buffers.mask)
    write_uv_csv(d / f"{stem}_uv.csv", buffers.uv, buffers.mask)
    return d
