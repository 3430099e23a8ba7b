"""Netpbm images and CSV sample windows."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected HxWx3 uint8 image, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"expected HxW uint8 image, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(gray).tobytes())


def write_pbm(path: str | Path, mask: np.ndarray) -> None:
    """Binary PBM (P4); set bits are ``True`` cells (rendered black)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P4\n%d %d\n" % (w, h))
        f.write(np.packbits(mask, axis=1).tobytes())


def _read_header(data: bytes, n_fields: int) -> tuple[str, list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < n_fields + 1:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens[0].decode(), [int(t) for t in tokens[1:]], pos + 1


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2].decode()
    if magic == "P6":
        _, (w, h, maxval), off = _read_header(data, 3)
        if maxval != 255:
            raise ValueError("only maxval 255 supported")
        return np.frombuffer(data, np.uint8, w * h * 3, off).reshape(h, w, 3).copy()
    if magic == "P5":
        _, (w, h, maxval), off = _read_header(data, 3)
        if maxval != 255:
            raise ValueError("only maxval 255 supported")
        return np.frombuffer(data, np.uint8, w * h, off).reshape(h, w).copy()
    if magic == "P4":
        _, (w, h), off = _read_header(data, 2)
        row_bytes = (w + 7) // 8
        packed = np.frombuffer(data, np.uint8, row_bytes * h, off).reshape(h, row_bytes)
        return np.unpackbits(packed, axis=1)[:, :w].astype(bool)
    raise ValueError(f"unsupported netpbm magic {magic!r} in {path}")


def write_window_csv(path: str | Path, channel_names: list[str], samples: np.ndarray) -> None:
    """Samples are ``C x T``; the file has one row per time step."""
    samples = np.asarray(samples, dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(channel_names)
        for row in samples.T:
            w.writerow([repr(float(v)) for v in row])


def read_window_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        names = next(r)
        rows = [[float(v) for v in row] for row in r]
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(names))
    return names, arr.T.copy()
