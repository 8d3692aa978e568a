"""File helpers: atomic writes, staged output directories, and PGM/PPM rasters."""

from __future__ import annotations

import contextlib
import os
import shutil
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextlib.contextmanager
def staged_output(out_dir: str | Path) -> Iterator[Path]:
    """Yield a scratch directory whose contents are moved into ``out_dir`` on success.

    On any exception the scratch directory is removed, so a failed command leaves
    no partial outputs behind.
    """
    out_dir = Path(out_dir)
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=out_dir, prefix=".staging-"))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created and not any(out_dir.iterdir()):
            out_dir.rmdir()
        raise
    for src in sorted(stage.rglob("*")):
        if src.is_dir():
            continue
        dest = out_dir / src.relative_to(stage)
        dest.parent.mkdir(parents=True, exist_ok=True)
        os.replace(src, dest)
    shutil.rmtree(stage, ignore_errors=True)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _read_pnm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image, found {tok!r}")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, mv = int(width), int(height), int(maxval)
    if mv > 255:
        raise ValueError(f"{path}: only 8-bit images are supported (maxval {mv})")
    pos += 1  # single whitespace byte after maxval
    count = w * h * channels
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return pixels.reshape(shape)


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary (P5) 8-bit greyscale image as a (H, W) uint8 array."""
    return _read_pnm(path, b"P5", 1)


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary (P6) 8-bit colour image as a (H, W, 3) uint8 array."""
    return _read_pnm(path, b"P6", 3)


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + image.tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    return f"P6\n{w} {h}\n255\n".encode() + image.tobytes()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm(image))


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))
