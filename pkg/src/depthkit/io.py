"""PFM depth maps, PGM masks and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        # mkstemp creates 0600 files; give the result ordinary permissions
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_token(f) -> bytes:
    token = b""
    while True:
        c = f.read(1)
        if not c:
            return token
        if c == b"#" and not token:
            f.readline()
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Write a single-channel (``Pf``) or 3-channel (``PF``) PFM.

    Always little-endian (scale -1.0). Rows are stored bottom-to-top as the
    format requires.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        header = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs an HxW or HxWx3 array, got shape {image.shape}")
    height, width = image.shape[:2]
    payload = np.ascontiguousarray(np.flipud(image).astype("<f4")).tobytes()
    atomic_write_bytes(path, header + b"\n%d %d\n-1.0\n" % (width, height) + payload)


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM into a float32 array with row 0 at the top."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic == b"Pf":
            channels = 1
        elif magic == b"PF":
            channels = 3
        else:
            raise ValueError(f"{path}: not a PFM file (magic {magic!r})")
        width = int(_read_token(f))
        height = int(_read_token(f))
        scale = float(_read_token(f))
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pgm_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a boolean mask as binary PGM, 255 where valid and 0 elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    payload = np.where(mask, 255, 0).astype(np.uint8).tobytes()
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (width, height) + payload)


def read_pgm_mask(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM; nonzero pixels are valid."""
    with open(path, "rb") as f:
        if _read_token(f) != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval > 255:
            raise ValueError(f"{path}: 16-bit PGM masks are not supported")
        data = np.frombuffer(f.read(width * height), dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(height, width) > 0
