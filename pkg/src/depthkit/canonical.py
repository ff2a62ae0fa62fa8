"""Resampling camera images and depth maps into the canonical ERP space.

A lookup table stores, for every ERP pixel, the continuous source-pixel
coordinate its ray projects to. Building it is the expensive part of a
conversion, so tables are cached on disk keyed by a fingerprint of the
camera, the ERP size and the FoV limits.

On-disk table layout (little-endian)::

    b"ERPLUT1" | u32 H | u32 W | H*W records (f32 row, f32 col, u8 valid) | 32-byte fingerprint
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from depthkit.depthmap import DepthMap, as_depth_map
from depthkit.errors import ConfigurationError, DomainError, ShapeError
from depthkit.geometry import (
    CameraKind,
    CameraModel,
    direction_to_ray,
    erp_direction_grid,
    project,
)
from depthkit.io import atomic_write_bytes

LUT_MAGIC = b"ERPLUT1"
LUT_RECORD = np.dtype([("row", "<f4"), ("col", "<f4"), ("valid", "u1")])
INVALID_COORD = -1.0


@dataclass(frozen=True)
class ErpLookupTable:
    """ERP-to-source coordinate map.

    ``source_coords`` is ``(H, W, 2)`` float32 ``(row, col)``; entries where
    ``valid`` is False hold -1. Coordinates are stored at float32 precision
    so that a table read back from the cache resamples bit-identically.
    """

    source_coords: np.ndarray
    valid: np.ndarray
    source_size: tuple[int, int]
    wrap_cols: bool
    fingerprint: bytes

    @property
    def erp_size(self) -> tuple[int, int]:
        return self.valid.shape


def table_fingerprint(src: CameraModel, erp_size, fov_limits=None) -> bytes:
    key = {
        "camera": src.to_dict(),
        "erp_size": [int(erp_size[0]), int(erp_size[1])],
        "fov_limits": None if fov_limits is None else [float(v).hex() for v in fov_limits],
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).digest()


def build_lookup_table(src: CameraModel, erp_size: tuple[int, int], fov_limits=None) -> ErpLookupTable:
    """Lookup table from an ``(H, W)`` ERP into the source camera.

    Args:
        src: Source camera.
        erp_size: ``(H, W)`` of the ERP, at least 2 x 4.
        fov_limits: Optional ``(theta_max, phi_max)``; ERP pixels with
            ``|theta| > theta_max`` or ``|phi| > phi_max`` are invalid.

    An ERP pixel is valid when its ray can be imaged by ``src`` and lands
    inside the hull of source pixel centers, ``[0, H-1] x [0, W-1]``. ERP
    sources wrap around in longitude and are valid everywhere.
    """
    height, width = int(erp_size[0]), int(erp_size[1])
    if height < 2 or width < 4:
        raise ConfigurationError(f"ERP size must be at least 2x4, got {height}x{width}")

    dirs = erp_direction_grid((height, width))
    coords, ok = project(src, direction_to_ray(dirs))
    src_h, src_w = src.size
    wrap = src.kind is CameraKind.EQUIRECT
    row, col = coords[..., 0], coords[..., 1]
    if wrap:
        row = np.clip(row, 0.0, src_h - 1)
        col = np.mod(col, src_w)
        valid = ok.copy()
    else:
        with np.errstate(invalid="ignore"):
            valid = ok & (row >= 0) & (row <= src_h - 1) & (col >= 0) & (col <= src_w - 1)
    if fov_limits is not None:
        theta_max, phi_max = fov_limits
        valid &= (np.abs(dirs.theta) <= theta_max) & (np.abs(dirs.phi) <= phi_max)

    stored = np.full((height, width, 2), INVALID_COORD, dtype=np.float32)
    stored[valid, 0] = row[valid]
    stored[valid, 1] = col[valid]
    if wrap:
        # float32 rounding can push a wrapped column up to exactly W
        stored[..., 1][stored[..., 1] >= src_w] = 0.0
    return ErpLookupTable(stored, valid, (src_h, src_w), wrap, table_fingerprint(src, (height, width), fov_limits))


def _check_source(table: ErpLookupTable, src_img: np.ndarray) -> None:
    if src_img.shape[:2] != tuple(table.source_size):
        raise ShapeError(f"source image {src_img.shape[:2]} does not match table source size {table.source_size}")


def _bilinear_taps(table: ErpLookupTable):
    src_h, src_w = table.source_size
    row = table.source_coords[..., 0].astype(np.float64)[table.valid]
    col = table.source_coords[..., 1].astype(np.float64)[table.valid]
    r0 = np.clip(np.floor(row), 0, max(src_h - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, src_h - 1)
    fr = row - r0
    if table.wrap_cols:
        c0f = np.floor(col)
        fc = col - c0f
        c0 = np.mod(c0f, src_w).astype(np.intp)
        c1 = np.mod(c0 + 1, src_w)
    else:
        c0 = np.clip(np.floor(col), 0, max(src_w - 2, 0)).astype(np.intp)
        c1 = np.minimum(c0 + 1, src_w - 1)
        fc = col - c0
    return (r0, r1, c0, c1), ((1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc)


def _nearest_taps(table: ErpLookupTable):
    src_h, src_w = table.source_size
    row = table.source_coords[..., 0].astype(np.float64)[table.valid]
    col = table.source_coords[..., 1].astype(np.float64)[table.valid]
    r = np.clip(np.floor(row + 0.5), 0, src_h - 1).astype(np.intp)
    c = np.floor(col + 0.5)
    c = np.mod(c, src_w) if table.wrap_cols else np.clip(c, 0, src_w - 1)
    return r, c.astype(np.intp)


def resample(table: ErpLookupTable, src_img, mode: str = "bilinear", src_valid=None):
    """Sample a source image into the ERP grid described by ``table``.

    Args:
        table: Lookup table built for the source camera.
        src_img: ``(Hs, Ws)`` or ``(Hs, Ws, C)`` array.
        mode: ``"bilinear"`` or ``"nearest"``. Use nearest for depth.
        src_valid: Optional source validity mask. Under bilinear sampling an
            output pixel needs all four taps valid.

    Returns:
        ``(erp_image, erp_valid)``; invalid ERP pixels hold 0.
    """
    src_img = np.asarray(src_img)
    _check_source(table, src_img)
    valid = table.valid.copy()
    out_shape = table.erp_size + src_img.shape[2:]

    if mode == "nearest":
        r, c = _nearest_taps(table)
        out = np.zeros(out_shape, dtype=src_img.dtype)
        out[table.valid] = src_img[r, c]
        if src_valid is not None:
            valid[table.valid] = np.asarray(src_valid, dtype=bool)[r, c]
    elif mode == "bilinear":
        (r0, r1, c0, c1), (w00, w01, w10, w11) = _bilinear_taps(table)
        img = src_img.astype(np.float64)
        if img.ndim == 3:
            w00, w01, w10, w11 = (w[:, None] for w in (w00, w01, w10, w11))
        out = np.zeros(out_shape, dtype=np.float64)
        out[table.valid] = w00 * img[r0, c0] + w01 * img[r0, c1] + w10 * img[r1, c0] + w11 * img[r1, c1]
        if src_valid is not None:
            sv = np.asarray(src_valid, dtype=bool)
            valid[table.valid] = sv[r0, c0] & sv[r0, c1] & sv[r1, c0] & sv[r1, c1]
    else:
        raise ConfigurationError(f"unknown resampling mode {mode!r}")

    out[~valid] = 0
    return out, valid


def resample_depth(table: ErpLookupTable, depth, mode: str = "nearest") -> DepthMap:
    """Resample a depth map; nearest by default so depths never blend across edges."""
    depth = as_depth_map(depth)
    values, valid = resample(table, depth.values, mode=mode, src_valid=depth.valid)
    return DepthMap(values, valid)


def fov_aligned_crop(erp_depth, theta_half: float, phi_half: float, extent=(math.pi, math.pi / 2)) -> DepthMap:
    """Centered window of an ERP spanning ``2*theta_half`` by ``2*phi_half``.

    ``extent`` gives the half-extents ``(theta, phi)`` the input covers; a
    full panorama covers ``(pi, pi/2)``. Row and column counts are rounded to
    the nearest even integer.
    """
    erp_depth = as_depth_map(erp_depth)
    theta_in, phi_in = extent
    if not (0 < theta_half <= math.pi and 0 < phi_half <= math.pi / 2):
        raise DomainError(f"half-extents ({theta_half}, {phi_half}) outside (0, pi] x (0, pi/2]")
    if theta_half > theta_in * (1 + 1e-12) or phi_half > phi_in * (1 + 1e-12):
        raise DomainError(f"requested extent ({theta_half}, {phi_half}) exceeds input extent ({theta_in}, {phi_in})")
    height, width = erp_depth.shape
    out_h = max(2, 2 * round(height * phi_half / phi_in / 2))
    out_w = max(2, 2 * round(width * theta_half / theta_in / 2))
    out_h, out_w = min(out_h, height), min(out_w, width)
    r0 = (height - out_h) // 2
    c0 = (width - out_w) // 2
    window = (slice(r0, r0 + out_h), slice(c0, c0 + out_w))
    return DepthMap(erp_depth.values[window], erp_depth.valid[window])


# -- persistence --------------------------------------------------------------


def save_table(table: ErpLookupTable, path: str | Path) -> None:
    height, width = table.erp_size
    records = np.empty(height * width, dtype=LUT_RECORD)
    records["row"] = table.source_coords[..., 0].ravel()
    records["col"] = table.source_coords[..., 1].ravel()
    records["valid"] = table.valid.ravel()
    blob = LUT_MAGIC + struct.pack("<II", height, width) + records.tobytes() + table.fingerprint
    atomic_write_bytes(path, blob)


def load_table(path: str | Path, src: CameraModel, fov_limits=None) -> ErpLookupTable:
    """Read a persisted table, checking it was built for ``src`` and ``fov_limits``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(LUT_MAGIC):
        raise ValueError(f"{path}: not an ERP lookup table")
    height, width = struct.unpack_from("<II", blob, len(LUT_MAGIC))
    start = len(LUT_MAGIC) + 8
    end = start + height * width * LUT_RECORD.itemsize
    if len(blob) != end + 32:
        raise ValueError(f"{path}: wrong file size for a {height}x{width} table")
    fingerprint = blob[end:]
    if fingerprint != table_fingerprint(src, (height, width), fov_limits):
        raise ValueError(f"{path}: fingerprint does not match the requested camera")
    records = np.frombuffer(blob, dtype=LUT_RECORD, count=height * width, offset=start)
    coords = np.stack([records["row"], records["col"]], axis=-1).reshape(height, width, 2).astype(np.float32)
    valid = records["valid"].reshape(height, width).astype(bool)
    return ErpLookupTable(coords, valid, src.size, src.kind is CameraKind.EQUIRECT, fingerprint)


def cached_lookup_table(src: CameraModel, erp_size, fov_limits=None, cache_dir=None) -> tuple[ErpLookupTable, bool]:
    """Build or load a lookup table; returns ``(table, cache_hit)``.

    Without a ``cache_dir`` the table is always built.
    """
    if cache_dir is None:
        return build_lookup_table(src, erp_size, fov_limits), False
    path = Path(cache_dir) / f"{table_fingerprint(src, erp_size, fov_limits).hex()}.erplut"
    if path.exists():
        try:
            return load_table(path, src, fov_limits), True
        except ValueError:
            pass
    table = build_lookup_table(src, erp_size, fov_limits)
    save_table(table, path)
    return table, False
