"""2D rotary positional embeddings with latitude-weighted phases (RoPE-phi).

Channel layout: a ``d``-dimensional token is viewed as ``d/2`` consecutive
pairs ``(2j, 2j+1)``, each rotated as a complex number. Pair slot ``2k``
carries the row phase ``u * psi_k`` and slot ``2k+1`` the column phase
``v * psi_k``, with ``psi_k = 100 ** (-4k/d)``. RoPE-phi multiplies both
phases of a token by ``w(phi) = delta + (1 - delta) * cos(phi)``, where
``phi`` is the latitude of the token's row on the ERP.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from depthkit.errors import ConfigurationError, ShapeError
from depthkit.geometry import erp_pixel_to_direction

DEFAULT_DELTA = 0.5
FREQ_BASE = 100.0


@dataclass(frozen=True)
class TokenGrid:
    """``(h, w, d)`` tokens plus an optional ``(d,)`` CLS token."""

    tokens: np.ndarray
    cls: np.ndarray | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 3:
            raise ShapeError(f"tokens must be (h, w, d), got shape {tokens.shape}")
        if tokens.shape[2] % 4:
            raise ConfigurationError(f"channel count must be divisible by 4, got {tokens.shape[2]}")
        if not np.all(np.isfinite(tokens)):
            raise ConfigurationError("tokens must be finite")
        object.__setattr__(self, "tokens", tokens)
        if self.cls is not None:
            cls = np.asarray(self.cls, dtype=np.float64)
            if cls.shape != (tokens.shape[2],):
                raise ShapeError(f"CLS token must have shape ({tokens.shape[2]},), got {cls.shape}")
            object.__setattr__(self, "cls", cls)

    @property
    def size(self) -> tuple[int, int]:
        return self.tokens.shape[:2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


@dataclass(frozen=True)
class PhaseField:
    phases: np.ndarray  # (h, w, d/2) radians
    weights: np.ndarray  # (h, w) latitude weights
    delta: float

    @property
    def size(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def dim(self) -> int:
        return 2 * self.phases.shape[2]


def frequencies(d: int) -> np.ndarray:
    """The ``d/4`` angular frequencies ``100 ** (-4k/d)``, ``k = 0 .. d/4 - 1``."""
    if d <= 0 or d % 4:
        raise ConfigurationError(f"channel count must be a positive multiple of 4, got {d}")
    k = np.arange(d // 4, dtype=np.float64)
    return FREQ_BASE ** (-4.0 * k / d)


def latitude_weight(phi, delta: float):
    return delta + (1.0 - delta) * np.cos(phi)


def token_latitudes(h: int) -> np.ndarray:
    """Latitude of each token row, sampling row centers of an ``h``-row ERP."""
    return np.asarray(erp_pixel_to_direction(np.arange(h), 0, (h, 1)).phi, dtype=np.float64).reshape(h)


def build_phase_field(size: tuple[int, int], d: int, delta: float | None = DEFAULT_DELTA) -> PhaseField:
    """Phase field for an ``(h, w)`` token grid.

    ``delta=None`` gives plain 2D-RoPE, which is the same field as
    ``delta=1``.
    """
    h, w = size
    if h < 1 or w < 1:
        raise ConfigurationError(f"token grid must be non-empty, got {h}x{w}")
    if delta is None:
        delta = 1.0
    if not 0.0 < delta <= 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1], got {delta}")
    psi = frequencies(d)
    weights = np.repeat(latitude_weight(token_latitudes(h), delta)[:, None], w, axis=1)
    u = np.arange(h, dtype=np.float64)[:, None, None]
    v = np.arange(w, dtype=np.float64)[None, :, None]
    phases = np.empty((h, w, d // 2))
    phases[..., 0::2] = weights[..., None] * (u * psi)
    phases[..., 1::2] = weights[..., None] * (v * psi)
    return PhaseField(phases, weights, float(delta))


def _rotate_pairs(x: np.ndarray, phases: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(phases), np.sin(phases)
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def apply_rotation(field: PhaseField, grid: TokenGrid) -> TokenGrid:
    """Rotate every channel pair of every token by its phase; CLS passes through."""
    if grid.size != field.size or grid.dim != field.dim:
        raise ShapeError(f"token grid {grid.tokens.shape} does not match phase field {field.phases.shape}")
    return TokenGrid(_rotate_pairs(grid.tokens, field.phases), grid.cls)


def attention_logits(field: PhaseField, queries: TokenGrid, keys: TokenGrid) -> np.ndarray:
    """Unscaled dot products of rotated queries and keys, ``(h*w, h*w)``."""
    if queries.tokens.shape != keys.tokens.shape:
        raise ShapeError(f"queries {queries.tokens.shape} and keys {keys.tokens.shape} differ")
    q = apply_rotation(field, queries).tokens.reshape(-1, field.dim)
    k = apply_rotation(field, keys).tokens.reshape(-1, field.dim)
    return q @ k.T


def phase_field_csv(field: PhaseField) -> str:
    """CSV dump with columns ``row, col, slot, phase, weight`` (9 significant digits)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", "slot", "phase", "weight"])
    h, w, slots = field.phases.shape
    for r in range(h):
        for c in range(w):
            weight = f"{field.weights[r, c]:.9g}"
            for s in range(slots):
                writer.writerow([r, c, s, f"{field.phases[r, c, s]:.9g}", weight])
    return buf.getvalue()
