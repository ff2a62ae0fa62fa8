"""Depth-guided scale estimation.

A low-resolution scale map ``S_r`` (one value per ``r x r`` patch) is
upsampled to full resolution with weights derived from the relative depth
itself: every full-resolution pixel compares its depth with the
median-pooled depth of the 3x3 low-resolution neighborhood around its
patch, turns the negative absolute differences into softmax weights over
the 9 slots and takes the weighted sum of the neighboring scales. Pixels
therefore draw their scale from patches at a similar depth, which keeps
object boundaries sharp without any learned parameters.

Neighbor indices are clamped at the low-resolution border (replicate
padding), so every pixel always has 9 slots. Slot ``s`` holds offset
``(s // 3 - 1, s % 3 - 1)``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from depthkit.depthmap import DepthMap, as_depth_map
from depthkit.errors import ConfigurationError, ShapeError
from depthkit.io import atomic_write_bytes
from depthkit.rope_phi import TokenGrid

NUM_SLOTS = 9
CENTER_SLOT = 4
DEFAULT_STRIDE = 14


@dataclass(frozen=True)
class ScaleField:
    """Scale values (low- or full-resolution) and a shift: scalar or map."""

    values: np.ndarray
    shift: float | np.ndarray = 0.0


@dataclass(frozen=True)
class RoutingWeights:
    weights: np.ndarray  # (H, W, 9), rows sum to 1
    neighbor_rows: np.ndarray  # (3, H) low-res row index for dy = -1, 0, 1
    neighbor_cols: np.ndarray  # (3, W) low-res col index for dx = -1, 0, 1
    low_res_shape: tuple[int, int]
    stride: int

    @property
    def anchor(self) -> tuple[np.ndarray, np.ndarray]:
        """Low-res cell ``p_r`` of every full-res row and column."""
        return self.neighbor_rows[1], self.neighbor_cols[1]


def low_res_shape(size: tuple[int, int], r: int) -> tuple[int, int]:
    return (-(-size[0] // r), -(-size[1] // r))


def _check_stride(r) -> int:
    if int(r) != r or r < 1:
        raise ConfigurationError(f"stride must be a positive integer, got {r}")
    return int(r)


def _blocks(a: np.ndarray, r: int, fill) -> np.ndarray:
    """Group a 2-D array into ``(h, w, r*r)`` blocks, padding partial blocks with ``fill``."""
    height, width = a.shape
    h, w = low_res_shape(a.shape, r)
    padded = np.full((h * r, w * r), fill, dtype=np.result_type(a, type(fill)))
    padded[:height, :width] = a
    return padded.reshape(h, r, w, r).transpose(0, 2, 1, 3).reshape(h, w, r * r)


def median_pool(d, r: int) -> DepthMap:
    """Median over each ``r x r`` block, valid pixels only.

    Partial blocks at the right and bottom edges pool what they contain.
    Even counts take the mean of the two middle values. Blocks without a
    valid pixel are invalid.
    """
    r = _check_stride(r)
    d = as_depth_map(d)
    blocks = _blocks(np.where(d.valid, d.values, np.nan), r, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(blocks, axis=-1)
    ok = ~np.isnan(med)
    return DepthMap(np.where(ok, med, 0.0), ok)


def _median_selection(d: DepthMap, r: int):
    """Flat full-res indices of the one or two elements each block median averages."""
    height, width = d.shape
    blocks = _blocks(np.where(d.valid, d.values, np.nan), r, np.nan)
    index = _blocks(np.arange(height * width).reshape(height, width), r, -1)
    order = np.argsort(blocks, axis=-1, kind="stable")
    count = np.sum(~np.isnan(blocks), axis=-1)
    lo = np.maximum((count - 1) // 2, 0)[..., None]
    hi = (count // 2)[..., None]
    pick_lo = np.take_along_axis(index, np.take_along_axis(order, lo, -1), -1)[..., 0]
    pick_hi = np.take_along_axis(index, np.take_along_axis(order, hi, -1), -1)[..., 0]
    return pick_lo, pick_hi, count > 0


def _neighbors(size: tuple[int, int], lo_shape: tuple[int, int], r: int):
    height, width = size
    h, w = lo_shape
    pr = np.minimum(np.arange(height) // r, h - 1)
    pc = np.minimum(np.arange(width) // r, w - 1)
    rows = np.stack([np.clip(pr + dy, 0, h - 1) for dy in (-1, 0, 1)])
    cols = np.stack([np.clip(pc + dx, 0, w - 1) for dx in (-1, 0, 1)])
    return rows, cols


def _gather(lo: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``(h, w)`` low-res grid to ``(H, W, 9)`` neighborhood stack."""
    return np.stack([lo[rows[a][:, None], cols[b][None, :]] for a in range(3) for b in range(3)], axis=-1)


def _scatter(values: np.ndarray, rows: np.ndarray, cols: np.ndarray, lo_shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_gather``: sum ``(H, W, 9)`` contributions back onto the low-res grid."""
    h, w = lo_shape
    flat = np.stack([rows[a][:, None] * w + cols[b][None, :] for a in range(3) for b in range(3)], axis=-1)
    flat = np.broadcast_to(flat, values.shape)
    return np.bincount(flat.ravel(), weights=values.ravel(), minlength=h * w).reshape(h, w)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    none_valid = ~np.any(mask, axis=-1, keepdims=True)
    mask = mask | none_valid
    z = np.where(mask, logits, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def routing_weights(d_hi, d_lo, r: int) -> RoutingWeights:
    """Per-pixel softmax over the negative depth distances to the 9 neighbor cells.

    Args:
        d_hi: Full-resolution relative depth.
        d_lo: ``median_pool(d_hi, r)``.
        r: Pooling stride.

    Invalid low-resolution cells get zero weight and the remaining slots
    are renormalized. A pixel whose 9 slots are all invalid gets uniform
    weights.
    """
    r = _check_stride(r)
    d_hi, d_lo = as_depth_map(d_hi), as_depth_map(d_lo)
    lo_shape = low_res_shape(d_hi.shape, r)
    if d_lo.shape != lo_shape:
        raise ShapeError(f"low-res depth {d_lo.shape} does not match {d_hi.shape} pooled by {r} -> {lo_shape}")
    rows, cols = _neighbors(d_hi.shape, lo_shape, r)
    dist = np.abs(d_hi.values[..., None] - _gather(d_lo.values, rows, cols))
    weights = _masked_softmax(-dist, _gather(d_lo.valid, rows, cols))
    return RoutingWeights(weights, rows, cols, lo_shape, r)


def guided_upsample(s_lo, w: RoutingWeights) -> np.ndarray:
    """Full-resolution map whose pixels are routing-weighted sums of 3x3 low-res values."""
    s_lo = np.asarray(s_lo, dtype=np.float64)
    if s_lo.shape != tuple(w.low_res_shape):
        raise ShapeError(f"low-res map {s_lo.shape} does not match routing grid {w.low_res_shape}")
    nb = _gather(np.nan_to_num(s_lo), w.neighbor_rows, w.neighbor_cols)
    return np.sum(w.weights * nb, axis=-1)


def shift_map_variant(t_lo, w: RoutingWeights) -> np.ndarray:
    """Full-resolution shift map ``T`` routed with the same weights as the scales."""
    return guided_upsample(t_lo, w)


def guided_upsample_grad(s_lo, d_hi, d_lo, r: int, upstream, through_pool: bool = True):
    """Backward pass of ``guided_upsample(s_lo, routing_weights(d_hi, d_lo, r))``.

    Args:
        s_lo: Low-resolution scales.
        d_hi: Full-resolution relative depth.
        d_lo: Low-resolution depth used by the forward pass.
        r: Stride.
        upstream: Gradient of the objective with respect to the output.
        through_pool: Treat ``d_lo`` as ``median_pool(d_hi, r)`` and
            propagate through the median selection as well. With False,
            ``d_lo`` is held fixed.

    Returns:
        ``(grad_s_lo, grad_d_hi)``. The absolute value uses subgradient 0 at
        ties.
    """
    r = _check_stride(r)
    d_hi, d_lo = as_depth_map(d_hi), as_depth_map(d_lo)
    rw = routing_weights(d_hi, d_lo, r)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != d_hi.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {d_hi.shape}")
    s_lo = np.asarray(s_lo, dtype=np.float64)
    rows, cols = rw.neighbor_rows, rw.neighbor_cols
    nb_s = _gather(np.nan_to_num(s_lo), rows, cols)
    out = np.sum(rw.weights * nb_s, axis=-1)

    grad_s_lo = _scatter(upstream[..., None] * rw.weights, rows, cols, rw.low_res_shape)

    # softmax over logits -dist: d out / d logit_s = W_s (S_s - out)
    g_logit = upstream[..., None] * rw.weights * (nb_s - out[..., None])
    sign = np.sign(d_hi.values[..., None] - _gather(d_lo.values, rows, cols))
    g_hi_direct = -g_logit * sign
    grad_d_hi = np.sum(g_hi_direct, axis=-1)

    if through_pool:
        grad_d_lo = _scatter(-g_hi_direct, rows, cols, rw.low_res_shape)
        pick_lo, pick_hi, has = _median_selection(d_hi, r)
        flat = grad_d_hi.ravel()
        half = 0.5 * grad_d_lo[has]
        np.add.at(flat, pick_lo[has], half)
        np.add.at(flat, pick_hi[has], half)
        grad_d_hi = flat.reshape(d_hi.shape)
    return grad_s_lo, grad_d_hi


# -- toy scale head -----------------------------------------------------------

HEAD_TENSORS = (
    "attn_q",
    "attn_k",
    "attn_v",
    "scale_w1",
    "scale_b1",
    "scale_w2",
    "scale_b2",
    "shift_w1",
    "shift_b1",
    "shift_w2",
    "shift_b2",
)
HEAD_MAGIC = b"DGSEW1"


@dataclass(frozen=True)
class HeadWeights:
    """Parameters of the toy scale/shift head, keyed by ``HEAD_TENSORS`` names."""

    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(HEAD_TENSORS) - set(self.tensors)
        if missing:
            raise ConfigurationError(f"head weights missing tensors {sorted(missing)}")
        t = {name: np.asarray(self.tensors[name], dtype=np.float64) for name in HEAD_TENSORS}
        d = t["attn_q"].shape[0]
        hidden = t["scale_b1"].shape[0]
        expected = {
            "attn_q": (d, d),
            "attn_k": (d, d),
            "attn_v": (d, d),
            "scale_w1": (d, hidden),
            "scale_b1": (hidden,),
            "scale_w2": (hidden, 1),
            "scale_b2": (1,),
            "shift_w1": (d, hidden),
            "shift_b1": (hidden,),
            "shift_w2": (hidden, 1),
            "shift_b2": (1,),
        }
        for name, shape in expected.items():
            if t[name].shape != shape:
                raise ConfigurationError(f"head tensor {name} has shape {t[name].shape}, expected {shape}")
        object.__setattr__(self, "tensors", t)

    @property
    def dim(self) -> int:
        return self.tensors["attn_q"].shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_head_weights(d: int, seed: int = 42, hidden: int | None = None) -> HeadWeights:
    """Random head weights (hidden width ``2d`` by default), rounded to float32.

    The output biases start at softplus^-1(1) so fresh heads predict unit
    scale.
    """
    rng = np.random.default_rng(seed)
    hidden = 2 * d if hidden is None else hidden
    bias0 = math.log(math.expm1(1.0))
    t = {
        "attn_q": rng.normal(0.0, d**-0.5, (d, d)),
        "attn_k": rng.normal(0.0, d**-0.5, (d, d)),
        "attn_v": rng.normal(0.0, d**-0.5, (d, d)),
        "scale_w1": rng.normal(0.0, d**-0.5, (d, hidden)),
        "scale_b1": rng.normal(0.0, 0.1, hidden),
        "scale_w2": rng.normal(0.0, hidden**-0.5, (hidden, 1)),
        "scale_b2": np.array([bias0]),
        "shift_w1": rng.normal(0.0, d**-0.5, (d, hidden)),
        "shift_b1": rng.normal(0.0, 0.1, hidden),
        "shift_w2": rng.normal(0.0, hidden**-0.5, (hidden, 1)),
        "shift_b2": np.array([bias0]),
    }
    return HeadWeights({k: v.astype(np.float32).astype(np.float64) for k, v in t.items()})


def softplus(x):
    return np.logaddexp(0.0, x)


def _mlp(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    return softplus(np.maximum(x @ w1 + b1, 0.0) @ w2 + b2)[..., 0]


def scale_head(f_g: TokenGrid, weights: HeadWeights) -> ScaleField:
    """Toy patch-level scale head: self-attention then a 2-layer MLP per token.

    Queries are the ``h*w`` patch tokens; keys and values also include the
    CLS token. Hidden layers use ReLU and outputs go through softplus, so
    scales are positive. The shift comes from a separate MLP on the CLS
    token.
    """
    if f_g.cls is None:
        raise ConfigurationError("scale head needs a CLS token")
    if f_g.dim != weights.dim:
        raise ConfigurationError(f"token dim {f_g.dim} does not match head dim {weights.dim}")
    h, w = f_g.size
    x = f_g.tokens.reshape(h * w, f_g.dim)
    kv = np.vstack([x, f_g.cls[None, :]])
    q = x @ weights["attn_q"]
    k = kv @ weights["attn_k"]
    v = kv @ weights["attn_v"]
    logits = q @ k.T / math.sqrt(f_g.dim)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    attended = attn @ v
    scales = _mlp(attended, weights["scale_w1"], weights["scale_b1"], weights["scale_w2"], weights["scale_b2"])
    shift = _mlp(f_g.cls, weights["shift_w1"], weights["shift_b1"], weights["shift_w2"], weights["shift_b2"])
    return ScaleField(scales.reshape(h, w), float(shift))


def save_head_weights(weights: HeadWeights, path: str | Path) -> None:
    """Write ``DGSEW1`` | u32 count | manifest (name, rank, dims) | row-major f32 payloads."""
    parts = [HEAD_MAGIC, struct.pack("<I", len(HEAD_TENSORS))]
    for name in HEAD_TENSORS:
        arr = weights[name]
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for name in HEAD_TENSORS:
        parts.append(np.ascontiguousarray(weights[name], dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_head_weights(path: str | Path) -> HeadWeights:
    blob = Path(path).read_bytes()
    if not blob.startswith(HEAD_MAGIC):
        raise ConfigurationError(f"{path}: not a DGSE head weight file")
    pos = len(HEAD_MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        manifest.append((name, dims))
    tensors = {}
    for name, dims in manifest:
        n = math.prod(dims)
        if pos + 4 * n > len(blob):
            raise ConfigurationError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 4 * n
    return HeadWeights(tensors)
