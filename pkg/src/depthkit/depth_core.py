"""Median-scaling normalization, metric-depth composition, SIlog loss and metrics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import astuple, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from depthkit.depthmap import DepthMap, as_depth_map
from depthkit.errors import ConfigurationError, DegenerateInputError, ShapeError
from depthkit.io import atomic_write_bytes

logger = logging.getLogger(__name__)

DELTA_BASE = 1.25
SQRT_SINGULARITY = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.85
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.eps > 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")


RELATIVE_LOSS = LossConfig(lam=1.0)
METRIC_LOSS = LossConfig(lam=0.85)


@dataclass(frozen=True)
class EvalReport:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    rmse: float
    valid_count: int


def median_scale_normalize(d_hat) -> tuple[DepthMap, float]:
    """Divide a relative depth map by its median over valid pixels.

    Returns the normalized map and the median that was divided out.
    """
    d_hat = as_depth_map(d_hat)
    vals = d_hat.valid_values()
    if vals.size == 0:
        raise DegenerateInputError("median scaling needs at least one valid pixel")
    s_hat = float(np.median(vals))
    if not s_hat > 0:
        raise DegenerateInputError(f"median must be positive, got {s_hat}")
    return DepthMap(d_hat.values / s_hat, d_hat.valid), s_hat


def compose_metric(d_rel, scale, shift=0.0) -> DepthMap:
    """Metric depth ``scale * d_rel + shift``, elementwise.

    ``scale`` may be a scalar or a full-resolution scale map; ``shift`` a
    scalar or a full-resolution shift map. The validity mask of ``d_rel`` is
    kept as is; non-positive results on valid pixels are logged.
    """
    d_rel = as_depth_map(d_rel)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    for name, arr in (("scale", scale), ("shift", shift)):
        if arr.ndim != 0 and arr.shape != d_rel.shape:
            raise ShapeError(f"{name} map {arr.shape} does not match depth {d_rel.shape}")
    metric = scale * d_rel.values + shift
    bad = int(np.count_nonzero(d_rel.valid & ~(metric > 0)))
    if bad:
        logger.warning("compose_metric: %d valid pixel(s) have non-positive metric depth", bad)
    return DepthMap(metric, d_rel.valid)


def _log_errors(pred: DepthMap, gt: DepthMap, eps: float):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = pred.valid & gt.valid
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise DegenerateInputError("prediction and ground truth share no valid pixel")
    p = pred.values[mask]
    floored = p < eps
    p = np.maximum(p, eps)
    err = np.log(np.maximum(gt.values[mask], eps)) - np.log(p)
    return mask, err, p, floored


def silog_loss(pred, gt, cfg: LossConfig = METRIC_LOSS, form: str = "var") -> tuple[float, np.ndarray]:
    """Scale-invariant log loss and its gradient with respect to ``pred``.

    With ``e_p = ln gt_p - ln pred_p`` over the shared valid pixels:

    * ``form="sum"``: ``sqrt(sum(e^2)/n - lam * sum(e)^2 / n^2)``, with the
      sums taken in exact rational arithmetic so the subtraction does not
      cancel catastrophically. Meant for verification on small inputs.
    * ``form="var"``: ``sqrt(Var[e] + (1 - lam) * E[e]^2)`` with a centered
      variance.

    Predictions below ``cfg.eps`` are floored and receive zero gradient.
    At a loss below 1e-12 the square root is not differentiable and the
    returned gradient is zero.
    """
    pred, gt = as_depth_map(pred), as_depth_map(gt)
    mask, err, p, floored = _log_errors(pred, gt, cfg.eps)
    n = err.size
    mean = float(np.mean(err))

    if form == "var":
        centered = err - mean
        radicand = float(np.mean(centered * centered)) + (1.0 - cfg.lam) * mean * mean
    elif form == "sum":
        exact = [Fraction(float(e)) for e in err]
        s1 = sum(exact, Fraction(0))
        s2 = sum((e * e for e in exact), Fraction(0))
        radicand = float(s2 / n - Fraction(cfg.lam) * s1 * s1 / (n * n))
    else:
        raise ConfigurationError(f"unknown SIlog form {form!r}")

    loss = float(np.sqrt(max(radicand, 0.0)))
    grad = np.zeros(pred.shape)
    if loss >= SQRT_SINGULARITY:
        d_radicand = 2.0 / n * (err - cfg.lam * mean)
        g = d_radicand / (2.0 * loss) * (-1.0 / p)
        g[floored] = 0.0
        grad[mask] = g
    return loss, grad


def evaluate(pred, gt, depth_cap: float | None = None) -> EvalReport:
    """Inlier ratios, absolute relative error and RMSE over shared valid pixels.

    ``depth_cap`` drops ground-truth pixels deeper than the cap.
    """
    pred, gt = as_depth_map(pred), as_depth_map(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = pred.valid & gt.valid & (pred.values > 0) & (gt.values > 0)
    if depth_cap is not None:
        mask &= gt.values <= depth_cap
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise DegenerateInputError("no pixel left to evaluate")
    p, g = pred.values[mask], gt.values[mask]
    ratio = np.maximum(p / g, g / p)
    deltas = [float(np.count_nonzero(ratio < DELTA_BASE**i)) / n for i in (1, 2, 3)]
    diff = p - g
    return EvalReport(
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        abs_rel=float(np.mean(np.abs(diff) / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        valid_count=n,
    )


REPORT_COLUMNS = tuple(f.name for f in fields(EvalReport))


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.9g}"


def report_csv(reports: list[EvalReport], labels: list[str] | None = None) -> str:
    """Render reports as CSV with fixed column order and 9 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(REPORT_COLUMNS)
    if labels is not None:
        header = ["method"] + header
    writer.writerow(header)
    for i, rep in enumerate(reports):
        row = [_fmt(v) for v in astuple(rep)]
        if labels is not None:
            row = [labels[i]] + row
        writer.writerow(row)
    return buf.getvalue()


def write_report_csv(path: str | Path, reports: list[EvalReport], labels: list[str] | None = None) -> None:
    atomic_write_bytes(path, report_csv(reports, labels).encode())
