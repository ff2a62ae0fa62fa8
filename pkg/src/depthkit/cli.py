"""depthkit command line.

Every flag can also be set through an environment variable named
``DEPTHKIT_<FLAG>`` (upper case, dashes as underscores), e.g.
``DEPTHKIT_CACHE_DIR``. Command-line flags take precedence over the
environment, which takes precedence over built-in defaults.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from depthkit import canonical, depth_core, dgse, io, rope_phi, synth
from depthkit.depthmap import DepthMap
from depthkit.errors import DepthKitError
from depthkit.geometry import CameraKind, CameraModel, load_camera

ENV_PREFIX = "DEPTHKIT_"


class StageError(DepthKitError):
    pass


def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if cast is tuple:
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return cast(raw)


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except (DepthKitError, ValueError, OSError) as exc:
        raise StageError(f"stage '{name}' failed: {exc}") from exc


def _require_file(path: str | None, what: str) -> None:
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _write_json(path: Path, data: dict) -> None:
    io.atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


# -- erp-convert --------------------------------------------------------------


def cmd_erp_convert(args) -> int:
    _require_file(args.camera, "camera JSON")
    _require_file(args.input, "input image")
    _require_file(args.input_mask, "input mask")
    cam = load_camera(args.camera)
    src = io.read_pfm(args.input)
    if src.shape[:2] != cam.size:
        raise ValueError(f"input is {src.shape[1]}x{src.shape[0]} but the camera is {cam.width}x{cam.height}")
    fov = tuple(args.fov_limits) if args.fov_limits else None

    start = time.perf_counter()
    table, hit = canonical.cached_lookup_table(cam, (args.erp_height, args.erp_width), fov, args.cache_dir)
    elapsed = time.perf_counter() - start
    print(f"lookup table: cache {'hit' if hit else 'miss'} ({elapsed * 1e3:.1f} ms)")

    src_valid = None
    if src.ndim == 2:
        src_valid = np.isfinite(src) & (src > 0)
    if args.input_mask:
        mask = io.read_pgm_mask(args.input_mask)
        src_valid = mask if src_valid is None else src_valid & mask
    out, valid = canonical.resample(table, src, mode=args.mode, src_valid=src_valid)
    io.write_pfm(args.out, out)
    io.write_pgm_mask(args.mask_out or Path(args.out).with_suffix(".pgm"), valid)
    return 0


# -- dgse-upsample ------------------------------------------------------------


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(depth: DepthMap, s_lo: np.ndarray, r: int, seed: int = 0, step: float = 1e-6, samples: int = 64):
    """Central-difference check of ``guided_upsample_grad``; returns max relative errors."""
    rng = np.random.default_rng(seed)
    upstream = rng.uniform(-1.0, 1.0, depth.shape)

    def objective(s, d):
        dm = DepthMap(d, depth.valid)
        w = dgse.routing_weights(dm, dgse.median_pool(dm, r), r)
        return float(np.sum(upstream * dgse.guided_upsample(s, w)))

    d_lo = dgse.median_pool(depth, r)
    g_s, g_d = dgse.guided_upsample_grad(s_lo, depth, d_lo, r, upstream)
    errors = []
    for analytic, base, is_scale in ((g_s, s_lo, True), (g_d, depth.values, False)):
        idx = np.flatnonzero(np.isfinite(base.ravel()) & (True if is_scale else depth.valid.ravel()))
        if idx.size > samples:
            idx = np.sort(rng.choice(idx, samples, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            plus, minus = base.copy(), base.copy()
            plus.flat[i] += step
            minus.flat[i] -= step
            if is_scale:
                f_plus, f_minus = objective(plus, depth.values), objective(minus, depth.values)
            else:
                f_plus, f_minus = objective(s_lo, plus), objective(s_lo, minus)
            numeric[n] = (f_plus - f_minus) / (2 * step)
        errors.append(_max_rel_error(analytic.ravel()[idx], numeric))
    return errors[0], errors[1]


def cmd_dgse_upsample(args) -> int:
    _require_file(args.depth, "relative depth")
    _require_file(args.scales, "low-res scales")
    depth = DepthMap.from_array(io.read_pfm(args.depth))
    s_lo = io.read_pfm(args.scales).astype(np.float64)
    d_lo = dgse.median_pool(depth, args.stride)
    weights = dgse.routing_weights(depth, d_lo, args.stride)
    scales = dgse.guided_upsample(s_lo, weights)
    if args.out:
        io.write_pfm(args.out, np.where(depth.valid, scales, 0.0))
    if args.grad_check:
        err_s, err_d = grad_check(depth, s_lo, args.stride, seed=args.seed)
        print(f"max_rel_err_scales={err_s:.3e}")
        print(f"max_rel_err_depth={err_d:.3e}")
    return 0


# -- rope-dump ----------------------------------------------------------------


def cmd_rope_dump(args) -> int:
    delta = None if args.plain else args.delta
    field = rope_phi.build_phase_field((args.height, args.width), args.dim, delta)
    io.atomic_write_bytes(args.out, rope_phi.phase_field_csv(field).encode())
    return 0


# -- synth --------------------------------------------------------------------


def _scene_from_args(args) -> synth.SceneSpec:
    if args.scene == "box":
        return synth.SceneSpec.box_room(args.half_extents, args.position)
    return synth.SceneSpec.ground_plane(args.camera_height)


def cmd_synth(args) -> int:
    _require_file(args.camera, "camera JSON")
    scene = _scene_from_args(args)
    cam = load_camera(args.camera) if args.camera else CameraModel.equirect(args.erp_width, args.erp_height)
    gt = synth.render_depth(scene, cam)
    rel, median = depth_core.median_scale_normalize(gt)
    if args.warp_amplitude:
        if cam.kind is not CameraKind.EQUIRECT:
            raise ValueError("--warp-amplitude is only defined for ERP output")
        warp = synth.smooth_warp(cam.size, args.warp_amplitude, args.seed)
        rel, _ = depth_core.median_scale_normalize(DepthMap(rel.values * warp, rel.valid))
    out = Path(args.out_dir)
    io.write_pfm(out / "gt.pfm", gt.values)
    io.write_pfm(out / "rel.pfm", rel.values)
    io.write_pgm_mask(out / "mask.pgm", gt.valid)
    _write_json(
        out / "scene.json",
        {
            "scene": scene.to_dict(),
            "camera": cam.to_dict(),
            "depth_convention": "ray_distance",
            "median_depth": median,
            "warp_amplitude": args.warp_amplitude,
            "seed": args.seed,
        },
    )
    return 0


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    _require_file(args.pred, "prediction")
    _require_file(args.gt, "ground truth")
    _require_file(args.mask, "mask")
    pred = DepthMap.from_array(io.read_pfm(args.pred))
    mask = io.read_pgm_mask(args.mask) if args.mask else None
    gt = DepthMap.from_array(io.read_pfm(args.gt), mask)
    report = depth_core.evaluate(pred, gt, args.cap)
    depth_core.write_report_csv(args.out, [report])
    print(depth_core.report_csv([report]), end="")
    return 0


# -- demo ---------------------------------------------------------------------


def _head_scales(d_rel: DepthMap, r: int, seed: int, dim: int = 16) -> np.ndarray:
    """Low-res scales from the untrained toy head, fed simple per-patch depth statistics."""
    lo_shape = dgse.low_res_shape(d_rel.shape, r)
    blocks = dgse._blocks(np.where(d_rel.valid, d_rel.values, np.nan), r, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        stats = np.stack(
            [np.nanmean(blocks, -1), np.nanmedian(blocks, -1), np.nanstd(blocks, -1), np.nanmin(blocks, -1)],
            axis=-1,
        )
    stats = np.nan_to_num(stats)
    proj = np.random.default_rng(seed).normal(0.0, 1.0, (stats.shape[-1], dim))
    tokens = stats @ proj
    grid = rope_phi.TokenGrid(tokens.reshape(*lo_shape, dim), tokens.reshape(-1, dim).mean(axis=0))
    weights = dgse.init_head_weights(dim, seed=seed)
    return dgse.scale_head(grid, weights).values


def cmd_demo(args) -> int:
    out = Path(args.out_dir)
    r = args.stride
    with _stage("synth"):
        scene = _scene_from_args(args)
        fixture = synth.make_pipeline_fixture(scene, None, (args.erp_height, args.erp_width), r, args.warp_amplitude, args.seed)
        gt = fixture.gt_metric
    with _stage("median_scale_normalize"):
        d_rel, _ = depth_core.median_scale_normalize(fixture.d_rel)
    with _stage("routing_weights"):
        weights = dgse.routing_weights(d_rel, dgse.median_pool(d_rel, r), r)
    with _stage("scale_head" if args.scales == "head" else "oracle_scales"):
        s_lo = _head_scales(d_rel, r, args.seed) if args.scales == "head" else fixture.s_lo
    with _stage("guided_upsample"):
        scale = dgse.guided_upsample(s_lo, weights)
    with _stage("compose_metric"):
        guided = depth_core.compose_metric(d_rel, scale, fixture.shift)
        median_only = depth_core.compose_metric(d_rel, float(np.median(gt.valid_values())), fixture.shift)
    with _stage("evaluate"):
        reports = [depth_core.evaluate(guided, gt, args.cap), depth_core.evaluate(median_only, gt, args.cap)]
    with _stage("write"):
        io.write_pfm(out / "gt.pfm", gt.values)
        io.write_pfm(out / "rel.pfm", d_rel.values)
        io.write_pfm(out / "scale_lo.pfm", s_lo)
        io.write_pfm(out / "scale.pfm", np.where(d_rel.valid, scale, 0.0))
        io.write_pfm(out / "metric_guided.pfm", guided.values)
        io.write_pfm(out / "metric_median.pfm", median_only.values)
        io.write_pgm_mask(out / "mask.pgm", gt.valid)
        depth_core.write_report_csv(out / "report.csv", reports, ["guided", "median"])
    for label, rep in zip(("guided", "median"), reports):
        print(f"{label}: delta1={rep.delta1:.3f} abs_rel={rep.abs_rel:.4f} rmse={rep.rmse:.4f}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_scene_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", choices=("box", "ground"), default=_env("scene", "box"))
    p.add_argument("--half-extents", type=float, nargs=3, default=_env("half_extents", (2.0, 1.5, 3.0), tuple))
    p.add_argument("--position", type=float, nargs=3, default=_env("position", (0.3, -0.2, 0.5), tuple))
    p.add_argument("--camera-height", type=float, default=_env("camera_height", 1.5, float))
    p.add_argument("--erp-height", type=int, default=_env("erp_height", 128, int))
    p.add_argument("--erp-width", type=int, default=_env("erp_width", 256, int))
    p.add_argument("--warp-amplitude", type=float, default=_env("warp_amplitude", 0.0, float))
    p.add_argument("--seed", type=int, default=_env("seed", 0, int))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthkit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("erp-convert", help="resample a camera image or depth map into ERP")
    p.add_argument("--camera", required=True, help="source camera JSON")
    p.add_argument("--input", required=True, help="source PFM")
    p.add_argument("--input-mask", help="optional source validity PGM")
    p.add_argument("--erp-height", type=int, default=_env("erp_height", 256, int))
    p.add_argument("--erp-width", type=int, default=_env("erp_width", 512, int))
    p.add_argument("--fov-limits", type=float, nargs=2, metavar=("THETA_MAX", "PHI_MAX"), default=_env("fov_limits", None, tuple))
    p.add_argument("--mode", choices=("nearest", "bilinear"), default=_env("mode", "nearest"))
    p.add_argument("--out", required=True, help="output ERP PFM")
    p.add_argument("--mask-out", help="output validity PGM (default: --out with .pgm)")
    p.add_argument("--cache-dir", default=_env("cache_dir", None), help="lookup-table cache directory")
    p.set_defaults(func=cmd_erp_convert)

    p = sub.add_parser("dgse-upsample", help="depth-guided upsampling of a low-res scale map")
    p.add_argument("--depth", required=True, help="full-res relative depth PFM")
    p.add_argument("--scales", required=True, help="low-res scale PFM")
    p.add_argument("--stride", type=int, default=_env("stride", dgse.DEFAULT_STRIDE, int))
    p.add_argument("--out", help="full-res scale PFM")
    p.add_argument("--grad-check", action="store_true", help="print finite-difference gradient errors (ties in the depth input put pixels on a kink; use tie-free data)")
    p.add_argument("--seed", type=int, default=_env("seed", 0, int))
    p.set_defaults(func=cmd_dgse_upsample)

    p = sub.add_parser("rope-dump", help="write a RoPE-phi phase field as CSV")
    p.add_argument("--height", type=int, default=_env("height", 8, int))
    p.add_argument("--width", type=int, default=_env("width", 16, int))
    p.add_argument("--dim", type=int, default=_env("dim", 16, int))
    p.add_argument("--delta", type=float, default=_env("delta", rope_phi.DEFAULT_DELTA, float))
    p.add_argument("--plain", action="store_true", help="plain 2D-RoPE (no latitude weighting)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rope_dump)

    p = sub.add_parser("synth", help="render an analytic scene to gt/relative PFMs")
    _add_scene_args(p)
    p.add_argument("--camera", help="camera JSON (default: ERP of --erp-height x --erp-width)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="depth metrics of a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask")
    p.add_argument("--cap", type=float, default=_env("cap", None, float))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="synth -> normalize -> guided scales -> metric depth -> metrics")
    _add_scene_args(p)
    p.set_defaults(warp_amplitude=_env("warp_amplitude", 0.25, float))
    p.add_argument("--stride", type=int, default=_env("stride", dgse.DEFAULT_STRIDE, int))
    p.add_argument("--scales", choices=("oracle", "head"), default=_env("scales", "oracle"))
    p.add_argument("--cap", type=float, default=_env("cap", None, float))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DepthKitError, ValueError, OSError) as exc:
        print(f"depthkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
