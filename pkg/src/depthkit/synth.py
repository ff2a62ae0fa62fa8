"""Analytic scenes rendered to ground-truth depth for any camera model.

Depth is the Euclidean distance along the viewing ray (not z-depth): an
ERP has no single optical axis, so ray distance is the only convention
that means the same thing for every camera kind.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from depthkit.canonical import build_lookup_table, resample_depth
from depthkit.depth_core import median_scale_normalize
from depthkit.depthmap import DepthMap
from depthkit.dgse import median_pool
from depthkit.errors import ConfigurationError
from depthkit.geometry import (
    CameraKind,
    CameraModel,
    direction_to_ray,
    erp_direction_grid,
    pixel_grid,
    unproject_masked,
)


class SceneKind(enum.Enum):
    BOX_ROOM = "box"
    GROUND_PLANE = "ground"


@dataclass(frozen=True)
class SceneSpec:
    """An axis-aligned box room centered at the origin, or an infinite ground plane.

    For the ground plane the plane sits at ``y = ground_level`` and the
    camera height is ``position[1] - ground_level``. The camera is never
    rotated.
    """

    kind: SceneKind
    half_extents: tuple[float, float, float] = (1.0, 1.0, 1.0)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ground_level: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if self.kind is SceneKind.BOX_ROOM:
            half = np.asarray(self.half_extents, dtype=np.float64)
            if np.any(half <= 0):
                raise ConfigurationError(f"box half-extents must be positive, got {self.half_extents}")
            if np.any(np.abs(pos) >= half):
                raise ConfigurationError(f"camera {self.position} is not strictly inside the box {self.half_extents}")
        elif self.camera_height <= 0:
            raise ConfigurationError(f"camera height must be positive, got {self.camera_height}")

    @classmethod
    def box_room(cls, half_extents=(1.0, 1.0, 1.0), position=(0.0, 0.0, 0.0)) -> SceneSpec:
        return cls(SceneKind.BOX_ROOM, tuple(map(float, half_extents)), tuple(map(float, position)))

    @classmethod
    def ground_plane(cls, height: float = 1.5, ground_level: float = 0.0) -> SceneSpec:
        return cls(SceneKind.GROUND_PLANE, position=(0.0, ground_level + height, 0.0), ground_level=ground_level)

    @property
    def camera_height(self) -> float:
        return self.position[1] - self.ground_level

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "half_extents": list(self.half_extents),
            "position": list(self.position),
            "ground_level": self.ground_level,
        }


def ray_depth(scene: SceneSpec, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the first hit along unit ``rays`` ``(..., 3)``, with a hit mask."""
    rays = np.asarray(rays, dtype=np.float64)
    finite = np.all(np.isfinite(rays), axis=-1)
    rays = np.where(finite[..., None], rays, 0.0)
    if scene.kind is SceneKind.BOX_ROOM:
        pos = np.asarray(scene.position)
        half = np.asarray(scene.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            # exit distance through each slab pair; inf along axes the ray does not move on
            wall = np.where(rays >= 0, half - pos, -half - pos)
            t = np.where(rays != 0, wall / rays, np.inf)
        depth = np.min(t, axis=-1)
        hit = finite & np.isfinite(depth)
    else:
        dy = rays[..., 1]
        hit = finite & (dy < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = np.where(hit, scene.camera_height / -dy, 0.0)
    return np.where(hit, depth, 0.0), hit


def render_depth(scene: SceneSpec, cam: CameraModel) -> DepthMap:
    """Ray-distance depth for every pixel center of ``cam``."""
    if cam.kind is CameraKind.EQUIRECT:
        rays = direction_to_ray(erp_direction_grid(cam.size))
        ok = np.ones(cam.size, dtype=bool)
    else:
        rays, ok = unproject_masked(cam, pixel_grid(cam.size))
    depth, hit = ray_depth(scene, rays)
    return DepthMap(depth, ok & hit)


def smooth_warp(size: tuple[int, int], amplitude: float, seed: int = 0) -> np.ndarray:
    """Separable cosine warp ``1 + amplitude * cos(a*theta + p) * cos(b*phi + q)`` on an ERP grid.

    Frequencies and phases come from ``seed``: ``a`` in {1, 2}, ``b`` in
    {2, 3} and phases uniform in [0, 2*pi).
    """
    rng = np.random.default_rng(seed)
    a = int(rng.integers(1, 3))
    b = int(rng.integers(2, 4))
    p, q = rng.uniform(0.0, 2.0 * math.pi, 2)
    d = erp_direction_grid(size)
    return 1.0 + amplitude * np.cos(a * d.theta + p) * np.cos(b * d.phi + q)


@dataclass(frozen=True)
class PipelineFixture:
    gt_metric: DepthMap  # rendered directly in ERP
    d_rel: DepthMap  # median-normalized (optionally warped) relative depth
    s_lo: np.ndarray  # oracle low-res scales, median_pool(gt / d_rel, r)
    stride: int
    shift: float = 0.0
    warp: np.ndarray | None = field(default=None, repr=False)
    gt_from_source: DepthMap | None = field(default=None, repr=False)


def make_pipeline_fixture(
    scene: SceneSpec,
    cam_src: CameraModel | None,
    erp_size: tuple[int, int],
    r: int,
    warp_amplitude: float = 0.0,
    seed: int = 0,
) -> PipelineFixture:
    """Ground truth and an ideal relative/scale decomposition of it.

    ``d_rel`` is the ERP ground truth divided by its median and, when
    ``warp_amplitude`` is nonzero, multiplied by ``smooth_warp`` and
    re-normalized. That mimics a relative depth network that stretches
    some regions. The oracle low-res scales are pooled from the exact
    per-pixel scale ``gt / d_rel``. With a source camera, the scene is also
    rendered in that camera and resampled to the ERP as ``gt_from_source``.
    """
    gt = render_depth(scene, CameraModel.equirect(erp_size[1], erp_size[0]))
    d_rel, _ = median_scale_normalize(gt)
    warp = None
    if warp_amplitude:
        warp = smooth_warp(erp_size, warp_amplitude, seed)
        d_rel, _ = median_scale_normalize(DepthMap(d_rel.values * warp, d_rel.valid))
    with np.errstate(divide="ignore", invalid="ignore"):
        exact_scale = DepthMap(np.where(gt.valid, gt.values / d_rel.values, 0.0), gt.valid)
    s_lo = median_pool(exact_scale, r)
    from_source = None
    if cam_src is not None:
        table = build_lookup_table(cam_src, erp_size)
        from_source = resample_depth(table, render_depth(scene, cam_src), mode="nearest")
    return PipelineFixture(gt, d_rel, s_lo.values, r, 0.0, warp, from_source)
