import math

import numpy as np
import pytest

from depthkit.depth_core import compose_metric, evaluate
from depthkit.dgse import guided_upsample, median_pool, routing_weights
from depthkit.errors import ConfigurationError
from depthkit.geometry import (
    CameraModel,
    SphericalDirection,
    direction_to_ray,
    erp_direction_grid,
)
from depthkit.synth import (
    SceneSpec,
    make_pipeline_fixture,
    ray_depth,
    render_depth,
    smooth_warp,
)


def test_unit_cube_forward_depth():
    scene = SceneSpec.box_room()
    depth, hit = ray_depth(scene, direction_to_ray(SphericalDirection(0.0, 0.0)))
    assert hit and depth == 1.0


def test_unit_cube_corner_ray():
    ray = np.ones(3) / math.sqrt(3)
    depth, _ = ray_depth(SceneSpec.box_room(), ray)
    assert depth == pytest.approx(math.sqrt(3), abs=1e-15)


def test_ground_plane_depth():
    depth, hit = ray_depth(SceneSpec.ground_plane(1.5), direction_to_ray(SphericalDirection(0.3, -math.pi / 4)))
    assert hit and depth == pytest.approx(1.5 * math.sqrt(2), abs=1e-14)


def test_ground_plane_sky_invalid():
    gt = render_depth(SceneSpec.ground_plane(1.5), CameraModel.equirect(32, 16))
    d = erp_direction_grid((16, 32))
    np.testing.assert_array_equal(gt.valid, d.phi < 0)


def test_ground_plane_depth_increases_towards_horizon():
    gt = render_depth(SceneSpec.ground_plane(2.0), CameraModel.equirect(8, 64))
    column = gt.values[32:, 0]  # rows below the equator, horizon first
    assert np.all(np.diff(column) < 0)


def test_box_room_all_valid_and_positive():
    scene = SceneSpec.box_room((2.0, 1.5, 3.0), (0.3, -0.2, 0.5))
    gt = render_depth(scene, CameraModel.equirect(64, 32))
    assert gt.valid.all() and np.all(gt.values > 0)


def test_camera_outside_box():
    with pytest.raises(ConfigurationError):
        SceneSpec.box_room((1.0, 1.0, 1.0), (0.0, 1.5, 0.0))
    with pytest.raises(ConfigurationError):
        SceneSpec.ground_plane(-1.0)


def test_render_continuity_away_from_edges():
    # for a ray at distance t hitting a wall at incidence cos(a) >= cos_min, a step
    # of dtheta changes the depth by at most t * tan(a) * dtheta, bounded here by t_max^2/d_min * dtheta
    scene = SceneSpec.box_room((2.0, 1.5, 3.0), (0.3, -0.2, 0.5))
    size = (64, 128)
    gt = render_depth(scene, CameraModel.equirect(size[1], size[0])).values
    dtheta = 2 * math.pi / size[1]
    t_max = float(gt.max())
    d_min = 1.5 - 0.2
    bound = t_max**2 / d_min * dtheta
    jumps = np.abs(np.diff(gt, axis=1))
    assert np.max(jumps) <= bound


@pytest.mark.parametrize("factor", [3, 5])
def test_render_invariance_odd_factor(factor):
    scene = SceneSpec.box_room((2.0, 1.5, 3.0), (0.3, -0.2, 0.5))
    coarse = render_depth(scene, CameraModel.equirect(32, 16)).values
    fine = render_depth(scene, CameraModel.equirect(32 * factor, 16 * factor)).values
    mid = factor // 2
    assert np.max(np.abs(fine[mid::factor, mid::factor] - coarse)) <= 1e-12


def test_fisheye_render_marks_outside_circle_invalid():
    cam = CameraModel.kannala_brandt(40, 40, 6.0, 6.0, 19.5, 19.5, (-0.05, 0, 0, 0))
    gt = render_depth(SceneSpec.box_room(), cam)
    assert gt.valid[20, 20] and not gt.valid[0, 0]


def test_smooth_warp_range_and_determinism():
    a = smooth_warp((32, 64), 0.25, seed=3)
    assert np.all((a >= 0.75) & (a <= 1.25))
    np.testing.assert_array_equal(a, smooth_warp((32, 64), 0.25, seed=3))
    assert not np.array_equal(a, smooth_warp((32, 64), 0.25, seed=4))


def test_unperturbed_fixture_round_trips():
    fx = make_pipeline_fixture(SceneSpec.box_room((2.0, 1.5, 3.0), (0.3, -0.2, 0.5)), None, (32, 64), 4)
    w = routing_weights(fx.d_rel, median_pool(fx.d_rel, 4), 4)
    metric = compose_metric(fx.d_rel, guided_upsample(fx.s_lo, w), fx.shift)
    assert np.ptp(fx.s_lo) <= 1e-12
    assert evaluate(metric, fx.gt_metric).delta1 == 1.0
    assert np.max(np.abs(metric.values - fx.gt_metric.values)) <= 1e-12


def test_fixture_with_source_camera():
    cam = CameraModel.kannala_brandt(64, 64, 20.0, 20.0, 31.5, 31.5)
    fx = make_pipeline_fixture(SceneSpec.box_room(), cam, (32, 64), 4)
    assert fx.gt_from_source is not None and fx.gt_from_source.valid.any()
    assert fx.warp is None
