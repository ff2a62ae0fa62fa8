import json
import math

import numpy as np
import pytest
from cases import KB_COEFFS, random_directions, sample_cameras
from oracles import ray_angle

from depthkit.errors import ConfigurationError, ConvergenceError, DomainError
from depthkit.geometry import (
    CameraKind,
    CameraModel,
    SphericalDirection,
    _kb_solve_incidence,
    direction_to_erp_pixel,
    direction_to_ray,
    erp_direction_grid,
    erp_pixel_to_direction,
    geodesic_distance,
    geodesic_distance_arccos,
    kb_max_incidence,
    kb_radius,
    load_camera,
    pixel_grid,
    project,
    ray_to_direction,
    save_camera,
    unproject,
    unproject_masked,
)


def test_erp_corner_pixel():
    d = erp_pixel_to_direction(0, 0, (2, 4))
    assert d.phi == pytest.approx(math.pi / 4, abs=1e-15)
    assert d.theta == pytest.approx(-3 * math.pi / 4, abs=1e-15)


def test_erp_center_is_forward():
    d = erp_pixel_to_direction(3.5, 7.5, (8, 16))
    assert abs(d.phi) < 1e-15 and abs(d.theta) < 1e-15


def test_direction_to_erp_pixel_origin():
    assert direction_to_erp_pixel(SphericalDirection(0.0, 0.0), (2, 4)) == (0.5, 1.5)


def test_pole_rows_clamped():
    row, _ = direction_to_erp_pixel(SphericalDirection(0.0, math.pi / 2), (8, 16))
    assert row == -0.5
    row, _ = direction_to_erp_pixel(SphericalDirection(0.0, -math.pi / 2), (8, 16))
    assert row == 7.5


def test_erp_round_trip_on_grid():
    grid = pixel_grid((8, 16))
    d = erp_pixel_to_direction(grid[..., 0], grid[..., 1], (8, 16))
    row, col = direction_to_erp_pixel(d, (8, 16))
    np.testing.assert_allclose(row, grid[..., 0], atol=1e-12)
    np.testing.assert_allclose(col, grid[..., 1], atol=1e-12)


@pytest.mark.parametrize("row, col", [(-0.6, 0), (8.0, 0), (0, -1.0), (0, 16.0)])
def test_erp_out_of_range(row, col):
    with pytest.raises(DomainError):
        erp_pixel_to_direction(row, col, (8, 16))


def test_ray_direction_round_trip(rng):
    theta, phi = random_directions(rng, 200)
    back = ray_to_direction(direction_to_ray(SphericalDirection(theta, phi)))
    np.testing.assert_allclose(back.theta, theta, atol=1e-12)
    np.testing.assert_allclose(back.phi, phi, atol=1e-12)


def test_frame_axes():
    np.testing.assert_allclose(direction_to_ray(SphericalDirection(0.0, 0.0)), [0, 0, 1])
    np.testing.assert_allclose(direction_to_ray(SphericalDirection(math.pi / 2, 0.0)), [1, 0, 0], atol=1e-16)
    np.testing.assert_allclose(direction_to_ray(SphericalDirection(0.0, math.pi / 2)), [0, 1, 0], atol=1e-16)


# -- geodesic distance --------------------------------------------------------


def test_geodesic_same_direction():
    d = SphericalDirection(0.4, -0.3)
    assert geodesic_distance(d, d) == 0.0


def test_geodesic_same_longitude_quarter():
    g = geodesic_distance(SphericalDirection(0.0, 0.0), SphericalDirection(0.0, math.pi / 4))
    assert abs(g - math.pi / 4) <= 1e-15


def test_geodesic_law_of_cosines_example():
    a = SphericalDirection(0.0, math.pi / 3)
    b = SphericalDirection(math.pi / 2, math.pi / 3)
    assert geodesic_distance(a, b) == pytest.approx(math.acos(0.75), abs=1e-15)
    assert geodesic_distance(a, b) == pytest.approx(0.722734, abs=5e-7)


def test_literal_delta_theta_form_leaves_arccos_domain():
    # sin^2(pi/3) + cos^2(pi/3) * (pi/2) is the argument the uncorrected formula would need
    arg = math.sin(math.pi / 3) ** 2 + math.cos(math.pi / 3) ** 2 * (math.pi / 2)
    assert arg == pytest.approx(1.1427, abs=1e-4)
    assert arg > 1


def test_geodesic_matches_vector_angle_oracle(rng):
    t1, p1 = random_directions(rng, 300)
    t2, p2 = random_directions(rng, 300)
    g = geodesic_distance(SphericalDirection(t1, p1), SphericalDirection(t2, p2))
    r1 = direction_to_ray(SphericalDirection(t1, p1))
    r2 = direction_to_ray(SphericalDirection(t2, p2))
    expected = [ray_angle(a, b) for a, b in zip(r1, r2)]
    np.testing.assert_allclose(g, expected, atol=1e-12)
    np.testing.assert_allclose(geodesic_distance_arccos(SphericalDirection(t1, p1), SphericalDirection(t2, p2)), expected, atol=1e-7)


def test_geodesic_symmetric_and_bounded(rng):
    t1, p1 = random_directions(rng, 500)
    t2, p2 = random_directions(rng, 500)
    a, b = SphericalDirection(t1, p1), SphericalDirection(t2, p2)
    g = geodesic_distance(a, b)
    np.testing.assert_allclose(g, geodesic_distance(b, a), rtol=0, atol=1e-15)
    assert np.all((g >= 0) & (g <= math.pi))


def test_geodesic_zero_iff_same_ray():
    a = SphericalDirection(1.0, 0.2)
    assert geodesic_distance(a, SphericalDirection(1.0 + 2 * math.pi, 0.2)) <= 1e-12
    assert geodesic_distance(a, SphericalDirection(1.0 + 1e-9, 0.2)) > 0


def test_geodesic_antipodal():
    g = geodesic_distance(SphericalDirection(0.0, 0.3), SphericalDirection(math.pi, -0.3))
    assert g == pytest.approx(math.pi, abs=1e-15)


def test_geodesic_same_longitude_exact(rng):
    theta = rng.uniform(-math.pi, math.pi, 1000)
    p1 = rng.uniform(-math.pi / 2, math.pi / 2, 1000)
    p2 = rng.uniform(-math.pi / 2, math.pi / 2, 1000)
    g = geodesic_distance(SphericalDirection(theta, p1), SphericalDirection(theta, p2))
    assert np.max(np.abs(g - np.abs(p1 - p2))) <= 1e-12


def test_geodesic_small_angle_latitude_law(rng):
    phi = rng.uniform(-1.5, 1.5, 500)
    dt = rng.uniform(0, 1e-3, 500)
    g = geodesic_distance(SphericalDirection(0.0, phi), SphericalDirection(dt, phi))
    assert np.max(np.abs(g - np.cos(phi) * dt)) <= 1e-6


def test_geodesic_triangle_inequality(rng):
    (ta, pa), (tb, pb), (tc, pc) = (random_directions(rng, 1000) for _ in range(3))
    a, b, c = SphericalDirection(ta, pa), SphericalDirection(tb, pb), SphericalDirection(tc, pc)
    assert np.all(geodesic_distance(a, c) <= geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-12)


# -- camera models ------------------------------------------------------------


def test_pinhole_axis_hits_principal_point():
    cam = CameraModel.pinhole(100, 100, 100, 100, 50, 50)
    pix, ok = project(cam, [0.0, 0.0, 1.0])
    assert ok and tuple(pix) == (50.0, 50.0)
    np.testing.assert_allclose(unproject(cam, [50.0, 50.0]), [0, 0, 1])


def test_pinhole_behind_camera_not_projected():
    cam = CameraModel.pinhole(100, 100, 100, 100, 50, 50)
    pix, ok = project(cam, [[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    assert not ok.any() and np.isnan(pix).all()


def test_kb_equidistant_limit():
    cam = CameraModel.kannala_brandt(400, 400, 150, 150, 200, 200)
    ray = direction_to_ray(SphericalDirection(0.3, 0.0))
    pix, _ = project(cam, ray)
    assert pix[1] - 200 == pytest.approx(150 * 0.3, abs=1e-12)


def test_kb_polynomial_radius():
    cam = CameraModel.kannala_brandt(400, 400, 150, 150, 200, 200, (0.1, 0, 0, 0))
    ray = direction_to_ray(SphericalDirection(0.5, 0.0))
    pix, _ = project(cam, ray)
    assert pix[1] - 200 == pytest.approx(150 * (0.5 + 0.1 * 0.125), abs=1e-12)


def test_kb_radius_horner_matches_power_sum(rng):
    k = (0.05, -0.01, 0.001, -0.0001)
    t = rng.uniform(0, 2, 100)
    direct = t + k[0] * t**3 + k[1] * t**5 + k[2] * t**7 + k[3] * t**9
    np.testing.assert_allclose(kb_radius(t, k), direct, rtol=1e-14)


def test_kb_max_incidence_is_monotone_limit():
    cam = CameraModel.kannala_brandt(64, 64, 20, 20, 31.5, 31.5, (-0.2, 0, 0, 0))
    limit = kb_max_incidence(cam)
    assert limit == pytest.approx(math.sqrt(1 / 0.6), rel=1e-12)
    assert kb_max_incidence(CameraModel.kannala_brandt(64, 64, 20, 20, 31.5, 31.5)) == math.pi


@pytest.mark.parametrize("name", ["pinhole", "kb_mild", "kb_strong", "mei", "erp"])
def test_round_trip_32x32(name):
    cam = sample_cameras(32)[name]
    grid = pixel_grid(cam.size)
    rays = unproject(cam, grid)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-12)
    pix, ok = project(cam, rays)
    assert ok.all()
    assert np.max(np.abs(pix - grid)) < 1e-6


def test_kb_spec_coefficients_round_trip():
    cam = CameraModel.kannala_brandt(32, 32, 12, 12, 15.5, 15.5, KB_COEFFS["mild"])
    grid = pixel_grid(cam.size)
    pix, _ = project(cam, unproject(cam, grid))
    assert np.max(np.abs(pix - grid)) < 1e-6


def test_mei_xi_zero_is_pinhole(rng):
    pin = CameraModel.pinhole(64, 48, 40, 42, 31.5, 23.5)
    mei = CameraModel.unified(64, 48, 40, 42, 31.5, 23.5, 0.0)
    grid = pixel_grid(pin.size)
    np.testing.assert_allclose(unproject(mei, grid), unproject(pin, grid), atol=1e-12, rtol=0)
    theta, phi = random_directions(rng, 500)
    rays = direction_to_ray(SphericalDirection(theta * 0.4, phi * 0.4))
    p_pin, ok_pin = project(pin, rays)
    p_mei, ok_mei = project(mei, rays)
    np.testing.assert_array_equal(ok_pin, ok_mei)
    np.testing.assert_allclose(p_mei, p_pin, atol=1e-12, rtol=0)


def test_mei_wide_mirror_images_back_hemisphere():
    cam = CameraModel.unified(64, 64, 10, 10, 31.5, 31.5, 1.5)
    backish = np.array([0.0, math.sqrt(1 - 0.5**2), -0.5])
    _, ok = project(cam, backish)
    assert ok  # 1/xi = 0.667 > 0.5
    _, ok = project(cam, np.array([0.0, math.sqrt(1 - 0.8**2), -0.8]))
    assert not ok


def test_project_rejects_non_unit_ray():
    cam = CameraModel.pinhole(10, 10, 5, 5, 4.5, 4.5)
    with pytest.raises(DomainError):
        project(cam, [0.0, 0.0, 1.1])


def test_unproject_outside_fisheye_disc():
    cam = CameraModel.kannala_brandt(64, 64, 5, 5, 31.5, 31.5, (-0.2, 0, 0, 0))
    rays, ok = unproject_masked(cam, np.array([[31.5, 31.5], [31.5, 63.0]]))
    assert ok.tolist() == [True, False]
    assert np.isnan(rays[1]).all()
    with pytest.raises(DomainError):
        unproject(cam, np.array([31.5, 63.0]))


def test_kb_newton_reports_residual():
    k = (0.0, 0.0, 0.0, 0.0)
    # an upper clamp of zero keeps the iterate stuck away from the root
    with pytest.raises(ConvergenceError) as info:
        _kb_solve_incidence(np.array([0.5]), k, 0.0)
    assert info.value.residual == pytest.approx(0.5)


def test_camera_json_round_trip(tmp_path):
    for cam in sample_cameras(32).values():
        path = tmp_path / f"{cam.kind.value}.json"
        save_camera(cam, path)
        assert load_camera(path) == cam


def test_camera_json_rejects_unknown_key(tmp_path):
    path = tmp_path / "cam.json"
    path.write_text(json.dumps({"kind": "erp", "width": 8, "height": 4, "fx": 1.0}))
    with pytest.raises(ConfigurationError):
        load_camera(path)


def test_camera_json_missing_key():
    with pytest.raises(ConfigurationError):
        CameraModel.from_dict({"kind": "kb", "width": 8, "height": 8, "fx": 1, "fy": 1, "cx": 1, "cy": 1})


def test_camera_kind_values():
    assert {k.value for k in CameraKind} == {"pinhole", "kb", "mei", "erp"}


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(width=0, height=10, fx=1, fy=1, cx=0, cy=0),
        dict(width=10, height=10, fx=-1, fy=1, cx=0, cy=0),
        dict(width=10, height=10, fx=1, fy=1, cx=20, cy=0),
    ],
)
def test_invalid_intrinsics(kwargs):
    with pytest.raises(ConfigurationError):
        CameraModel.pinhole(**kwargs)


def test_erp_direction_grid_shape():
    d = erp_direction_grid((4, 8))
    assert d.theta.shape == d.phi.shape == (4, 8)
    np.testing.assert_allclose(d.phi[:, 0], [3 * math.pi / 8, math.pi / 8, -math.pi / 8, -3 * math.pi / 8])
