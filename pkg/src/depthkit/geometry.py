"""Camera models, ERP angular conventions and spherical distances.

Frame convention used everywhere in depthkit: x points right, y points up,
z points forward. A spherical direction (theta, phi) maps to the unit ray::

    (cos(phi) * sin(theta), sin(phi), cos(phi) * cos(theta))

so theta is longitude (0 straight ahead, positive to the right) and phi is
latitude (0 on the horizon, +pi/2 straight up).

Pixel coordinates are continuous ``(row, col)`` pairs with integer values at
pixel centers. Rows grow downwards, so image rows run against +y.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from depthkit.errors import ConfigurationError, ConvergenceError, DomainError

UNIT_NORM_TOL = 1e-9
KB_NEWTON_TOL = 1e-12
KB_NEWTON_MAX_ITER = 50


class CameraKind(enum.Enum):
    PINHOLE = "pinhole"
    KANNALA_BRANDT = "kb"
    UNIFIED_MEI = "mei"
    EQUIRECT = "erp"


_JSON_KEYS = {
    CameraKind.PINHOLE: {"width", "height", "fx", "fy", "cx", "cy"},
    CameraKind.KANNALA_BRANDT: {"width", "height", "fx", "fy", "cx", "cy", "k"},
    CameraKind.UNIFIED_MEI: {"width", "height", "fx", "fy", "cx", "cy", "xi"},
    CameraKind.EQUIRECT: {"width", "height"},
}


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics of one of the supported camera kinds.

    ``k`` holds the four odd-polynomial coefficients of the Kannala-Brandt
    model and ``xi`` the mirror parameter of the unified (MEI with zero
    distortion) model. Fields that do not apply to a kind stay at their
    defaults.
    """

    kind: CameraKind
    width: int
    height: int
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    k: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    xi: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        if self.kind is CameraKind.EQUIRECT:
            return
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if len(self.k) != 4:
            raise ConfigurationError(f"expected 4 KB coefficients, got {len(self.k)}")
        if self.xi < 0:
            raise ConfigurationError(f"xi must be non-negative, got {self.xi}")

    @classmethod
    def pinhole(cls, width, height, fx, fy, cx, cy) -> CameraModel:
        return cls(CameraKind.PINHOLE, width, height, fx, fy, cx, cy)

    @classmethod
    def kannala_brandt(cls, width, height, fx, fy, cx, cy, k=(0.0, 0.0, 0.0, 0.0)) -> CameraModel:
        return cls(CameraKind.KANNALA_BRANDT, width, height, fx, fy, cx, cy, tuple(float(v) for v in k))

    @classmethod
    def unified(cls, width, height, fx, fy, cx, cy, xi) -> CameraModel:
        return cls(CameraKind.UNIFIED_MEI, width, height, fx, fy, cx, cy, xi=float(xi))

    @classmethod
    def equirect(cls, width, height) -> CameraModel:
        return cls(CameraKind.EQUIRECT, width, height)

    @property
    def size(self) -> tuple[int, int]:
        """``(height, width)``, matching numpy array shapes."""
        return (self.height, self.width)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CameraModel:
        data = dict(data)
        try:
            kind = CameraKind(data.pop("kind"))
        except KeyError:
            raise ConfigurationError("camera description needs a 'kind'") from None
        except ValueError:
            raise ConfigurationError(f"unknown camera kind {data.get('kind')!r}") from None
        unknown = set(data) - _JSON_KEYS[kind]
        if unknown:
            raise ConfigurationError(f"unknown keys for {kind.value} camera: {sorted(unknown)}")
        missing = _JSON_KEYS[kind] - set(data)
        if missing:
            raise ConfigurationError(f"missing keys for {kind.value} camera: {sorted(missing)}")
        kwargs: dict[str, Any] = {"width": int(data["width"]), "height": int(data["height"])}
        for key in ("fx", "fy", "cx", "cy", "xi"):
            if key in data:
                kwargs[key] = float(data[key])
        if "k" in data:
            kwargs["k"] = tuple(float(v) for v in data["k"])
        return cls(kind, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value, "width": self.width, "height": self.height}
        keys = _JSON_KEYS[self.kind]
        for key in ("fx", "fy", "cx", "cy", "xi"):
            if key in keys:
                out[key] = getattr(self, key)
        if "k" in keys:
            out["k"] = list(self.k)
        return out


def load_camera(path: str | Path) -> CameraModel:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"malformed camera JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"camera JSON in {path} must be an object")
    return CameraModel.from_dict(data)


def save_camera(cam: CameraModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n")


class SphericalDirection(NamedTuple):
    """Longitude ``theta`` in [-pi, pi) and latitude ``phi`` in [-pi/2, pi/2].

    Both fields may be floats or broadcastable numpy arrays.
    """

    theta: Any
    phi: Any


def erp_pixel_to_direction(row, col, size: tuple[int, int]) -> SphericalDirection:
    """Direction of ERP pixel ``(row, col)`` on an ``(H, W)`` panorama.

    Pixel centers are sampled, so row ``r`` has latitude
    ``pi * (0.5 - (r + 0.5) / H)``. Fractional coordinates inside the
    image footprint ``[-0.5, H - 0.5] x [-0.5, W - 0.5]`` are accepted.
    """
    height, width = size
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    if np.any(row < -0.5) or np.any(row > height - 0.5) or np.any(col < -0.5) or np.any(col > width - 0.5):
        raise DomainError(f"pixel outside {height}x{width} ERP image")
    phi = np.pi * (0.5 - (row + 0.5) / height)
    theta = 2.0 * np.pi * ((col + 0.5) / width) - np.pi
    return SphericalDirection(_scalar(theta), _scalar(phi))


def direction_to_erp_pixel(d: SphericalDirection, size: tuple[int, int]):
    """Continuous ERP pixel ``(row, col)`` for a direction.

    Rows are clamped to ``[-0.5, H - 0.5]`` so that the poles land on the
    image edge.
    """
    height, width = size
    theta = np.asarray(d.theta, dtype=np.float64)
    phi = np.asarray(d.phi, dtype=np.float64)
    row = np.clip(height * (0.5 - phi / np.pi) - 0.5, -0.5, height - 0.5)
    col = width * (theta + np.pi) / (2.0 * np.pi) - 0.5
    return _scalar(row), _scalar(col)


def direction_to_ray(d: SphericalDirection) -> np.ndarray:
    theta = np.asarray(d.theta, dtype=np.float64)
    phi = np.asarray(d.phi, dtype=np.float64)
    cos_phi = np.cos(phi)
    return np.stack([cos_phi * np.sin(theta), np.sin(phi), cos_phi * np.cos(theta)], axis=-1)


def ray_to_direction(ray) -> SphericalDirection:
    ray = np.asarray(ray, dtype=np.float64)
    x, y, z = ray[..., 0], ray[..., 1], ray[..., 2]
    theta = np.arctan2(x, z)
    phi = np.arctan2(y, np.hypot(x, z))
    return SphericalDirection(_scalar(theta), _scalar(phi))


def erp_direction_grid(size: tuple[int, int]) -> SphericalDirection:
    """Directions of every pixel center of an ``(H, W)`` ERP, as ``(H, W)`` arrays."""
    height, width = size
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    d = erp_pixel_to_direction(rows, cols, size)
    theta, phi = np.broadcast_arrays(d.theta, d.phi)
    return SphericalDirection(theta, phi)


def geodesic_distance(a: SphericalDirection, b: SphericalDirection):
    """Great-circle angle between two directions, in ``[0, pi]``.

    Evaluates the spherical law of cosines
    ``arccos(sin(phi1) sin(phi2) + cos(phi1) cos(phi2) cos(dtheta))`` in its
    atan2 form, which has the same value but keeps full precision for
    nearly coincident and nearly antipodal directions.
    """
    phi1 = np.asarray(a.phi, dtype=np.float64)
    phi2 = np.asarray(b.phi, dtype=np.float64)
    dtheta = np.asarray(b.theta, dtype=np.float64) - np.asarray(a.theta, dtype=np.float64)
    s1, c1 = np.sin(phi1), np.cos(phi1)
    s2, c2 = np.sin(phi2), np.cos(phi2)
    cos_dt = np.cos(dtheta)
    num = np.hypot(c2 * np.sin(dtheta), c1 * s2 - s1 * c2 * cos_dt)
    den = s1 * s2 + c1 * c2 * cos_dt
    return _scalar(np.arctan2(num, den))


def geodesic_distance_arccos(a: SphericalDirection, b: SphericalDirection):
    """Direct arccos evaluation of the law of cosines, argument clamped to [-1, 1]."""
    phi1 = np.asarray(a.phi, dtype=np.float64)
    phi2 = np.asarray(b.phi, dtype=np.float64)
    dtheta = np.asarray(b.theta, dtype=np.float64) - np.asarray(a.theta, dtype=np.float64)
    arg = np.sin(phi1) * np.sin(phi2) + np.cos(phi1) * np.cos(phi2) * np.cos(dtheta)
    return _scalar(np.arccos(np.clip(arg, -1.0, 1.0)))


# -- projection ---------------------------------------------------------------


def kb_radius(theta, k) -> np.ndarray:
    """Kannala-Brandt radius ``theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9``."""
    k1, k2, k3, k4 = k
    t2 = theta * theta
    return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))


def _kb_radius_derivative(theta, k) -> np.ndarray:
    k1, k2, k3, k4 = k
    t2 = theta * theta
    return 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))


def kb_max_incidence(cam: CameraModel) -> float:
    """Largest incidence angle, at most pi, over which the KB radius is increasing."""
    k1, k2, k3, k4 = cam.k
    # r'(theta) as a polynomial in s = theta^2, highest power first
    coeffs = np.trim_zeros([9.0 * k4, 7.0 * k3, 5.0 * k2, 3.0 * k1, 1.0], "f")
    limit = math.pi
    if len(coeffs) > 1:
        for s in np.roots(coeffs):
            if abs(s.imag) < 1e-12 and s.real > 0:
                limit = min(limit, math.sqrt(s.real))
    return limit


def _check_unit(rays: np.ndarray) -> None:
    if rays.shape[-1:] != (3,):
        raise DomainError(f"rays must have a trailing dimension of 3, got shape {rays.shape}")
    norms = np.linalg.norm(rays, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise DomainError("rays must have unit norm (tolerance 1e-9)")


def project(cam: CameraModel, rays) -> tuple[np.ndarray, np.ndarray]:
    """Project unit rays to continuous pixels.

    Args:
        cam: Camera model.
        rays: ``(..., 3)`` unit vectors in the camera frame.

    Returns:
        pixels: ``(..., 2)`` continuous ``(row, col)``. NaN where the ray
            cannot be imaged.
        ok: ``(...)`` boolean mask of rays the model can image. Pixels may
            still fall outside the image bounds.
    """
    rays = np.asarray(rays, dtype=np.float64)
    _check_unit(rays)
    x, y, z = rays[..., 0], rays[..., 1], rays[..., 2]

    if cam.kind is CameraKind.EQUIRECT:
        row, col = direction_to_erp_pixel(ray_to_direction(rays), cam.size)
        pix = np.stack(np.broadcast_arrays(row, col), axis=-1)
        return pix, np.ones(rays.shape[:-1], dtype=bool)

    with np.errstate(divide="ignore", invalid="ignore"):
        if cam.kind is CameraKind.PINHOLE:
            ok = z > 0
            mx, my = x / z, y / z
        elif cam.kind is CameraKind.UNIFIED_MEI:
            # the unit sphere shifted by xi along the axis; w bounds the imageable cap
            w = cam.xi if cam.xi <= 1.0 else 1.0 / cam.xi
            denom = z + cam.xi
            ok = (denom > 0) & (z > -w)
            mx, my = x / denom, y / denom
        else:
            rho = np.hypot(x, y)
            incidence = np.arctan2(rho, z)
            ok = incidence <= kb_max_incidence(cam)
            radial = np.where(rho > 0, kb_radius(incidence, cam.k) / rho, 0.0)
            mx, my = x * radial, y * radial
        row = np.where(ok, cam.cy - cam.fy * my, np.nan)
        col = np.where(ok, cam.cx + cam.fx * mx, np.nan)
    return np.stack([row, col], axis=-1), ok


def unproject_masked(cam: CameraModel, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Back-project pixels to unit rays, flagging pixels with no preimage.

    KB pixels beyond the radius reached at the maximum incidence angle and
    unified-model pixels outside the mirror's image disc are returned as NaN
    rays with ``ok`` False.

    Raises:
        ConvergenceError: the KB Newton solve did not reach 1e-12 on the
            normalized radius within 50 iterations.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    row, col = pixels[..., 0], pixels[..., 1]

    if cam.kind is CameraKind.EQUIRECT:
        rays = direction_to_ray(erp_pixel_to_direction(row, col, cam.size))
        return rays, np.ones(row.shape, dtype=bool)

    mx = (col - cam.cx) / cam.fx
    my = (cam.cy - row) / cam.fy

    if cam.kind is CameraKind.PINHOLE:
        rays = np.stack([mx, my, np.ones_like(mx)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True), np.ones(mx.shape, dtype=bool)

    if cam.kind is CameraKind.UNIFIED_MEI:
        r2 = mx * mx + my * my
        disc = 1.0 + (1.0 - cam.xi * cam.xi) * r2
        ok = disc >= 0
        factor = (cam.xi + np.sqrt(np.where(ok, disc, 0.0))) / (r2 + 1.0)
        rays = np.stack([factor * mx, factor * my, factor - cam.xi], axis=-1)
        rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        w = cam.xi if cam.xi <= 1.0 else 1.0 / cam.xi
        ok &= rays[..., 2] > -w
        rays[~ok] = np.nan
        return rays, ok

    r_obs = np.hypot(mx, my)
    theta_max = kb_max_incidence(cam)
    ok = r_obs <= kb_radius(theta_max, cam.k)
    incidence = _kb_solve_incidence(r_obs[ok], cam.k, theta_max)
    sin_t = np.zeros(r_obs.shape)
    cos_t = np.ones(r_obs.shape)
    sin_t[ok] = np.sin(incidence)
    cos_t[ok] = np.cos(incidence)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(r_obs > 0, sin_t / r_obs, 0.0)
    rays = np.stack([scale * mx, scale * my, cos_t], axis=-1)
    rays[~ok] = np.nan
    return rays, ok


def _kb_solve_incidence(r_obs: np.ndarray, k, theta_max: float) -> np.ndarray:
    # Newton on r(theta) = r_obs seeded at theta0 = r_obs
    theta = np.minimum(r_obs.copy(), theta_max)
    residual = kb_radius(theta, k) - r_obs
    for _ in range(KB_NEWTON_MAX_ITER):
        active = np.abs(residual) > KB_NEWTON_TOL
        if not np.any(active):
            return theta
        th = theta[active]
        th = np.clip(th - residual[active] / _kb_radius_derivative(th, k), 0.0, theta_max)
        theta[active] = th
        residual[active] = kb_radius(th, k) - r_obs[active]
    worst = float(np.max(np.abs(residual))) if residual.size else 0.0
    if worst > KB_NEWTON_TOL:
        raise ConvergenceError("Kannala-Brandt unprojection did not converge", worst)
    return theta


def unproject(cam: CameraModel, pixels) -> np.ndarray:
    """Back-project continuous pixels ``(..., 2)`` to unit rays ``(..., 3)``.

    Raises:
        DomainError: some pixel has no preimage under the camera model.
    """
    rays, ok = unproject_masked(cam, pixels)
    if not np.all(ok):
        raise DomainError(f"{int(np.sum(~ok))} pixel(s) have no preimage under the {cam.kind.value} model")
    return rays


def pixel_grid(size: tuple[int, int]) -> np.ndarray:
    """``(H, W, 2)`` array of integer pixel-center coordinates ``(row, col)``."""
    height, width = size
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def _scalar(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a
