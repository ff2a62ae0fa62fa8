"""Random instance generators shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from depthkit.geometry import CameraModel

STRIDES = (2, 4, 7, 14)

KB_COEFFS = {
    "mild": (-0.01, 0.002, 0.0, 0.0),
    "strong": (0.05, -0.01, 0.001, -0.0001),
}


def sample_cameras(size=32):
    """One camera of every kind on a ``size x size`` sensor."""
    c = (size - 1) / 2
    f = size / 3.0
    return {
        "pinhole": CameraModel.pinhole(size, size, f * 1.2, f * 1.1, c, c),
        "kb_mild": CameraModel.kannala_brandt(size, size, f, f, c, c, KB_COEFFS["mild"]),
        "kb_strong": CameraModel.kannala_brandt(size, size, f, f * 0.95, c, c, KB_COEFFS["strong"]),
        "mei": CameraModel.unified(size, size, f * 1.5, f * 1.5, c, c, 0.8),
        "erp": CameraModel.equirect(size, size),
    }


def random_directions(rng, n):
    """Uniform points on the sphere as ``(theta, phi)`` arrays."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.arctan2(v[:, 0], v[:, 2]), np.arcsin(np.clip(v[:, 1], -1, 1))


def tie_free_depth(rng, shape, r=None, low=0.5, high=2.0, margin=1e-4):
    """Depths with no two pixels closer than ``margin`` and, given a stride ``r``,
    no pixel within ``margin`` of a neighboring block median it is not part of.

    Such inputs keep central differences with step 1e-6 away from every
    median-selection switch and every kink of ``|d_hi - d_lo|``.
    """
    height, width = shape
    n = height * width
    step = (high - low) / n
    while True:
        jitter = rng.uniform(-0.3, 0.3, n)
        values = (low + step * (rng.permutation(n) + 0.5 + jitter)).reshape(shape)
        if r is None or _clear_of_medians(values, r, margin):
            return values


def _clear_of_medians(values, r, margin):
    height, width = values.shape
    h, w = -(-height // r), -(-width // r)
    med = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            med[i, j] = np.median(values[i * r : (i + 1) * r, j * r : (j + 1) * r])
    for y in range(height):
        for x in range(width):
            pr, pc = min(y // r, h - 1), min(x // r, w - 1)
            for a in range(max(pr - 1, 0), min(pr + 2, h)):
                for b in range(max(pc - 1, 0), min(pc + 2, w)):
                    gap = abs(values[y, x] - med[a, b])
                    if gap < margin and not (a == pr and b == pc and gap == 0.0):
                        return False
    return True


def random_dgse_instance(rng, max_side=64, invalid_fraction=0.0):
    r = int(rng.choice(STRIDES))
    height = int(rng.integers(r, max_side + 1))
    width = int(rng.integers(r, max_side + 1))
    depth = rng.uniform(0.2, 5.0, (height, width))
    valid = rng.random((height, width)) >= invalid_fraction
    return depth, valid, r


def log_uniform(rng, low, high, size=None):
    return np.exp(rng.uniform(math.log(low), math.log(high), size))
