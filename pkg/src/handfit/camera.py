"""Full-perspective camera with a constant focal length.

The camera C = (s, R, t) places the hand at depth t_z = 2*focal/(s*image_size)
so that the unitless scale s matches the familiar weak-perspective crop
convention: as the hand's depth extent shrinks, pixel offsets approach
(s*image_size/2)*(x + t_x).  Projection is x_px = focal*x_c/z_c + image_size/2
on the camera-frame point x_c = R X + (t_x, t_y, t_z).

The scale is carried as log(s) inside the optimizer so positivity needs no
constraint; the rotation is an unnormalized axis-angle vector with a Taylor
branch near zero so gradients stay exact at the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dual as dm
from .errors import BehindCamera

DEFAULT_FOCAL = 5000.0
DEFAULT_IMAGE_SIZE = 224
Z_MIN = 1e-3

# cross-product tensor: skew(w) = _EPS @ w
_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2], _EPS[0, 2, 1] = -1.0, 1.0
_EPS[1, 0, 2], _EPS[1, 2, 0] = 1.0, -1.0
_EPS[2, 0, 1], _EPS[2, 1, 0] = -1.0, 1.0


@dataclass
class CameraParams:
    s: float = 6.0
    rvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rvec = np.asarray(self.rvec, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.rvec.shape != (3,) or self.t.shape != (2,):
            raise ValueError("camera needs rvec (3,) and t (2,)")
        if not (np.isfinite(self.s) and self.s > 0):
            raise ValueError("camera scale must be positive and finite")
        if not (np.all(np.isfinite(self.rvec)) and np.all(np.isfinite(self.t))):
            raise ValueError("camera parameters must be finite")

    def copy(self):
        return CameraParams(s=float(self.s), rvec=self.rvec.copy(), t=self.t.copy())


def rodrigues(rvec):
    """Rotation matrix from an axis-angle vector; accepts Jets."""
    s2 = dm.sumsq(rvec)
    K = dm.const_dot(_EPS, rvec)
    K2 = dm.matmul(K, K)
    if dm.value(s2) < 1e-12:
        a = 1.0 - s2 * (1.0 / 6.0)
        b = 0.5 - s2 * (1.0 / 24.0)
    else:
        th = dm.sqrt(s2)
        a = dm.sin(th) / th
        b = (1.0 - dm.cos(th)) / s2
    return np.eye(3) + _scale(a, K) + _scale(b, K2)


def _scale(scalar, mat):
    # scalar * matrix for any Jet/const mix (Jet scalars broadcast fine)
    return scalar * mat if isinstance(scalar, dm.Jet) else mat * scalar


def depth_offset(log_s, focal, image_size):
    """t_z = 2*focal/(s*image_size), from log-scale."""
    return (2.0 * focal / image_size) * dm.exp(-log_s)


def project_arrays(joints, log_s, rvec, t, focal=DEFAULT_FOCAL,
                   image_size=DEFAULT_IMAGE_SIZE):
    """Project (J,3) meters to (J,2) pixels; every argument may be a Jet."""
    R = rodrigues(rvec)
    cam = dm.matmul(joints, dm.mT(R))
    t_z = depth_offset(log_s, focal, image_size)
    shift = dm.stack([t[0], t[1], t_z])
    cam = cam + shift
    z = cam[..., 2]
    if np.any(dm.value(z) <= Z_MIN):
        raise BehindCamera("a joint landed behind the camera plane")
    half = image_size / 2.0
    u = cam[..., 0] / z * focal + half
    v = cam[..., 1] / z * focal + half
    return dm.stack([u, v], axis=-1)


def project(joints, camera: CameraParams, focal=DEFAULT_FOCAL,
            image_size=DEFAULT_IMAGE_SIZE):
    """Primal-only convenience wrapper around project_arrays."""
    joints = np.asarray(joints, dtype=float)
    return project_arrays(joints, np.log(camera.s), camera.rvec, camera.t,
                          focal=focal, image_size=image_size)
