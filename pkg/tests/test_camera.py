"""Camera projection: Rodrigues rotations, perspective math, gradients."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import handfit.dual as dm
from handfit.camera import (
    DEFAULT_FOCAL,
    DEFAULT_IMAGE_SIZE,
    CameraParams,
    depth_offset,
    project,
    project_arrays,
    rodrigues,
)
from handfit.errors import BehindCamera


def test_rodrigues_matches_scipy():
    rng = np.random.default_rng(0)
    mags = [0.0, 1e-10, 1e-7, 1e-3, 0.5, np.pi - 0.1, 2.5]
    for mag in mags:
        for _ in range(5):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            rvec = mag * axis
            want = Rotation.from_rotvec(rvec).as_matrix()
            np.testing.assert_allclose(rodrigues(rvec), want, atol=1e-10)


def test_rodrigues_gradients_incl_origin():
    def fd(rvec, h=1e-6):
        g = np.zeros((3, 3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (rodrigues(rvec + e) - rodrigues(rvec - e)) / (2 * h)
        return g

    for rvec in (np.zeros(3), np.array([1e-8, 0.0, 0.0]),
                 np.array([0.3, -0.2, 0.9])):
        jet = dm.Jet.seed(rvec, np.arange(3), 3)
        got = rodrigues(jet).tan
        np.testing.assert_allclose(got, fd(rvec), atol=1e-8)


def test_origin_projects_to_center():
    cam = CameraParams(s=6.0)
    px = project(np.zeros((1, 3)), cam)
    np.testing.assert_allclose(px, [[112.0, 112.0]], atol=1e-12)


def test_doubling_focal_at_fixed_depth_doubles_offsets():
    pts = np.array([[0.03, -0.02, 0.01], [-0.05, 0.04, -0.02]])
    cam1 = CameraParams(s=6.0)
    cam2 = CameraParams(s=12.0)  # keeps t_z = 2f/(s*size) unchanged
    f = DEFAULT_FOCAL
    assert depth_offset(np.log(cam1.s), f, 224) == pytest.approx(
        depth_offset(np.log(cam2.s), 2 * f, 224))
    off1 = project(pts, cam1, focal=f) - 112.0
    off2 = project(pts, cam2, focal=2 * f) - 112.0
    np.testing.assert_allclose(off2, 2.0 * off1, rtol=1e-12)


def test_weak_perspective_limit():
    rng = np.random.default_rng(3)
    cam = CameraParams(s=6.0, t=np.array([0.02, -0.03]))
    f, size = DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE
    t_z = depth_offset(np.log(cam.s), f, size)
    xy = rng.uniform(-0.08, 0.08, size=(12, 2))
    weak = f * (xy + cam.t) / t_z + size / 2.0

    last = np.inf
    for extent in (1e-2, 1e-4, 1e-6):
        pts = np.concatenate([xy, rng.uniform(-extent, extent, size=(12, 1))], axis=1)
        full = project(pts, cam)
        err = np.max(np.abs(full - weak) / np.maximum(np.abs(weak - size / 2), 1.0))
        assert err < last
        last = err
    assert last < 1e-6


def test_translation_shifts_predictably():
    pts = np.random.default_rng(1).uniform(-0.05, 0.05, size=(6, 3))
    cam = CameraParams(s=7.0, rvec=np.array([0.1, 0.2, -0.3]))
    delta = np.array([0.004, -0.002])
    shifted = CameraParams(s=cam.s, rvec=cam.rvec, t=cam.t + delta)
    z = (pts @ rodrigues(cam.rvec).T)[:, 2] + depth_offset(np.log(cam.s), DEFAULT_FOCAL, 224)
    want = DEFAULT_FOCAL * delta[None, :] / z[:, None]
    got = project(pts, shifted) - project(pts, cam)
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_projection_gradients_match_fd():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.06, 0.06, size=(4, 3))
    state0 = np.concatenate([[np.log(6.5)], [0.2, -0.4, 0.1], [0.01, -0.02]])

    def run(state, pts_flat):
        p = pts_flat.reshape(4, 3)
        return project_arrays(p, state[0], state[1:4], state[4:6])

    width = 6 + 12
    sj = dm.Jet.seed(state0, np.arange(6), width)
    pj = dm.Jet.seed(pts, np.arange(6, width).reshape(4, 3), width)
    got = project_arrays(pj, sj[0], sj[1:4], sj[4:6]).tan

    h = 1e-6
    full = np.concatenate([state0, pts.ravel()])
    fd = np.zeros((4, 2, width))
    for k in range(width):
        up, dn = full.copy(), full.copy()
        up[k] += h
        dn[k] -= h
        fd[..., k] = (run(up[:6], up[6:]) - run(dn[:6], dn[6:])) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-4)
    assert np.max(np.abs(got - fd) / denom) < 1e-4


def test_behind_camera_raises():
    cam = CameraParams(s=6.0)
    t_z = depth_offset(np.log(cam.s), DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE)
    pts = np.array([[0.0, 0.0, -t_z + 5e-4]])
    with pytest.raises(BehindCamera):
        project(pts, cam)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraParams(s=-1.0)
    with pytest.raises(ValueError):
        CameraParams(s=np.inf)
    with pytest.raises(ValueError):
        CameraParams(s=2.0, rvec=np.zeros(4))
    c = CameraParams(s=2.0)
    d = c.copy()
    d.t[0] = 9.0
    assert c.t[0] == 0.0
