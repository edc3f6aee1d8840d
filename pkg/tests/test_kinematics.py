import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from handfit import dual as dm
from handfit.kinematics import fk_arrays, forward_kinematics
from handfit.synth_model import synth_test_model


@pytest.fixture(scope="module")
def model():
    return synth_test_model(0)


def oracle_vertices(model, theta, beta):
    """Independent pose oracle: scipy rotations, explicit per-node loop,
    each vertex moved rigidly by its maximum-weight frame only."""
    shaped = model.template + np.tensordot(model.shape_bases, beta, axes=([2], [0]))
    rest = (model.joint_regressor @ shaped)[model.node_joint]

    local = []
    for j in range(15):
        R = np.eye(3)
        for col in model.rotation_order[j]:
            R = Rotation.from_rotvec(model.axes[j, col] * theta[j, col]).as_matrix() @ R
        local.append(R)

    W = [np.eye(3)] * 16
    P = [rest[0]] * 16
    for n in range(1, 16):
        p = model.parents[n]
        W[n] = W[p] @ local[n - 1]
        P[n] = P[p] + W[p] @ (rest[n] - rest[p])

    frame = np.argmax(model.skinning_weights, axis=1)
    out = np.empty_like(shaped)
    for v in range(len(shaped)):
        b = frame[v]
        out[v] = W[b] @ (shaped[v] - rest[b]) + P[b]
    return out


def test_rest_pose_identity(model):
    mesh = forward_kinematics(model, np.zeros((15, 3)), np.zeros(10))
    assert np.abs(mesh.vertices - model.template).max() < 1e-12


def test_shape_blend_is_linear(model):
    rng = np.random.default_rng(0)
    b1, b2 = rng.normal(size=10), rng.normal(size=10)
    z = np.zeros((15, 3))
    d1 = forward_kinematics(model, z, b1).vertices - model.template
    d2 = forward_kinematics(model, z, b2).vertices - model.template
    d12 = forward_kinematics(model, z, b1 + b2).vertices - model.template
    assert np.abs(d12 - (d1 + d2)).max() < 1e-9


def test_unit_shape_basis(model):
    e1 = np.eye(10)[0]
    mesh = forward_kinematics(model, np.zeros((15, 3)), e1)
    assert np.abs(mesh.vertices - (model.template + model.shape_bases[:, :, 0])).max() < 1e-12


def test_joints_equal_regressed_vertices(model):
    rng = np.random.default_rng(1)
    theta = rng.uniform(-0.5, 0.5, (15, 3))
    beta = rng.normal(0, 0.5, 10)
    mesh = forward_kinematics(model, theta, beta)
    assert np.array_equal(mesh.joints, model.joint_regressor @ mesh.vertices)


def test_rigid_equivariance(model):
    rng = np.random.default_rng(2)
    theta = rng.uniform(-0.6, 0.6, (15, 3))
    beta = rng.normal(0, 0.5, 10)
    Q = Rotation.from_rotvec([0.3, -0.7, 0.5]).as_matrix()
    plain = forward_kinematics(model, theta, beta)
    rotated = forward_kinematics(model, theta, beta, root_rot=Q)
    assert np.abs(rotated.vertices - plain.vertices @ Q.T).max() < 1e-9
    assert np.abs(rotated.joints - plain.joints @ Q.T).max() < 1e-9


def test_index_bend_moves_tip_not_thumb(model):
    theta = np.zeros((15, 3))
    theta[0, 0] = np.pi / 2  # index MCP bend
    rest = forward_kinematics(model, np.zeros((15, 3)), np.zeros(10))
    mesh = forward_kinematics(model, theta, np.zeros(10))
    index_tip, thumb = 8, [1, 2, 3, 4]
    assert np.linalg.norm(mesh.joints[index_tip] - rest.joints[index_tip]) > 0.02
    assert np.abs(mesh.joints[thumb] - rest.joints[thumb]).max() < 1e-9
    assert np.abs(mesh.joints[0] - rest.joints[0]).max() < 1e-9


def test_matches_rigid_oracle_on_single_weight_vertices(model):
    rng = np.random.default_rng(3)
    single = np.flatnonzero((model.skinning_weights > 0).sum(axis=1) == 1)
    assert len(single) >= 200  # palm is rigid by construction
    for _ in range(5):
        theta = rng.uniform(-0.7, 0.7, (15, 3))
        beta = rng.normal(0, 0.5, 10)
        ours = forward_kinematics(model, theta, beta).vertices
        ora = oracle_vertices(model, theta, beta)
        assert np.abs(ours[single] - ora[single]).max() < 1e-12


def test_oracle_approximates_blended_vertices(model):
    # non-single-weight vertices should still be close to the rigid oracle
    rng = np.random.default_rng(4)
    theta = rng.uniform(-0.4, 0.4, (15, 3))
    ours = forward_kinematics(model, theta, np.zeros(10)).vertices
    ora = oracle_vertices(model, theta, np.zeros(10))
    assert np.abs(ours - ora).max() < 0.02


def test_fk_jet_gradients_match_fd(model):
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(3):
        theta = rng.uniform(-0.5, 0.5, (15, 3))
        beta = rng.normal(0, 0.5, 10)
        x = np.concatenate([theta.ravel(), beta])

        def f(vec):
            v, j = fk_arrays(model, vec[:45].reshape(15, 3), vec[45:])
            return float(np.sum(v * v) + np.sum(j * j))

        tj = dm.Jet.seed(theta, np.arange(45).reshape(15, 3), 55)
        bj = dm.Jet.seed(beta, np.arange(45, 55), 55)
        v, j = fk_arrays(model, tj, bj)
        grad = (dm.sumsq(v) + dm.sumsq(j)).tan
        fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(55)])
        denom = np.maximum(np.abs(fd), 1e-4)
        assert np.max(np.abs(grad - fd) / denom) < 1e-4


# -- joint-only fast path ------------------------------------------------------


def test_joint_fk_matches_full_pass(model):
    from handfit.kinematics import JointFK
    jfk = JointFK(model)
    rng = np.random.default_rng(5)
    for trial in range(20):
        theta = rng.uniform(-1.5, 1.5, (15, 3))
        beta = rng.uniform(-1.0, 1.0, 10)
        _, joints = fk_arrays(model, theta, beta)
        assert np.allclose(jfk(theta, beta), joints, atol=1e-10)
    root = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
    _, joints = fk_arrays(model, theta, beta, root_rot=root)
    assert np.allclose(jfk(theta, beta, root_rot=root), joints, atol=1e-10)


def test_joint_fk_dual_tangents_match(model):
    from handfit.kinematics import JointFK
    jfk = JointFK(model)
    rng = np.random.default_rng(6)
    theta = dm.Jet.seed(rng.uniform(-1.0, 1.0, (15, 3)),
                        np.arange(45).reshape(15, 3), 55)
    beta = dm.Jet.seed(rng.uniform(-0.8, 0.8, 10), 45 + np.arange(10), 55)
    _, joints = fk_arrays(model, theta, beta)
    fast = jfk(theta, beta)
    assert np.allclose(fast.val, joints.val, atol=1e-10)
    assert np.allclose(fast.tan, joints.tan, atol=1e-10)


def test_skinned_subset_matches_full(model):
    from handfit.kinematics import (JointFK, node_transforms, shaped_template,
                                    skinned_vertices)
    jfk = JointFK(model)
    rng = np.random.default_rng(7)
    theta = dm.Jet.seed(rng.uniform(-1.0, 1.0, (15, 3)),
                        np.arange(45).reshape(15, 3), 55)
    beta = dm.Jet.seed(rng.uniform(-0.8, 0.8, 10), 45 + np.arange(10), 55)
    vertices, _ = fk_arrays(model, theta, beta)

    rot, trans = node_transforms(model, theta, jfk.rest_nodes(beta))
    ids = np.array([0, 17, 58, 222, 301, 511])
    sub = skinned_vertices(model, rot, trans,
                           shaped_template(model, beta, ids), ids)
    assert np.allclose(sub.val, vertices.val[ids], atol=1e-12)
    assert np.allclose(sub.tan, vertices.tan[ids], atol=1e-12)
