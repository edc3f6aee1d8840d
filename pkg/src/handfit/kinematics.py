"""Forward kinematics: shape blend, per-joint Euler rotations, tree
composition, linear blend skinning, joint regression.

One code path serves both plain ndarrays and dual-number Jets (see dual.py),
so the fitter gets exact forward-mode derivatives from the same routine the
primal evaluation uses.

Frame convention: the world transform of articulated node n is
    W_n = W_parent @ R_n,     p_n = p_parent + W_parent @ (rest_n - rest_parent)
with R_n composed from the per-joint axis rotations in the model's stored
application order.  The root frame is the identity (global orientation is the
camera's job), or an optional explicit root rotation for equivariance tests.
Rest node positions are regressed from the shaped template, so joints always
equal joint_regressor @ vertices exactly, for any beta.
"""

from __future__ import annotations

import numpy as np

from . import dual as dm
from .model import HandMesh


def _axis_rotation(axis, angle):
    """Rotation matrices (batched) about constant unit axes. axis: (n,3)
    const, angle: (n,) array or Jet."""
    n = axis.shape[0]
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    kx = np.zeros((n, 3, 3))
    kx[:, 0, 1], kx[:, 0, 2] = -axis[:, 2], axis[:, 1]
    kx[:, 1, 0], kx[:, 1, 2] = axis[:, 2], -axis[:, 0]
    kx[:, 2, 0], kx[:, 2, 1] = -axis[:, 1], axis[:, 0]
    outer = axis[:, :, None] * axis[:, None, :]
    c = dm.cos(angle)
    s = dm.sin(angle)
    return c[:, None, None] * eye + s[:, None, None] * kx + (1.0 - c)[:, None, None] * outer


def joint_rotations(model, theta):
    """Per-joint local rotations (15,3,3) honoring stored application order."""
    order = model.rotation_order  # (15,3) theta-column index, first applied first
    rows = np.arange(15)
    steps = []
    for k in range(3):
        cols = order[:, k]
        steps.append(_axis_rotation(model.axes[rows, cols], theta[rows, cols]))
    return dm.matmul(steps[2], dm.matmul(steps[1], steps[0]))


def shaped_template(model, beta, ids=None):
    """Template plus shape blend, optionally restricted to vertex ids."""
    t = model.template if ids is None else model.template[ids]
    B = model.shape_bases if ids is None else model.shape_bases[ids]
    disp = dm.const_dot(B.reshape(-1, 10), beta)
    return t + disp.reshape(len(t), 3)


def _tree_levels(parents):
    depth = np.zeros(len(parents), dtype=int)
    for n in range(1, len(parents)):
        depth[n] = depth[int(parents[n])] + 1
    return [np.flatnonzero(depth == d) for d in range(int(depth.max()) + 1)]


def node_transforms(model, theta, rest, root_rot=None):
    """World rotations (16,3,3) and skinning translations (16,3) of the
    articulated nodes, given their rest positions (16,3).

    Nodes at the same tree depth share no ancestry constraint, so each level
    is composed in one batched product (3 levels of 5 digits each instead of
    15 sequential 3x3 products)."""
    local = joint_rotations(model, theta)
    parents = np.asarray(model.parents, dtype=int)
    root = np.eye(3) if root_rot is None else np.asarray(root_rot, dtype=float)

    acc_rot = root[None]
    acc_pos = dm.matvec(root, rest[0:1])
    pos_of = np.zeros(len(parents), dtype=int)
    for nodes in _tree_levels(parents)[1:]:
        pidx = pos_of[parents[nodes]]
        pr = acc_rot[pidx]
        new_rot = dm.matmul(pr, local[nodes - 1])
        new_pos = acc_pos[pidx] + dm.matvec(pr, rest[nodes] - rest[parents[nodes]])
        pos_of[nodes] = len(acc_rot) + np.arange(len(nodes))
        acc_rot = dm.concatenate([acc_rot, new_rot])
        acc_pos = dm.concatenate([acc_pos, new_pos])

    rot = acc_rot[pos_of]                          # (16,3,3)
    trans = acc_pos[pos_of] - dm.matvec(rot, rest)  # (16,3)
    return rot, trans


def skinned_vertices(model, rot, trans, shaped, ids=None):
    """Blend-skinned positions, optionally only for vertex ids (``shaped``
    must then already be the same subset)."""
    W = model.skinning_weights if ids is None else model.skinning_weights[ids]
    blended_rot = dm.const_dot(W, rot)     # (V,3,3)
    blended_tr = dm.const_dot(W, trans)    # (V,3)
    return dm.matvec(blended_rot, shaped) + blended_tr


def fk_arrays(model, theta, beta, root_rot=None):
    """Vertices (V,3) and joints (21,3); inputs may be ndarrays or Jets."""
    shaped = shaped_template(model, beta)
    rest = dm.const_dot(model.joint_regressor[model.node_joint], shaped)
    rot, trans = node_transforms(model, theta, rest, root_rot=root_rot)
    vertices = skinned_vertices(model, rot, trans, shaped)
    joints = dm.const_dot(model.joint_regressor, vertices)
    return vertices, joints


class JointFK:
    """Joint-only forward kinematics.

    Landmarks are linear in the skinned vertices, so the regressor can be
    pushed through the blend onto the node transforms once per model:

        joints_j = sum_n R_n @ (C_jn + D_jn beta) + wbar_jn t_n

    One evaluation then touches 21x16 three-vectors instead of every vertex.
    The payoff is on dual numbers, where per-vertex tangents dominate a full
    forward pass; values and tangents agree with ``forward_kinematics`` up
    to floating-point roundoff.
    """

    def __init__(self, model):
        H, W = model.joint_regressor, model.skinning_weights
        self.model = model
        self.wbar = H @ W                                            # (21,16)
        self.C = np.einsum("jv,vn,vk->jnk", H, W, model.template,
                           optimize=True)                            # (21,16,3)
        self.D = np.einsum("jv,vn,vkm->jnkm", H, W, model.shape_bases,
                           optimize=True)                            # (21,16,3,10)
        Hn = model.joint_regressor[model.node_joint]
        self.rest_t = Hn @ model.template                            # (16,3)
        self.rest_B = np.tensordot(Hn, model.shape_bases, axes=1)    # (16,3,10)

    def rest_nodes(self, beta):
        return self.rest_t + dm.const_dot(self.rest_B, beta)

    def joints(self, rot, trans, beta):
        """Joints from node transforms (reusable for subset skinning)."""
        a = self.C + dm.const_dot(self.D, beta)       # (21,16,3)
        spun = dm.matvec(rot, a)                      # broadcast over joints
        return spun.sum(axis=1) + dm.matmul(self.wbar, trans)

    def __call__(self, theta, beta, root_rot=None):
        rot, trans = node_transforms(self.model, theta,
                                     self.rest_nodes(beta), root_rot=root_rot)
        return self.joints(rot, trans, beta)


def forward_kinematics(model, theta, beta, root_rot=None):
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if theta.shape != (15, 3) or beta.shape != (10,):
        raise ValueError(f"theta must be (15,3) and beta (10,), got {theta.shape}, {beta.shape}")
    vertices, joints = fk_arrays(model, theta, beta, root_rot=root_rot)
    return HandMesh(vertices=vertices, joints=joints)
