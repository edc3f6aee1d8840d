"""Parametric hand model: schema, validation, file round-trip, pose containers.

The model file is a single self-describing JSON document (UTF-8) holding the
template mesh, skeleton, shape bases, joint regressor, skinning weights, and
per-joint Euler conventions.  Arrays are row-major nested lists; floats are
serialized with full repr precision so a save/load round trip is bit-exact.

Conventions baked into the schema:
  * V vertices (>= 4), F faces, J = 21 joints, 16 skeleton nodes
    (wrist root + 15 articulated: per finger MCP/PIP/DIP, thumb CMC/MCP/IP).
  * theta rows follow skeleton nodes 1..15, columns are (bend, splay, twist).
  * euler_conventions stores, per articulated joint, the three unit axis
    vectors and the application order of the rotations (data, not code).
  * skeleton node rest positions are tied to the joint regressor: the stored
    positions must equal (H @ template)[node_joint] so that posed joints are
    always exactly H @ posed vertices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidModel, NonWatertight, SchemaError

FORMAT_VERSION = "1.0"
N_JOINTS = 21
N_NODES = 16
N_SHAPE = 10
AXIS_NAMES = ("bend", "splay", "twist")


def check_format_version(payload, kind):
    ver = payload.get("format_version")
    if not isinstance(ver, str) or "." not in ver:
        raise SchemaError(f"{kind}: missing or malformed format_version")
    major = ver.split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise SchemaError(f"{kind}: unsupported major version {ver!r}")
    if payload.get("kind") != kind:
        raise SchemaError(f"expected kind {kind!r}, found {payload.get('kind')!r}")


def canonical_dumps(payload):
    """Stable serialization used for checksums and file writes."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(eq=False)
class HandShapeModel:
    name: str
    template: np.ndarray          # (V,3) meters
    faces: np.ndarray             # (F,3) int
    shape_bases: np.ndarray       # (V,3,10) meters per unit beta
    joint_regressor: np.ndarray   # (21,V) convex rows
    skinning_weights: np.ndarray  # (V,16) convex rows
    parents: np.ndarray           # (16,) parent index, -1 at root
    node_joint: np.ndarray        # (16,) landmark index of each skeleton node
    node_positions: np.ndarray    # (16,3) rest positions, == (H@template)[node_joint]
    axes: np.ndarray              # (15,3,3) unit rows: bend, splay, twist
    rotation_order: np.ndarray    # (15,3) application order as theta-column indices
    joint_names: list = field(default_factory=list)
    node_names: list = field(default_factory=list)
    _checksum: str = field(default="", repr=False)

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def checksum(self):
        if not self._checksum:
            body = self.to_dict()
            body.pop("checksum", None)
            digest = hashlib.sha256(canonical_dumps(body).encode()).hexdigest()
            self._checksum = f"sha256:{digest}"
        return self._checksum

    @property
    def model_id(self):
        return self.checksum.split(":", 1)[1][:16]

    def to_dict(self):
        conventions = []
        for j in range(N_NODES - 1):
            conventions.append({
                "joint": self.node_names[j + 1] if self.node_names else f"joint{j}",
                "bend": self.axes[j, 0].tolist(),
                "splay": self.axes[j, 1].tolist(),
                "twist": self.axes[j, 2].tolist(),
                "order": [AXIS_NAMES[k] for k in self.rotation_order[j]],
            })
        return {
            "format_version": FORMAT_VERSION,
            "kind": "handfit.model",
            "name": self.name,
            "units": "m",
            "counts": {
                "vertices": int(self.n_vertices),
                "faces": int(self.n_faces),
                "joints": N_JOINTS,
                "nodes": N_NODES,
            },
            "template_vertices": self.template.tolist(),
            "faces": self.faces.tolist(),
            "shape_bases": self.shape_bases.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "skinning_weights": self.skinning_weights.tolist(),
            "skeleton": {
                "parents": self.parents.tolist(),
                "node_joint": self.node_joint.tolist(),
                "node_positions": self.node_positions.tolist(),
                "node_names": list(self.node_names),
            },
            "euler_conventions": conventions,
            "joint_names": list(self.joint_names),
        }


@dataclass
class PoseState:
    """Optimization variables: articulation, shape, camera, landmark noise."""
    theta: np.ndarray       # (15,3) radians
    beta: np.ndarray        # (10,)
    camera: "CameraParams"  # noqa: F821 - defined in camera module
    log_sigma: np.ndarray   # (21,) log-pixels

    def copy(self):
        return PoseState(self.theta.copy(), self.beta.copy(),
                         self.camera.copy(), self.log_sigma.copy())


@dataclass
class HandMesh:
    vertices: np.ndarray  # (V,3)
    joints: np.ndarray    # (21,3)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]


def _as_float(payload, key, shape):
    try:
        arr = np.asarray(payload[key], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"model field {key!r} missing or non-numeric") from exc
    if arr.shape != shape:
        raise SchemaError(f"model field {key!r} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidModel(f"model field {key!r} contains non-finite values")
    return arr


def validate_mesh_topology(faces, n_vertices):
    """Closed oriented 2-manifold: every directed edge appears exactly once."""
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise SchemaError(f"faces must be (F,3), got {faces.shape}")
    if faces.min(initial=0) < 0 or faces.max(initial=-1) >= n_vertices:
        raise InvalidModel("face index out of range")
    if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) \
            or np.any(faces[:, 0] == faces[:, 2]):
        raise InvalidModel("degenerate face with repeated vertex")
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    keys = directed[:, 0].astype(np.int64) * n_vertices + directed[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    if np.any(counts > 1):
        raise NonWatertight("directed edge repeated: inconsistent orientation")
    rev = directed[:, 1].astype(np.int64) * n_vertices + directed[:, 0]
    if not np.isin(rev, uniq).all():
        raise NonWatertight("open edge: not every edge is shared by exactly 2 triangles")


def _validate_convex_rows(mat, what, tol=1e-6):
    if np.any(mat < -1e-12):
        raise InvalidModel(f"{what} has negative entries")
    sums = mat.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise InvalidModel(f"{what} row {bad} sums to {sums[bad]:.8f}, expected 1")


def model_from_dict(payload):
    check_format_version(payload, "handfit.model")
    counts = payload.get("counts", {})
    V = counts.get("vertices")
    F = counts.get("faces")
    if not isinstance(V, int) or not isinstance(F, int) or V < 4:
        raise SchemaError("model counts.vertices/faces missing or invalid (V >= 4)")
    if counts.get("joints") != N_JOINTS or counts.get("nodes") != N_NODES:
        raise SchemaError(f"model must declare {N_JOINTS} joints and {N_NODES} nodes")
    if payload.get("units") != "m":
        raise SchemaError("model units must be 'm'")

    template = _as_float(payload, "template_vertices", (V, 3))
    shape_bases = _as_float(payload, "shape_bases", (V, 3, N_SHAPE))
    regressor = _as_float(payload, "joint_regressor", (N_JOINTS, V))
    weights = _as_float(payload, "skinning_weights", (V, N_NODES))
    try:
        faces = np.asarray(payload["faces"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError("model field 'faces' missing or non-integer") from exc
    if faces.shape != (F, 3):
        raise SchemaError(f"faces shape {faces.shape} does not match counts ({F},3)")

    validate_mesh_topology(faces, V)
    _validate_convex_rows(weights, "skinning_weights")
    _validate_convex_rows(regressor, "joint_regressor")

    skel = payload.get("skeleton", {})
    parents = np.asarray(skel.get("parents", []), dtype=np.int64)
    node_joint = np.asarray(skel.get("node_joint", []), dtype=np.int64)
    node_positions = np.asarray(skel.get("node_positions", []), dtype=float)
    node_names = list(skel.get("node_names", []))
    if parents.shape != (N_NODES,) or node_joint.shape != (N_NODES,):
        raise SchemaError("skeleton parents/node_joint must have 16 entries")
    if node_positions.shape != (N_NODES, 3):
        raise SchemaError("skeleton node_positions must be (16,3)")
    if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, N_NODES)):
        raise InvalidModel("skeleton is not a topologically ordered tree with a single root")
    if np.any(node_joint < 0) or np.any(node_joint >= N_JOINTS) \
            or len(set(node_joint.tolist())) != N_NODES:
        raise InvalidModel("node_joint must map nodes to distinct landmark indices")
    regressed = regressor @ template
    if np.max(np.abs(node_positions - regressed[node_joint])) > 1e-8:
        raise InvalidModel("skeleton node_positions disagree with joint_regressor @ template")

    conventions = payload.get("euler_conventions")
    if not isinstance(conventions, list) or len(conventions) != N_NODES - 1:
        raise SchemaError("euler_conventions must list 15 articulated joints")
    axes = np.zeros((N_NODES - 1, 3, 3))
    order = np.zeros((N_NODES - 1, 3), dtype=np.int64)
    for j, entry in enumerate(conventions):
        for k, name in enumerate(AXIS_NAMES):
            axes[j, k] = np.asarray(entry.get(name), dtype=float)
        try:
            order[j] = [AXIS_NAMES.index(a) for a in entry.get("order", [])]
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"euler_conventions[{j}] has invalid order") from exc
        if sorted(order[j].tolist()) != [0, 1, 2]:
            raise SchemaError(f"euler_conventions[{j}] order must permute bend/splay/twist")
        triad = axes[j]
        if np.max(np.abs(triad @ triad.T - np.eye(3))) > 1e-8:
            raise InvalidModel(f"euler_conventions[{j}] axes are not orthonormal")
        if abs(np.linalg.det(triad) - 1.0) > 1e-8:
            raise InvalidModel(f"euler_conventions[{j}] axes are not right-handed")

    joint_names = list(payload.get("joint_names", []))
    if len(joint_names) != N_JOINTS or len(node_names) != N_NODES:
        raise SchemaError("joint_names (21) and node_names (16) are required")

    model = HandShapeModel(
        name=str(payload.get("name", "unnamed")),
        template=template, faces=faces, shape_bases=shape_bases,
        joint_regressor=regressor, skinning_weights=weights,
        parents=parents, node_joint=node_joint, node_positions=node_positions,
        axes=axes, rotation_order=order,
        joint_names=joint_names, node_names=node_names,
    )
    for arr in (model.template, model.faces, model.shape_bases, model.joint_regressor,
                model.skinning_weights, model.parents, model.node_joint,
                model.node_positions, model.axes, model.rotation_order):
        arr.flags.writeable = False

    declared = payload.get("checksum")
    if declared is not None and declared != model.checksum:
        raise InvalidModel(f"model checksum mismatch: file says {declared}")
    return model


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(payload)


def save_model(model, path):
    payload = model.to_dict()
    payload["checksum"] = model.checksum
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(payload))
        fh.write("\n")
