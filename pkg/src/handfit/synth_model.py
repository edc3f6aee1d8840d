"""Procedurally generated test hand.

The synthetic hand stands in for license-restricted hand-scan assets so the
whole pipeline is testable offline.  It is built from six disjoint closed
components: a UV-ellipsoid palm and five capsule digits, totalling exactly
512 vertices and 1000 triangles.  Every component is watertight with outward
orientation, so the union is a valid oriented 2-manifold.

Skinning is distance-falloff against the rest bone segments, restricted per
component: palm vertices bind rigidly to the wrist frame, digit vertices only
to their own three frames.  Cross-digit weights are therefore exactly zero,
which keeps distant fingers bit-identically fixed when one joint moves.

The joint regressor places ring-centroid joints: Gaussian weights over a
digit's vertices, which by ring symmetry put every regressed joint exactly on
the digit axis; fingertips are one-hot on the capsule tip vertex.
"""

from __future__ import annotations

import numpy as np

from .model import AXIS_NAMES, HandShapeModel, model_from_dict

PALM_SECTORS, PALM_RINGS = 20, 11     # 20*11 + 2 poles = 222 vertices
DIGIT_SECTORS = 8                     # 8*7 + 2 poles = 58 vertices per digit

FINGERS = ("index", "middle", "ring", "pinky")
NODE_NAMES = ["wrist"]
for _f in FINGERS:
    NODE_NAMES += [f"{_f}_mcp", f"{_f}_pip", f"{_f}_dip"]
NODE_NAMES += ["thumb_cmc", "thumb_mcp", "thumb_ip"]

JOINT_NAMES = ["wrist", "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip"]
for _f in FINGERS:
    JOINT_NAMES += [f"{_f}_mcp", f"{_f}_pip", f"{_f}_dip", f"{_f}_tip"]

# landmark index of each skeleton node (tips are landmarks only, not nodes)
NODE_JOINT = [0, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19, 1, 2, 3]
PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14]
TIP_LANDMARK = {"thumb": 4, "index": 8, "middle": 12, "ring": 16, "pinky": 20}


def _lattice_faces(n_rings, n_sec, offset):
    """Faces of a UV lattice: poles at offset+0 (north) and offset+1 (south),
    ring i sector k at offset + 2 + i*n_sec + k."""
    def rv(i, k):
        return offset + 2 + i * n_sec + (k % n_sec)

    faces = []
    for k in range(n_sec):
        faces.append((offset, rv(0, k + 1), rv(0, k)))
    for i in range(n_rings - 1):
        for k in range(n_sec):
            a, b = rv(i, k), rv(i, k + 1)
            c, d = rv(i + 1, k + 1), rv(i + 1, k)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for k in range(n_sec):
        faces.append((offset + 1, rv(n_rings - 1, k), rv(n_rings - 1, k + 1)))
    return faces


def _lattice_vertices(profile, n_sec):
    """Vertices of a surface of revolution around +y. profile: (y, radius)
    rows ordered north to south; poles supplied separately by caller."""
    verts = []
    for y, rad in profile:
        for k in range(n_sec):
            lam = 2.0 * np.pi * k / n_sec
            verts.append((rad * np.cos(lam), y, rad * np.sin(lam)))
    return verts


def _signed_volume(verts, faces):
    v = verts[faces]
    return float(np.einsum("fi,fi->", np.cross(v[:, 0], v[:, 1]), v[:, 2]) / 6.0)


def _ellipsoid(center, semi, n_sec, n_rings, offset):
    phis = np.pi * (np.arange(1, n_rings + 1)) / (n_rings + 1)
    profile = [(np.cos(p), np.sin(p)) for p in phis]
    unit = [(0.0, 1.0, 0.0), (0.0, -1.0, 0.0)] + _lattice_vertices(profile, n_sec)
    verts = np.asarray(unit) * np.asarray(semi) + np.asarray(center)
    faces = _lattice_faces(n_rings, n_sec, offset)
    return verts, faces


def _capsule(base, direction, length, radius, n_sec, offset):
    """Capsule from a sphere center at `base` to one at base + length*direction."""
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    caps = [np.pi / 6, np.pi / 3]
    profile = [(length + radius * np.cos(p), radius * np.sin(p)) for p in caps]
    profile += [(length, radius), (length / 2.0, radius), (0.0, radius)]
    profile += [(radius * np.cos(np.pi - p), radius * np.sin(np.pi - p)) for p in caps[::-1]]
    canon = [(0.0, length + radius, 0.0), (0.0, -radius, 0.0)]
    canon += _lattice_vertices(profile, n_sec)
    canon = np.asarray(canon)

    # rotate +y onto the digit direction
    y = np.array([0.0, 1.0, 0.0])
    v = np.cross(y, u)
    c = float(y @ u)
    if np.linalg.norm(v) < 1e-12:
        rot = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        rot = np.eye(3) + k + k @ k / (1.0 + c)
    verts = canon @ rot.T + np.asarray(base)
    faces = _lattice_faces(7, n_sec, offset)
    return verts, faces


def _segment_distance(points, a, b):
    """Euclidean distance from each point to segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip((points - a) @ ab / max(denom, 1e-18), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1), proj


def synth_test_model(seed: int = 0) -> HandShapeModel:
    rng = np.random.default_rng([int(seed), 20211])

    palm_semi = np.array([0.040, 0.044, 0.013]) * rng.uniform(0.97, 1.03, 3)
    palm_center = np.array([0.0, 0.040, 0.0])

    spec = {
        "index": dict(x=0.030, y=0.090, L=[0.032, 0.020, 0.014], r=0.0070),
        "middle": dict(x=0.010, y=0.100, L=[0.036, 0.024, 0.016], r=0.0072),
        "ring": dict(x=-0.010, y=0.098, L=[0.033, 0.022, 0.015], r=0.0070),
        "pinky": dict(x=-0.030, y=0.086, L=[0.026, 0.017, 0.012], r=0.0062),
    }
    for f in FINGERS:
        d = spec[f]
        d["x"] += rng.uniform(-0.001, 0.001)
        d["y"] += rng.uniform(-0.002, 0.002)
        d["L"] = [seg * rng.uniform(0.94, 1.06) for seg in d["L"]]
        d["r"] *= rng.uniform(0.97, 1.03)
        d["base"] = np.array([d["x"], d["y"], 0.0])
        d["dir"] = np.array([0.0, 1.0, 0.0])

    th_angle = np.deg2rad(40.5 + rng.uniform(-4.0, 4.0))
    thumb = dict(
        base=np.array([0.052 + rng.uniform(-0.001, 0.001),
                       0.022 + rng.uniform(-0.002, 0.002), 0.0]),
        dir=np.array([np.cos(th_angle), np.sin(th_angle), 0.0]),
        L=[seg * rng.uniform(0.94, 1.06) for seg in (0.034, 0.028, 0.022)],
        r=0.0088 * rng.uniform(0.97, 1.03),
    )

    verts_list, faces_list, component = [], [], []
    offset = 0

    pv, pf = _ellipsoid(palm_center, palm_semi, PALM_SECTORS, PALM_RINGS, offset)
    verts_list.append(pv)
    faces_list += pf
    component += ["palm"] * len(pv)
    offset += len(pv)

    digit_order = list(FINGERS) + ["thumb"]
    digit_spec = {**spec, "thumb": thumb}
    for name in digit_order:
        d = digit_spec[name]
        dv, df = _capsule(d["base"], d["dir"], sum(d["L"]), d["r"], DIGIT_SECTORS, offset)
        verts_list.append(dv)
        faces_list += df
        component += [name] * len(dv)
        offset += len(dv)

    template = np.concatenate(verts_list)
    faces = np.asarray(faces_list, dtype=np.int64)
    component = np.asarray(component)
    assert template.shape[0] == 512 and faces.shape[0] == 1000

    # orientation sanity: each closed component must enclose positive volume
    for name in ["palm"] + digit_order:
        comp_faces = faces[np.isin(faces[:, 0], np.flatnonzero(component == name))]
        assert _signed_volume(template, comp_faces) > 0, f"inward-facing {name}"

    # ---- joint regressor -------------------------------------------------
    # Gaussian ring weights per digit; one-hot fingertips; wrist over the palm.
    targets = {"wrist": np.array([0.0, -0.002, 0.0])}
    for name in digit_order:
        d = digit_spec[name]
        stations = np.concatenate([[0.0], np.cumsum(d["L"])])
        labels = (["cmc", "mcp", "ip"] if name == "thumb" else ["mcp", "pip", "dip"])
        for lab, s in zip(labels, stations[:3]):
            targets[f"{name}_{lab}"] = d["base"] + s * d["dir"]

    H = np.zeros((len(JOINT_NAMES), len(template)))
    tau_joint, tau_wrist = 0.006, 0.012
    for j, jname in enumerate(JOINT_NAMES):
        if jname.endswith("_tip"):
            digit = jname[:-4]
            pole = int(np.flatnonzero(component == digit)[0])  # north pole first
            H[j, pole] = 1.0
            continue
        if jname == "wrist":
            sel, tau, tgt = component == "palm", tau_wrist, targets["wrist"]
        else:
            sel, tau, tgt = component == jname.split("_")[0], tau_joint, targets[jname]
        idx = np.flatnonzero(sel)
        w = np.exp(-np.sum((template[idx] - tgt) ** 2, axis=1) / tau**2)
        w[w < 1e-12 * w.max()] = 0.0
        H[j, idx] = w / w.sum()

    node_positions = (H @ template)[NODE_JOINT]

    # ---- skinning weights ------------------------------------------------
    # frame n>0 owns the segment from node n to its child joint (tip landmark
    # for distal frames); palm is rigid under the wrist frame.
    landmark_rest = H @ template
    child_point = {}
    for n in range(1, 16):
        children = [m for m in range(16) if PARENTS[m] == n]
        if children:
            child_point[n] = node_positions[children[0]]
        else:
            digit = NODE_NAMES[n].split("_")[0]
            child_point[n] = landmark_rest[TIP_LANDMARK[digit]]

    digit_frames = {}
    for n in range(1, 16):
        digit_frames.setdefault(NODE_NAMES[n].split("_")[0], []).append(n)

    tau_skin = 0.007
    weights = np.zeros((len(template), 16))
    weights[component == "palm", 0] = 1.0
    for name in digit_order:
        idx = np.flatnonzero(component == name)
        frames = digit_frames[name]
        w = np.zeros((len(idx), len(frames)))
        for c, n in enumerate(frames):
            d, _ = _segment_distance(template[idx], node_positions[n], child_point[n])
            w[:, c] = np.exp(-((d / tau_skin) ** 2))
        w[w < 1e-5 * w.max(axis=1, keepdims=True)] = 0.0
        weights[np.ix_(idx, frames)] = w / w.sum(axis=1, keepdims=True)

    # ---- shape bases -----------------------------------------------------
    bases = np.zeros((len(template), 3, 10))
    bases[:, :, 0] = 0.018 * (template - palm_center)          # global size
    for name in digit_order:                                   # digit length
        idx = component == name
        d = digit_spec[name]
        along = (template[idx] - d["base"]) @ d["dir"]
        bases[idx, :, 1] = 0.030 * np.maximum(along, 0.0)[:, None] * d["dir"]
    for name in digit_order:                                   # digit girth
        idx = component == name
        d = digit_spec[name]
        _, proj = _segment_distance(template[idx], d["base"],
                                    d["base"] + sum(d["L"]) * d["dir"])
        bases[idx, :, 2] = 0.12 * (template[idx] - proj)
    palm_idx = component == "palm"
    bases[palm_idx, 2, 2] = 0.10 * (template[palm_idx, 2] - palm_center[2])
    bases[palm_idx, 0, 3] = 0.030 * template[palm_idx, 0]      # palm width
    for name in digit_order:
        idx = component == name
        bases[idx, 0, 3] = 0.030 * digit_spec[name]["base"][0]
    stagger = {"index": 1.0, "middle": 0.4, "ring": -0.4, "pinky": -1.0, "thumb": 0.0}
    for name in digit_order:                                   # length stagger
        idx = component == name
        d = digit_spec[name]
        along = (template[idx] - d["base"]) @ d["dir"]
        bases[idx, :, 4] = 0.02 * stagger[name] * np.maximum(along, 0.0)[:, None] * d["dir"]
    lo, hi = template.min(axis=0), template.max(axis=0)
    for m in range(5, 10):                                     # smooth seeded fields
        centers = rng.uniform(lo, hi, size=(12, 3))
        dirs = rng.normal(size=(12, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        field = np.zeros_like(template)
        for c, u in zip(centers, dirs):
            g = np.exp(-np.sum((template - c) ** 2, axis=1) / 0.025**2)
            field += g[:, None] * u
        peak = np.abs(field).max()
        bases[:, :, m] = 0.0008 * field / max(peak, 1e-12)

    # ---- euler conventions -------------------------------------------------
    axes = np.zeros((15, 3, 3))
    f_bend, f_splay, f_twist = np.array([-1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0])
    tu = thumb["dir"]
    t_splay = np.array([0.0, 0.0, 1.0])
    t_bend = np.array([-tu[1], tu[0], 0.0])
    for j in range(15):
        if NODE_NAMES[j + 1].startswith("thumb"):
            axes[j] = np.stack([t_bend, t_splay, tu])
        else:
            axes[j] = np.stack([f_bend, f_splay, f_twist])
    # widest range last: twist first, then splay, then bend
    order = np.tile([2, 1, 0], (15, 1))

    payload = {
        "format_version": "1.0",
        "kind": "handfit.model",
        "name": f"synth-{int(seed):04d}",
        "units": "m",
        "counts": {"vertices": int(len(template)), "faces": int(len(faces)),
                   "joints": 21, "nodes": 16},
        "template_vertices": template.tolist(),
        "faces": faces.tolist(),
        "shape_bases": bases.tolist(),
        "joint_regressor": H.tolist(),
        "skinning_weights": weights.tolist(),
        "skeleton": {"parents": PARENTS, "node_joint": NODE_JOINT,
                     "node_positions": node_positions.tolist(),
                     "node_names": NODE_NAMES},
        "euler_conventions": [
            {"joint": NODE_NAMES[j + 1],
             "bend": axes[j, 0].tolist(), "splay": axes[j, 1].tolist(),
             "twist": axes[j, 2].tolist(),
             "order": [AXIS_NAMES[k] for k in order[j]]}
            for j in range(15)
        ],
        "joint_names": JOINT_NAMES,
    }
    return model_from_dict(payload)
