"""Per-sample landmark fitting: staged first-order optimization of the full
pose state under the knowledge priors.

A fit bootstraps the camera by similarity-aligning the rest-pose landmark
projections to the observation (stage 0), runs Adam with step rejection on
(theta, beta, camera) against the MSE data term (stage 1), then frees the
per-joint noise scales and switches to the heteroscedastic NLL (stage 2) so
unreliable landmarks buy themselves a large sigma instead of dragging the
pose.  The prior (refined joint limits, non-penetration, shape magnitude) is
active throughout.

Gradients are exact forward-mode dual numbers by default; a central-difference
backend differentiates the identical objective as an independent cross-check.
Interior-vertex membership for the penetration term is refreshed once per
accepted iteration; candidate states within an iteration's step search keep
the current membership, matching the gradient (derivatives flow only through
the member depths, never through membership changes).

The projected-landmark objective is riddled with depth-reversal twins: under
the near-orthographic camera, a digit curled toward the viewer, one curled
away, and a straighter digit pitched in depth all project almost identically,
and plain descent commits to whichever interpretation it touches first.
Stage 1 therefore interleaves basin-hop repairs: per-digit bend proposals
(a coarse grid ranked against the digit's own landmarks, plus the mirrored
bends) accepted only when the full loss improves, each sweep followed by a
short camera-only resettle.
"""

from __future__ import annotations

import time
import weakref
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import dual as dm
from .camera import (DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE, CameraParams,
                     project_arrays, rodrigues)
from .errors import (BehindCamera, DataError, DegenerateConfiguration, Diverged,
                     InsufficientJoints, NumericalError, SchemaError)
from .kinematics import (JointFK, _axis_rotation, forward_kinematics,
                         node_transforms, shaped_template, skinned_vertices)
from .likelihood import (SIGMA_INIT, SIGMA_MAX, SIGMA_MIN, mse_loss, nll_loss,
                         nll_sigma_grad)
from .limits import RefinedLimits
from .model import N_JOINTS, PoseState
from .penetration import (InteriorSet, build_neighbor_mask, interior_vertices,
                          non_penetration_loss)
from .prior import pose_loss, prior_loss, refine_limits, shape_loss

GRADIENT_MODES = ("forward-mode-autodiff", "central-finite-difference")
STAGES = ("mse", "nll")

# flat state layout shared by the optimizer and both gradient backends
STATE_LAYOUT = {
    "theta": slice(0, 45), "beta": slice(45, 55), "log_s": slice(55, 56),
    "rvec": slice(56, 59), "t": slice(59, 61), "log_sigma": slice(61, 82),
}
N_POSE = 61   # theta, beta, camera: differentiated with dual numbers
N_STATE = 82  # ... plus the 21 log-sigmas, whose NLL gradient is analytic

_B1, _B2, _ADAM_EPS = 0.9, 0.95, 1e-8
_MAX_REJECTS = 24       # lr shrinks 2x each time; ~1e-9 of step_size at the end
_REL_SLACK = 5e-2       # accepted uphill slack, relative to |current loss|
_PLATEAU_REL = 1e-10
_PLATEAU_RUN = 12
_POLISH_ITERS = 40      # descent budget for one deep rebootstrap judgment
_POLISH_MSE_GATE = 3.0  # px^2 mean: stage-1 data term that warrants one
_POLISH_MARGIN = 0.08   # fraction of the incumbent total a polished
                        # candidate must win by: a mid-descent comparison is
                        # only trusted when it is decisive


@dataclass
class FitConfig:
    """Everything a fit depends on besides the data itself; echoed into every
    report so a result is reproducible from the file alone."""
    lambda1: float = 20000.0        # pose (joint-limit) weight
    lambda2: float = 20000.0        # non-penetration weight
    lambda3: float = 10.0           # shape magnitude weight
    d_tol: float = 0.006            # penetration tolerance, meters
    stage1_iters: int = 300
    stage2_iters: int = 300
    step_size: float = 1e-2
    gradient_mode: str = "forward-mode-autodiff"
    seed: int = 0
    restarts: int = 1
    focal: float = DEFAULT_FOCAL
    image_size: int = DEFAULT_IMAGE_SIZE
    refine_anatomy: bool = True     # dynamic limit refinement on/off
    splay_refines_bend: bool = True
    neighbor_radius: float = 0.02   # geodesic exclusion for the winding test
    winding_threshold: float = 0.5
    segment_pad: float = 0.004

    def __post_init__(self):
        self.lambda1, self.lambda2, self.lambda3 = (
            float(self.lambda1), float(self.lambda2), float(self.lambda3))
        self.d_tol, self.step_size = float(self.d_tol), float(self.step_size)
        self.focal = float(self.focal)
        self.neighbor_radius = float(self.neighbor_radius)
        self.winding_threshold = float(self.winding_threshold)
        self.segment_pad = float(self.segment_pad)
        self.stage1_iters, self.stage2_iters = (
            int(self.stage1_iters), int(self.stage2_iters))
        self.seed, self.restarts = int(self.seed), int(self.restarts)
        self.image_size = int(self.image_size)
        self.refine_anatomy = bool(self.refine_anatomy)
        self.splay_refines_bend = bool(self.splay_refines_bend)
        scalars = (self.lambda1, self.lambda2, self.lambda3, self.d_tol,
                   self.step_size, self.focal, self.neighbor_radius,
                   self.winding_threshold, self.segment_pad)
        if not np.all(np.isfinite(scalars)):
            raise DataError("fit config values must be finite")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise DataError("loss weights must be >= 0")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise DataError("iteration counts must be >= 0")
        if not self.step_size > 0:
            raise DataError("step_size must be > 0")
        if self.gradient_mode not in GRADIENT_MODES:
            raise DataError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.restarts < 1:
            raise DataError("restarts must be >= 1")
        if self.d_tol < 0 or self.focal <= 0 or self.image_size <= 0:
            raise DataError("d_tol >= 0, focal > 0 and image_size > 0 required")
        if self.neighbor_radius <= 0 or self.segment_pad < 0:
            raise DataError("neighbor_radius must be > 0 and segment_pad >= 0")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, payload):
        if not isinstance(payload, dict):
            raise SchemaError("fit config must be a JSON object")
        unknown = sorted(set(payload) - {f.name for f in fields(cls)})
        if unknown:
            raise SchemaError(f"unknown fit config fields: {unknown}")
        return cls(**payload)


@dataclass
class FitReport:
    state: PoseState
    mesh: "HandMesh"      # noqa: F821 - recovered geometry at `state`
    total: float          # final total loss (final stage's data term)
    breakdown: dict       # {"init"|"stage1"|"stage2"|"final": {term: value}}
    trace: list           # per-iteration dicts: stage, iteration, total, terms
    status: str           # converged | max_iters | diverged
    wall_time: float      # seconds; excluded from serialized reports
    config: FitConfig
    source_id: str = ""
    restart: int = 0      # which restart produced the winning state


def pack_state(state: PoseState) -> np.ndarray:
    """Flatten a PoseState into the optimizer's layout (see STATE_LAYOUT)."""
    x = np.empty(N_STATE)
    x[STATE_LAYOUT["theta"]] = np.asarray(state.theta, dtype=float).ravel()
    x[STATE_LAYOUT["beta"]] = state.beta
    x[STATE_LAYOUT["log_s"]] = np.log(state.camera.s)
    x[STATE_LAYOUT["rvec"]] = state.camera.rvec
    x[STATE_LAYOUT["t"]] = state.camera.t
    x[STATE_LAYOUT["log_sigma"]] = state.log_sigma
    return x


def unpack_state(x) -> PoseState:
    """Inverse of pack_state; always returns fresh arrays."""
    L = STATE_LAYOUT
    camera = CameraParams(s=float(np.exp(x[L["log_s"]][0])),
                          rvec=x[L["rvec"]].copy(), t=x[L["t"]].copy())
    return PoseState(theta=x[L["theta"]].reshape(15, 3).copy(),
                     beta=x[L["beta"]].copy(), camera=camera,
                     log_sigma=x[L["log_sigma"]].copy())


# per-model precomputation (neighbor masks by radius, pushed-through joint FK)
_MODEL_CACHES = weakref.WeakKeyDictionary()
_EMPTY_INTERIOR = InteriorSet(np.empty(0, dtype=np.int64), np.empty(0),
                              np.empty(0), np.empty(0, dtype=np.int64))


def _cache_for(model):
    cache = _MODEL_CACHES.get(model)
    if cache is None:
        cache = {"masks": {}}
        _MODEL_CACHES[model] = cache
    return cache


def _get_jfk(model) -> JointFK:
    cache = _cache_for(model)
    if "jfk" not in cache:
        cache["jfk"] = JointFK(model)
    return cache["jfk"]


def _get_mask(model, radius):
    masks = _cache_for(model)["masks"]
    if radius not in masks:
        masks[radius] = build_neighbor_mask(model, radius=radius)
    return masks[radius]


def _stable_landmarks(model, limits, tol=1e-3):
    """Landmarks that stay put under articulation (rotation centers at the
    digit roots plus the wrist): probe a canonical mid-curl against rest."""
    jfk = _get_jfk(model)
    zero = np.zeros(10)
    theta = np.zeros((15, 3))
    theta[:, 0] = 0.6 * limits.hi[:, 0]
    moved = np.linalg.norm(jfk(theta, zero) - jfk(np.zeros((15, 3)), zero),
                           axis=-1)
    return moved < tol


def init_camera(model, obs, config: FitConfig, limits=None) -> CameraParams:
    """Stage-0 bootstrap: 2-D similarity alignment (in-plane rotation only,
    reflection excluded) of the rest-pose landmarks against the observed
    pixels, mapped onto the scaled-perspective camera.  Given a limit table,
    only articulation-stable landmarks anchor the alignment, so curled
    digits cannot squeeze the scale estimate.  Degenerate inputs fall back
    to the default camera."""
    rest = model.joint_regressor @ model.template
    vis = obs.visibility
    if limits is not None:
        stable = _stable_landmarks(model, limits) & vis
        if stable.sum() >= 3:
            vis = stable
    X = rest[vis][:, :2]
    Y = obs.positions[vis] - config.image_size / 2.0
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = float((Xc ** 2).sum()) / len(X)
    if var_x < 1e-12:
        return CameraParams()
    U, S, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
    sign = 1.0 if np.linalg.det(U) * np.linalg.det(Vt) >= 0 else -1.0
    R2 = (U * [1.0, sign]) @ Vt
    a = (S[0] + sign * S[1]) / var_x  # pixels per meter
    if not np.isfinite(a) or a <= 1e-9:
        return CameraParams()
    s = float(np.clip(2.0 * a / config.image_size, 0.5, 100.0))
    phi = float(np.arctan2(R2[1, 0], R2[0, 0]))
    return CameraParams(s=s, rvec=np.array([0.0, 0.0, phi]), t=my / a - R2 @ mx)


def _rvec_of(R):
    """Axis-angle vector of a rotation matrix (inverse of rodrigues)."""
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = float(np.arccos(tr))
    if th < 1e-8:
        return np.zeros(3)
    if th > np.pi - 1e-4:
        # near a half turn the skew part vanishes; read the axis from the
        # dominant column of (R + I) / 2 = axis axis^T + O(pi - th)
        A = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / max(float(np.linalg.norm(A[:, k])), 1e-12)
        return th * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return (th / (2.0 * np.sin(th))) * w


def _rot_between(r1, r2):
    """Relative rotation angle (radians) between two axis-angle vectors."""
    tr = np.trace(rodrigues(r1).T @ rodrigues(r2))
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def _planar_cameras(model, obs, config: FitConfig, limits):
    """Out-of-plane camera bootstraps read from the stable landmarks.

    The articulation-stable landmarks are coplanar in the rest pose, so the
    2x2 map from plane coordinates to their centered pixels factors (via SVD)
    into scale times an in-plane rotation times a foreshortening tilt --
    determined only up to the classic two-fold depth ambiguity, hence two
    candidates.  One wrinkle: an off-center target sees obliquely converging
    rays, which shear the apparent plane in proportion to the mean pixel
    offset over the focal length; whitening the fitted map against that ray
    direction reduces the problem to the frontal case.  Scale and translation
    stay first-order (a camera resettle tightens them); the recovered
    rotations are what matter."""
    rest = model.joint_regressor @ model.template
    sel = _stable_landmarks(model, limits) & obs.visibility
    if sel.sum() < 4:
        return []
    X = rest[sel]
    Yc = obs.positions[sel] - config.image_size / 2.0
    mx3 = X.mean(axis=0)
    Xc = X - mx3
    mY = Yc.mean(axis=0)
    P = np.linalg.svd(Xc, full_matrices=True)[2].T[:, :2]  # rest-plane basis
    W1 = np.column_stack([P, np.cross(P[:, 0], P[:, 1])])
    xi = Xc @ P
    if np.linalg.svd(xi, compute_uv=False)[1] < 1e-6:
        return []
    Z, *_ = np.linalg.lstsq(xi, Yc - mY, rcond=None)
    B = Z.T
    K = np.array([[1.0, 0.0, -mY[0] / config.focal],
                  [0.0, 1.0, -mY[1] / config.focal]])
    L = np.linalg.cholesky(K @ K.T)
    Kt = np.linalg.solve(L, K)
    Q = np.vstack([Kt, np.cross(Kt[0], Kt[1])])
    U, S, Vt = np.linalg.svd(np.linalg.solve(L, B))
    V = Vt.T
    flip = 1.0 if np.linalg.det(U) * np.linalg.det(V) >= 0 else -1.0
    if np.linalg.det(U) < 0:
        U = U * [1.0, -1.0]
    if np.linalg.det(V) < 0:
        V = V * [1.0, -1.0]
    a = S[0]  # pixels per meter
    if not np.isfinite(a) or a <= 1e-9:
        return []
    c = float(np.clip(flip * S[1] / a, -1.0, 1.0))
    s = float(np.clip(2.0 * a / config.image_size, 0.5, 100.0))
    E, F = np.eye(3), np.eye(3)
    E[:2, :2], F[:2, :2] = U, V
    out = []
    for sp in (np.sqrt(1.0 - c * c), -np.sqrt(1.0 - c * c)):
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, c, -sp], [0.0, sp, c]])
        R = Q.T @ E @ Rx @ F.T @ W1.T
        t2 = mY / a - (R @ mx3)[:2]
        if np.all(np.isfinite(R)) and np.all(np.isfinite(t2)):
            out.append(CameraParams(s=s, rvec=_rvec_of(R), t=t2))
    return out


def _data_term(mu, log_sigma, obs, stage):
    if stage == "mse":
        return mse_loss(mu, obs)
    if stage == "nll":
        return nll_loss(mu, obs, sigma=np.exp(log_sigma))
    raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")


def _evaluate(state, model, limits, obs, config, stage, mask=None, *,
              interior=None, mesh=None):
    """Primal loss at `state`: (total, breakdown, interior, mesh).  A state
    whose joints land behind the camera gets data = +inf (the step-rejection
    sentinel) instead of an exception."""
    if mesh is None:
        mesh = forward_kinematics(model, state.theta, state.beta)
    if interior is None:
        if config.lambda2 == 0.0:
            interior = _EMPTY_INTERIOR
        else:
            if mask is None:
                mask = _get_mask(model, config.neighbor_radius)
            interior = interior_vertices(mesh.vertices, model.faces, mask,
                                         threshold=config.winding_threshold,
                                         segment_pad=config.segment_pad)
    _, bk = prior_loss(state.theta, state.beta, mesh.vertices, model.faces,
                       mask, limits,
                       weights=(config.lambda1, config.lambda2, config.lambda3),
                       d_tol=config.d_tol, refine_anatomy=config.refine_anatomy,
                       splay_refines_bend=config.splay_refines_bend,
                       interior=interior)
    try:
        mu = project_arrays(mesh.joints, np.log(state.camera.s),
                            state.camera.rvec, state.camera.t,
                            focal=config.focal, image_size=config.image_size)
        data = float(_data_term(mu, state.log_sigma, obs, stage))
    except BehindCamera:
        data = np.inf
    breakdown = {"data": data, **{k: float(v) for k, v in bk.items()}}
    total = data + breakdown["pose"] + breakdown["non_penetration"] \
        + breakdown["shape"]
    return float(total), breakdown, interior, mesh


def total_loss(state, model, limits, obs, config: FitConfig = None,
               stage: str = "mse"):
    """Data term plus weighted prior; returns (total, breakdown)."""
    config = FitConfig() if config is None else config
    total, breakdown, _, _ = _evaluate(state, model, limits, obs, config, stage)
    return total, breakdown


def _seed_state(state):
    """Dual-number seeds for the differentiated entries (width N_POSE)."""
    L = STATE_LAYOUT
    th = dm.Jet.seed(state.theta, np.arange(45).reshape(15, 3), N_POSE)
    be = dm.Jet.seed(state.beta,
                     np.arange(L["beta"].start, L["beta"].stop), N_POSE)
    ls = dm.Jet.seed(np.log(state.camera.s), np.asarray(L["log_s"].start), N_POSE)
    rv = dm.Jet.seed(state.camera.rvec,
                     np.arange(L["rvec"].start, L["rvec"].stop), N_POSE)
    tv = dm.Jet.seed(state.camera.t,
                     np.arange(L["t"].start, L["t"].stop), N_POSE)
    return th, be, ls, rv, tv


def _forward_terms(state, model, limits, obs, config, stage, interior):
    """Weighted loss terms as width-N_POSE jets over (theta, beta, camera).
    Joints go through the pushed-through regressor; skinned positions are
    evaluated only for the interior members and their partners."""
    jfk = _get_jfk(model)
    th, be, ls, rv, tv = _seed_state(state)
    rot, trans = node_transforms(model, th, jfk.rest_nodes(be))
    mu = project_arrays(jfk.joints(rot, trans, be), ls, rv, tv,
                        focal=config.focal, image_size=config.image_size)
    refined = (refine_limits(limits, th,
                             splay_refines_bend=config.splay_refines_bend)
               if config.refine_anatomy
               else RefinedLimits(lo=limits.lo, hi=limits.hi))
    terms = {"data": _data_term(mu, state.log_sigma, obs, stage),
             "pose": config.lambda1 * pose_loss(th, refined),
             "shape": config.lambda3 * shape_loss(be)}
    if len(interior) and config.lambda2 > 0.0:
        ids = np.unique(np.concatenate([interior.indices, interior.partner]))
        sub = skinned_vertices(model, rot, trans,
                               shaped_template(model, be, ids), ids=ids)
        delta = sub[np.searchsorted(ids, interior.indices)] \
            - sub[np.searchsorted(ids, interior.partner)]
        pen = non_penetration_loss(interior, config.d_tol,
                                   depths=dm.norm(delta, axis=-1))
    else:
        pen = 0.0
    terms["non_penetration"] = config.lambda2 * pen
    return terms, mu


def gradient(state, model, limits, obs, config: FitConfig = None,
             stage: str = "mse", *, interior=None):
    """Gradient of total_loss over the flat state (see STATE_LAYOUT: theta,
    beta, log s, rvec, t, log sigma).  Interior membership is frozen at
    `state` (pass `interior` to reuse one); log-sigma entries use the
    analytic NLL derivative and are zero in the MSE stage."""
    config = FitConfig() if config is None else config
    if interior is None:
        if config.lambda2 == 0.0:
            interior = _EMPTY_INTERIOR
        else:
            mesh = forward_kinematics(model, state.theta, state.beta)
            interior = interior_vertices(mesh.vertices, model.faces,
                                         _get_mask(model, config.neighbor_radius),
                                         threshold=config.winding_threshold,
                                         segment_pad=config.segment_pad)
    if config.gradient_mode == "central-finite-difference":
        return _fd_gradient(state, model, limits, obs, config, stage, interior)
    terms, mu = _forward_terms(state, model, limits, obs, config, stage, interior)
    grad = np.zeros(N_STATE)
    for name, term in terms.items():
        if not dm.is_jet(term):
            continue  # a disabled term contributes nothing
        if not np.all(np.isfinite(term.tan)):
            raise NumericalError(f"non-finite gradient in the {name} term")
        grad[:N_POSE] += term.tan
    if stage == "nll":
        gs = nll_sigma_grad(mu, np.exp(state.log_sigma), obs)
        if not np.all(np.isfinite(gs)):
            raise NumericalError("non-finite gradient in the data term (sigma)")
        grad[STATE_LAYOUT["log_sigma"]] = gs
    return grad


def _fd_gradient(state, model, limits, obs, config, stage, interior, h=1e-5):
    """Central differences of the frozen-membership objective."""
    x0 = pack_state(state)
    grad = np.zeros(N_STATE)
    live = N_STATE if stage == "nll" else N_POSE
    for i in range(live):
        sides = []
        for delta in (h, -h):
            x = x0.copy()
            x[i] += delta
            total, _, _, _ = _evaluate(unpack_state(x), model, limits, obs,
                                       config, stage, interior=interior)
            sides.append(total)
        grad[i] = (sides[0] - sides[1]) / (2.0 * h)
    return grad


def _digit_chains(parents):
    """Theta-row chains of each digit (root's children walked tip-ward)."""
    kids = [[] for _ in parents]
    for n in range(1, len(parents)):
        kids[int(parents[n])].append(n)
    chains = []
    for first in kids[0]:
        chain, n = [], first
        while True:
            chain.append(n - 1)
            if not kids[n]:
                break
            n = kids[n][0]
        chains.append(chain)
    return chains


_WIDE_SPLAY = 0.6  # rad of static range past which the grid varies splay


def _digit_grid_error(x, rows, model, obs, config, angles):
    """Landmark residual of each (B, len(rows), 2) bend/splay variant of one
    digit, at the current camera, shape, and remaining pose.  Only the
    digit's chain is recomposed per variant and only landmark positions are
    evaluated (no skinning), so a whole grid costs about as much as one mesh
    evaluation.  Returns (B,) errors, or None when no landmark rides this
    digit or the projection degenerates."""
    state = unpack_state(x)
    jfk = _get_jfk(model)
    nodes = [r + 1 for r in rows]
    lm = (jfk.wbar[:, nodes].sum(axis=1) > 0.5) & obs.visibility
    if not lm.any():
        return None
    rest = jfk.rest_nodes(state.beta)
    theta = state.theta.copy()
    theta[rows, 1:] = 0.0
    rot, trans = node_transforms(model, theta, rest)

    nb = len(angles)
    rot_v = np.broadcast_to(rot, (nb, 16, 3, 3)).copy()
    trans_v = np.broadcast_to(trans, (nb, 16, 3)).copy()
    w_prev = np.broadcast_to(np.eye(3), (nb, 3, 3))
    p_prev = np.broadcast_to(rest[0], (nb, 3))
    prev = 0
    for k, n in enumerate(nodes):
        w_local = np.broadcast_to(np.eye(3), (nb, 3, 3))
        for col in model.rotation_order[rows[k]]:  # first applied first
            if col > 1 or (col == 1 and not np.any(angles[:, k, 1])):
                continue
            axis = np.broadcast_to(model.axes[rows[k], col], (nb, 3))
            w_local = _axis_rotation(axis, angles[:, k, col]) @ w_local
        w = w_prev @ w_local
        p = p_prev + (w_prev @ (rest[n] - rest[prev]))
        rot_v[:, n] = w
        trans_v[:, n] = p - (w @ rest[n])
        w_prev, p_prev, prev = w, p, n

    G = jfk.C + jfk.D @ state.beta                                 # (21,16,3)
    mu = (np.einsum("bnxy,jny->bjx", rot_v, G, optimize=True)
          + np.einsum("jn,bnx->bjx", jfk.wbar, trans_v, optimize=True))
    log_s = x[STATE_LAYOUT["log_s"]][0]
    try:
        uv = project_arrays(mu[:, lm], log_s, state.camera.rvec,
                            state.camera.t, config.focal, config.image_size)
    except BehindCamera:
        return None
    return ((uv - obs.positions[lm]) ** 2).sum(axis=(1, 2))


def _grid_angles(axes_ranges, counts):
    """Cartesian (B, n_axes) grid with per-axis point counts."""
    grids = [np.linspace(lo, hi, c) for (lo, hi), c in zip(axes_ranges, counts)]
    return np.stack([g.ravel() for g in np.meshgrid(*grids, indexing="ij")],
                    axis=1)


def _digit_grid_bends(x, rows, model, limits, obs, config):
    """Best bend (and wide-range splay) angles for one digit: a coarse grid
    over the static ranges ranked by the digit's own landmark residuals,
    then a zoom grid one coarse cell around the winner.  Returns
    (len(rows), 2) bend/splay angles, or None."""
    spans = []
    counts = []
    for k, r in enumerate(rows):
        spans.append((limits.lo[r, 0], limits.hi[r, 0]))
        counts.append(6 if k < 2 else 4)
        wide = limits.hi[r, 1] - limits.lo[r, 1] >= _WIDE_SPLAY
        spans.append((limits.lo[r, 1], limits.hi[r, 1]) if wide else (0.0, 0.0))
        counts.append(4 if wide else 1)
    coarse = _grid_angles(spans, counts).reshape(-1, len(rows), 2)
    err = _digit_grid_error(x, rows, model, obs, config, coarse)
    if err is None:
        return None
    best = coarse[int(np.argmin(err))]

    cell = np.array([(hi - lo) / max(c - 1, 1)
                     for (lo, hi), c in zip(spans, counts)])
    lo = np.array([s[0] for s in spans])
    hi = np.array([s[1] for s in spans])
    flat = best.ravel()
    zoom_spans = list(zip(np.maximum(lo, flat - cell),
                          np.minimum(hi, flat + cell)))
    zoom_counts = [5 if c > 1 else 1 for c in counts]
    fine = _grid_angles(zoom_spans, zoom_counts).reshape(-1, len(rows), 2)
    err = _digit_grid_error(x, rows, model, obs, config, fine)
    if err is None:
        return best
    return fine[int(np.argmin(err))]


_CAM_WIDTH = 6  # log s, rvec (3), t (2)


def _camera_resettle(x, current, obs, config, stage, iters=30):
    """Camera-only polish with the articulation frozen.

    The mesh, the prior terms, and the interior set are all constants under
    (s, R, t), so each step costs one 21-point projection with width-6
    tangents instead of a skinned forward pass."""
    total, bk, interior, mesh = current
    const = total - bk["data"]
    if not np.isfinite(total):
        return x, current
    x = x.copy()
    L = STATE_LAYOUT
    joints = mesh.joints
    log_sigma = x[L["log_sigma"]]
    m = np.zeros(_CAM_WIDTH)
    v = np.zeros(_CAM_WIDTH)
    for it in range(1, iters + 1):
        ls = dm.Jet.seed(x[L["log_s"]][0], np.asarray(0), _CAM_WIDTH)
        rv = dm.Jet.seed(x[L["rvec"]], np.arange(1, 4), _CAM_WIDTH)
        tv = dm.Jet.seed(x[L["t"]], np.arange(4, 6), _CAM_WIDTH)
        try:
            mu = project_arrays(joints, ls, rv, tv, focal=config.focal,
                                image_size=config.image_size)
            data = _data_term(mu, log_sigma, obs, stage)
        except BehindCamera:
            break
        if not dm.is_jet(data) or not np.all(np.isfinite(data.tan)):
            break
        g = data.tan
        m = _B1 * m + (1.0 - _B1) * g
        v = _B2 * v + (1.0 - _B2) * g * g
        direction = (m / (1.0 - _B1 ** it)) \
            / (np.sqrt(v / (1.0 - _B2 ** it)) + _ADAM_EPS)
        slack = _REL_SLACK * abs(total) + 1e-12
        lr = config.step_size * (0.02 + 0.98 * 0.5
                                 * (1.0 + np.cos(np.pi * (it - 1) / iters)))
        cam = np.concatenate([x[L["log_s"]], x[L["rvec"]], x[L["t"]]])
        for _ in range(_MAX_REJECTS):
            trial = cam - lr * direction
            try:
                mu_t = project_arrays(joints, trial[0], trial[1:4], trial[4:6],
                                      focal=config.focal,
                                      image_size=config.image_size)
                data_t = float(_data_term(mu_t, log_sigma, obs, stage))
            except BehindCamera:
                data_t = np.inf
            if np.isfinite(data_t) and data_t + const <= total + slack:
                x[L["log_s"]], x[L["rvec"]], x[L["t"]] = \
                    trial[0], trial[1:4], trial[4:6]
                total = data_t + const
                bk = {**bk, "data": data_t}
                break
            lr *= 0.5
    return x, (total, bk, interior, mesh)


def _digit_pass(x, current, model, limits, obs, config, stage, mask,
                margin=0.0):
    """One greedy sweep of per-digit curl proposals (see
    _try_digit_candidates).  Proposals reuse the current interior set, like
    the line search; the caller refreshes membership afterwards."""
    total, bk, interior, mesh = current
    changed = False
    for rows in _digit_chains(model.parents):
        cur = x[STATE_LAYOUT["theta"]].reshape(15, 3)[rows]
        mirror = np.stack([np.clip(-cur[:, 0], limits.lo[rows, 0],
                                   limits.hi[rows, 0]),
                           np.clip(-cur[:, 1], limits.lo[rows, 1],
                                   limits.hi[rows, 1])], axis=1)
        proposals = [mirror]
        grid = _digit_grid_bends(x, rows, model, limits, obs, config)
        if grid is not None:
            proposals.append(grid)
        for angles in proposals:
            x_try = x.copy()
            theta_try = x_try[STATE_LAYOUT["theta"]].reshape(15, 3)
            # twist resets to 0, and splay stays 0 unless proposed: the
            # dynamic coupling tightens the bend range as splay grows, so a
            # compensatory splay from the wrong basin would veto exactly the
            # deep curls being proposed
            theta_try[rows, :2] = angles
            theta_try[rows, 2] = 0.0
            try:
                cand = _evaluate(unpack_state(x_try), model, limits, obs,
                                 config, stage, mask, interior=interior)
            except (ValueError, DegenerateConfiguration):
                continue
            if cand[0] < total - margin * abs(total):
                x, (total, bk, _, mesh) = x_try, cand
                changed = True
    return x, (total, bk, interior, mesh), changed


def _bootstrap_cameras(model, obs, config, limits):
    """All distinct camera hypotheses the landmarks support: the in-plane
    similarity bootstrap plus both out-of-plane tilt readings."""
    cams = [init_camera(model, obs, config, limits)]
    cams.extend(_planar_cameras(model, obs, config, limits))
    kept = []
    for cam in cams:
        if all(_rot_between(cam.rvec, k.rvec) > np.deg2rad(3.0)
               for k in kept):
            kept.append(cam)
    return kept


def _global_rebootstrap(x, current, model, limits, obs, config, stage, mask,
                        polish_iters=0, margin=0.0):
    """Whole-state hypothesis jumps: every camera bootstrap (in-plane
    similarity plus both out-of-plane tilt readings of the stable landmarks)
    is judged with the incumbent articulation kept and again with every
    digit's bends re-read from its landmarks by grid search under that
    camera.  Escapes states where the camera has adapted to wrong digit
    interpretations so thoroughly that no single-digit change can win.

    With polish_iters the two best grid candidates are descended briefly
    (all pose and camera entries free) before the comparison: grid-resolution
    bends under a bootstrap camera leave a residual that a raw side-by-side
    against the settled incumbent would always lose, even from the right
    basin.  A polished comparison must win by a decisive margin in exchange,
    mid-descent totals being weak predictors of final basins."""
    total = current[0]
    judged = []  # (candidate total, required margin, x, evaluation)
    settled = []
    for cam in _bootstrap_cameras(model, obs, config, limits):
        x_cam = x.copy()
        x_cam[STATE_LAYOUT["log_s"]] = np.log(cam.s)
        x_cam[STATE_LAYOUT["rvec"]] = cam.rvec
        x_cam[STATE_LAYOUT["t"]] = cam.t
        x_try = x_cam.copy()
        theta_try = x_try[STATE_LAYOUT["theta"]].reshape(15, 3)
        for rows in _digit_chains(model.parents):
            grid = _digit_grid_bends(x_try, rows, model, limits, obs, config)
            if grid is not None:
                theta_try[rows, :2] = grid
                theta_try[rows, 2] = 0.0
        for x_c, is_try in ((x_cam, False), (x_try, True)):
            try:
                cand = _evaluate(unpack_state(x_c), model, limits, obs,
                                 config, stage, mask, interior=current[2])
            except (ValueError, DegenerateConfiguration):
                continue
            if not is_try:
                judged.append((cand[0], margin, x_c, cand))
            elif np.isfinite(cand[0]):
                x_c, cand = _camera_resettle(x_c, cand, obs, config, stage,
                                             iters=12)
                settled.append((cand[0], x_c, cand))
    settled.sort(key=lambda entry: entry[0])
    for rank, (_, x_c, cand) in enumerate(settled):
        if polish_iters > 0 and rank < 2:
            free = np.zeros(N_STATE)
            free[:N_POSE] = 1.0
            try:
                x_c, cand, _ = _run_stage(x_c, 0, stage, polish_iters, free,
                                          model, limits, obs, config, mask,
                                          cand, [])
            except Diverged:
                continue
            judged.append((cand[0], max(margin, _POLISH_MARGIN), x_c, cand))
        else:
            judged.append((cand[0], margin, x_c, cand))
    passing = [(ct, x_c, cand) for ct, need, x_c, cand in judged
               if ct < total - need * abs(total)]
    if not passing:
        return x, current, False
    _, x_c, cand = min(passing, key=lambda entry: entry[0])
    return x_c, cand, True


def _try_digit_candidates(x, current, model, limits, obs, config, stage, mask,
                          polish_iters=0, margin=0.0):
    """Basin hop across the per-digit depth ambiguity.

    Under the near-orthographic camera a curled digit and a straighter digit
    pitched away from the viewer project almost identically, so gradient
    descent settles digits into whichever interpretation it reaches first;
    no local step can cross between them.  Each repair first judges a global
    re-initialization (stable-landmark camera plus grid bends, see
    _global_rebootstrap), then sweeps per-digit proposals: grid-ranked bends
    and the mirror of the current bends (splay and twist reset), kept only
    when the full loss improves.  Because the camera compensates for wrong
    interpretations globally, a short camera-only resettle follows every
    accepted sweep and the sweep repeats, so later digits are judged under a
    camera adapted to the earlier corrections."""
    x, current, changed_any = _global_rebootstrap(
        x, current, model, limits, obs, config, stage, mask,
        polish_iters=polish_iters, margin=margin)
    for k in range(3):
        x, current, changed = _digit_pass(x, current, model, limits, obs,
                                          config, stage, mask, margin=margin)
        if not (changed or (changed_any and k == 0)):
            break
        changed_any = changed_any or changed
        try:  # membership refresh at the adopted pose
            current = _evaluate(unpack_state(x), model, limits, obs, config,
                                stage, mask, mesh=current[3])
        except (ValueError, DegenerateConfiguration):
            pass
        x, current = _camera_resettle(x, current, obs, config, stage)
    return x, current, changed_any


def _run_stage(x, stage_no, stage, iters, free, model, limits, obs, config,
               mask, current, trace, reflect_at=(), polish=(0, np.inf)):
    """Adam over the free entries of x with step rejection: a proposal whose
    loss is non-finite or exceeds the current loss beyond a small relative
    slack halves the learning rate and retries; persistent non-finite losses
    raise Diverged.  Momentum absorbs every gradient, accepted or not.  At
    the reflect_at iterations the per-digit mirror candidates are tested and
    the moments restart if one is accepted.  polish = (iters, data_gate):
    the first repair whose incumbent data term exceeds the gate descends the
    rebootstrap candidate for that many iterations before judging it."""
    total, bk, interior, mesh = current
    trace.append({"stage": stage_no, "iteration": 0, "total": total, **bk})
    m = np.zeros(N_STATE)
    v = np.zeros(N_STATE)
    run = 0
    pending = set(reflect_at)
    polish_iters, polish_gate = polish
    for it in range(1, iters + 1):
        g = gradient(unpack_state(x), model, limits, obs, config, stage,
                     interior=interior) * free
        m = _B1 * m + (1.0 - _B1) * g
        v = _B2 * v + (1.0 - _B2) * g * g
        mhat = m / (1.0 - _B1 ** it)
        vhat = v / (1.0 - _B2 ** it)
        direction = free * mhat / (np.sqrt(vhat) + _ADAM_EPS)
        slack = _REL_SLACK * abs(total) + 1e-12
        # cosine decay: full-size steps early for basin transit, fine steps
        # late so the normalized updates stop orbiting the optimum; rejection
        # halving below is per-iteration, never sticky
        lr = config.step_size * (0.02 + 0.98 * 0.5 *
                                 (1.0 + np.cos(np.pi * it / iters)))
        accepted = False
        cand_total = np.inf
        for _ in range(_MAX_REJECTS):
            x_try = x - lr * direction
            try:
                # Candidates keep the current interior set so the comparison
                # matches the gradient's frozen membership; refreshing inside
                # the search would present lambda2-sized cliffs whenever a
                # vertex crosses a winding boundary, rejecting every step.
                cand = _evaluate(unpack_state(x_try), model, limits, obs,
                                 config, stage, mask, interior=interior)
                cand_total = cand[0]
            except (ValueError, DegenerateConfiguration):
                cand_total = np.inf  # unrepresentable state: reject the step
            if np.isfinite(cand_total) and cand_total <= total + slack:
                accepted = True
                break
            lr *= 0.5
        prev = total
        if accepted:
            x = x_try
            try:  # membership refresh at the accepted state (FK reused)
                total, bk, interior, mesh = _evaluate(
                    unpack_state(x), model, limits, obs, config, stage, mask,
                    mesh=cand[3])
            except (ValueError, DegenerateConfiguration):
                total, bk, interior, mesh = cand
        elif not np.isfinite(cand_total):
            raise Diverged(f"loss stayed non-finite after {_MAX_REJECTS} step "
                           f"rejections (stage {stage_no}, iteration {it})")
        run = run + 1 if abs(total - prev) <= _PLATEAU_REL * max(1.0, abs(total)) \
            else 0
        plateaued = run >= _PLATEAU_RUN
        if it in pending or (plateaued and pending):
            # A plateau pulls any remaining mirror test forward: a digit stuck
            # in the reflected basin stalls long before the checkpoint.
            pending.discard(it)
            if plateaued:
                pending.clear()
            deep = 0
            if bk["data"] > polish_gate:
                deep = polish_iters
                if stage == "mse" and bk["data"] > 10.0 * polish_gate:
                    deep = 3 * polish_iters  # catastrophic: buy a real descent
            x, (total, bk, interior, mesh), flipped = _try_digit_candidates(
                x, (total, bk, interior, mesh), model, limits, obs, config,
                stage, mask, polish_iters=deep,
                margin=_POLISH_MARGIN if stage == "nll" else 0.0)
            if flipped:
                m[:] = 0.0
                v[:] = 0.0
                run = 0
                plateaued = False
        trace.append({"stage": stage_no, "iteration": it, "total": total, **bk})
        if plateaued:
            return x, (total, bk, interior, mesh), "converged"
    return x, (total, bk, interior, mesh), "max_iters"


def _fit_single(state0, model, limits, obs, config):
    mask = None if config.lambda2 == 0.0 \
        else _get_mask(model, config.neighbor_radius)
    x = pack_state(state0)
    trace = []
    breakdown = {}
    free1 = np.zeros(N_STATE)
    free1[:N_POSE] = 1.0
    free2 = np.ones(N_STATE)
    cur = _evaluate(state0, model, limits, obs, config, "mse", mask)
    if not np.isfinite(cur[0]):
        raise Diverged("initial state has non-finite loss")
    breakdown["init"] = dict(cur[1])
    status = "max_iters"
    if config.stage1_iters > 0:
        checkpoints = {max(1, k * config.stage1_iters // 4) for k in (1, 2, 3)}
        x, cur, status = _run_stage(x, 1, "mse", config.stage1_iters, free1,
                                    model, limits, obs, config, mask, cur,
                                    trace, reflect_at=checkpoints,
                                    polish=(_POLISH_ITERS, _POLISH_MSE_GATE))
        breakdown["stage1"] = dict(cur[1])
    if config.stage2_iters > 0:
        cur = _evaluate(unpack_state(x), model, limits, obs, config, "nll",
                        mask, interior=cur[2], mesh=cur[3])
        x, cur, status = _run_stage(x, 2, "nll", config.stage2_iters, free2,
                                    model, limits, obs, config, mask, cur,
                                    trace,
                                    reflect_at={max(1, config.stage2_iters // 3)},
                                    polish=(_POLISH_ITERS, -np.inf))
        breakdown["stage2"] = dict(cur[1])
    x[STATE_LAYOUT["log_sigma"]] = np.clip(x[STATE_LAYOUT["log_sigma"]],
                                           np.log(SIGMA_MIN), np.log(SIGMA_MAX))
    breakdown["final"] = dict(cur[1])
    return unpack_state(x), cur[3], float(cur[0]), breakdown, trace, status


def fit(obs, model, limits, config: FitConfig = None) -> FitReport:
    """Staged fit of one observation; deterministic given (obs, config).

    Raises InsufficientJoints for fewer than 4 visible landmarks and Diverged
    if every restart's loss became non-finite despite step rejection."""
    config = FitConfig() if config is None else config
    t0 = time.perf_counter()
    if obs.n_visible < 4:
        raise InsufficientJoints(
            f"need >= 4 visible joints to fit, got {obs.n_visible}")
    # stage 0: similarity-align the rest-pose landmark projections -- every
    # camera hypothesis is scored on the full visible set and the best fit
    # seeds the descent
    rest = model.joint_regressor @ model.template
    camera0, best_res = None, np.inf
    for cam in _bootstrap_cameras(model, obs, config, limits):
        try:
            mu = project_arrays(rest, np.log(cam.s), cam.rvec, cam.t,
                                focal=config.focal,
                                image_size=config.image_size)
            res = float(mse_loss(mu, obs))
        except BehindCamera:
            continue
        if np.isfinite(res) and res < best_res:
            camera0, best_res = cam, res
    if camera0 is None:
        camera0 = init_camera(model, obs, config, limits)
    log_sigma0 = np.full(N_JOINTS, np.log(SIGMA_INIT))
    best = None
    failure = None
    for k in range(config.restarts):
        theta0 = np.zeros((15, 3))
        if k > 0:  # restarts jitter the articulation within the static limits
            rng = np.random.default_rng(
                [config.seed, zlib.crc32(obs.source_id.encode("utf-8")), k])
            theta0 = np.clip(
                rng.uniform(-np.deg2rad(10.0), np.deg2rad(10.0), (15, 3)),
                limits.lo, limits.hi)
        state0 = PoseState(theta0, np.zeros(10), camera0.copy(),
                           log_sigma0.copy())
        try:
            result = _fit_single(state0, model, limits, obs, config)
        except Diverged as exc:
            failure = exc
            continue
        if best is None or result[2] < best[0][2]:
            best = (result, k)
    if best is None:
        raise Diverged(f"all {config.restarts} restart(s) diverged") from failure
    (state, mesh, total, breakdown, trace, status), restart = best
    return FitReport(state=state, mesh=mesh, total=total, breakdown=breakdown,
                     trace=trace, status=status,
                     wall_time=time.perf_counter() - t0, config=config,
                     source_id=obs.source_id, restart=restart)


# -- batch runner ------------------------------------------------------------

_WORKER = {}


def _worker_init(model, limits, config):
    _WORKER["args"] = (model, limits, config)


def _worker_fit(obs):
    model, limits, config = _WORKER["args"]
    return fit(obs, model, limits, config)


def batch_fit(observations, model, limits, config: FitConfig = None, jobs=1):
    """Fit independent samples, optionally across processes; reports come back
    sorted by source_id regardless of completion order."""
    config = FitConfig() if config is None else config
    observations = list(observations)
    if jobs and jobs > 1 and len(observations) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(observations)),
                                 initializer=_worker_init,
                                 initargs=(model, limits, config)) as pool:
            reports = list(pool.map(_worker_fit, observations))
    else:
        reports = [fit(o, model, limits, config) for o in observations]
    return sorted(reports, key=lambda r: r.source_id)
