"""Knowledge priors: biomechanic joint limits, functional-anatomy range
refinement, non-penetration, shape regularization, and their weighted sum.

The pose loss is a squared hinge on interval violations,
    sum_j max(theta_j - hi_j, lo_j - theta_j, 0)^2,
zero inside the (refined) intervals and C1 at the boundaries.  Locked axes
use a zero-width interval at 0, penalizing any motion symmetrically.

Refinement scales finger-MCP splay bounds toward zero as the bend angle
approaches its extremes:
    splay_hi(alpha) = splay_hi * clip01(1 - alpha / bend_hi)
    splay_lo(alpha) = splay_lo * clip01(1 - alpha / bend_lo)
which reproduces the intended factors (1 at alpha=0, 0.5 at half range, 0 at
the full range) and is continuous everywhere: past the static bend range the
factor saturates instead of jumping back to 1 (the static pose loss already
penalizes that region).  The same form with bend and splay exchanged
optionally tightens the bend range from the splay angle (a documented
interpretation, on by default, switchable off).  Both directions read the
other angle's raw value, never its refined interval, so a second refinement
pass would change nothing.  Finally, a flexed DIP resets its finger's PIP
lower bend bound to zero.

All functions accept dual-number Jets, so the fitter's gradients flow through
the refined bounds as well as the angles.
"""

from __future__ import annotations

import numpy as np

from . import dual as dm
from .limits import FINGER_DIP_ROWS, FINGER_MCP_ROWS, FINGER_PIP_ROWS, RefinedLimits
from .penetration import interior_vertices, member_depths, non_penetration_loss

DEFAULT_WEIGHTS = (20000.0, 20000.0, 10.0)
DEFAULT_D_TOL = 0.006

# driver matrices: driver[r,c] = sum_k theta[r,k] * S[k,c] picks, per bound
# entry, which same-row angle drives its refinement (bend<->splay swap)
_S_BOTH = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
_S_SPLAY_ONLY = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _refinement_weights(limits, splay_refines_bend):
    """Constant per-entry divisors for the clip01(1 - driver/divisor) factors.
    Sides that are never refined get an infinite divisor (factor exactly 1);
    a zero-width driver side also disables its factor."""
    div_lo = np.full((15, 3), -np.inf)
    div_hi = np.full((15, 3), np.inf)
    cols = (0, 1) if splay_refines_bend else (1,)
    for r in FINGER_MCP_ROWS:
        for c in cols:
            drv = 1 - c  # splay bound driven by bend and vice versa
            if limits.lo[r, drv] < -1e-12:
                div_lo[r, c] = limits.lo[r, drv]
            if limits.hi[r, drv] > 1e-12:
                div_hi[r, c] = limits.hi[r, drv]
    return div_lo, div_hi


def refine_limits(limits, theta, *, splay_refines_bend: bool = True) -> RefinedLimits:
    """Functional-anatomy refinement of the static table at a specific theta.
    theta may be a Jet; the returned bounds then carry its tangents."""
    div_lo, div_hi = _refinement_weights(limits, splay_refines_bend)
    S = _S_BOTH if splay_refines_bend else _S_SPLAY_ONLY
    driver = dm.matmul(theta, S)
    lo = limits.lo * dm.clip01(1.0 - driver * (1.0 / div_lo))
    hi = limits.hi * dm.clip01(1.0 - driver * (1.0 / div_hi))

    # flexed DIP resets the finger's PIP lower bend bound to zero; the switch
    # reads the primal angle, so no gradient flows through it
    dip_flexed = np.asarray(dm.value(theta))[FINGER_DIP_ROWS, 0] > 0.0
    reset = np.zeros((15, 3), dtype=bool)
    reset[np.asarray(FINGER_PIP_ROWS)[dip_flexed], 0] = True
    lo = dm.where(reset, 0.0, lo)
    return RefinedLimits(lo=lo, hi=hi)


def pose_loss(theta, limits):
    """Squared hinge on interval violations, summed over all 45 entries.
    `limits` is a RefinedLimits (or any object with lo/hi arrays or Jets)."""
    over = dm.hinge(theta - limits.hi)
    under = dm.hinge(limits.lo - theta)
    return dm.sumsq(over) + dm.sumsq(under)


def shape_loss(beta):
    """Euclidean norm of beta, smoothed at the origin (within 1e-9) so the
    gradient exists at beta = 0 where every fit starts."""
    eps = 1e-9
    return dm.sqrt(dm.sumsq(beta) + eps * eps) - eps


def prior_loss(theta, beta, mesh, faces, mask, limits, *,
               weights=DEFAULT_WEIGHTS, d_tol=DEFAULT_D_TOL,
               refine_anatomy: bool = True, splay_refines_bend: bool = True,
               winding_threshold: float = 0.5, segment_pad: float = 0.004,
               interior=None):
    """Weighted prior: weights[0]*pose + weights[1]*non_penetration +
    weights[2]*shape.  Returns (total, breakdown dict).  Inputs may be Jets;
    interior membership always comes from the primal vertices (pass a
    precomputed InteriorSet to reuse it)."""
    lam1, lam2, lam3 = weights
    if refine_anatomy:
        refined = refine_limits(limits, theta, splay_refines_bend=splay_refines_bend)
    else:
        refined = RefinedLimits(lo=limits.lo, hi=limits.hi)
    l_pose = pose_loss(theta, refined)

    vertices = mesh.vertices if hasattr(mesh, "vertices") else mesh
    if interior is None:
        interior = interior_vertices(dm.value(vertices), faces, mask,
                                     threshold=winding_threshold,
                                     segment_pad=segment_pad)
    depths = member_depths(vertices, interior) if len(interior) else None
    l_pen = non_penetration_loss(interior, d_tol, depths=depths)
    l_shape = shape_loss(beta)

    breakdown = {"pose": lam1 * l_pose,
                 "non_penetration": lam2 * l_pen,
                 "shape": lam3 * l_shape}
    total = breakdown["pose"] + breakdown["non_penetration"] + breakdown["shape"]
    return total, breakdown
