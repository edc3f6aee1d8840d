"""Heteroscedastic Gaussian landmark model and its NLL/MSE data terms.

Each observed 2D joint is modeled as an isotropic Gaussian around the
projected model joint: one standard deviation per joint, shared by both image
coordinates.  The data term sums, over visible joints and coordinates,
    log sigma_i + (obs_ic - mu_ic)^2 / (2 sigma_i^2),
so per joint: 2 log sigma_i + |r_i|^2 / (2 sigma_i^2).  Minimizing over
sigma_i hits the Gaussian MLE stationary point sigma_i^2 = |r_i|^2 / 2 (the
mean squared per-coordinate residual), which is what lets noisy joints buy
themselves a large sigma and stop dragging the pose.  With sigma frozen at 1
the term reduces to half the summed squared residuals, i.e. the plain MSE up
to normalization.

Sigmas are clamped to [0.5, 64] px: the lower bound stops the classic NLL
collapse sigma -> 0 on interpolatable points, the upper bound stops joints
from being ignored entirely.  The clamp is built from hinges so gradients
gate off cleanly outside the box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import dual as dm
from .model import N_JOINTS

SIGMA_MIN = 0.5
SIGMA_MAX = 64.0
SIGMA_INIT = 8.0


@dataclass
class LandmarkObservation:
    positions: np.ndarray   # (21,2) pixels
    visibility: np.ndarray  # (21,) bool
    source_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.positions.shape != (N_JOINTS, 2):
            raise ValueError(f"positions must be ({N_JOINTS},2)")
        if self.visibility.shape != (N_JOINTS,):
            raise ValueError(f"visibility must be ({N_JOINTS},)")
        if not np.all(np.isfinite(self.positions[self.visibility])):
            raise ValueError("visible landmark positions must be finite")

    @property
    def n_visible(self) -> int:
        return int(self.visibility.sum())


@dataclass
class LandmarkDistribution:
    mu: np.ndarray     # (21,2) pixels
    sigma: np.ndarray  # (21,) pixels, already inside [SIGMA_MIN, SIGMA_MAX]

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.shape != (N_JOINTS, 2) or self.sigma.shape != (N_JOINTS,):
            raise ValueError("distribution needs mu (21,2) and sigma (21,)")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")
        if np.any(self.sigma < SIGMA_MIN) or np.any(self.sigma > SIGMA_MAX):
            raise ValueError("sigma outside its clamp range")


def clamp_sigma(sigma):
    """Clip to [SIGMA_MIN, SIGMA_MAX]; hinge composition keeps Jet tangents
    gated to the interior."""
    return (SIGMA_MIN + dm.hinge(sigma - SIGMA_MIN)
            - dm.hinge(sigma - SIGMA_MAX))


def _as_mu(dist):
    return dist.mu if hasattr(dist, "mu") else dist


def nll_terms(mu, sigma, obs: LandmarkObservation):
    """Per-visible-joint NLL contributions; mu and sigma may be Jets."""
    vis = obs.visibility
    residual = mu[vis] - obs.positions[vis]
    rsq = dm.sumsq(residual, axis=-1)
    sc = clamp_sigma(sigma[vis] if dm.is_jet(sigma) else np.asarray(sigma)[vis])
    return 2.0 * dm.log(sc) + rsq / (2.0 * sc * sc)


def nll_loss(dist, obs: LandmarkObservation, sigma=None):
    """Eq.-style data term: sum over visible joints; invisible contribute 0.
    Accepts a LandmarkDistribution, or raw mu with sigma passed separately."""
    mu = _as_mu(dist)
    if sigma is None:
        sigma = dist.sigma
    if obs.n_visible == 0:
        warnings.warn("sample has no visible joints; data term is empty",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return nll_terms(mu, sigma, obs).sum()


def mse_loss(dist, obs: LandmarkObservation):
    """Mean squared residual over visible joint coordinates."""
    mu = _as_mu(dist)
    vis = obs.visibility
    n = obs.n_visible
    if n == 0:
        warnings.warn("sample has no visible joints; data term is empty",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    residual = mu[vis] - obs.positions[vis]
    return dm.sumsq(residual) / (2.0 * n)


def nll_sigma_grad(mu, sigma, obs: LandmarkObservation):
    """Analytic d(nll)/d(log sigma) per joint (21,), zero for invisible
    joints and wherever the clamp is active."""
    mu = dm.value(_as_mu(mu))
    sigma = dm.value(sigma)
    grad = np.zeros(N_JOINTS)
    vis = obs.visibility
    if not vis.any():
        return grad
    rsq = np.sum((mu[vis] - obs.positions[vis]) ** 2, axis=-1)
    s = sigma[vis]
    sc = np.clip(s, SIGMA_MIN, SIGMA_MAX)
    gate = (s > SIGMA_MIN) & (s < SIGMA_MAX)
    grad[vis] = (2.0 / sc - rsq / sc ** 3) * gate * s
    return grad
