"""Alignment losses for training against a fixed-direction classifier.

Two pieces: a quadratic dot-product loss that pulls a feature onto its
class vector, and a dynamic feature-direction loss (cosine pull toward the
own-class centroid, cosine push from the nearest rival centroid).  Closed
form gradients are provided for both; they are checked against finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class NormBounds:
    """Squared-norm budgets for classifier vectors (E_W) and features (E_H).

    Defaults are 1: unit-norm frame columns, features normalized to the unit
    sphere.  The cosine form of the dot-loss gradient is exact only when both
    norms saturate their budget, which the pipeline enforces.
    """

    E_W: float = 1.0
    E_H: float = 1.0

    def __post_init__(self):
        if self.E_W <= 0 or self.E_H <= 0:
            raise ValidationError(f"norm bounds must be positive: {self}")

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.E_W * self.E_H))


@dataclass(frozen=True)
class LossBreakdown:
    dot_term: float
    fdl_term: float
    lam: float
    total: float


def _check_finite(name: str, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite entries in {name}")
    return v


def _unit(name: str, v: np.ndarray) -> tuple[np.ndarray, float]:
    v = _check_finite(name, v)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise NumericalError(f"zero-norm {name}; upstream extractor is dead")
    return v, n


def dot_loss(h: np.ndarray, w_k: np.ndarray, bounds: NormBounds = NormBounds()) -> float:
    """(1 / 2s) (w_k^T h - s)^2 with s = sqrt(E_W * E_H).

    Zero exactly when w_k^T h = s, i.e. perfect alignment at full norm
    budget; nonnegative everywhere.
    """
    h = _check_finite("h", h)
    w_k = _check_finite("w_k", w_k)
    s = bounds.scale
    r = float(w_k @ h) - s
    return r * r / (2.0 * s)


def dot_loss_grad(h: np.ndarray, w_k: np.ndarray,
                  bounds: NormBounds = NormBounds()) -> np.ndarray:
    """Gradient of dot_loss in h: (cos(h, w_k) - 1) * w_k.

    Valid on the constraint surface ||h|| = sqrt(E_H), ||w_k|| = sqrt(E_W),
    where it coincides with the unconstrained derivative.
    """
    h, hn = _unit("h", h)
    w_k, wn = _unit("w_k", w_k)
    cos = float(w_k @ h) / (hn * wn)
    return (cos - 1.0) * w_k


def fdl_loss(h: np.ndarray, mean_own: np.ndarray, mean_rival: np.ndarray) -> float:
    """-cos(h, mean_own) + cos(h, mean_rival); range [-2, 2].

    Scale-free in every argument: only directions matter.
    """
    h, hn = _unit("h", h)
    own, on = _unit("mean_own", mean_own)
    rival, rn = _unit("mean_rival", mean_rival)
    return float(-(h @ own) / (hn * on) + (h @ rival) / (hn * rn))


def fdl_grad(h: np.ndarray, mean_own: np.ndarray, mean_rival: np.ndarray) -> np.ndarray:
    """Gradient of fdl_loss in h: pull term plus push term.

    pull = (h.own) h / (|h|^3 |own|) - own / (|h| |own|)
    push = rival / (|h| |rival|) - (h.rival) h / (|h|^3 |rival|)

    Both terms are tangent to the sphere at h (h^T grad = 0): cosines have
    no radial derivative.
    """
    h, hn = _unit("h", h)
    own, on = _unit("mean_own", mean_own)
    rival, rn = _unit("mean_rival", mean_rival)
    hn3 = hn ** 3
    pull = (float(h @ own) / (hn3 * on)) * h - own / (hn * on)
    push = rival / (hn * rn) - (float(h @ rival) / (hn3 * rn)) * h
    return pull + push


def total_loss(h: np.ndarray, w_k: np.ndarray, mean_own: np.ndarray,
               mean_rival: np.ndarray, bounds: NormBounds, lam: float,
               fdl_active: bool) -> LossBreakdown:
    """Combined objective: dot term plus lam * direction term once the
    warm-up gate opens.  During warm-up the direction term is identically 0
    and the centroid arguments are not evaluated."""
    dot = dot_loss(h, w_k, bounds)
    fdl = fdl_loss(h, mean_own, mean_rival) if fdl_active else 0.0
    return LossBreakdown(dot_term=dot, fdl_term=fdl, lam=lam,
                         total=dot + lam * fdl)
