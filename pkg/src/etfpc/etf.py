"""Simplex equiangular-tight-frame classifier heads.

A head is the product W = R @ core of a fixed centered-simplex factor
(K x K) and a rotation factor R (d x K) constrained to be an isometry on
the simplex subspace.  The K columns of W are unit vectors with pairwise
inner product -1/(K-1), the maximal equiangular separation.  Only R may
be trained; the core never changes, so updating R rotates the whole frame
rigidly and the Gram structure is preserved by construction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParseError, ValidationError

RANK_TOL = 1e-12

HEAD_MAGIC = "etfpc-head 1"


def simplex_core(K: int) -> np.ndarray:
    """Centered simplex factor sqrt(K/(K-1)) * (I_K - (1/K) 1 1^T)."""
    if K < 2:
        raise ValidationError(f"need at least 2 classes, got K={K}")
    eye = np.eye(K)
    return np.sqrt(K / (K - 1.0)) * (eye - np.full((K, K), 1.0 / K))


def simplex_subspace_basis(K: int) -> np.ndarray:
    """Orthonormal rows spanning the hyperplane orthogonal to the all-ones
    vector in R^K; shape (K-1, K).  Deterministic in K."""
    # QR of the centered first K-1 basis vectors; columns are orthogonal to 1.
    cols = np.eye(K)[:, : K - 1] - 1.0 / K
    q, r = np.linalg.qr(cols)
    # Fix signs so the basis does not depend on LAPACK sign conventions.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T


@dataclass
class ETFHead:
    """Equiangular-tight-frame classifier head.

    K: number of classes; d: feature dimension, d >= K-1.
    core: fixed (K, K) simplex factor.
    R: (d, K) rotation factor.  For d >= K it satisfies R^T R = I_K; for the
       minimal dimension d = K-1 it is an isometry on the simplex subspace
       (R^T R equals the centering projector), which is the strongest
       constraint that exists there.
    learnable: whether rotation updates are permitted.
    """

    K: int
    d: int
    core: np.ndarray
    R: np.ndarray
    learnable: bool = True

    @property
    def weights(self) -> np.ndarray:
        """Classifier matrix W = R @ core, shape (d, K); unit columns."""
        return self.R @ self.core

    def logits(self, features: np.ndarray) -> np.ndarray:
        """W^T h for a single feature (d,) or a batch (n, d)."""
        return np.asarray(features) @ self.weights


@dataclass(frozen=True)
class GramReport:
    """Deviations of a head from the exact frame structure."""

    off_diag_dev: float
    norm_dev: float
    rotation_dev: float
    tol: float
    passed: bool


def build_etf(K: int, d: int, seed: int, rotation: np.ndarray | None = None,
              learnable: bool = True) -> ETFHead:
    """Construct a head with a seeded random rotation.

    The rotation is the orthogonal polar factor of a standard-Gaussian
    matrix, so identical (K, d, seed) give bit-identical heads.  Pass
    ``rotation`` to override the seeded initialization (it is retracted
    onto the constraint set first).
    """
    if K < 2:
        raise ValidationError(f"need at least 2 classes, got K={K}")
    if d < K - 1:
        raise ValidationError(f"feature dim d={d} below minimum K-1={K - 1}")

    core = simplex_core(K)
    if rotation is not None:
        raw = np.array(rotation, dtype=float)
        if raw.shape != (d, K):
            raise ValidationError(f"rotation shape {raw.shape} != ({d}, {K})")
    elif d >= K:
        raw = np.random.default_rng(seed).standard_normal((d, K))
    else:
        # d == K-1: draw the free (K-1)x(K-1) block, then embed below.
        raw = np.random.default_rng(seed).standard_normal((d, K - 1))
        raw = raw @ simplex_subspace_basis(K)
    R = _retract_rotation(raw, K, d)
    return ETFHead(K=K, d=d, core=core, R=R, learnable=learnable)


def retract_orthogonal(R_raw: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) matrix with orthonormal columns: the polar factor
    U V^T of the SVD.  Idempotent.  Requires full column rank."""
    R_raw = np.asarray(R_raw, dtype=float)
    u, s, vt = np.linalg.svd(R_raw, full_matrices=False)
    if s[-1] < RANK_TOL:
        raise NumericalError(
            f"rank-deficient rotation: smallest singular value {s[-1]:.3e}")
    return u @ vt


def _retract_rotation(R_raw: np.ndarray, K: int, d: int) -> np.ndarray:
    """Retract onto the constraint set appropriate for (K, d)."""
    if d >= K:
        return retract_orthogonal(R_raw)
    # Minimal dimension: retract within the simplex subspace.  R^T R = I_K is
    # impossible for d < K; the binding constraint is isometry on range(core).
    Q = simplex_subspace_basis(K)
    return retract_orthogonal(R_raw @ Q.T) @ Q


def verify_etf(head: ETFHead, tol: float) -> GramReport:
    """Measure how far a head is from an exact simplex frame.

    Reports the worst off-diagonal Gram deviation from -1/(K-1), the worst
    column-norm deviation from 1, and the rotation-constraint deviation
    (from R^T R = I_K when d >= K, else from isometry on the simplex
    subspace).  Pure function.
    """
    K, d = head.K, head.d
    if head.R.shape != (d, K) or head.core.shape != (K, K):
        raise ValidationError(
            f"inconsistent head: R {head.R.shape}, core {head.core.shape}, K={K}, d={d}")
    W = head.weights
    gram = W.T @ W
    target_off = -1.0 / (K - 1)
    off_mask = ~np.eye(K, dtype=bool)
    off_diag_dev = float(np.max(np.abs(gram[off_mask] - target_off)))
    norm_dev = float(np.max(np.abs(np.linalg.norm(W, axis=0) - 1.0)))
    rtr = head.R.T @ head.R
    if d >= K:
        rotation_dev = float(np.max(np.abs(rtr - np.eye(K))))
    else:
        C = np.eye(K) - np.full((K, K), 1.0 / K)
        rotation_dev = float(np.max(np.abs(C @ rtr @ C - C)))
    passed = max(off_diag_dev, norm_dev, rotation_dev) <= tol
    return GramReport(off_diag_dev, norm_dev, rotation_dev, tol, passed)


def rbl_step(head: ETFHead, grad_R: np.ndarray, lr: float) -> ETFHead:
    """One constrained rotation update: R <- retract(R - lr * grad_R).

    The core is untouched, so the frame Gram survives exactly; only the
    global orientation moves.  Returns a new head.
    """
    if not head.learnable:
        raise ValidationError("head is frozen: rbl updates are disabled")
    grad_R = np.asarray(grad_R, dtype=float)
    if grad_R.shape != head.R.shape:
        raise ValidationError(f"grad shape {grad_R.shape} != {head.R.shape}")
    R_new = _retract_rotation(head.R - lr * grad_R, head.K, head.d)
    return dataclasses.replace(head, R=R_new)


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_head(head: ETFHead, path) -> None:
    """Write the head as versioned text (17 significant digits, lossless)."""
    lines = [HEAD_MAGIC,
             f"K {head.K}",
             f"d {head.d}",
             f"learnable {int(head.learnable)}",
             "R"]
    lines += [" ".join(_fmt(v) for v in row) for row in head.R]
    lines.append("core")
    lines += [" ".join(_fmt(v) for v in row) for row in head.core]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_head(path) -> ETFHead:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != HEAD_MAGIC:
        raise ParseError(f"{path}:1: expected header '{HEAD_MAGIC}'")

    def _scalar(idx: int, name: str) -> int:
        parts = lines[idx].split()
        if len(parts) != 2 or parts[0] != name:
            raise ParseError(f"{path}:{idx + 1}: expected '{name} <int>'")
        return int(parts[1])

    K = _scalar(1, "K")
    d = _scalar(2, "d")
    learnable = bool(_scalar(3, "learnable"))

    def _matrix(start: int, marker: str, rows: int, cols: int):
        if lines[start] != marker:
            raise ParseError(f"{path}:{start + 1}: expected '{marker}'")
        block = lines[start + 1:start + 1 + rows]
        if len(block) != rows:
            raise ParseError(f"{path}:{start + 1}: truncated {marker} block")
        mat = np.empty((rows, cols))
        for i, ln in enumerate(block):
            vals = ln.split()
            if len(vals) != cols:
                raise ParseError(
                    f"{path}:{start + 2 + i}: expected {cols} values, got {len(vals)}")
            mat[i] = [float(v) for v in vals]
        return mat, start + 1 + rows

    R, nxt = _matrix(4, "R", d, K)
    core, _ = _matrix(nxt, "core", K, K)
    return ETFHead(K=K, d=d, core=core, R=R, learnable=learnable)
