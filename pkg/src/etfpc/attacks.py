"""White-box evasion attacks driven by the extractor's gradient oracle.

All three attacks are untargeted and work on the margin logit score
z_y - max_{k != y} z_k: pushing it below zero flips the prediction away
from the ground-truth label.  They touch the model only through its
public forward/backward contract, so any extractor with that contract is
attackable unchanged.

  ifgm   iterate along the norm-normalized input gradient, projecting the
         cumulative perturbation back onto the L2 ball of radius epsilon
  pert   gradient descent on margin + dist_weight * ||X' - X||^2; returns
         the successful iterate closest to the original, if any
  drop   repeatedly delete the points with the largest gradient saliency
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import net
from .data import PointCloud
from .errors import ValidationError

ATTACK_KINDS = ("ifgm", "pert", "drop")

STALL_NORM = 1e-12

MIN_POINTS = 8


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    step: float = 0.02
    iters: int = 100
    epsilon: float = 0.5
    dist_weight: float = 0.5
    drop_count: int = 25
    drop_rounds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(f"unknown attack kind '{self.kind}'")
        if self.step <= 0:
            raise ValidationError(f"step must be positive, got {self.step}")
        if self.iters < 0:
            raise ValidationError(f"iters must be >= 0, got {self.iters}")
        if self.kind == "drop" and (self.drop_count < 0 or self.drop_rounds < 1):
            raise ValidationError(
                f"bad drop settings: count={self.drop_count}, rounds={self.drop_rounds}")


def default_attack_config(kind: str, seed: int = 0) -> AttackConfig:
    if kind == "ifgm":
        return AttackConfig(kind="ifgm", step=0.02, iters=100, epsilon=0.5, seed=seed)
    if kind == "pert":
        return AttackConfig(kind="pert", step=0.005, iters=200, dist_weight=0.5,
                            seed=seed)
    if kind == "drop":
        return AttackConfig(kind="drop", step=1.0, iters=0, drop_count=25,
                            drop_rounds=5, seed=seed)
    raise ValidationError(f"unknown attack kind '{kind}'")


@dataclass
class AttackResult:
    cloud: PointCloud
    success: bool
    perturbation_norm: float
    iterations: int
    stalled: bool = False


def margin_and_grad(params: net.ExtractorParams, head, points: np.ndarray,
                    label: int):
    """Margin z_y - max_{k != y} z_k, its input gradient, and the argmax class."""
    h, trace = net.forward(params, points)
    z = head.logits(h)
    pred = int(np.argmax(z))
    masked = z.copy()
    masked[label] = -np.inf
    rival = int(np.argmax(masked))
    margin = float(z[label] - z[rival])
    # bias terms, if any, vanish in the gradient
    g_h = head.weights[:, label] - head.weights[:, rival]
    _, g_pts = net.backward(params, trace, g_h)
    return margin, g_pts, pred


def _predicts(params, head, points) -> int:
    h, _ = net.forward(params, points)
    return net.predict(h, head)


def ifgm(params: net.ExtractorParams, head, cloud: PointCloud,
         cfg: AttackConfig) -> AttackResult:
    """Iterative fast gradient method with norm-normalized steps and exact
    projection onto the epsilon ball around the original cloud."""
    x0 = np.array(cloud.points, dtype=float)
    x = x0.copy()
    stalled = False
    it = 0
    for it in range(1, cfg.iters + 1):
        _, g, _ = margin_and_grad(params, head, x, cloud.label)
        gn = float(np.linalg.norm(g))
        if gn < STALL_NORM:
            stalled = True
            it -= 1
            break
        x = x - cfg.step * g / gn
        delta = x - x0
        dn = float(np.linalg.norm(delta))
        if dn > cfg.epsilon:
            x = x0 + delta * (cfg.epsilon / dn)
    adv = PointCloud(x, cloud.label, cloud.id)
    return AttackResult(cloud=adv,
                        success=_predicts(params, head, x) != cloud.label,
                        perturbation_norm=float(np.linalg.norm(x - x0)),
                        iterations=it, stalled=stalled)


def pert_attack(params: net.ExtractorParams, head, cloud: PointCloud,
                cfg: AttackConfig) -> AttackResult:
    """Distance-penalized perturbation attack.

    Minimizes margin + dist_weight * ||X' - X||_F^2, keeping the flipping
    iterate with the smallest displacement.  The untouched input never
    counts as a success.
    """
    x0 = np.array(cloud.points, dtype=float)
    x = x0.copy()
    best: np.ndarray | None = None
    best_dist = np.inf
    for _ in range(cfg.iters):
        _, g, _ = margin_and_grad(params, head, x, cloud.label)
        x = x - cfg.step * (g + 2.0 * cfg.dist_weight * (x - x0))
        if _predicts(params, head, x) != cloud.label:
            dist = float(np.linalg.norm(x - x0))
            if dist < best_dist:
                best, best_dist = x.copy(), dist
    if best is not None:
        adv = PointCloud(best, cloud.label, cloud.id)
        return AttackResult(cloud=adv, success=True,
                            perturbation_norm=best_dist, iterations=cfg.iters)
    adv = PointCloud(x, cloud.label, cloud.id)
    return AttackResult(cloud=adv, success=False,
                        perturbation_norm=float(np.linalg.norm(x - x0)),
                        iterations=cfg.iters)


def drop_attack(params: net.ExtractorParams, head, cloud: PointCloud,
                cfg: AttackConfig) -> AttackResult:
    """Saliency-guided point deletion: each round removes the points whose
    margin gradient has the largest norm, then saliency is recomputed."""
    x = np.array(cloud.points, dtype=float)
    n = x.shape[0]
    if cfg.drop_count >= n or n - cfg.drop_count < MIN_POINTS:
        raise ValidationError(
            f"dropping {cfg.drop_count} of {n} points would leave fewer than "
            f"{MIN_POINTS}")
    if cfg.drop_count == 0:
        adv = PointCloud(x, cloud.label, cloud.id)
        return AttackResult(cloud=adv,
                            success=_predicts(params, head, x) != cloud.label,
                            perturbation_norm=0.0, iterations=0)
    rounds = min(cfg.drop_rounds, cfg.drop_count)
    base, rem = divmod(cfg.drop_count, rounds)
    per_round = [base + 1] * rem + [base] * (rounds - rem)
    done = 0
    for count in per_round:
        _, g, _ = margin_and_grad(params, head, x, cloud.label)
        saliency = np.linalg.norm(g, axis=1)
        victims = np.argsort(-saliency, kind="stable")[:count]
        keep = np.ones(x.shape[0], dtype=bool)
        keep[victims] = False
        x = x[keep]
        done += 1
    adv = PointCloud(x, cloud.label, cloud.id)
    return AttackResult(cloud=adv,
                        success=_predicts(params, head, x) != cloud.label,
                        perturbation_norm=0.0, iterations=done)


_RUNNERS = {"ifgm": ifgm, "pert": pert_attack, "drop": drop_attack}


def run_attack(params: net.ExtractorParams, head, cloud: PointCloud,
               cfg: AttackConfig) -> AttackResult:
    return _RUNNERS[cfg.kind](params, head, cloud, cfg)


def config_as_dict(cfg: AttackConfig) -> dict:
    return dataclasses.asdict(cfg)
