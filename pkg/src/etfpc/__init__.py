"""Point-cloud classification with an equiangular-tight-frame head.

Library + CLI for training a small point-cloud classifier whose head is a
simplex equiangular tight frame (optionally with a learnable constrained
rotation and a dynamic feature-direction loss), attacking it with
white-box gradient attacks, and measuring feature-space collapse
diagnostics and robustness.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, drop_attack, ifgm, pert_attack
from .data import (DatasetSpec, Dataset, PointCloud, SORConfig, default_spec,
                   generate, load_cloud, normalize_unit_sphere, save_cloud,
                   sor_filter)
from .etf import (ETFHead, GramReport, build_etf, load_head, rbl_step,
                  retract_orthogonal, save_head, simplex_core, verify_etf)
from .losses import (LossBreakdown, NormBounds, dot_loss, dot_loss_grad,
                     fdl_grad, fdl_loss, total_loss)
from .metrics import (MetricsReport, NCReport, accuracy, nc_report, silhouette)
from .net import (ExtractorParams, ForwardTrace, backward, forward,
                  init_params, load_params, predict, save_params)
from .train import (ClassCentroids, LinearHead, TrainConfig, TrainResult,
                    compute_centroids, nearest_rival, train)

__all__ = [
    "AttackConfig", "AttackResult", "drop_attack", "ifgm", "pert_attack",
    "DatasetSpec", "Dataset", "PointCloud", "SORConfig", "default_spec",
    "generate", "load_cloud", "normalize_unit_sphere", "save_cloud",
    "sor_filter",
    "ETFHead", "GramReport", "build_etf", "load_head", "rbl_step",
    "retract_orthogonal", "save_head", "simplex_core", "verify_etf",
    "LossBreakdown", "NormBounds", "dot_loss", "dot_loss_grad", "fdl_grad",
    "fdl_loss", "total_loss",
    "MetricsReport", "NCReport", "accuracy", "nc_report", "silhouette",
    "ExtractorParams", "ForwardTrace", "backward", "forward", "init_params",
    "load_params", "predict", "save_params",
    "ClassCentroids", "LinearHead", "TrainConfig", "TrainResult",
    "compute_centroids", "nearest_rival", "train",
]
