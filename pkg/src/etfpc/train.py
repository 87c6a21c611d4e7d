"""Two-stage training: dot-loss warm-up, then combined objective.

Epochs 1..warmup optimize the dot loss alone (centroids are not yet
trustworthy).  From epoch warmup+1 on, class centroids are recomputed at
the top of every epoch and each sample additionally receives the
feature-direction loss against its own centroid and the centroid of the
rival class closest to the sample's current feature.

The extractor is updated by seeded mini-batch Adam.  The frame head, when
learnable, moves by constrained rotation steps (Adam update, then
retraction) driven only by the dot loss; the direction loss never touches
the head.  A plain cross-entropy trainer with a learnable linear head is
included as the unstructured baseline; it shares the optimizer, schedule,
and history format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import net
from .data import Dataset
from .errors import NumericalError, ParseError, ValidationError
from .etf import ETFHead, build_etf, rbl_step
from .losses import NormBounds, dot_loss, dot_loss_grad, fdl_grad, fdl_loss
from .metrics import accuracy, nc_report, silhouette
from .optim import Adam

LINEAR_MAGIC = "etfpc-linear 1"

ETF_HISTORY_COLUMNS = ("epoch", "dot_loss", "fdl_loss", "clean_acc",
                       "nc1", "nc2", "nc3", "nc4", "sc")
CE_HISTORY_COLUMNS = ("epoch", "ce_loss", "clean_acc",
                      "nc1", "nc2", "nc3", "nc4", "sc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    warmup: int = 10
    lr: float = 1e-3
    lam: float = 5.0
    batch_size: int = 16
    seed: int = 0
    dim: int = 64
    rbl_on: bool = True
    fdl_on: bool = True
    etf_fixed: bool = False
    ce_baseline: bool = False

    def __post_init__(self):
        if not (0 <= self.warmup <= self.epochs):
            raise ValidationError(
                f"warmup must be in [0, epochs], got {self.warmup}/{self.epochs}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if self.ce_baseline and (self.etf_fixed or not self.rbl_on or not self.fdl_on):
            raise ValidationError("ce_baseline excludes the frame-head flags")

    @property
    def effective_rbl(self) -> bool:
        return self.rbl_on and not self.etf_fixed

    @property
    def effective_fdl(self) -> bool:
        return self.fdl_on and not self.etf_fixed


@dataclass
class ClassCentroids:
    """Per-class mean features, refreshed once per epoch."""

    means: np.ndarray        # (K, d)
    global_mean: np.ndarray  # (d,)
    counts: np.ndarray       # (K,)
    epoch: int


@dataclass
class LinearHead:
    """Unconstrained linear classifier for the cross-entropy baseline."""

    W: np.ndarray  # (d, K)
    b: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.W

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.W + self.b


@dataclass
class TrainResult:
    params: net.ExtractorParams
    head: object  # ETFHead or LinearHead
    history: list[dict] = field(default_factory=list)


def compute_centroids(params: net.ExtractorParams, clouds,
                      num_classes: int, epoch: int = 0) -> ClassCentroids:
    """Class means of extractor features over ``clouds``, in listed order."""
    d = params.d
    sums = np.zeros((num_classes, d))
    counts = np.zeros(num_classes, dtype=int)
    for cloud in clouds:
        h, _ = net.forward(params, cloud)
        sums[cloud.label] += h
        counts[cloud.label] += 1
    for k in range(num_classes):
        if counts[k] == 0:
            raise ValidationError(f"class {k} has no training samples")
    means = sums / counts[:, None]
    global_mean = sums.sum(axis=0) / counts.sum()
    return ClassCentroids(means=means, global_mean=global_mean,
                          counts=counts, epoch=epoch)


def nearest_rival(h: np.ndarray, centroids: ClassCentroids, own: int) -> int:
    """Rival class whose centroid is most cosine-similar to h; ties go to
    the lowest index."""
    means = centroids.means
    norms = np.linalg.norm(means, axis=1)
    cos = means @ np.asarray(h, dtype=float) / (norms * np.linalg.norm(h))
    cos[own] = -np.inf
    return int(np.argmax(cos))


def init_for_config(config: TrainConfig, num_classes: int):
    """Seeded head + extractor for a config.  The extractor seed is offset
    so head and network never share a stream."""
    params = net.init_params(config.dim, config.seed + 1000003)
    if config.ce_baseline:
        rng = np.random.default_rng(config.seed)
        head = LinearHead(W=rng.standard_normal((config.dim, num_classes))
                          / np.sqrt(config.dim),
                          b=np.zeros(num_classes))
    else:
        head = build_etf(num_classes, config.dim, config.seed,
                         learnable=config.effective_rbl)
    return head, params


def _forward_all(params, clouds):
    """Batched forward when the clouds share a point count, else one by one.
    Returns (features, opaque handle for _backward_all)."""
    sizes = {c.points.shape[0] for c in clouds}
    if len(sizes) == 1:
        pts = np.stack([c.points for c in clouds])
        feats, trace = net.forward_batch(params, pts)
        return feats, ("batch", trace)
    pairs = [net.forward(params, c) for c in clouds]
    return np.stack([f for f, _ in pairs]), ("each", [t for _, t in pairs])


def _backward_all(params, handle, grad_features):
    """Sum of per-sample parameter gradients for _forward_all output."""
    kind, payload = handle
    if kind == "batch":
        grads, _ = net.backward_batch(params, payload, grad_features)
        return grads
    acc = net.grads_zero(params)
    for trace, g in zip(payload, grad_features):
        pg, _ = net.backward(params, trace, g)
        net.grads_add(acc, pg)
    return acc


def _centroids_from_features(feats: np.ndarray, labels, num_classes: int,
                             epoch: int) -> ClassCentroids:
    sums = np.zeros((num_classes, feats.shape[1]))
    counts = np.zeros(num_classes, dtype=int)
    for h, label in zip(feats, labels):
        sums[label] += h
        counts[label] += 1
    for k in range(num_classes):
        if counts[k] == 0:
            raise ValidationError(f"class {k} has no training samples")
    return ClassCentroids(means=sums / counts[:, None],
                          global_mean=sums.sum(axis=0) / counts.sum(),
                          counts=counts, epoch=epoch)


def _epoch_metrics(params, head, dataset, train_labels):
    """Collapse diagnostics on train features; silhouette + accuracy on the
    held-out fold.  Returns the train features so the caller can reuse them
    as next epoch's centroids."""
    feats = net.batch_features(params, dataset.train)
    nc = nc_report(feats, train_labels, head)
    test_feats = net.batch_features(params, dataset.test)
    test_labels = [c.label for c in dataset.test]
    sc = silhouette(test_feats, test_labels)
    preds = np.argmax(head.logits(test_feats), axis=1)
    clean = accuracy(preds, test_labels)
    return nc, sc, clean, feats


def train(config: TrainConfig, dataset: Dataset, head, params) -> TrainResult:
    """Run the full schedule; returns trained weights plus per-epoch history.

    Bit-reproducible for a fixed config: sample order is keyed to
    (seed, epoch) and every reduction runs in a fixed order.
    """
    if config.ce_baseline:
        return _train_ce(config, dataset, head, params)
    if not isinstance(head, ETFHead):
        raise ValidationError("frame training requires an ETFHead")
    num_classes = head.K
    labels = [c.label for c in dataset.train]
    if max(labels) >= num_classes:
        raise ValidationError(
            f"dataset has label {max(labels)} but head has K={num_classes}")
    if params.d != head.d:
        raise ValidationError(f"extractor dim {params.d} != head dim {head.d}")

    bounds = NormBounds()
    n = len(dataset.train)
    history: list[dict] = []
    opt_net = Adam([a.shape for a in net.flat_arrays(net.grads_zero(params))])
    opt_rot = Adam([head.R.shape])
    cached_feats: np.ndarray | None = None
    for epoch in range(1, config.epochs + 1):
        fdl_active = config.effective_fdl and epoch > config.warmup
        if fdl_active:
            # top-of-epoch centroids; the end-of-epoch feature pass is the
            # same computation, so reuse it when available
            centroids = (_centroids_from_features(cached_feats, labels,
                                                  num_classes, epoch)
                         if cached_feats is not None else
                         compute_centroids(params, dataset.train, num_classes,
                                           epoch))
        else:
            centroids = None
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        dot_sum = 0.0
        fdl_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            batch = [dataset.train[idx] for idx in order[start:start + config.batch_size]]
            grad_R = np.zeros_like(head.R)
            W = head.weights
            inv = 1.0 / len(batch)
            batch_loss = 0.0
            feats, handle = _forward_all(params, batch)
            grad_feats = np.empty_like(feats)
            for i, (cloud, h) in enumerate(zip(batch, feats)):
                y = cloud.label
                w_y = W[:, y]
                dot = dot_loss(h, w_y, bounds)
                g_h = dot_loss_grad(h, w_y, bounds)
                dot_sum += dot
                batch_loss += dot
                if fdl_active:
                    rival = nearest_rival(h, centroids, y)
                    own_mean = centroids.means[y]
                    rival_mean = centroids.means[rival]
                    fdl = fdl_loss(h, own_mean, rival_mean)
                    g_h = g_h + config.lam * fdl_grad(h, own_mean, rival_mean)
                    fdl_sum += fdl
                    batch_loss += config.lam * fdl
                grad_feats[i] = inv * g_h
                if config.effective_rbl:
                    # dot loss through W = R core: only column y contributes
                    coeff = (float(w_y @ h) - bounds.scale) / bounds.scale
                    grad_R += inv * coeff * np.outer(h, head.core[:, y])
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            acc = _backward_all(params, handle, grad_feats)
            deltas = opt_net.step(net.flat_arrays(acc), config.lr)
            params = net.apply_sgd(params, net.grads_from_flat(params, deltas), 1.0)
            if config.effective_rbl:
                head = rbl_step(head, opt_rot.step([grad_R], config.lr)[0], 1.0)
        nc, sc, clean, cached_feats = _epoch_metrics(params, head, dataset, labels)
        history.append({"epoch": epoch, "dot_loss": dot_sum / n,
                        "fdl_loss": fdl_sum / n, "clean_acc": clean,
                        "nc1": nc.nc1, "nc2": nc.nc2, "nc3": nc.nc3,
                        "nc4": nc.nc4, "sc": sc})
    return TrainResult(params=params, head=head, history=history)


def _train_ce(config: TrainConfig, dataset: Dataset, head: LinearHead,
              params: net.ExtractorParams) -> TrainResult:
    if not isinstance(head, LinearHead):
        raise ValidationError("ce_baseline requires a LinearHead")
    labels = [c.label for c in dataset.train]
    n = len(dataset.train)
    history: list[dict] = []
    opt_net = Adam([a.shape for a in net.flat_arrays(net.grads_zero(params))])
    opt_head = Adam([head.W.shape, head.b.shape])
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        ce_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            batch = order[start:start + config.batch_size]
            acc = net.grads_zero(params)
            gW = np.zeros_like(head.W)
            gb = np.zeros_like(head.b)
            inv = 1.0 / len(batch)
            batch_loss = 0.0
            for idx in batch:
                cloud = dataset.train[idx]
                h, trace = net.forward(params, cloud)
                z = head.logits(h)
                z = z - z.max()
                p = np.exp(z)
                p /= p.sum()
                ce = -float(np.log(p[cloud.label]))
                ce_sum += ce
                batch_loss += ce
                g_z = p.copy()
                g_z[cloud.label] -= 1.0
                pg, _ = net.backward(params, trace, head.W @ g_z)
                net.grads_add(acc, pg, inv)
                gW += inv * np.outer(h, g_z)
                gb += inv * g_z
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            deltas = opt_net.step(net.flat_arrays(acc), config.lr)
            params = net.apply_sgd(params, net.grads_from_flat(params, deltas), 1.0)
            dW, db = opt_head.step([gW, gb], config.lr)
            head = LinearHead(W=head.W - dW, b=head.b - db)
        nc, sc, clean, _ = _epoch_metrics(params, head, dataset, labels)
        history.append({"epoch": epoch, "ce_loss": ce_sum / n,
                        "clean_acc": clean, "nc1": nc.nc1, "nc2": nc.nc2,
                        "nc3": nc.nc3, "nc4": nc.nc4, "sc": sc})
    return TrainResult(params=params, head=head, history=history)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_history(history: list[dict], path, ce: bool = False) -> None:
    cols = CE_HISTORY_COLUMNS if ce else ETF_HISTORY_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(cols)
        for row in history:
            writer.writerow([row["epoch"]] +
                            ["%.17g" % row[c] for c in cols[1:]])


def load_history(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            row = {"epoch": int(raw["epoch"])}
            row.update({k: float(v) for k, v in raw.items() if k != "epoch"})
            rows.append(row)
    return rows


def save_linear_head(head: LinearHead, path) -> None:
    d, K = head.W.shape
    lines = [LINEAR_MAGIC, f"K {K}", f"d {d}", "W"]
    lines += [" ".join("%.17g" % v for v in row) for row in head.W]
    lines.append("b")
    lines.append(" ".join("%.17g" % v for v in head.b))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_linear_head(path) -> LinearHead:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != LINEAR_MAGIC:
        raise ParseError(f"{path}:1: expected header '{LINEAR_MAGIC}'")
    K = int(lines[1].split()[1])
    d = int(lines[2].split()[1])
    if lines[3] != "W":
        raise ParseError(f"{path}:4: expected 'W'")
    W = np.array([[float(v) for v in lines[4 + i].split()] for i in range(d)])
    if W.shape != (d, K):
        raise ParseError(f"{path}: W block has shape {W.shape}, expected ({d}, {K})")
    if lines[4 + d] != "b":
        raise ParseError(f"{path}:{5 + d}: expected 'b'")
    b = np.array([float(v) for v in lines[5 + d].split()])
    if b.shape != (K,):
        raise ParseError(f"{path}: b block has {b.shape[0]} values, expected {K}")
    return LinearHead(W=W, b=b)
