"""Minimal differentiable point-cloud feature extractor.

A shared per-point network (3 -> 32 -> 64, rectified) feeds a channel-wise
max pool, then a head network (64 -> 64 -> d) whose output is L2-normalized
onto the unit sphere.  The max pool makes the feature invariant to point
order and count duplication.

forward() caches everything backward() needs; backward() produces exact
reverse-mode gradients for every parameter and every input coordinate,
including through the normalization and the pool (gradient flows only to
each channel's argmax point, ties broken toward the lowest point index).
All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParseError, StaleTraceError, ValidationError

POINT_WIDTHS = (3, 32, 64)
HEAD_HIDDEN = 64

NET_MAGIC = "etfpc-net 1"

Layer = tuple[np.ndarray, np.ndarray]  # (weights (in, out), bias (out,))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ExtractorParams:
    """Immutable network parameters.

    point_layers: per-point layers, widths 3 -> 32 -> 64.
    head_layers: post-pool layers, widths 64 -> 64 -> d.
    The arrays are write-protected; updates build a new instance (see
    apply_sgd), which is what keeps forward traces trustworthy.
    """

    point_layers: tuple[Layer, ...]
    head_layers: tuple[Layer, ...]
    token: object

    @property
    def d(self) -> int:
        return self.head_layers[-1][0].shape[1]


@dataclass
class ParamGrads:
    """Gradient arrays mirroring ExtractorParams's layout."""

    point_layers: list[list[np.ndarray]]
    head_layers: list[list[np.ndarray]]


@dataclass
class ForwardTrace:
    """Cached intermediates of one forward pass."""

    params_token: object
    points: np.ndarray
    pre1: np.ndarray        # (N, 32) pre-activation, first per-point layer
    act1: np.ndarray        # (N, 32)
    pre2: np.ndarray        # (N, 64)
    act2: np.ndarray        # (N, 64)
    pool_idx: np.ndarray    # (64,) argmax point per channel
    pooled: np.ndarray      # (64,)
    pre3: np.ndarray        # (64,)
    act3: np.ndarray        # (64,)
    raw: np.ndarray         # (d,) pre-normalization feature
    raw_norm: float
    feature: np.ndarray     # (d,) unit norm


def _make_params(point_layers, head_layers) -> ExtractorParams:
    return ExtractorParams(
        point_layers=tuple((_freeze(w), _freeze(b)) for w, b in point_layers),
        head_layers=tuple((_freeze(w), _freeze(b)) for w, b in head_layers),
        token=object(),
    )


def init_params(d: int, seed: int) -> ExtractorParams:
    """Seeded He-scaled Gaussian weights, zero biases; final layer 1/sqrt(in)."""
    if d < 1:
        raise ValidationError(f"feature dim must be positive, got {d}")
    rng = np.random.default_rng(seed)
    widths = list(POINT_WIDTHS) + [HEAD_HIDDEN, d]

    def layer(n_in, n_out, final):
        scale = (1.0 if final else 2.0) / n_in
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(scale)
        return w, np.zeros(n_out)

    n_point = len(POINT_WIDTHS) - 1
    layers = [layer(widths[i], widths[i + 1], final=(i == len(widths) - 2))
              for i in range(len(widths) - 1)]
    return _make_params(layers[:n_point], layers[n_point:])


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if hasattr(cloud, "points") else cloud
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"expected (N, 3) coordinates, got {pts.shape}")
    return pts


def forward(params: ExtractorParams, cloud) -> tuple[np.ndarray, ForwardTrace]:
    """Compute the unit-norm global feature and a replayable trace."""
    pts = _as_points(cloud)
    (w1, b1), (w2, b2) = params.point_layers
    (w3, b3), (w4, b4) = params.head_layers

    pre1 = pts @ w1 + b1
    act1 = np.maximum(pre1, 0.0)
    pre2 = act1 @ w2 + b2
    act2 = np.maximum(pre2, 0.0)
    pool_idx = np.argmax(act2, axis=0)          # first max wins: lowest index
    pooled = act2[pool_idx, np.arange(act2.shape[1])]
    pre3 = pooled @ w3 + b3
    act3 = np.maximum(pre3, 0.0)
    raw = act3 @ w4 + b4
    raw_norm = float(np.linalg.norm(raw))
    if raw_norm == 0.0:
        raise NumericalError("extractor produced a zero feature")
    feature = raw / raw_norm
    trace = ForwardTrace(params.token, pts, pre1, act1, pre2, act2,
                         pool_idx, pooled, pre3, act3, raw, raw_norm, feature)
    return feature, trace


def backward(params: ExtractorParams, trace: ForwardTrace,
             grad_feature: np.ndarray) -> tuple[ParamGrads, np.ndarray]:
    """Exact gradients of <grad_feature, feature> w.r.t. parameters and points."""
    if trace.params_token is not params.token:
        raise StaleTraceError("trace was built from different parameters")
    g = np.asarray(grad_feature, dtype=float)
    (w1, _), (w2, _) = params.point_layers
    (w3, _), (w4, _) = params.head_layers

    # Through h = raw / |raw|:  g_raw = (g - (g.h) h) / |raw|
    g_raw = (g - float(g @ trace.feature) * trace.feature) / trace.raw_norm

    d_w4 = np.outer(trace.act3, g_raw)
    d_b4 = g_raw
    g_act3 = w4 @ g_raw
    g_pre3 = g_act3 * (trace.pre3 > 0.0)

    d_w3 = np.outer(trace.pooled, g_pre3)
    d_b3 = g_pre3
    g_pooled = w3 @ g_pre3

    # Max pool routes each channel's gradient to its argmax point only.
    g_act2 = np.zeros_like(trace.act2)
    g_act2[trace.pool_idx, np.arange(g_act2.shape[1])] = g_pooled
    g_pre2 = g_act2 * (trace.pre2 > 0.0)

    d_w2 = trace.act1.T @ g_pre2
    d_b2 = g_pre2.sum(axis=0)
    g_act1 = g_pre2 @ w2.T
    g_pre1 = g_act1 * (trace.pre1 > 0.0)

    d_w1 = trace.points.T @ g_pre1
    d_b1 = g_pre1.sum(axis=0)
    grad_points = g_pre1 @ w1.T

    grads = ParamGrads(point_layers=[[d_w1, d_b1], [d_w2, d_b2]],
                       head_layers=[[d_w3, d_b3], [d_w4, d_b4]])
    return grads, grad_points


def grads_zero(params: ExtractorParams) -> ParamGrads:
    return ParamGrads(
        point_layers=[[np.zeros_like(w), np.zeros_like(b)]
                      for w, b in params.point_layers],
        head_layers=[[np.zeros_like(w), np.zeros_like(b)]
                     for w, b in params.head_layers],
    )


def grads_add(acc: ParamGrads, delta: ParamGrads, scale: float = 1.0) -> None:
    for a_layer, d_layer in zip(acc.point_layers + acc.head_layers,
                                delta.point_layers + delta.head_layers):
        a_layer[0] += scale * d_layer[0]
        a_layer[1] += scale * d_layer[1]


def apply_sgd(params: ExtractorParams, grads: ParamGrads, lr: float) -> ExtractorParams:
    """Plain gradient step; returns fresh immutable parameters."""
    point = [(w - lr * gw, b - lr * gb)
             for (w, b), (gw, gb) in zip(params.point_layers, grads.point_layers)]
    head = [(w - lr * gw, b - lr * gb)
            for (w, b), (gw, gb) in zip(params.head_layers, grads.head_layers)]
    return _make_params(point, head)


def flat_arrays(grads: ParamGrads) -> list[np.ndarray]:
    """Tensors of a gradient set in their fixed canonical order."""
    out: list[np.ndarray] = []
    for w, b in grads.point_layers + grads.head_layers:
        out += [w, b]
    return out


def grads_from_flat(params: ExtractorParams, arrays) -> ParamGrads:
    arrays = list(arrays)
    n_point = len(params.point_layers)
    pairs = [[arrays[2 * i], arrays[2 * i + 1]]
             for i in range(n_point + len(params.head_layers))]
    return ParamGrads(point_layers=pairs[:n_point], head_layers=pairs[n_point:])


def predict(feature: np.ndarray, head) -> int:
    """Class with the largest projection onto its frame vector; ties go to
    the lowest index."""
    return int(np.argmax(head.logits(np.asarray(feature, dtype=float))))


@dataclass
class BatchTrace:
    """Intermediates of a batched forward over same-size clouds."""

    params_token: object
    points: np.ndarray      # (B, N, 3)
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray
    pool_idx: np.ndarray    # (B, 64)
    pooled: np.ndarray      # (B, 64)
    pre3: np.ndarray
    act3: np.ndarray
    raw: np.ndarray         # (B, d)
    raw_norms: np.ndarray   # (B,)
    features: np.ndarray    # (B, d)


def forward_batch(params: ExtractorParams, points: np.ndarray):
    """Batched forward for a (B, N, 3) stack; same math as forward()."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ValidationError(f"expected (B, N, 3) coordinates, got {pts.shape}")
    (w1, b1), (w2, b2) = params.point_layers
    (w3, b3), (w4, b4) = params.head_layers
    pre1 = pts @ w1 + b1
    act1 = np.maximum(pre1, 0.0)
    pre2 = act1 @ w2 + b2
    act2 = np.maximum(pre2, 0.0)
    pool_idx = np.argmax(act2, axis=1)
    pooled = np.take_along_axis(act2, pool_idx[:, None, :], axis=1)[:, 0, :]
    pre3 = pooled @ w3 + b3
    act3 = np.maximum(pre3, 0.0)
    raw = act3 @ w4 + b4
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0.0):
        raise NumericalError("extractor produced a zero feature")
    features = raw / norms[:, None]
    trace = BatchTrace(params.token, pts, pre1, act1, pre2, act2, pool_idx,
                       pooled, pre3, act3, raw, norms, features)
    return features, trace


def backward_batch(params: ExtractorParams, trace: BatchTrace,
                   grad_features: np.ndarray):
    """Batch-summed parameter gradients plus per-cloud point gradients."""
    if trace.params_token is not params.token:
        raise StaleTraceError("trace was built from different parameters")
    g = np.asarray(grad_features, dtype=float)
    (w1, _), (w2, _) = params.point_layers
    (w3, _), (w4, _) = params.head_layers

    radial = np.sum(g * trace.features, axis=1, keepdims=True)
    g_raw = (g - radial * trace.features) / trace.raw_norms[:, None]

    d_w4 = trace.act3.T @ g_raw
    d_b4 = g_raw.sum(axis=0)
    g_pre3 = (g_raw @ w4.T) * (trace.pre3 > 0.0)

    d_w3 = trace.pooled.T @ g_pre3
    d_b3 = g_pre3.sum(axis=0)
    g_pooled = g_pre3 @ w3.T

    g_act2 = np.zeros_like(trace.act2)
    np.put_along_axis(g_act2, trace.pool_idx[:, None, :],
                      g_pooled[:, None, :], axis=1)
    g_pre2 = g_act2 * (trace.pre2 > 0.0)

    d_w2 = np.einsum("bni,bnj->ij", trace.act1, g_pre2)
    d_b2 = g_pre2.sum(axis=(0, 1))
    g_pre1 = (g_pre2 @ w2.T) * (trace.pre1 > 0.0)

    d_w1 = np.einsum("bni,bnj->ij", trace.points, g_pre1)
    d_b1 = g_pre1.sum(axis=(0, 1))
    grad_points = g_pre1 @ w1.T

    grads = ParamGrads(point_layers=[[d_w1, d_b1], [d_w2, d_b2]],
                       head_layers=[[d_w3, d_b3], [d_w4, d_b4]])
    return grads, grad_points


def batch_features(params: ExtractorParams, clouds) -> np.ndarray:
    """Stack forward features, (n, d); uses the batched path when every
    cloud has the same point count."""
    clouds = list(clouds)
    if not clouds:
        return np.empty((0, params.d))
    sizes = {_as_points(c).shape[0] for c in clouds}
    if len(sizes) == 1:
        stacked = np.stack([_as_points(c) for c in clouds])
        return forward_batch(params, stacked)[0]
    return np.stack([forward(params, c)[0] for c in clouds])


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_params(params: ExtractorParams, path) -> None:
    """Versioned text checkpoint: widths header plus row-major matrices."""
    widths = [str(w.shape[0]) for w, _ in params.point_layers]
    widths.append(str(params.point_layers[-1][0].shape[1]))
    hwidths = [str(w.shape[0]) for w, _ in params.head_layers]
    hwidths.append(str(params.d))
    lines = [NET_MAGIC,
             "point_widths " + " ".join(widths),
             "head_widths " + " ".join(hwidths)]
    for w, b in params.point_layers + params.head_layers:
        lines.append(f"W {w.shape[0]} {w.shape[1]}")
        lines += [" ".join(_fmt(v) for v in row) for row in w]
        lines.append(f"b {b.shape[0]}")
        lines.append(" ".join(_fmt(v) for v in b))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_params(path) -> ExtractorParams:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != NET_MAGIC:
        raise ParseError(f"{path}:1: expected header '{NET_MAGIC}'")
    try:
        pwidths = [int(v) for v in lines[1].split()[1:]]
        hwidths = [int(v) for v in lines[2].split()[1:]]
    except (IndexError, ValueError) as e:
        raise ParseError(f"{path}:2: bad widths header") from e
    if tuple(pwidths) != POINT_WIDTHS or hwidths[:1] != [POINT_WIDTHS[-1]]:
        raise ParseError(f"{path}: unsupported widths {pwidths} / {hwidths}")

    pos = 3
    layers: list[Layer] = []
    expected = list(zip(pwidths[:-1], pwidths[1:])) + list(zip(hwidths[:-1], hwidths[1:]))
    for n_in, n_out in expected:
        if lines[pos] != f"W {n_in} {n_out}":
            raise ParseError(f"{path}:{pos + 1}: expected 'W {n_in} {n_out}'")
        w = np.empty((n_in, n_out))
        for i in range(n_in):
            vals = lines[pos + 1 + i].split()
            if len(vals) != n_out:
                raise ParseError(f"{path}:{pos + 2 + i}: expected {n_out} values")
            w[i] = [float(v) for v in vals]
        pos += 1 + n_in
        if lines[pos] != f"b {n_out}":
            raise ParseError(f"{path}:{pos + 1}: expected 'b {n_out}'")
        b = np.array([float(v) for v in lines[pos + 1].split()])
        if b.shape[0] != n_out:
            raise ParseError(f"{path}:{pos + 2}: expected {n_out} values")
        pos += 2
        layers.append((w, b))
    n_point = len(POINT_WIDTHS) - 1
    return _make_params(layers[:n_point], layers[n_point:])
