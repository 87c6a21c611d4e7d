"""Synthetic labeled point clouds plus preprocessing and file I/O.

The generator samples uniformly on parametric surfaces (sphere, box,
cylinder, cone/frustum, torus), adds Gaussian jitter, and normalizes each
cloud to the unit sphere.  The default six-class mix is deliberately
nasty along the two axes that break feature separation in practice:
heavy class imbalance (>= 10x between largest and smallest class) and a
pair of classes that are near-duplicates of each other geometrically.

Cloud file format (text, UTF-8, LF):
    label <int>
    n <int>
    x y z          (n rows, 17 significant digits)
Dataset manifest: one `<split> <relative-path>` line per cloud.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

KNOWN_FAMILIES = ("sphere", "box", "cylinder", "cone", "torus")

SIMILAR_PAIR_REL_TOL = 0.15


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    label: int
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValidationError(f"points must be (N, 3), got {self.points.shape}")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str
    params: tuple[float, ...]
    train_count: int
    test_count: int


@dataclass(frozen=True)
class SORConfig:
    """Statistical outlier removal: drop points whose mean distance to their
    k nearest neighbors strictly exceeds mu + alpha * sigma."""

    k: int = 2
    alpha: float = 1.1

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"sor k must be >= 1, got {self.k}")
        if self.alpha <= 0:
            raise ValidationError(f"sor alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[ClassSpec, ...]
    points_per_cloud: int = 256
    jitter_sigma: float = 0.01
    seed: int = 0


@dataclass
class Dataset:
    train: list[PointCloud]
    test: list[PointCloud]
    class_names: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        labels = [c.label for c in self.train + self.test]
        return max(labels) + 1 if labels else 0


DEFAULT_CLASSES = (
    ClassSpec("sphere", "sphere", (1.0,), 60, 20),
    ClassSpec("box", "box", (1.0, 1.0, 1.0), 600, 20),
    ClassSpec("tall_box", "box", (1.0, 1.0, 1.15), 55, 20),
    ClassSpec("cylinder", "cylinder", (0.5, 1.4), 300, 20),
    ClassSpec("cone", "cone", (0.6, 1.2, 0.0), 290, 20),
    ClassSpec("truncated_cone", "cone", (0.6, 1.2, 0.25), 30, 20),
)


def default_spec(seed: int = 0, points_per_cloud: int = 256,
                 jitter_sigma: float = 0.01, num_classes: int | None = None,
                 train_counts: list[int] | None = None,
                 test_counts: list[int] | None = None) -> DatasetSpec:
    """The default 6-class mix, optionally truncated or recounted."""
    classes = list(DEFAULT_CLASSES)
    if num_classes is not None:
        classes = classes[:num_classes]
    if train_counts is not None:
        if len(train_counts) != len(classes):
            raise ValidationError(
                f"train_counts: expected {len(classes)} entries, got {len(train_counts)}")
        classes = [ClassSpec(c.name, c.family, c.params, n, c.test_count)
                   for c, n in zip(classes, train_counts)]
    if test_counts is not None:
        if len(test_counts) != len(classes):
            raise ValidationError(
                f"test_counts: expected {len(classes)} entries, got {len(test_counts)}")
        classes = [ClassSpec(c.name, c.family, c.params, c.train_count, n)
                   for c, n in zip(classes, test_counts)]
    spec = DatasetSpec(classes=tuple(classes), points_per_cloud=points_per_cloud,
                       jitter_sigma=jitter_sigma, seed=seed)
    validate_spec(spec)
    return spec


def _has_similar_pair(classes) -> bool:
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            if a.family != b.family or len(a.params) != len(b.params):
                continue
            rel = [abs(x - y) / max(abs(x), abs(y), 1e-12)
                   for x, y in zip(a.params, b.params)]
            if max(rel) <= SIMILAR_PAIR_REL_TOL:
                return True
    return False


def validate_spec(spec: DatasetSpec) -> None:
    if len(spec.classes) < 2:
        raise ValidationError(f"classes: need >= 2 classes, got {len(spec.classes)}")
    for c in spec.classes:
        if c.family not in KNOWN_FAMILIES:
            raise ValidationError(f"classes[{c.name}].family: unknown family '{c.family}'")
        if c.train_count < 1 or c.test_count < 1:
            raise ValidationError(f"classes[{c.name}]: counts must be >= 1")
    if spec.points_per_cloud < 8:
        raise ValidationError(
            f"points_per_cloud: must be >= 8, got {spec.points_per_cloud}")
    if spec.jitter_sigma < 0:
        raise ValidationError(f"jitter_sigma: must be >= 0, got {spec.jitter_sigma}")
    if not _has_similar_pair(spec.classes):
        raise ValidationError(
            "classes: need at least one same-family pair with parameters "
            f"within {SIMILAR_PAIR_REL_TOL:.0%} of each other")


# ---------------------------------------------------------------------------
# Surface samplers.  Each returns (n, 3) points uniform on the surface.
# ---------------------------------------------------------------------------

def _sample_sphere(rng, n, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def _sample_box(rng, n, sx, sy, sz):
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    half = np.array([sx, sy, sz]) / 2.0
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * 2 * half[others[0]]
        pts[m, others[1]] = u[m, 1] * 2 * half[others[1]]
    return pts


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(th), r * np.sin(th), np.full(n, z)])


def _sample_cylinder(rng, n, radius, height):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    pts = np.empty((n, 3))
    m = part == 0
    th = rng.uniform(0, 2 * np.pi, size=int(m.sum()))
    z = rng.uniform(-height / 2, height / 2, size=int(m.sum()))
    pts[m] = np.column_stack([radius * np.cos(th), radius * np.sin(th), z])
    for p_idx, zcap in ((1, height / 2), (2, -height / 2)):
        m = part == p_idx
        pts[m] = _disk(rng, int(m.sum()), radius, zcap)
    return pts


def _sample_cone(rng, n, radius, height, top_fraction):
    """Cone with apex up when top_fraction=0, else a frustum; caps included."""
    r_base, r_top = radius, top_fraction * radius
    slant = np.hypot(height, r_base - r_top)
    lateral = np.pi * (r_base + r_top) * slant
    cap_base = np.pi * r_base ** 2
    cap_top = np.pi * r_top ** 2
    areas = np.array([lateral, cap_base, cap_top])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))

    m = part == 0
    nm = int(m.sum())
    u = rng.uniform(size=nm)
    if r_base == r_top:
        t = u
    else:
        # density along the axis is proportional to the local radius
        t = (-r_top + np.sqrt(r_top ** 2 + u * (r_base ** 2 - r_top ** 2))) / (r_base - r_top)
    r_at = r_top + (r_base - r_top) * t
    z = height / 2 - height * t
    th = rng.uniform(0, 2 * np.pi, size=nm)
    pts[m] = np.column_stack([r_at * np.cos(th), r_at * np.sin(th), z])

    m = part == 1
    pts[m] = _disk(rng, int(m.sum()), r_base, -height / 2)
    m = part == 2
    pts[m] = _disk(rng, int(m.sum()), r_top, height / 2) if r_top > 0 else \
        np.tile([0.0, 0.0, height / 2], (int(m.sum()), 1))
    return pts


def _sample_torus(rng, n, major, minor):
    out = np.empty((n, 3))
    got = 0
    while got < n:
        batch = max(n - got, 16)
        th = rng.uniform(0, 2 * np.pi, size=batch)
        ph = rng.uniform(0, 2 * np.pi, size=batch)
        keep = rng.uniform(size=batch) < (major + minor * np.cos(ph)) / (major + minor)
        th, ph = th[keep], ph[keep]
        take = min(len(th), n - got)
        rad = major + minor * np.cos(ph[:take])
        out[got:got + take] = np.column_stack(
            [rad * np.cos(th[:take]), rad * np.sin(th[:take]), minor * np.sin(ph[:take])])
        got += take
    return out


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
}


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center on the centroid, then scale so the farthest point has norm 1.
    A degenerate all-coincident cloud comes back as all zeros.  Idempotent
    and invariant to rigid shifts and positive rescaling."""
    pts = np.asarray(points, dtype=float)
    centered = pts - pts.mean(axis=0)
    top = np.max(np.linalg.norm(centered, axis=1))
    if top == 0.0:
        return centered
    return centered / top


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic function of the spec (including its seed)."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    train: list[PointCloud] = []
    test: list[PointCloud] = []
    for split, sink in (("train", train), ("test", test)):
        for label, cls in enumerate(spec.classes):
            count = cls.train_count if split == "train" else cls.test_count
            sampler = _SAMPLERS[cls.family]
            for i in range(count):
                pts = sampler(rng, spec.points_per_cloud, *cls.params)
                if spec.jitter_sigma > 0:
                    pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
                pts = normalize_unit_sphere(pts)
                sink.append(PointCloud(pts, label, f"{split}_{len(sink):05d}"))
    return Dataset(train=train, test=test,
                   class_names=[c.name for c in spec.classes])


def sor_filter(points: np.ndarray, cfg: SORConfig = SORConfig()) -> np.ndarray:
    """Drop statistical outliers; survivors keep their original order.

    Per point: mean Euclidean distance to its k nearest neighbors (self
    excluded).  Points whose statistic strictly exceeds mu + alpha * sigma
    over all statistics are removed, so a zero-spread cloud survives intact.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n <= cfg.k:
        raise ValidationError(f"need more than k={cfg.k} points, got {n}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    knn = np.sort(dist, axis=1)[:, :cfg.k]
    stat = knn.mean(axis=1)
    mu, sigma = stat.mean(), stat.std()
    return pts[stat <= mu + cfg.alpha * sigma]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def save_cloud(cloud: PointCloud, path) -> None:
    lines = [f"label {cloud.label}", f"n {cloud.points.shape[0]}"]
    lines += [" ".join(_fmt(v) for v in row) for row in cloud.points]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_cloud(path, num_classes: int | None = None) -> PointCloud:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: no points")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "label":
        raise ParseError(f"{path}:1: expected 'label <int>'")
    try:
        label = int(head[1])
    except ValueError as e:
        raise ParseError(f"{path}:1: bad label '{head[1]}'") from e
    if label < 0:
        raise ParseError(f"{path}:1: negative label {label}")
    if num_classes is not None and label >= num_classes:
        raise ValidationError(
            f"{path}: label {label} out of range for {num_classes} classes")
    if len(lines) < 2:
        raise ParseError(f"{path}:2: missing point count")
    cnt = lines[1].split()
    if len(cnt) != 2 or cnt[0] != "n":
        raise ParseError(f"{path}:2: expected 'n <int>'")
    n = int(cnt[1])
    if n < 1:
        raise ParseError(f"{path}: no points")
    body = lines[2:]
    if len(body) != n:
        raise ParseError(f"{path}: header says {n} points, file has {len(body)}")
    pts = np.empty((n, 3))
    for i, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != 3:
            raise ParseError(f"{path}:{i + 3}: expected 3 coordinates, got {len(vals)}")
        try:
            pts[i] = [float(v) for v in vals]
        except ValueError as e:
            raise ParseError(f"{path}:{i + 3}: bad coordinate") from e
    return PointCloud(pts, label, os.path.splitext(os.path.basename(path))[0])


def save_dataset(dataset: Dataset, out_dir) -> None:
    clouds_dir = os.path.join(out_dir, "clouds")
    os.makedirs(clouds_dir, exist_ok=True)
    manifest: list[str] = []
    for split, clouds in (("train", dataset.train), ("test", dataset.test)):
        for c in clouds:
            rel = os.path.join("clouds", f"{c.id}.txt")
            save_cloud(c, os.path.join(out_dir, rel))
            manifest.append(f"{split} {rel}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("\n".join(manifest) + "\n")


def load_dataset(in_dir, num_classes: int | None = None) -> Dataset:
    manifest_path = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"{manifest_path}: missing dataset manifest")
    train: list[PointCloud] = []
    test: list[PointCloud] = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, ln in enumerate(f, start=1):
            ln = ln.strip()
            if not ln:
                continue
            parts = ln.split()
            if len(parts) != 2 or parts[0] not in ("train", "test"):
                raise ParseError(f"{manifest_path}:{lineno}: expected '<split> <path>'")
            cloud = load_cloud(os.path.join(in_dir, parts[1]), num_classes)
            (train if parts[0] == "train" else test).append(cloud)
    return Dataset(train=train, test=test)
