"""Synthetic inlier/outlier scenes.

Inliers are two interleaving half-moons, outliers a ring around them.  A
scene is an H x W raster where one random rectangle holds outlier samples
and the rest holds inlier samples, i.e. outlier exposure by pasting an
"object" into an inlier image.  ``FrozenBackbone`` then lifts the raw 2-d
points to rectified D-dimensional features; its parameters are fixed by
its seed and never trained.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "GENERATOR_VERSION",
    "MOON_NOISE",
    "RING_RADII",
    "INLIER_MEAN",
    "LabeledGrid",
    "FrozenBackbone",
    "make_inliers",
    "make_outliers",
    "mix_scene",
    "embed",
    "make_scene",
]

GENERATOR_VERSION = 1
MOON_NOISE = 0.1
RING_RADII = (2.5, 3.5)
# mixture mean of the two moons: outer (0, 2/pi), inner (1, 1/2 - 2/pi)
INLIER_MEAN = np.array([0.5, 0.25])


@dataclass(frozen=True, eq=False)
class LabeledGrid:
    """Raster of feature vectors with inlier labels.

    ``labels`` is 1 for inlier cells and 0 for outlier cells; ``mask`` is its
    complement (1 on OoD cells).  ``classes`` holds the inlier semantic class
    (moon 0 or 1) and -1 on outlier cells.
    """

    features: np.ndarray
    labels: np.ndarray
    classes: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        lab = np.array(self.labels, dtype=np.int64)
        if f.ndim != 3 or lab.shape != f.shape[:2]:
            raise ShapeError(f"features {f.shape} and labels {lab.shape} disagree")
        if not np.all(np.isin(lab, (0, 1))):
            raise DomainError("labels must be 0 or 1")
        if not np.all(np.isfinite(f)):
            raise DomainError("features must be finite")
        cls = np.where(lab == 1, 0, -1) if self.classes is None else np.array(self.classes, dtype=np.int64)
        if cls.shape != lab.shape:
            raise ShapeError("classes shape differs from labels")
        for a in (f, lab, cls):
            a.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "classes", cls)

    @property
    def height(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    @property
    def dim(self):
        return self.features.shape[2]

    @property
    def mask(self):
        return 1 - self.labels

    def with_features(self, features):
        return LabeledGrid(features, self.labels, self.classes, dict(self.meta))

    def to_csv(self, path, meta_path=None):
        """Write ``row,col,label,f0..f{D-1}`` plus a JSON metadata sidecar
        (default: ``<path>.meta.json``)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "label"] + [f"f{k}" for k in range(self.dim)])
            for r in range(self.height):
                for c in range(self.width):
                    w.writerow(
                        [r, c, int(self.labels[r, c])]
                        + [f"{v:.17g}" for v in self.features[r, c]]
                    )
        meta = {"generator_version": GENERATOR_VERSION, "dim": self.dim}
        meta.update(self.meta)
        with open(meta_path or f"{path}.meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path, meta_path=None):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [list(map(float, r)) for r in reader]
        d = len(header) - 3
        arr = np.array(rows)
        h, w = int(arr[:, 0].max()) + 1, int(arr[:, 1].max()) + 1
        feats = np.empty((h, w, d))
        labels = np.empty((h, w), dtype=np.int64)
        rr, cc = arr[:, 0].astype(int), arr[:, 1].astype(int)
        feats[rr, cc] = arr[:, 3:]
        labels[rr, cc] = arr[:, 2].astype(int)
        try:
            with open(meta_path or f"{path}.meta.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        return cls(feats, labels, meta=meta)


@dataclass(frozen=True, eq=False)
class FrozenBackbone:
    """Fixed random map raw-2d -> D followed by ReLU."""

    seed: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        for name in ("weight", "bias"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_seed(cls, seed, dim=8):
        rng = np.random.default_rng([seed, 0xBAC])
        weight = rng.normal(0.0, 1.0, size=(dim, 2))
        bias = rng.normal(0.0, 1.0, size=dim)
        return cls(seed, weight, bias)

    @property
    def dim(self):
        return self.weight.shape[0]

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.weight.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()


def make_inliers(n, seed, return_classes=False):
    """Two-moons samples with Gaussian noise of std 0.1."""
    if n <= 0:
        raise DomainError("n must be positive")
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, math.pi, size=n)
    x = np.where(cls == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(cls == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1) + rng.normal(0.0, MOON_NOISE, size=(n, 2))
    return (pts, cls) if return_classes else pts


def make_outliers(n, seed):
    """Uniform samples from the annulus of radii [2.5, 3.5] around the
    inlier mean."""
    if n <= 0:
        raise DomainError("n must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = RING_RADII
    r = np.sqrt(rng.uniform(lo * lo, hi * hi, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return INLIER_MEAN + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _patch(rng, h, w, fraction):
    """Rectangle (r0, c0, ph, pw) with ph * pw close to fraction * h * w."""
    target = fraction * h * w
    if target < 0.5:
        return 0, 0, 0, 0
    if fraction >= 1.0:
        return 0, 0, h, w
    lo = max(1.0, target / w, math.sqrt(target) / 2.0)
    hi = min(float(h), target, 2.0 * math.sqrt(target))
    ph = int(round(rng.uniform(lo, hi))) if hi > lo else int(round(lo))
    ph = min(max(ph, 1), h)
    pw = min(max(int(round(target / ph)), 1), w)
    r0 = int(rng.integers(0, h - ph + 1))
    c0 = int(rng.integers(0, w - pw + 1))
    return r0, c0, ph, pw


def mix_scene(h, w, outlier_fraction, seed):
    """Inlier raster with one rectangular outlier patch (raw 2-d features)."""
    if h <= 0 or w <= 0:
        raise DomainError("grid dimensions must be positive")
    if not 0.0 <= outlier_fraction <= 1.0:
        raise DomainError("outlier_fraction must lie in [0, 1]")
    ss = np.random.SeedSequence(seed)
    s_layout, s_in, s_out = (int(x) for x in ss.generate_state(3))
    r0, c0, ph, pw = _patch(np.random.default_rng(s_layout), h, w, outlier_fraction)
    labels = np.ones((h, w), dtype=np.int64)
    labels[r0 : r0 + ph, c0 : c0 + pw] = 0
    pts, cls = make_inliers(h * w, s_in, return_classes=True)
    feats = pts.reshape(h, w, 2)
    classes = cls.reshape(h, w)
    n_out = ph * pw
    if n_out:
        feats[labels == 0] = make_outliers(n_out, s_out)
        classes = np.where(labels == 1, classes, -1)
    meta = {"seed": int(seed), "outlier_fraction": float(outlier_fraction)}
    return LabeledGrid(feats, labels, classes, meta)


def embed(backbone, data):
    """Rectified features of raw 2-d points, or of a raw LabeledGrid."""
    if isinstance(data, LabeledGrid):
        if data.dim != 2:
            raise ShapeError("embed expects a grid of raw 2-d points")
        grid = data.with_features(embed(backbone, data.features))
        grid.meta.update(dim=backbone.dim, backbone_seed=int(backbone.seed))
        return grid
    x = np.asarray(data, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ShapeError("embed expects raw 2-d points")
    return np.maximum(x @ backbone.weight.T + backbone.bias, 0.0)


def make_scene(h, w, outlier_fraction, seed, backbone):
    """mix_scene followed by embed."""
    return embed(backbone, mix_scene(h, w, outlier_fraction, seed))
