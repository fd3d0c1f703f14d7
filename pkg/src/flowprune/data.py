"""Seeded 2D synthetic datasets with known mode geometry, plus splitting.

Four families:
  gaussians        6 isotropic modes, equally spaced on a circle of radius 4,
                   sigma 0.5, equal weights
  gaussian_spiral  8 isotropic modes (sigma 0.25) along the Archimedean
                   spiral r = 0.5 + 0.35 * phi, phi in [0, 3 pi]
  spirals          two interleaved noisy Archimedean arms (same spiral law,
                   second arm rotated by pi)
  moons            two half-circles of radius 1 with additive noise 0.1 and
                   binary labels

All geometry values are defaults and can be overridden per call; the mode
metadata needed by the sample-quality metric travels with the dataset. CSV
export writes (x, y[, label]) plus a JSON sidecar holding kind, seed,
geometry, and mode metadata.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

KINDS = ("gaussians", "gaussian_spiral", "spirals", "moons")

_DEFAULTS = {
    "gaussians": {"k_modes": 6, "radius": 4.0, "sigma": 0.5},
    "gaussian_spiral": {
        "k_modes": 8,
        "sigma": 0.25,
        "r0": 0.5,
        "slope": 0.35,
        "phi_max": 3 * math.pi,
    },
    "spirals": {"r0": 0.5, "slope": 0.35, "phi_max": 3 * math.pi, "noise": 0.1},
    "moons": {"noise": 0.1, "offset_x": 1.0, "offset_y": 0.5},
}


@dataclass
class Dataset:
    """Points plus the generator metadata needed downstream."""

    kind: str
    points: np.ndarray
    labels: np.ndarray | None = None
    mode_centers: np.ndarray | None = None
    mode_sigma: float | None = None
    seed: int = 0
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must be (n, 2)")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError("labels must align with points")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValueError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            kind=self.kind,
            points=self.points[idx],
            labels=None if self.labels is None else self.labels[idx],
            mode_centers=self.mode_centers,
            mode_sigma=self.mode_sigma,
            seed=self.seed,
            geometry=dict(self.geometry),
        )


def spiral_centers(k_modes: int, r0: float, slope: float, phi_max: float) -> np.ndarray:
    phis = np.linspace(0.0, phi_max, k_modes)
    r = r0 + slope * phis
    return np.stack([r * np.cos(phis), r * np.sin(phis)], axis=1)


def circle_centers(k_modes: int, radius: float) -> np.ndarray:
    ang = 2 * math.pi * np.arange(k_modes) / k_modes
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def make_dataset(kind: str, n_points: int, seed: int, **geometry) -> Dataset:
    """Generate a dataset; geometry kwargs override the module defaults."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    geo = dict(_DEFAULTS[kind])
    unknown = set(geometry) - set(geo)
    if unknown:
        raise ValueError(f"unknown geometry keys for {kind}: {sorted(unknown)}")
    geo.update(geometry)
    s = rng.stream(seed, "data", kind)

    if kind in ("gaussians", "gaussian_spiral"):
        if kind == "gaussians":
            centers = circle_centers(geo["k_modes"], geo["radius"])
        else:
            centers = spiral_centers(geo["k_modes"], geo["r0"], geo["slope"], geo["phi_max"])
        idx = s.integers(n_points, centers.shape[0])
        pts = centers[idx] + geo["sigma"] * s.normal((n_points, 2))
        return Dataset(kind=kind, points=pts, mode_centers=centers,
                       mode_sigma=geo["sigma"], seed=seed, geometry=geo)

    if kind == "spirals":
        arm = s.integers(n_points, 2)
        phi = geo["phi_max"] * s.uniform((n_points,))
        r = geo["r0"] + geo["slope"] * phi
        ang = phi + math.pi * arm
        pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        pts = pts + geo["noise"] * s.normal((n_points, 2))
        return Dataset(kind=kind, points=pts, seed=seed, geometry=geo)

    # moons: arm A = (cos t, sin t), arm B = A point-reflected and shifted
    lab = s.integers(n_points, 2)
    t = math.pi * s.uniform((n_points,))
    ax = np.cos(t)
    ay = np.sin(t)
    bx = geo["offset_x"] - ax
    by = geo["offset_y"] - ay
    pts = np.where(lab[:, None] == 0, np.stack([ax, ay], 1), np.stack([bx, by], 1))
    pts = pts + geo["noise"] * s.normal((n_points, 2))
    return Dataset(kind=kind, points=pts, labels=lab, seed=seed, geometry=geo)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle then contiguous partition into (train, val, test)."""
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x <= 0 for x in f):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = dataset.n
    if n < 3:
        raise ValueError("dataset too small to split three ways")
    perm = rng.stream(seed, "split").permutation(n)
    n_train = int(math.floor(f[0] * n))
    n_val = int(math.floor(f[1] * n))
    n_train = max(1, n_train)
    n_val = max(1, n_val)
    if n_train + n_val >= n:
        raise ValueError("fractions leave no test points")
    a = perm[:n_train]
    b = perm[n_train : n_train + n_val]
    c = perm[n_train + n_val :]
    return dataset.subset(a), dataset.subset(b), dataset.subset(c)


# ---------------------------------------------------------------------------
# CSV round trip


def to_csv(dataset: Dataset, path: str) -> None:
    """Write points as CSV plus a `<path>.json` sidecar with the metadata."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if dataset.labels is None:
            w.writerow(["x", "y"])
            for p in dataset.points:
                w.writerow([repr(float(p[0])), repr(float(p[1]))])
        else:
            w.writerow(["x", "y", "label"])
            for p, l in zip(dataset.points, dataset.labels):
                w.writerow([repr(float(p[0])), repr(float(p[1])), int(l)])
    side = {
        "kind": dataset.kind,
        "seed": int(dataset.seed),
        "n": int(dataset.n),
        "geometry": dataset.geometry,
        "mode_sigma": dataset.mode_sigma,
        "mode_centers": None
        if dataset.mode_centers is None
        else dataset.mode_centers.tolist(),
    }
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=2)


def from_csv(path: str) -> Dataset:
    with open(path + ".json") as fh:
        side = json.load(fh)
    pts = []
    labels = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        has_label = header == ["x", "y", "label"]
        if not has_label and header != ["x", "y"]:
            raise ValueError(f"unrecognized dataset CSV header: {header}")
        for row in r:
            pts.append((float(row[0]), float(row[1])))
            if has_label:
                labels.append(int(row[2]))
    return Dataset(
        kind=side["kind"],
        points=np.array(pts),
        labels=np.array(labels) if labels else None,
        mode_centers=None
        if side.get("mode_centers") is None
        else np.array(side["mode_centers"]),
        mode_sigma=side.get("mode_sigma"),
        seed=side.get("seed", 0),
        geometry=side.get("geometry", {}),
    )
